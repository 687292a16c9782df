//! Data generators for the discrete competing-risks joint model and the
//! intercept/slope Weibull joint model.
//!
//! Every individual draws from its own ChaCha8 stream (`seed`, stream =
//! individual index), so a record does not depend on how many individuals
//! come before it.

use alloc::{format, string::String, vec, vec::Vec};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Exp, Normal, Poisson, StandardNormal};

use crate::data::{validate_joint_dataset, Covariates, JointDataset, LatePolicy, LongitudinalRecord, SurvivalRecord};
use crate::error::{Error, Result};
use crate::gmrf::{EffectSpec, IndexSpec};
use crate::math;
use crate::stacker::{BlockSpec, Component, CopyLink, Family, ModelSpec};

/// Coefficients of one cause-specific log hazard `γ·u + β·age`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CauseCoefficients {
    pub gamma: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SimConfig {
    pub n_individuals: usize,
    /// Inclusive range of the number of longitudinal counts per individual.
    pub n_obs_range: (usize, usize),
    pub causes: Vec<CauseCoefficients>,
    /// Exponent `p` of the `t^p` trend in the Poisson log-mean.
    pub trend: f64,
    /// Inclusive range of the integer age.
    pub age_range: (i64, i64),
    pub sigma_u: f64,
    pub seed: u64,
    /// Expected fraction of censored individuals at `u = 0` and mid-range age.
    #[cfg_attr(feature = "serde", serde(default))]
    pub censoring_rate: f64,
    /// Draw the cause first and then its time, as the published R script does.
    #[cfg_attr(feature = "serde", serde(default))]
    pub legacy_appendix: bool,
}

impl SimConfig {
    /// The setting of the simulation study: 1000 individuals, 10 to 15 counts
    /// each, `σ_u = 1`.
    pub fn example5(seed: u64) -> Self {
        SimConfig {
            n_individuals: 1000,
            n_obs_range: (10, 15),
            causes: vec![
                CauseCoefficients { gamma: 0.3, beta: 0.01 },
                CauseCoefficients { gamma: -0.1, beta: 0.015 },
                CauseCoefficients { gamma: 0.2, beta: 0.0003 },
            ],
            trend: 1.2,
            age_range: (15, 75),
            sigma_u: 1.0,
            seed,
            censoring_rate: 0.0,
            legacy_appendix: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_individuals == 0 {
            return Err(Error::domain("n_individuals must be positive"));
        }
        if self.n_obs_range.0 > self.n_obs_range.1 {
            return Err(Error::domain("n_obs_range must satisfy min <= max"));
        }
        if self.age_range.0 > self.age_range.1 {
            return Err(Error::domain("age_range must satisfy lo <= hi"));
        }
        if !(self.sigma_u > 0.0) || !self.sigma_u.is_finite() {
            return Err(Error::domain(format!("sigma_u must be positive, got {}", self.sigma_u)));
        }
        if self.causes.is_empty() {
            return Err(Error::domain("at least one cause is needed"));
        }
        if self.legacy_appendix && self.causes.len() != 3 {
            return Err(Error::domain("the appendix generator has exactly three causes"));
        }
        if !(0.0..1.0).contains(&self.censoring_rate) {
            return Err(Error::domain("censoring_rate must lie in [0, 1)"));
        }
        if !self.trend.is_finite() || self.causes.iter().any(|c| !c.gamma.is_finite() || !c.beta.is_finite()) {
            return Err(Error::domain("coefficients must be finite"));
        }
        Ok(())
    }

    /// Rate of the independent exponential censoring time, chosen so that a
    /// reference individual is censored with probability `censoring_rate`.
    pub fn censoring_hazard(&self) -> f64 {
        let p = self.censoring_rate;
        if p == 0.0 {
            return 0.0;
        }
        let age = 0.5 * (self.age_range.0 + self.age_range.1) as f64;
        let total: f64 = self.causes.iter().map(|c| math::exp(c.beta * age)).sum();
        p * total / (1.0 - p)
    }
}

/// Generator stream of individual `i` (from 0).
pub fn individual_rng(seed: u64, i: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i);
    rng
}

/// Index of the smallest value; ties resolve to the first.
fn argmin(values: &[f64]) -> usize {
    (1..values.len()).fold(0, |b, k| if values[k] < values[b] { k } else { b })
}

fn poisson(rng: &mut ChaCha8Rng, mean: f64) -> Result<f64> {
    if mean == 0.0 {
        return Ok(0.0);
    }
    let dist = Poisson::new(mean).map_err(|_| Error::domain(format!("invalid Poisson mean {mean}")))?;
    Ok(dist.sample(rng))
}

fn exponential(rng: &mut ChaCha8Rng, rate: f64) -> Result<f64> {
    let dist = Exp::new(rate).map_err(|_| Error::domain(format!("invalid exponential rate {rate}")))?;
    Ok(dist.sample(rng))
}

fn sorted_uniform_times(rng: &mut ChaCha8Rng, n: usize, upper: f64) -> Vec<f64> {
    let mut times: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * upper).collect();
    times.sort_by(f64::total_cmp);
    times
}

/// Simulates the discrete competing-risks joint model: Poisson counts with
/// log-mean `t^p + u_i` and exponential cause-specific hazards
/// `exp(γ_j u_i + β_j age_i)`, the event being the first latent cause time.
pub fn simulate_example5(config: &SimConfig) -> Result<JointDataset> {
    config.validate()?;
    let normal = Normal::new(0.0, config.sigma_u).map_err(|_| Error::domain("invalid sigma_u"))?;
    let censor = config.censoring_hazard();
    let mut long = Vec::new();
    let mut surv = Vec::with_capacity(config.n_individuals);
    for i in 0..config.n_individuals {
        let id = i as u64 + 1;
        let mut rng = individual_rng(config.seed, i as u64);
        let mut u = normal.sample(&mut rng);
        let age = rng.random_range(config.age_range.0..=config.age_range.1) as f64;
        let rates: Vec<f64> = config
            .causes
            .iter()
            .map(|c| math::exp(c.gamma * u + c.beta * age))
            .collect();
        let (time, cause, window) = if config.legacy_appendix {
            legacy_event(&mut rng, &mut u, config, age)?
        } else {
            let latent: Vec<f64> = rates
                .iter()
                .map(|&r| exponential(&mut rng, r))
                .collect::<Result<_>>()?;
            let first = argmin(&latent);
            let mut time = latent[first];
            let mut cause = first as u32 + 1;
            if censor > 0.0 {
                let c = exponential(&mut rng, censor)?;
                if c < time {
                    time = c;
                    cause = 0;
                }
            }
            (time, cause, time)
        };
        let n_obs = rng.random_range(config.n_obs_range.0..=config.n_obs_range.1);
        let mut cov = Covariates::new();
        cov.insert(String::from("age"), age);
        for t in sorted_uniform_times(&mut rng, n_obs, window) {
            let y = poisson(&mut rng, math::exp(math::powf(t, config.trend) + u))?;
            long.push(LongitudinalRecord {
                individual_id: id,
                time: t,
                value: y,
                covariates: cov.clone(),
                marker: 0,
            });
        }
        surv.push(SurvivalRecord {
            individual_id: id,
            time,
            cause,
            covariates: cov,
        });
    }
    let policy = if config.legacy_appendix {
        LatePolicy::Truncate
    } else {
        LatePolicy::Error
    };
    validate_joint_dataset(long, surv, config.causes.len() as u32, policy)
}

/// The published script: `u` is shifted by one, the cause is
/// `Binomial(3, 0.6)` (0 = censored with a unit-rate time), the time comes
/// from that cause's rate alone, and counts are observed on an unrelated
/// window `Exp(exp(0.5 u))`. Counts after the event are dropped.
fn legacy_event(rng: &mut ChaCha8Rng, u: &mut f64, config: &SimConfig, age: f64) -> Result<(f64, u32, f64)> {
    *u += 1.0;
    let window = exponential(rng, math::exp(0.5 * *u))?;
    let cause = Binomial::new(3, 0.6)
        .map_err(|_| Error::domain("invalid binomial"))?
        .sample(rng) as u32;
    let rate = match cause {
        0 => 1.0,
        j => {
            let c = config.causes[j as usize - 1];
            math::exp(c.gamma * *u + c.beta * age)
        }
    };
    Ok((exponential(rng, rate)?, cause, window))
}

/// One Weibull cause: `η_j = intercept + γ·v + κ·w`, shape `α`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct WeibullCause {
    pub intercept: f64,
    pub gamma: f64,
    pub kappa: f64,
    pub shape: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Example1Config {
    pub n_individuals: usize,
    pub n_obs_range: (usize, usize),
    /// Longitudinal intercept and time slope.
    pub beta: (f64, f64),
    pub tau_v: f64,
    pub tau_w: f64,
    pub rho: f64,
    pub causes: Vec<WeibullCause>,
    pub seed: u64,
    #[cfg_attr(feature = "serde", serde(default))]
    pub censoring_rate: f64,
}

impl Example1Config {
    pub fn validate(&self) -> Result<()> {
        if self.n_individuals == 0 || self.n_obs_range.0 > self.n_obs_range.1 {
            return Err(Error::domain("need n_individuals > 0 and min <= max observations"));
        }
        if !(self.tau_v > 0.0 && self.tau_w > 0.0 && self.rho > -1.0 && self.rho < 1.0) {
            return Err(Error::domain(
                "intercept/slope covariance is not positive definite: need tau_v, tau_w > 0 and |rho| < 1",
            ));
        }
        if self.causes.is_empty() || self.causes.iter().any(|c| !(c.shape > 0.0)) {
            return Err(Error::domain("need at least one cause with a positive shape"));
        }
        if !(0.0..1.0).contains(&self.censoring_rate) {
            return Err(Error::domain("censoring_rate must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Inverse cumulative hazard draw: `H(t) = (e^η t)^α`.
pub fn weibull_time(rng: &mut impl Rng, eta: f64, alpha: f64) -> f64 {
    let e: f64 = 1.0 - rng.random::<f64>();
    math::powf(-math::ln(e), 1.0 / alpha) / math::exp(eta)
}

/// One intercept/slope pair with standard deviations `sv`, `sw` and
/// correlation `rho`.
pub fn intercept_slope(rng: &mut impl Rng, sv: f64, sw: f64, rho: f64) -> (f64, f64) {
    let z1: f64 = StandardNormal.sample(rng);
    let z2: f64 = StandardNormal.sample(rng);
    (sv * z1, sw * (rho * z1 + math::sqrt(1.0 - rho * rho) * z2))
}

/// Simulates the intercept/slope joint model with Weibull causes.
pub fn simulate_example1(config: &Example1Config) -> Result<JointDataset> {
    config.validate()?;
    let sv = 1.0 / math::sqrt(config.tau_v);
    let sw = 1.0 / math::sqrt(config.tau_w);
    let mut long = Vec::new();
    let mut surv = Vec::with_capacity(config.n_individuals);
    let base_rate: f64 = config.causes.iter().map(|c| math::exp(c.intercept)).sum();
    let p = config.censoring_rate;
    let censor = p * base_rate / (1.0 - p);
    for i in 0..config.n_individuals {
        let id = i as u64 + 1;
        let mut rng = individual_rng(config.seed, i as u64);
        let (v, w) = intercept_slope(&mut rng, sv, sw, config.rho);
        let latent: Vec<f64> = config
            .causes
            .iter()
            .map(|c| weibull_time(&mut rng, c.intercept + c.gamma * v + c.kappa * w, c.shape))
            .collect();
        let first = argmin(&latent);
        let mut time = latent[first];
        let mut cause = first as u32 + 1;
        if censor > 0.0 {
            let c = exponential(&mut rng, censor)?;
            if c < time {
                time = c;
                cause = 0;
            }
        }
        let n_obs = rng.random_range(config.n_obs_range.0..=config.n_obs_range.1);
        for t in sorted_uniform_times(&mut rng, n_obs, time) {
            let y = poisson(&mut rng, math::exp(config.beta.0 + config.beta.1 * t + v + w * t))?;
            long.push(LongitudinalRecord {
                individual_id: id,
                time: t,
                value: y,
                covariates: Covariates::new(),
                marker: 0,
            });
        }
        surv.push(SurvivalRecord {
            individual_id: id,
            time,
            cause,
            covariates: Covariates::new(),
        });
    }
    validate_joint_dataset(long, surv, config.causes.len() as u32, LatePolicy::Error)
}

/// The model fitted to [`simulate_example5`] output: per-block intercepts,
/// an rw2 trend on `n_bins` time bins, an iid intercept `u` and its scaled
/// copies in every cause, which also carry an age effect.
pub fn example5_spec(n_causes: usize, n_bins: usize, cause_family: Family) -> ModelSpec {
    let mut spec = ModelSpec::new()
        .longitudinal(BlockSpec::new(Family::Poisson).fixed(&["intercept"]).attach("f").attach("u"))
        .effect("u", EffectSpec::iid(IndexSpec::Individual))
        .effect(
            "f",
            EffectSpec::rw2(
                IndexSpec::Binned {
                    covariate: String::from("time"),
                    n_groups: n_bins,
                },
                true,
            ),
        );
    for j in 1..=n_causes {
        spec = spec
            .cause(BlockSpec::new(cause_family.clone()).fixed(&["intercept", "age"]))
            .copy(CopyLink::effect("u", Component::Full, &format!("cause{j}")));
    }
    spec
}

/// The model fitted to [`simulate_example1`] output: intercept/slope effect
/// copied into every Weibull cause.
pub fn example1_spec(n_causes: usize) -> ModelSpec {
    let mut spec = ModelSpec::new()
        .longitudinal(
            BlockSpec::new(Family::Poisson)
                .fixed(&["intercept", "time"])
                .attach("vw"),
        )
        .effect("vw", EffectSpec::iid2d(IndexSpec::Individual));
    for j in 1..=n_causes {
        let name = format!("cause{j}");
        spec = spec
            .cause(BlockSpec::new(Family::weibull()).fixed(&["intercept"]))
            .copy(CopyLink::effect("vw", Component::Intercept, &name))
            .copy(CopyLink::effect("vw", Component::Slope, &name));
    }
    spec
}
