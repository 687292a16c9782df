#![allow(dead_code)]

pub mod gaussian;

use std::collections::BTreeMap;

use cmprsk_core::data::{validate_joint_dataset, JointDataset, LatePolicy, LongitudinalRecord, SurvivalRecord};

/// Adaptive Simpson quadrature with Richardson correction, started from 64
/// panels so narrow peaks inside a wide interval are not missed.
pub fn integrate(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    let panels = 64;
    let h = (b - a) / panels as f64;
    (0..panels)
        .map(|k| adaptive_simpson(f, a + k as f64 * h, a + (k + 1) as f64 * h, tol / panels as f64))
        .sum()
}

fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson(fa: f64, fm: f64, fb: f64, a: f64, b: f64) -> f64 {
        (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    }
    #[allow(clippy::too_many_arguments)]
    fn recurse(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = simpson(fa, flm, fm, a, m);
        let right = simpson(fm, frm, fb, m, b);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        recurse(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1) + recurse(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
    }
    let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
    recurse(f, a, b, fa, fm, fb, simpson(fa, fm, fb, a, b), tol, 50)
}

pub fn covariates(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

pub fn long(id: u64, time: f64, value: f64, cov: &[(&str, f64)], marker: usize) -> LongitudinalRecord {
    LongitudinalRecord {
        individual_id: id,
        time,
        value,
        covariates: covariates(cov),
        marker,
    }
}

pub fn surv(id: u64, time: f64, cause: u32, cov: &[(&str, f64)]) -> SurvivalRecord {
    SurvivalRecord {
        individual_id: id,
        time,
        cause,
        covariates: covariates(cov),
    }
}

pub fn dataset(l: Vec<LongitudinalRecord>, s: Vec<SurvivalRecord>, n_causes: u32) -> JointDataset {
    validate_joint_dataset(l, s, n_causes, LatePolicy::Error).unwrap()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-3)
}

/// Single-coordinate Poisson model: `y_r ~ Poisson(exp(x))`, `x ~ N(0, 1/τ)`
/// with the default pc prior on `τ`, plus one uninformative cause block.
pub mod tiny {
    use cmprsk_core::families::pc_prec_log_prior;
    use cmprsk_core::gmrf::{EffectSpec, IndexSpec};
    use cmprsk_core::stacker::{BlockSpec, Family};
    use cmprsk_core::{JointDataset, ModelSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Poisson};

    use super::{dataset, integrate, long, surv};

    pub fn spec() -> ModelSpec {
        ModelSpec::new()
            .longitudinal(BlockSpec::new(Family::Poisson).attach("g"))
            .cause(BlockSpec::new(Family::Exponential))
            .effect(
                "g",
                EffectSpec::iid(IndexSpec::Covariate {
                    name: "g".into(),
                    size: 1,
                }),
            )
    }

    pub fn data(n: usize, rate: f64, seed: u64) -> (JointDataset, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pois = Poisson::new(rate).unwrap();
        let counts: Vec<f64> = (0..n).map(|_| pois.sample(&mut rng)).collect();
        let l = counts
            .iter()
            .enumerate()
            .map(|(k, &y)| long(1, k as f64 / n as f64, y, &[("g", 1.0)], 0))
            .collect();
        (dataset(l, vec![surv(1, 2.0, 0, &[])], 1), counts)
    }

    /// Ground truth by nested adaptive quadrature over `(x, ln τ)`.
    pub struct Oracle {
        counts: Vec<f64>,
        x_lo: f64,
        x_hi: f64,
        shift: f64,
    }

    const THETA_LO: f64 = -30.0;
    const THETA_HI: f64 = 15.0;

    impl Oracle {
        pub fn new(counts: &[f64]) -> Self {
            let total: f64 = counts.iter().sum();
            let n = counts.len() as f64;
            let centre = (total / n).ln();
            let width = 12.0 / total.sqrt();
            let mut o = Oracle {
                counts: counts.to_vec(),
                x_lo: centre - width,
                x_hi: centre + width,
                shift: 0.0,
            };
            o.shift = o.log_lik(centre);
            o
        }

        fn log_lik(&self, x: f64) -> f64 {
            let total: f64 = self.counts.iter().sum();
            total * x - self.counts.len() as f64 * x.exp()
        }

        /// `ln π(θ) + ln π(x | θ)` with `θ = ln τ`.
        fn log_prior(theta: f64, x: f64) -> f64 {
            let tau = theta.exp();
            pc_prec_log_prior(tau, 1.0, 0.01) + theta + 0.5 * (theta - (2.0 * std::f64::consts::PI).ln())
                - 0.5 * tau * x * x
        }

        /// Unnormalised marginal density of `x`.
        fn x_density(&self, x: f64) -> f64 {
            let inner = integrate(&|t| Self::log_prior(t, x).exp(), THETA_LO, THETA_HI, 1e-13);
            inner * (self.log_lik(x) - self.shift).exp()
        }

        /// Unnormalised `π(θ | y)`.
        pub fn theta_density(&self, theta: f64) -> f64 {
            integrate(
                &|x| (Self::log_prior(theta, x) + self.log_lik(x) - self.shift).exp(),
                self.x_lo,
                self.x_hi,
                1e-14,
            )
        }

        /// Posterior mean and variance of `x`.
        pub fn moments(&self) -> (f64, f64) {
            let tol = 1e-12;
            let z = integrate(&|x| self.x_density(x), self.x_lo, self.x_hi, tol);
            let m1 = integrate(&|x| x * self.x_density(x), self.x_lo, self.x_hi, tol) / z;
            let m2 = integrate(&|x| (x - m1).powi(2) * self.x_density(x), self.x_lo, self.x_hi, tol) / z;
            (m1, m2)
        }
    }
}
