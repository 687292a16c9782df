//! Observation families, hyperparameter priors and cumulative incidence.
//!
//! Every log-likelihood is returned together with its first and second
//! derivatives with respect to the linear predictor `η`. All four families
//! are log-concave in `η`, which the Newton iterations rely on.

use alloc::{format, vec, vec::Vec};

use crate::error::{Error, Result};
use crate::math;

/// Exponents above this value are rejected rather than saturated.
pub const OVERFLOW_GUARD: f64 = 700.0;

/// Log-likelihood of one observation and its η-derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogLik {
    pub value: f64,
    pub d_eta: f64,
    pub d2_eta: f64,
}

/// Observed time and event indicator for the cause owning a block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurvivalOutcome {
    pub time: f64,
    pub event: bool,
}

impl SurvivalOutcome {
    pub fn new(time: f64, event: bool) -> Result<Self> {
        if !(time > 0.0) || !time.is_finite() {
            return Err(Error::domain(format!("survival time must be positive, got {time}")));
        }
        Ok(SurvivalOutcome { time, event })
    }

    fn d(&self) -> f64 {
        if self.event {
            1.0
        } else {
            0.0
        }
    }
}

fn guard(exponent: f64) -> Result<()> {
    if exponent > OVERFLOW_GUARD || exponent.is_nan() {
        Err(Error::Overflow(exponent))
    } else {
        Ok(())
    }
}

pub fn gaussian_loglik(y: f64, eta: f64, tau: f64) -> LogLik {
    let r = y - eta;
    LogLik {
        value: 0.5 * (math::ln(tau) - math::LN_2PI) - 0.5 * tau * r * r,
        d_eta: tau * r,
        d2_eta: -tau,
    }
}

/// `y` must be a nonnegative integer (stored as `f64`).
pub fn poisson_loglik(y: f64, eta: f64) -> Result<LogLik> {
    if !(y >= 0.0) || math::floor(y) != y {
        return Err(Error::domain(format!("poisson count must be a nonnegative integer, got {y}")));
    }
    guard(eta)?;
    let mu = math::exp(eta);
    Ok(LogLik {
        value: y * eta - mu - math::ln_factorial(y),
        d_eta: y - mu,
        d2_eta: -mu,
    })
}

/// Weibull cause-specific hazard `h(t) = α·exp(α·η)·t^{α−1}`.
pub fn weibull_surv_loglik(outcome: SurvivalOutcome, eta: f64, alpha: f64) -> Result<LogLik> {
    if !(alpha > 0.0) {
        return Err(Error::domain(format!("weibull shape must be positive, got {alpha}")));
    }
    let ln_t = math::ln(outcome.time);
    guard(alpha * eta + alpha * ln_t)?;
    let cum = math::exp(alpha * eta) * math::powf(outcome.time, alpha);
    let d = outcome.d();
    Ok(LogLik {
        value: d * (math::ln(alpha) + alpha * eta + (alpha - 1.0) * ln_t) - cum,
        d_eta: alpha * d - alpha * cum,
        d2_eta: -(alpha * alpha) * cum,
    })
}

/// Constant cause-specific hazard `h(t) = exp(η)`.
pub fn exponential_surv_loglik(outcome: SurvivalOutcome, eta: f64) -> Result<LogLik> {
    guard(eta + math::ln(outcome.time))?;
    let cum = math::exp(eta) * outcome.time;
    let d = outcome.d();
    Ok(LogLik {
        value: d * eta - cum,
        d_eta: d - cum,
        d2_eta: -cum,
    })
}

/// Log-density of a precision `τ` when `σ = τ^{-1/2}` is exponential with
/// `P(σ > u) = alpha`.
pub fn pc_prec_log_prior(tau: f64, u: f64, alpha: f64) -> f64 {
    let lambda = -math::ln(alpha) / u;
    math::ln(lambda / 2.0) - 1.5 * math::ln(tau) - lambda / math::sqrt(tau)
}

/// Log-density of `param` when `scale·ln(param) ~ N(0, 1/tau0)`.
pub fn scaled_log_gaussian_prior(param: f64, scale: f64, tau0: f64) -> f64 {
    let z = scale * math::ln(param);
    0.5 * (math::ln(tau0) - math::LN_2PI) - 0.5 * tau0 * z * z + math::ln((scale / param).abs())
}

/// Parametric form of one cause-specific hazard.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HazardForm {
    Exponential,
    Weibull { alpha: f64 },
}

/// A cause-specific hazard at a fixed linear predictor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CauseHazard {
    pub form: HazardForm,
    pub eta: f64,
}

impl CauseHazard {
    pub fn hazard(&self, t: f64) -> f64 {
        match self.form {
            HazardForm::Exponential => math::exp(self.eta),
            HazardForm::Weibull { alpha } => {
                alpha * math::exp(alpha * self.eta) * math::powf(t, alpha - 1.0)
            }
        }
    }

    pub fn cumulative(&self, t: f64) -> f64 {
        match self.form {
            HazardForm::Exponential => math::exp(self.eta) * t,
            HazardForm::Weibull { alpha } => math::exp(alpha * self.eta) * math::powf(t, alpha),
        }
    }
}

/// Cumulative incidence per cause and overall survival on a time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CumulativeIncidence {
    pub times: Vec<f64>,
    /// `incidence[j][k]` is `F_j(times[k])`.
    pub incidence: Vec<Vec<f64>>,
    pub survival: Vec<f64>,
}

/// `F_j(t) = ∫₀ᵗ h_j(u)·exp(−Σ_k H_k(u)) du`, accumulated over `t_grid` with
/// 16-point Gauss–Legendre per interval. For a Weibull hazard with shape
/// below one the first interval uses `u = t₁·s^{1/α}`, which absorbs the
/// `u^{α−1}` singularity into the Jacobian.
pub fn cumulative_incidence(hazards: &[CauseHazard], t_grid: &[f64]) -> Result<CumulativeIncidence> {
    if t_grid.len() < 2 {
        return Err(Error::domain("time grid needs at least two points"));
    }
    if t_grid[0] != 0.0 {
        return Err(Error::domain("time grid must start at 0"));
    }
    if t_grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::domain("time grid must be strictly increasing"));
    }
    let survival_at = |t: f64| -> f64 { math::exp(-hazards.iter().map(|h| h.cumulative(t)).sum::<f64>()) };
    let survival: Vec<f64> = t_grid.iter().map(|&t| survival_at(t)).collect();
    let (nodes, weights) = math::gauss_legendre(16);
    let n = t_grid.len();
    let mut incidence = Vec::with_capacity(hazards.len());
    for h in hazards {
        let power = match h.form {
            HazardForm::Weibull { alpha } if alpha < 1.0 => 1.0 / alpha,
            _ => 1.0,
        };
        let mut cum = vec![0.0; n];
        for k in 1..n {
            let (lo, hi) = (t_grid[k - 1], t_grid[k]);
            let interval: f64 = nodes
                .iter()
                .zip(&weights)
                .map(|(&x, &w)| {
                    let s = 0.5 * (x + 1.0);
                    if k == 1 && power > 1.0 {
                        let u = hi * math::powf(s, power);
                        0.5 * w * h.hazard(u) * survival_at(u) * hi * power * math::powf(s, power - 1.0)
                    } else {
                        let u = lo + (hi - lo) * s;
                        0.5 * w * (hi - lo) * h.hazard(u) * survival_at(u)
                    }
                })
                .sum();
            cum[k] = (cum[k - 1] + interval).min(1.0);
        }
        incidence.push(cum);
    }
    Ok(CumulativeIncidence {
        times: t_grid.to_vec(),
        incidence,
        survival,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_values() {
        let l = gaussian_loglik(0.0, 0.0, 1.0);
        assert!((l.value + 0.5 * math::LN_2PI).abs() < 1e-15);
        assert_eq!(l.d_eta, 0.0);
        assert_eq!(l.d2_eta, -1.0);
        assert_eq!(gaussian_loglik(1.0, 0.0, 4.0).d_eta, 4.0);
    }

    #[test]
    fn poisson_values() {
        let l = poisson_loglik(0.0, 0.0).unwrap();
        assert!((l.value + 1.0).abs() < 1e-15);
        let l = poisson_loglik(3.0, 3f64.ln()).unwrap();
        assert!(l.d_eta.abs() < 1e-14);
        assert!(matches!(poisson_loglik(1.0, 701.0), Err(Error::Overflow(_))));
        assert!(matches!(poisson_loglik(1.5, 0.0), Err(Error::Domain(_))));
    }

    #[test]
    fn survival_values() {
        let ev = SurvivalOutcome::new(1.0, true).unwrap();
        let l = weibull_surv_loglik(ev, 0.0, 2.0).unwrap();
        assert!((l.value - (2f64.ln() - 1.0)).abs() < 1e-15);
        let l = exponential_surv_loglik(SurvivalOutcome::new(2.0, true).unwrap(), 0.0).unwrap();
        assert!((l.value + 2.0).abs() < 1e-15);
        let l = exponential_surv_loglik(SurvivalOutcome::new(1.0, false).unwrap(), 0.0).unwrap();
        assert!((l.value + 1.0).abs() < 1e-15);
        assert!(SurvivalOutcome::new(0.0, true).is_err());
        assert!(matches!(
            weibull_surv_loglik(ev, 400.0, 2.0),
            Err(Error::Overflow(_))
        ));
        assert!(matches!(exponential_surv_loglik(ev, 750.0), Err(Error::Overflow(_))));
    }

    #[test]
    fn weibull_shape_one_is_exponential_bitwise() {
        for (k, &t) in [0.01, 0.5, 1.0, 3.7, 40.0].iter().enumerate() {
            for &eta in &[-3.0, -0.2, 0.0, 1.3, 5.0] {
                let o = SurvivalOutcome::new(t, k % 2 == 0).unwrap();
                assert_eq!(weibull_surv_loglik(o, eta, 1.0).unwrap(), exponential_surv_loglik(o, eta).unwrap());
            }
        }
    }

    #[test]
    fn scaled_log_prior_at_one() {
        let v = scaled_log_gaussian_prior(1.0, 10.0, 2.0);
        assert!((v - (0.5 * (2.0 / (2.0 * core::f64::consts::PI)).ln() + 10f64.ln())).abs() < 1e-14);
    }

    #[test]
    fn scaled_log_prior_is_symmetric_in_log_scale() {
        // The density of ln(param) is symmetric; the density of param picks up
        // the Jacobian 1/param.
        for &a in &[0.3, 0.84, 1.21, 4.0] {
            let lhs = scaled_log_gaussian_prior(a, 10.0, 0.5) + a.ln();
            let rhs = scaled_log_gaussian_prior(1.0 / a, 10.0, 0.5) - a.ln();
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn single_exponential_cif_is_closed_form() {
        let grid: Vec<f64> = (0..=500).map(|k| k as f64 * 0.01).collect();
        let out = cumulative_incidence(
            &[CauseHazard {
                form: HazardForm::Exponential,
                eta: 0.0,
            }],
            &grid,
        )
        .unwrap();
        for (k, &t) in grid.iter().enumerate() {
            assert!((out.incidence[0][k] - (1.0 - (-t).exp())).abs() < 1e-6);
        }
    }

    #[test]
    fn two_equal_causes_split_evenly() {
        let grid: Vec<f64> = (0..=2000).map(|k| k as f64 * 0.01).collect();
        let h = CauseHazard {
            form: HazardForm::Exponential,
            eta: 0.4,
        };
        let out = cumulative_incidence(&[h, h], &grid).unwrap();
        assert!((out.incidence[0].last().unwrap() - 0.5).abs() < 1e-6);
    }

    #[test]
    fn weibull_small_shape_is_integrable() {
        let grid: Vec<f64> = (0..=400).map(|k| k as f64 * 0.01).collect();
        let h = CauseHazard {
            form: HazardForm::Weibull { alpha: 0.7 },
            eta: 0.0,
        };
        let out = cumulative_incidence(&[h], &grid).unwrap();
        for (k, &t) in grid.iter().enumerate() {
            let exact = 1.0 - (-(t.powf(0.7))).exp();
            assert!((out.incidence[0][k] - exact).abs() < 1e-6, "t={t}");
        }
    }

    #[test]
    fn grid_errors() {
        let h = [CauseHazard {
            form: HazardForm::Exponential,
            eta: 0.0,
        }];
        assert!(cumulative_incidence(&h, &[0.0, 2.0, 1.0]).is_err());
        assert!(cumulative_incidence(&h, &[0.5, 1.0]).is_err());
    }
}
