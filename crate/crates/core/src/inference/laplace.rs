//! Gaussian approximation of `π(x | θ, y)` and the Laplace approximation of
//! `π(θ | y)`.

use alloc::{vec, vec::Vec};

use crate::error::{Error, Result};
use crate::math;
use crate::sparse::CholeskyFactor;
use crate::stacker::{StackedModel, ThetaState};

/// Log conditional `ln π(x|θ) + Σ ln π(y_r|η_r)` with its gradient and the
/// per-row likelihood curvature `−∂²ll/∂η²`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditional {
    pub value: f64,
    pub gradient: Vec<f64>,
    pub curvature: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonOptions {
    /// Converged when `max |gradient|` falls below this.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions {
            tolerance: 1e-8,
            max_iterations: 50,
        }
    }
}

/// Gaussian approximation at the conditional mode.
#[derive(Debug, Clone)]
pub struct GaussianApprox {
    pub mode: Vec<f64>,
    /// Factor of the posterior precision `Q(θ) + AᵀDA` at the mode.
    pub factor: CholeskyFactor,
    /// `½ ln det` of the posterior precision.
    pub log_det_half: f64,
    /// Log conditional at the mode.
    pub value: f64,
    pub converged: bool,
    pub iterations: usize,
    pub max_gradient: f64,
}

pub fn conditional_at(state: &ThetaState, x: &[f64]) -> Result<Conditional> {
    let eta = state.eta(x);
    let qx = state.prior_mul(x);
    let mut value = state.normalizer - 0.5 * x.iter().zip(&qx).map(|(a, b)| a * b).sum::<f64>();
    let mut gradient: Vec<f64> = qx.iter().map(|v| -v).collect();
    let mut d = vec![0.0; eta.len()];
    let mut curvature = vec![0.0; eta.len()];
    for &r in state.row_order() {
        let ll = state.row_loglik(r, eta[r])?;
        value += ll.value;
        d[r] = ll.d_eta;
        curvature[r] = -ll.d2_eta;
    }
    state.add_design_transpose(&d, &mut gradient);
    Ok(Conditional {
        value,
        gradient,
        curvature,
    })
}

/// Log conditional of `x` at internal hyperparameters `theta`.
pub fn log_conditional(model: &StackedModel, theta: &[f64], x: &[f64]) -> Result<Conditional> {
    if x.len() != model.n_latent() {
        return Err(Error::Dimension {
            expected: model.n_latent(),
            got: x.len(),
        });
    }
    conditional_at(&model.state(theta)?, x)
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, g| m.max(g.abs()))
}

/// Damped Newton iterations for the mode of `π(x|θ,y)`. Steps are halved
/// until the log conditional does not decrease (an overflow at a trial point
/// also halves the step).
pub fn find_mode_at(state: &ThetaState, x_init: &[f64], options: &NewtonOptions) -> Result<GaussianApprox> {
    let model = state.model();
    if x_init.len() != model.n_latent() {
        return Err(Error::Dimension {
            expected: model.n_latent(),
            got: x_init.len(),
        });
    }
    if x_init.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("initial latent vector is not finite"));
    }
    let mut x = x_init.to_vec();
    let mut cond = conditional_at(state, &x)?;
    let mut iterations = 0;
    let mut pattern = model.pattern().clone();
    loop {
        pattern
            .values_mut()
            .copy_from_slice(&state.posterior_values(&cond.curvature));
        let factor = model.symbolic().factor(&pattern)?;
        let max_gradient = max_abs(&cond.gradient);
        let tolerance = options.tolerance;
        let finish = move |factor: CholeskyFactor, x: Vec<f64>, value: f64| {
            let log_det_half = 0.5 * factor.log_det();
            GaussianApprox {
                mode: x,
                factor,
                log_det_half,
                value,
                // Stalled at the floating-point floor of the gradient.
                converged: max_gradient < tolerance || max_gradient < 1e-6,
                iterations,
                max_gradient,
            }
        };
        if max_gradient < options.tolerance {
            return Ok(finish(factor, x, cond.value));
        }
        let delta = factor.solve(&cond.gradient)?;
        let decrement: f64 = delta.iter().zip(&cond.gradient).map(|(a, b)| a * b).sum();
        if iterations == options.max_iterations {
            return Err(Error::NotConverged {
                iterations,
                max_gradient,
                last: x,
            });
        }
        // Inside the quadratic region the gain is below the resolution of the
        // objective, so full steps are judged by the gradient instead.
        if decrement <= 1e-10 * (1.0 + cond.value.abs()) {
            let trial: Vec<f64> = x.iter().zip(&delta).map(|(a, d)| a + d).collect();
            match conditional_at(state, &trial) {
                Ok(c) if max_abs(&c.gradient) < max_gradient
                    && c.value >= cond.value - 1e-12 * (1.0 + cond.value.abs()) =>
                {
                    x = trial;
                    cond = c;
                    iterations += 1;
                    continue;
                }
                Ok(_) | Err(Error::Overflow(_)) => return Ok(finish(factor, x, cond.value)),
                Err(e) => return Err(e),
            }
        }
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let trial: Vec<f64> = x.iter().zip(&delta).map(|(a, d)| a + step * d).collect();
            match conditional_at(state, &trial) {
                Ok(c) if c.value >= cond.value => {
                    accepted = Some((trial, c));
                    break;
                }
                Ok(_) | Err(Error::Overflow(_)) => step *= 0.5,
                Err(e) => return Err(e),
            }
        }
        match accepted {
            Some((trial, c)) => {
                x = trial;
                cond = c;
                iterations += 1;
            }
            None => {
                return Err(Error::numeric(
                    "line search could not increase the log conditional",
                ))
            }
        }
    }
}

pub fn find_mode(
    model: &StackedModel,
    theta: &[f64],
    x_init: &[f64],
    options: &NewtonOptions,
) -> Result<GaussianApprox> {
    find_mode_at(&model.state(theta)?, x_init, options)
}

/// Laplace approximation of `ln π(θ|y)` up to a constant, with the Gaussian
/// approximation it was computed from.
pub fn log_posterior_hyper(
    model: &StackedModel,
    theta: &[f64],
    x_init: &[f64],
    options: &NewtonOptions,
) -> Result<(f64, GaussianApprox)> {
    let state = model.state(theta)?;
    let approx = find_mode_at(&state, x_init, options)?;
    let n = model.n_latent() as f64;
    let value = model.log_hyper_prior(theta)? + approx.value + 0.5 * n * math::LN_2PI - approx.log_det_half;
    Ok((value, approx))
}
