//! Nelder–Mead maximisation of the Laplace-approximated `ln π(θ|y)`.

use alloc::{vec, vec::Vec};

use super::laplace::{log_posterior_hyper, GaussianApprox, NewtonOptions};
use crate::error::{Error, Result};
use crate::stacker::StackedModel;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizeOptions {
    /// Largest distance from the best vertex to any other vertex.
    pub diameter_tolerance: f64,
    /// Largest difference of objective values across the simplex.
    pub spread_tolerance: f64,
    pub max_evaluations: usize,
    /// Edge length of the initial simplex on the internal scale.
    pub initial_step: f64,
}

impl Default for OptimizeOptions {
    fn default() -> Self {
        OptimizeOptions {
            diameter_tolerance: 1e-4,
            spread_tolerance: 1e-6,
            max_evaluations: 2000,
            initial_step: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct HyperMode {
    pub theta: Vec<f64>,
    pub log_post: f64,
    pub approx: GaussianApprox,
    pub evaluations: usize,
}

struct Objective<'a> {
    model: &'a StackedModel,
    newton: &'a NewtonOptions,
    evaluations: usize,
    best: Option<(f64, Vec<f64>, GaussianApprox)>,
}

impl Objective<'_> {
    /// Negative log posterior; failed evaluations count as +∞.
    fn eval(&mut self, theta: &[f64]) -> f64 {
        self.evaluations += 1;
        let start = match &self.best {
            Some((_, _, a)) => a.mode.clone(),
            None => vec![0.0; self.model.n_latent()],
        };
        match log_posterior_hyper(self.model, theta, &start, self.newton) {
            Ok((value, approx)) if value.is_finite() => {
                if self.best.as_ref().map_or(true, |(b, _, _)| value > *b) {
                    self.best = Some((value, theta.to_vec(), approx));
                }
                -value
            }
            _ => f64::INFINITY,
        }
    }
}

pub fn optimize_hyper(
    model: &StackedModel,
    theta_init: &[f64],
    newton: &NewtonOptions,
    options: &OptimizeOptions,
) -> Result<HyperMode> {
    let m = model.n_hyper();
    if theta_init.len() != m {
        return Err(Error::Dimension {
            expected: m,
            got: theta_init.len(),
        });
    }
    if theta_init.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("initial hyperparameters are not finite"));
    }
    let mut obj = Objective {
        model,
        newton,
        evaluations: 0,
        best: None,
    };
    if m == 0 {
        let zero = vec![0.0; model.n_latent()];
        let (log_post, approx) = log_posterior_hyper(model, theta_init, &zero, newton)?;
        return Ok(HyperMode {
            theta: Vec::new(),
            log_post,
            approx,
            evaluations: 1,
        });
    }

    let mut simplex: Vec<Vec<f64>> = vec![theta_init.to_vec()];
    for i in 0..m {
        let mut v = theta_init.to_vec();
        v[i] += options.initial_step;
        simplex.push(v);
    }
    let mut values: Vec<f64> = simplex.iter().map(|v| obj.eval(v)).collect();
    if values[0].is_infinite() {
        // Surface the reason the starting point fails.
        let zero = vec![0.0; model.n_latent()];
        log_posterior_hyper(model, theta_init, &zero, newton)?;
    }

    loop {
        let mut order: Vec<usize> = (0..=m).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        simplex = order.iter().map(|&k| simplex[k].clone()).collect();
        values = order.iter().map(|&k| values[k]).collect();

        let diameter = simplex[1..]
            .iter()
            .map(|v| v.iter().zip(&simplex[0]).fold(0.0f64, |d, (a, b)| d.max((a - b).abs())))
            .fold(0.0f64, f64::max);
        let spread = values[m] - values[0];
        if diameter < options.diameter_tolerance && spread < options.spread_tolerance {
            break;
        }
        if obj.evaluations >= options.max_evaluations {
            return Err(Error::BudgetExceeded {
                evaluations: obj.evaluations,
                best: simplex[0].clone(),
            });
        }

        let centroid: Vec<f64> = (0..m)
            .map(|i| simplex[..m].iter().map(|v| v[i]).sum::<f64>() / m as f64)
            .collect();
        let along = |t: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&simplex[m])
                .map(|(c, w)| c + t * (c - w))
                .collect()
        };
        let reflected = along(1.0);
        let fr = obj.eval(&reflected);
        if fr < values[0] {
            let expanded = along(2.0);
            let fe = obj.eval(&expanded);
            if fe < fr {
                simplex[m] = expanded;
                values[m] = fe;
            } else {
                simplex[m] = reflected;
                values[m] = fr;
            }
            continue;
        }
        if fr < values[m - 1] {
            simplex[m] = reflected;
            values[m] = fr;
            continue;
        }
        let (contracted, fc) = if fr < values[m] {
            let c = along(0.5);
            let f = obj.eval(&c);
            (c, f)
        } else {
            let c = along(-0.5);
            let f = obj.eval(&c);
            (c, f)
        };
        if fc < values[m].min(fr) {
            simplex[m] = contracted;
            values[m] = fc;
            continue;
        }
        // Shrink towards the best vertex.
        for k in 1..=m {
            let v: Vec<f64> = simplex[k]
                .iter()
                .zip(&simplex[0])
                .map(|(a, b)| b + 0.5 * (a - b))
                .collect();
            values[k] = obj.eval(&v);
            simplex[k] = v;
        }
    }

    let evaluations = obj.evaluations;
    match obj.best {
        Some((log_post, theta, approx)) => Ok(HyperMode {
            theta,
            log_post,
            approx,
            evaluations,
        }),
        None => Err(Error::numeric("no hyperparameter value could be evaluated")),
    }
}
