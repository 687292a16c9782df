//! Nested Laplace inference: conditional modes, hyperparameter mode and grid,
//! and posterior marginals.

pub mod grid;
pub mod laplace;
pub mod marginals;
pub mod optimize;

use alloc::{format, string::String, vec::Vec};

pub use grid::{explore_grid, GridOptions, HyperGrid, HyperGridPoint};
pub use laplace::{find_mode, log_conditional, log_posterior_hyper, Conditional, GaussianApprox, NewtonOptions};
pub use marginals::{latent_marginals, mixture_summary, SplitNormal, Summary};
pub use optimize::{optimize_hyper, HyperMode, OptimizeOptions};

use crate::data::JointDataset;
use crate::error::Result;
use crate::math;
use crate::stacker::{assemble, HyperRole, ModelSpec, StackedModel, Transform};

/// Runs independent jobs, returning results in index order.
pub trait Executor: Sync {
    fn map<T: Send, F: Fn(usize) -> T + Sync + Send>(&self, n: usize, f: F) -> Vec<T>;
}

/// Runs every job on the calling thread.
#[derive(Debug, Clone, Copy, Default)]
pub struct Sequential;

impl Executor for Sequential {
    fn map<T: Send, F: Fn(usize) -> T + Sync + Send>(&self, n: usize, f: F) -> Vec<T> {
        (0..n).map(f).collect()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FitOptions {
    pub newton: NewtonOptions,
    pub optimizer: OptimizeOptions,
    pub grid: GridOptions,
}

/// Posterior summary of one hyperparameter slot.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperSummary {
    pub name: String,
    pub role: HyperRole,
    /// Natural scale: precision, shape, correlation or scaling.
    pub natural: Summary,
    /// Internal scale, `None` for fixed slots.
    pub internal: Option<SplitNormal>,
    pub fixed: bool,
}

impl HyperSummary {
    /// `P(value < 0)` on the natural scale.
    pub fn mass_below_zero(&self) -> f64 {
        match (&self.internal, self.role) {
            (Some(d), HyperRole::CopyScaling { .. } | HyperRole::Correlation { .. }) => d.cdf(0.0),
            (Some(_), _) => 0.0,
            (None, _) => {
                if self.natural.mean < 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Diagnostics {
    pub optimizer_evaluations: usize,
    /// Newton iterations at the hyperparameter mode.
    pub newton_iterations: usize,
    pub grid_size: usize,
    pub grid_evaluations: usize,
    /// The Hessian at the mode was not positive definite.
    pub grid_fallback: bool,
    /// Axes with fewer than three grid values, whose marginal scales come
    /// from the curvature alone.
    pub coarse_axes: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub model: StackedModel,
    pub labels: Vec<String>,
    pub latent: Vec<Summary>,
    /// One entry per hyperparameter slot, fixed slots included.
    pub hyper: Vec<HyperSummary>,
    /// Standard deviations `τ^{-1/2}` of every estimated precision.
    pub derived: Vec<(String, Summary)>,
    pub theta_star: Vec<f64>,
    pub log_post_star: f64,
    /// `None` when the Hessian at the mode is not positive definite.
    pub log_evidence: Option<f64>,
    pub grid: HyperGrid,
    pub diagnostics: Diagnostics,
}

impl FitResult {
    pub fn latent_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn latent_summary(&self, label: &str) -> Option<&Summary> {
        self.latent_index(label).map(|i| &self.latent[i])
    }

    pub fn hyper_summary(&self, name: &str) -> Option<&HyperSummary> {
        self.hyper.iter().find(|h| h.name == name)
    }

    pub fn derived_summary(&self, name: &str) -> Option<&Summary> {
        self.derived.iter().find(|(n, _)| n == name).map(|(_, s)| s)
    }

    /// Latent mode at the hyperparameter mode.
    pub fn mode(&self) -> &[f64] {
        &self.grid.mode().approx.mode
    }

    /// Natural-scale hyperparameter values at the mode.
    pub fn natural_mode(&self) -> Vec<f64> {
        self.model
            .natural_values(&self.theta_star)
            .expect("mode lies in the domain")
    }
}

pub fn fit(spec: &ModelSpec, data: &JointDataset, options: &FitOptions) -> Result<FitResult> {
    fit_with(spec, data, options, &Sequential)
}

pub fn fit_with<E: Executor>(
    spec: &ModelSpec,
    data: &JointDataset,
    options: &FitOptions,
    exec: &E,
) -> Result<FitResult> {
    let model = assemble(spec, data).map_err(|e| e.at("assemble"))?;
    fit_model(model, options, exec)
}

/// Fits an already assembled model.
pub fn fit_model<E: Executor>(model: StackedModel, options: &FitOptions, exec: &E) -> Result<FitResult> {
    let mode = optimize_hyper(&model, &model.initial_theta(), &options.newton, &options.optimizer)
        .map_err(|e| e.at("optimize_hyper"))?;
    let optimizer_evaluations = mode.evaluations;
    let newton_iterations = mode.approx.iterations;
    let grid = explore_grid(&model, mode, &options.newton, &options.grid, exec).map_err(|e| e.at("explore_grid"))?;

    let m = grid.dim();
    let log_post_star = grid.mode().log_post;
    let log_evidence = grid
        .log_det_hessian
        .map(|ld| log_post_star + 0.5 * m as f64 * math::LN_2PI - 0.5 * ld);

    let indices: Vec<usize> = (0..model.n_latent()).collect();
    let latent = latent_marginals(&grid, &model, &indices, exec).map_err(|e| e.at("marginals"))?;

    let dists = marginals::hyper_marginal_distributions(&grid);
    let mut hyper = Vec::new();
    let mut derived = Vec::new();
    let mut free = model.free_slots().iter().zip(&dists).peekable();
    for (k, slot) in model.hyper_slots().iter().enumerate() {
        let dist = match free.peek() {
            Some((&j, d)) if j == k => {
                let d = **d;
                free.next();
                Some(d)
            }
            _ => None,
        };
        let natural = match dist {
            Some(d) => marginals::transformed_summary(&d, |s| slot.transform.to_natural(s), true),
            None => Summary::point(slot.transform.to_natural(slot.initial)),
        };
        if slot.is_precision() && slot.transform == Transform::Log {
            let sd = match dist {
                Some(d) => marginals::transformed_summary(&d, |s| math::exp(-0.5 * s), false),
                None => Summary::point(math::exp(-0.5 * slot.initial)),
            };
            derived.push((sd_name(&slot.name), sd));
        }
        hyper.push(HyperSummary {
            name: slot.name.clone(),
            role: slot.role,
            natural,
            internal: dist,
            fixed: dist.is_none(),
        });
    }

    let mut coarse_axes = Vec::new();
    for k in 0..m {
        let count = grid.points.iter().filter(|p| p.z[k] != 0.0).count() + 1;
        if count < 3 {
            coarse_axes.push(k);
        }
    }
    let diagnostics = Diagnostics {
        optimizer_evaluations,
        newton_iterations,
        grid_size: grid.points.len(),
        grid_evaluations: grid.evaluations,
        grid_fallback: grid.fallback,
        coarse_axes,
    };
    Ok(FitResult {
        labels: model.coordinate_labels(),
        theta_star: grid.center.clone(),
        model,
        latent,
        hyper,
        derived,
        log_post_star,
        log_evidence,
        grid,
        diagnostics,
    })
}

/// `u:precision` → `u:sd`, `u:precision_slope` → `u:sd_slope`.
fn sd_name(precision: &str) -> String {
    match precision.rfind("precision") {
        Some(i) => format!("{}sd{}", &precision[..i], &precision[i + "precision".len()..]),
        None => format!("{precision}:sd"),
    }
}
