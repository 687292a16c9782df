//! Exploration of `π(θ|y)` around its mode along standardised axes.

use alloc::{vec, vec::Vec};

use nalgebra::{DMatrix, DVector};

use super::laplace::{log_posterior_hyper, GaussianApprox, NewtonOptions};
use super::optimize::HyperMode;
use super::Executor;
use crate::error::{Error, Result};
use crate::math;
use crate::stacker::StackedModel;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridOptions {
    /// Central-difference step for the Hessian of `−ln π(θ|y)`.
    pub hessian_step: f64,
    /// Step along each standardised axis.
    pub step: f64,
    /// Log-density drop at which an axis walk stops.
    pub drop: f64,
    /// Most points per half-axis.
    pub max_steps: usize,
}

impl Default for GridOptions {
    fn default() -> Self {
        GridOptions {
            hessian_step: 1e-3,
            step: 1.0,
            drop: 2.5,
            max_steps: 10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct HyperGridPoint {
    /// Internal-scale hyperparameters.
    pub theta: Vec<f64>,
    /// Standardised coordinates: `theta = center + axes · z`.
    pub z: Vec<f64>,
    pub log_post: f64,
    pub weight: f64,
    pub approx: GaussianApprox,
}

#[derive(Debug, Clone)]
pub struct HyperGrid {
    /// The mode is always the first point.
    pub points: Vec<HyperGridPoint>,
    pub center: Vec<f64>,
    /// Hessian of `−ln π(θ|y)` at the mode, row-major.
    pub hessian: Vec<f64>,
    /// Columns map standardised to internal coordinates, row-major `m × m`.
    pub axes: Vec<f64>,
    /// `ln det` of the Hessian when it is positive definite.
    pub log_det_hessian: Option<f64>,
    /// The Hessian was not positive definite and raw axes were used.
    pub fallback: bool,
    pub evaluations: usize,
}

impl HyperGrid {
    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn mode(&self) -> &HyperGridPoint {
        &self.points[0]
    }

    pub fn axis(&self, k: usize) -> Vec<f64> {
        let m = self.dim();
        (0..m).map(|i| self.axes[i * m + k]).collect()
    }
}

/// Central-difference Hessian of `−ln π(θ|y)` at `center`.
pub fn hyper_hessian<E: Executor>(
    model: &StackedModel,
    mode: &HyperMode,
    h: f64,
    newton: &NewtonOptions,
    exec: &E,
) -> Result<Vec<f64>> {
    let m = mode.theta.len();
    let mut offsets: Vec<Vec<(usize, f64)>> = Vec::new();
    for i in 0..m {
        offsets.push(vec![(i, h)]);
        offsets.push(vec![(i, -h)]);
    }
    for i in 0..m {
        for j in 0..i {
            for (si, sj) in [(h, h), (h, -h), (-h, h), (-h, -h)] {
                offsets.push(vec![(i, si), (j, sj)]);
            }
        }
    }
    let values = exec.map(offsets.len(), |k| {
        let mut theta = mode.theta.clone();
        for &(i, d) in &offsets[k] {
            theta[i] += d;
        }
        log_posterior_hyper(model, &theta, &mode.approx.mode, newton).map(|(v, _)| -v)
    });
    let values: Vec<f64> = values.into_iter().collect::<Result<_>>()?;
    let f0 = -mode.log_post;
    let mut hess = vec![0.0; m * m];
    for i in 0..m {
        hess[i * m + i] = (values[2 * i] - 2.0 * f0 + values[2 * i + 1]) / (h * h);
    }
    let mut k = 2 * m;
    for i in 0..m {
        for j in 0..i {
            let v = (values[k] - values[k + 1] - values[k + 2] + values[k + 3]) / (4.0 * h * h);
            hess[i * m + j] = v;
            hess[j * m + i] = v;
            k += 4;
        }
    }
    Ok(hess)
}

/// Standardised axes `V Λ^{-1/2}` of a positive-definite Hessian, or `None`.
fn standardise(hess: &[f64], m: usize) -> Option<(Vec<f64>, f64)> {
    let h = DMatrix::from_row_slice(m, m, hess);
    let eig = h.symmetric_eigen();
    if eig.eigenvalues.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
        return None;
    }
    let mut axes = vec![0.0; m * m];
    for k in 0..m {
        let scale = 1.0 / math::sqrt(eig.eigenvalues[k]);
        let v: DVector<f64> = eig.eigenvectors.column(k).into();
        // Fix the sign so the largest component is positive.
        let lead = (0..m).fold(0, |b, i| if v[i].abs() > v[b].abs() { i } else { b });
        let sign = if v[lead] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..m {
            axes[i * m + k] = sign * v[i] * scale;
        }
    }
    let log_det = eig.eigenvalues.iter().map(|&l| math::ln(l)).sum();
    Some((axes, log_det))
}

type WalkPoint<A> = (Vec<f64>, Vec<f64>, f64, A);

/// One walk per half-axis from `center`; each walk stops at the first point
/// whose drop from `center_value` reaches the threshold, keeping that point,
/// or at the first failed evaluation. `eval` returns the log density, the
/// payload to keep and the state to start the next evaluation from.
pub(crate) fn walk_axes<A, S, E, F>(
    center: &[f64],
    center_value: f64,
    axes: &[f64],
    options: &GridOptions,
    exec: &E,
    start: &S,
    eval: F,
) -> Vec<Vec<WalkPoint<A>>>
where
    A: Send,
    S: Clone + Sync,
    E: Executor,
    F: Fn(&[f64], &S) -> Result<(f64, A, S)> + Sync + Send,
{
    let m = center.len();
    exec.map(2 * m, |w| {
        let k = w / 2;
        let sign = if w % 2 == 0 { 1.0 } else { -1.0 };
        let mut out = Vec::new();
        let mut state = start.clone();
        for j in 1..=options.max_steps {
            let zk = sign * j as f64 * options.step;
            let theta: Vec<f64> = (0..m).map(|i| center[i] + axes[i * m + k] * zk).collect();
            let Ok((value, payload, next)) = eval(&theta, &state) else {
                break;
            };
            if !value.is_finite() {
                break;
            }
            state = next;
            let mut z = vec![0.0; m];
            z[k] = zk;
            out.push((theta, z, value, payload));
            if center_value - value >= options.drop {
                break;
            }
        }
        out
    })
}

pub fn explore_grid<E: Executor>(
    model: &StackedModel,
    mode: HyperMode,
    newton: &NewtonOptions,
    options: &GridOptions,
    exec: &E,
) -> Result<HyperGrid> {
    let m = mode.theta.len();
    let center_point = HyperGridPoint {
        theta: mode.theta.clone(),
        z: vec![0.0; m],
        log_post: mode.log_post,
        weight: 1.0,
        approx: mode.approx.clone(),
    };
    if m == 0 {
        return Ok(HyperGrid {
            points: vec![center_point],
            center: Vec::new(),
            hessian: Vec::new(),
            axes: Vec::new(),
            log_det_hessian: Some(0.0),
            fallback: false,
            evaluations: 0,
        });
    }
    let hessian = hyper_hessian(model, &mode, options.hessian_step, newton, exec)?;
    let mut evaluations = 2 * m * m;
    let (axes, log_det_hessian, fallback) = match standardise(&hessian, m) {
        Some((axes, log_det)) => (axes, Some(log_det), false),
        None => {
            let mut axes = vec![0.0; m * m];
            for i in 0..m {
                let hii = hessian[i * m + i];
                axes[i * m + i] = if hii > 0.0 { 1.0 / math::sqrt(hii) } else { 1.0 };
            }
            (axes, None, true)
        }
    };

    let walks = walk_axes(&mode.theta, mode.log_post, &axes, options, exec, &mode.approx.mode, |theta, start| {
        log_posterior_hyper(model, theta, start, newton).map(|(v, a)| {
            let next = a.mode.clone();
            (v, a, next)
        })
    });
    let mut points = vec![center_point];
    for walk in walks {
        evaluations += walk.len();
        points.extend(walk.into_iter().map(|(theta, z, log_post, approx)| HyperGridPoint {
            theta,
            z,
            log_post,
            weight: 0.0,
            approx,
        }));
    }
    let top = points.iter().map(|p| p.log_post).fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = points.iter().map(|p| math::exp(p.log_post - top)).sum();
    for p in &mut points {
        p.weight = math::exp(p.log_post - top) / total;
    }
    if !points.iter().all(|p| p.weight.is_finite()) {
        return Err(Error::numeric("grid weights are not finite"));
    }
    Ok(HyperGrid {
        points,
        center: mode.theta,
        hessian,
        axes,
        log_det_hessian,
        fallback,
        evaluations,
    })
}
