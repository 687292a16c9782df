//! Posterior summaries: Gaussian mixtures for latent coordinates and
//! split-normal marginals for hyperparameters.

use alloc::{vec, vec::Vec};

use nalgebra::{DMatrix, DVector};

use super::grid::HyperGrid;
use super::laplace::GaussianApprox;
use super::Executor;
use crate::error::Result;
use crate::math;
use crate::stacker::{StackedModel, Transform};

/// Mean, standard deviation and the 2.5%, 50% and 97.5% quantiles.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Summary {
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q50: f64,
    pub q975: f64,
}

impl Summary {
    pub fn point(value: f64) -> Self {
        Summary {
            mean: value,
            sd: 0.0,
            q025: value,
            q50: value,
            q975: value,
        }
    }
}

/// Constrained mean and marginal variances of one Gaussian approximation.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Mean and variances of `approx` after conditioning on the model's
/// sum-to-zero constraints (conditioning by kriging).
pub fn constrained_moments(model: &StackedModel, approx: &GaussianApprox, indices: &[usize]) -> Result<Moments> {
    let n = model.n_latent();
    let constraints = model.constraints();
    let mut mean = approx.mode.clone();
    let mut var = approx.factor.inverse_diagonal(indices)?;
    if constraints.is_empty() {
        return Ok(Moments {
            mean: indices.iter().map(|&i| mean[i]).collect(),
            var,
        });
    }
    let k = constraints.len();
    // W = Q⁻¹ Aᵀ, S = A W.
    let mut w = Vec::with_capacity(k);
    for c in constraints {
        let mut a = vec![0.0; n];
        a[c.clone()].iter_mut().for_each(|v| *v = 1.0);
        w.push(approx.factor.solve(&a)?);
    }
    let s = DMatrix::from_fn(k, k, |i, j| constraints[i].clone().map(|r| w[j][r]).sum::<f64>());
    let s_inv = s
        .try_inverse()
        .ok_or_else(|| crate::error::Error::numeric("constraint covariance is singular"))?;
    let residual = DVector::from_fn(k, |i, _| constraints[i].clone().map(|r| mean[r]).sum::<f64>());
    let shift = &s_inv * residual;
    for (r, m) in mean.iter_mut().enumerate() {
        *m -= (0..k).map(|i| w[i][r] * shift[i]).sum::<f64>();
    }
    for (slot, &r) in var.iter_mut().zip(indices) {
        let wr = DVector::from_fn(k, |i, _| w[i][r]);
        *slot -= (wr.transpose() * &s_inv * &wr)[(0, 0)];
        *slot = slot.max(0.0);
    }
    Ok(Moments {
        mean: indices.iter().map(|&i| mean[i]).collect(),
        var,
    })
}

/// Summaries of the mixture `Σ w_k N(μ_k, σ_k²)`.
pub fn mixture_summary(weights: &[f64], means: &[f64], sds: &[f64]) -> Summary {
    let mean: f64 = weights.iter().zip(means).map(|(w, m)| w * m).sum();
    let second: f64 = weights
        .iter()
        .zip(means.iter().zip(sds))
        .map(|(w, (m, s))| w * (s * s + m * m))
        .sum();
    let sd = math::sqrt((second - mean * mean).max(0.0));
    let live: Vec<usize> = (0..weights.len()).filter(|&k| weights[k] > 0.0).collect();
    if live.len() == 1 {
        let (m, s) = (means[live[0]], sds[live[0]]);
        return Summary {
            mean: m,
            sd: s,
            q025: m + s * math::normal_quantile(0.025),
            q50: m,
            q975: m + s * math::normal_quantile(0.975),
        };
    }
    let cdf = |x: f64| -> f64 {
        live.iter()
            .map(|&k| {
                if sds[k] > 0.0 {
                    weights[k] * math::normal_cdf((x - means[k]) / sds[k])
                } else if x >= means[k] {
                    weights[k]
                } else {
                    0.0
                }
            })
            .sum()
    };
    let lo = live.iter().map(|&k| means[k] - 12.0 * sds[k]).fold(f64::INFINITY, f64::min);
    let hi = live.iter().map(|&k| means[k] + 12.0 * sds[k]).fold(f64::NEG_INFINITY, f64::max);
    let quantile = |p: f64| -> f64 {
        let (mut a, mut b) = (lo, hi);
        for _ in 0..200 {
            let mid = 0.5 * (a + b);
            if mid <= a || mid >= b {
                break;
            }
            if cdf(mid) < p {
                a = mid;
            } else {
                b = mid;
            }
        }
        0.5 * (a + b)
    };
    Summary {
        mean,
        sd,
        q025: quantile(0.025),
        q50: quantile(0.5),
        q975: quantile(0.975),
    }
}

/// Mixture marginals of the latent coordinates in `indices` over the grid.
pub fn latent_marginals<E: Executor>(
    grid: &HyperGrid,
    model: &StackedModel,
    indices: &[usize],
    exec: &E,
) -> Result<Vec<Summary>> {
    let moments = exec.map(grid.points.len(), |k| {
        constrained_moments(model, &grid.points[k].approx, indices)
    });
    let moments: Vec<Moments> = moments.into_iter().collect::<Result<_>>()?;
    let weights: Vec<f64> = grid.points.iter().map(|p| p.weight).collect();
    let out = exec.map(indices.len(), |j| {
        let means: Vec<f64> = moments.iter().map(|m| m.mean[j]).collect();
        let sds: Vec<f64> = moments.iter().map(|m| math::sqrt(m.var[j])).collect();
        mixture_summary(&weights, &means, &sds)
    });
    Ok(out)
}

/// Two-piece normal: mode `m`, scale `lower` below and `upper` above.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SplitNormal {
    pub mode: f64,
    pub lower: f64,
    pub upper: f64,
}

impl SplitNormal {
    pub fn cdf(&self, x: f64) -> f64 {
        let total = self.lower + self.upper;
        if total == 0.0 {
            return if x >= self.mode { 1.0 } else { 0.0 };
        }
        if x < self.mode {
            2.0 * self.lower / total * math::normal_cdf((x - self.mode) / self.lower)
        } else if self.upper == 0.0 {
            1.0
        } else {
            (self.lower + self.upper * (2.0 * math::normal_cdf((x - self.mode) / self.upper) - 1.0)) / total
        }
    }

    pub fn quantile(&self, p: f64) -> f64 {
        let total = self.lower + self.upper;
        if total == 0.0 {
            return self.mode;
        }
        let below = self.lower / total;
        if p < below {
            self.mode + self.lower * math::normal_quantile(p * total / (2.0 * self.lower))
        } else {
            let q = (p * total - self.lower) / (2.0 * self.upper) + 0.5;
            self.mode + self.upper * math::normal_quantile(q.min(1.0))
        }
    }

    /// `E[g(X)]` by Gauss–Legendre quadrature over each half.
    pub fn expect(&self, g: impl Fn(f64) -> f64) -> f64 {
        let total = self.lower + self.upper;
        if total == 0.0 {
            return g(self.mode);
        }
        let (nodes, weights) = math::gauss_legendre(64);
        // Half-normal expectation of h(|Z|) on |Z| ∈ [0, 9].
        let half = |scale: f64, sign: f64| -> f64 {
            nodes
                .iter()
                .zip(&weights)
                .map(|(&x, &w)| {
                    let z = 4.5 * (x + 1.0);
                    4.5 * w * 2.0 * math::normal_pdf(z) * g(self.mode + sign * scale * z)
                })
                .sum()
        };
        (self.lower * half(self.lower, -1.0) + self.upper * half(self.upper, 1.0)) / total
    }
}

/// Summary of `g(X)` for a monotone `g`, with quantiles mapped directly.
pub fn transformed_summary(dist: &SplitNormal, g: impl Fn(f64) -> f64, increasing: bool) -> Summary {
    let mean = dist.expect(&g);
    let second = dist.expect(|x| {
        let v = g(x);
        v * v
    });
    let sd = math::sqrt((second - mean * mean).max(0.0));
    let q = |p: f64| g(dist.quantile(if increasing { p } else { 1.0 - p }));
    Summary {
        mean,
        sd,
        q025: q(0.025),
        q50: q(0.5),
        q975: q(0.975),
    }
}

/// Natural-scale image of an internal value.
pub fn natural(transform: Transform, s: f64) -> f64 {
    transform.to_natural(s)
}

/// Split-normal marginal of each internal hyperparameter, built from the
/// log-density drops observed along the grid axes.
pub fn hyper_marginal_distributions(grid: &HyperGrid) -> Vec<SplitNormal> {
    let m = grid.dim();
    let center = grid.mode().log_post;
    // Scale of each standardised direction on each side.
    let mut scales = vec![[1.0f64; 2]; m];
    for (k, side) in scales.iter_mut().enumerate() {
        for (s, sign) in [(0usize, -1.0f64), (1, 1.0)] {
            let mut best: Option<(f64, f64)> = None;
            for p in &grid.points[1..] {
                let zk = p.z[k];
                if zk * sign <= 0.0 || p.z.iter().enumerate().any(|(i, &z)| i != k && z != 0.0) {
                    continue;
                }
                let drop = center - p.log_post;
                if drop <= 1e-10 {
                    continue;
                }
                // Prefer the farthest point still inside the threshold; fall
                // back to the nearest one.
                let candidate = (zk.abs(), drop);
                best = match best {
                    None => Some(candidate),
                    Some(b) if drop < 2.5 && candidate.0 > b.0 => Some(candidate),
                    Some(b) if b.1 >= 2.5 && candidate.0 < b.0 => Some(candidate),
                    keep => keep,
                };
            }
            if let Some((dist, drop)) = best {
                side[s] = dist / math::sqrt(2.0 * drop);
            }
        }
    }
    (0..m)
        .map(|i| {
            let mut lower = 0.0;
            let mut upper = 0.0;
            for (k, side) in scales.iter().enumerate() {
                let a = grid.axes[i * m + k];
                let (below, above) = if a >= 0.0 { (side[0], side[1]) } else { (side[1], side[0]) };
                lower += a * a * below * below;
                upper += a * a * above * above;
            }
            SplitNormal {
                mode: grid.center[i],
                lower: math::sqrt(lower),
                upper: math::sqrt(upper),
            }
        })
        .collect()
}
