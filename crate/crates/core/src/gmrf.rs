//! Precision-matrix builders for structured random effects.
//!
//! Every builder returns a [`SparsePrecision`]: a symmetric sparse matrix
//! together with its rank deficiency and the log of the product of its
//! nonzero eigenvalues, so improper random-walk priors can be evaluated
//! without adding jitter.

use alloc::{
    format,
    string::String,
    sync::Arc,
    vec,
    vec::Vec,
};

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::math;
use crate::sparse::{SymCsc, SymbolicCholesky};

/// Largest dimension for which [`scale_precision`] forms the dense
/// generalised inverse.
pub const MAX_SCALE_DIM: usize = 500;

#[derive(Debug, Clone, PartialEq)]
pub struct SparsePrecision {
    matrix: SymCsc,
    rank_deficiency: usize,
    log_det_constant: f64,
}

impl SparsePrecision {
    pub fn new(matrix: SymCsc, rank_deficiency: usize, log_det_constant: f64) -> Self {
        SparsePrecision {
            matrix,
            rank_deficiency,
            log_det_constant,
        }
    }

    pub fn dim(&self) -> usize {
        self.matrix.dim()
    }

    pub fn matrix(&self) -> &SymCsc {
        &self.matrix
    }

    pub fn rank_deficiency(&self) -> usize {
        self.rank_deficiency
    }

    /// Log of the product of the nonzero eigenvalues.
    pub fn log_det_constant(&self) -> f64 {
        self.log_det_constant
    }

    /// `c·Q`, updating the cached generalised determinant.
    pub fn scaled(&self, c: f64) -> Self {
        let rank = (self.dim() - self.rank_deficiency) as f64;
        SparsePrecision {
            matrix: self.matrix.scaled(c),
            rank_deficiency: self.rank_deficiency,
            log_det_constant: self.log_det_constant + rank * math::ln(c),
        }
    }
}

/// Kind of structured random effect.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum EffectKind {
    Iid,
    Iid2d,
    Rw2,
}

/// How a row of the stacked model selects a coordinate of an effect.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "by", rename_all = "lowercase"))]
pub enum IndexSpec {
    /// One coordinate (or intercept/slope pair) per individual.
    Individual,
    /// An integer covariate taking values `1..=size`.
    Covariate { name: String, size: usize },
    /// A continuous covariate grouped into `n_groups` equal-width bins.
    Binned { covariate: String, n_groups: usize },
}

/// Prior for one hyperparameter.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "prior", rename_all = "snake_case"))]
pub enum PriorSpec {
    /// Exponential prior on `τ^{-1/2}` with `P(τ^{-1/2} > u) = alpha`.
    PcPrec { u: f64, alpha: f64 },
    /// `scale · ln(param) ~ N(0, 1/precision)`.
    GaussianOnScaledLog { scale: f64, precision: f64 },
    /// Normal prior on the internal (unconstrained) scale.
    Gaussian { mean: f64, precision: f64 },
    /// Not estimated; held at `value` on the natural scale.
    Fixed { value: f64 },
}

impl PriorSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            PriorSpec::PcPrec { u, alpha } => {
                if !(u > 0.0) || !(alpha > 0.0 && alpha < 1.0) {
                    return Err(Error::domain(format!(
                        "pc_prec prior needs u > 0 and 0 < alpha < 1, got u = {u}, alpha = {alpha}"
                    )));
                }
            }
            PriorSpec::GaussianOnScaledLog { scale, precision } => {
                if scale == 0.0 || !(precision > 0.0) {
                    return Err(Error::domain("gaussian_on_scaled_log needs scale != 0 and precision > 0"));
                }
            }
            PriorSpec::Gaussian { precision, .. } => {
                if !(precision > 0.0) {
                    return Err(Error::domain("gaussian prior needs precision > 0"));
                }
            }
            PriorSpec::Fixed { value } => {
                if !value.is_finite() {
                    return Err(Error::domain("fixed hyperparameter must be finite"));
                }
            }
        }
        Ok(())
    }

    pub fn is_fixed(&self) -> bool {
        matches!(self, PriorSpec::Fixed { .. })
    }
}

/// Prior and starting value of one hyperparameter.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct HyperSpec {
    #[cfg_attr(feature = "serde", serde(flatten))]
    pub prior: PriorSpec,
    /// Starting value on the natural scale.
    #[cfg_attr(feature = "serde", serde(default))]
    pub initial: Option<f64>,
}

impl HyperSpec {
    pub fn new(prior: PriorSpec) -> Self {
        HyperSpec { prior, initial: None }
    }

    pub fn fixed(value: f64) -> Self {
        HyperSpec::new(PriorSpec::Fixed { value })
    }

    pub fn pc_prec(u: f64, alpha: f64) -> Self {
        HyperSpec::new(PriorSpec::PcPrec { u, alpha })
    }

    pub fn with_initial(mut self, initial: f64) -> Self {
        self.initial = Some(initial);
        self
    }
}

/// Specification of a structured random effect.
///
/// `hypers` holds the precision for `iid` and `rw2`, and
/// `(precision of intercept, precision of slope, correlation)` for `iid2d`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EffectSpec {
    pub kind: EffectKind,
    pub index: IndexSpec,
    #[cfg_attr(feature = "serde", serde(default))]
    pub scale_model: bool,
    #[cfg_attr(feature = "serde", serde(default))]
    pub hypers: Vec<HyperSpec>,
}

impl EffectSpec {
    pub fn iid(index: IndexSpec) -> Self {
        EffectSpec {
            kind: EffectKind::Iid,
            index,
            scale_model: false,
            hypers: vec![default_precision()],
        }
    }

    pub fn iid2d(index: IndexSpec) -> Self {
        EffectSpec {
            kind: EffectKind::Iid2d,
            index,
            scale_model: false,
            hypers: vec![default_precision(), default_precision(), default_correlation()],
        }
    }

    pub fn rw2(index: IndexSpec, scale_model: bool) -> Self {
        EffectSpec {
            kind: EffectKind::Rw2,
            index,
            scale_model,
            hypers: vec![default_precision()],
        }
    }

    pub fn with_hypers(mut self, hypers: Vec<HyperSpec>) -> Self {
        self.hypers = hypers;
        self
    }

    /// Hyperparameters with defaults filled in for any left unspecified.
    pub fn resolved_hypers(&self) -> Result<Vec<HyperSpec>> {
        let defaults = match self.kind {
            EffectKind::Iid | EffectKind::Rw2 => vec![default_precision()],
            EffectKind::Iid2d => vec![default_precision(), default_precision(), default_correlation()],
        };
        if self.hypers.len() > defaults.len() {
            return Err(Error::spec(format!(
                "{:?} effect takes {} hyperparameters, {} given",
                self.kind,
                defaults.len(),
                self.hypers.len()
            )));
        }
        let mut out = defaults;
        for (slot, h) in out.iter_mut().zip(&self.hypers) {
            h.prior.validate()?;
            *slot = *h;
        }
        Ok(out)
    }
}

/// Default precision prior: `P(σ > 1) = 0.01`.
pub fn default_precision() -> HyperSpec {
    HyperSpec::pc_prec(1.0, 0.01)
}

/// Default correlation prior: normal on the Fisher-z scale.
pub fn default_correlation() -> HyperSpec {
    HyperSpec::new(PriorSpec::Gaussian {
        mean: 0.0,
        precision: 0.4,
    })
}

/// Second-order random-walk structure matrix `DᵀD` for `n ≥ 3` nodes.
pub fn rw2_precision(n: usize) -> Result<SparsePrecision> {
    if n < 3 {
        return Err(Error::domain(format!("rw2 needs at least 3 nodes, got {n}")));
    }
    let stencil = [1.0, -2.0, 1.0];
    let mut trip = Vec::with_capacity(9 * (n - 2));
    for k in 0..n - 2 {
        for a in 0..3 {
            for b in 0..=a {
                trip.push((k + a, k + b, stencil[a] * stencil[b]));
            }
        }
    }
    let matrix = SymCsc::from_triplets(n, &trip)?;
    // Nonzero eigenvalues of DᵀD are the eigenvalues of the banded DDᵀ.
    let m = n - 2;
    let mut dd = Vec::new();
    for i in 0..m {
        dd.push((i, i, 6.0));
        if i + 1 < m {
            dd.push((i + 1, i, -4.0));
        }
        if i + 2 < m {
            dd.push((i + 2, i, 1.0));
        }
    }
    let dd = SymCsc::from_triplets(m, &dd)?;
    let sym = Arc::new(SymbolicCholesky::analyze(&dd));
    let log_det = sym.factor(&dd)?.log_det();
    Ok(SparsePrecision::new(matrix, 2, log_det))
}

/// `τ·I_n`.
pub fn iid_precision(n: usize, tau: f64) -> Result<SparsePrecision> {
    if n == 0 {
        return Err(Error::domain("iid effect needs n >= 1"));
    }
    if !(tau > 0.0) {
        return Err(Error::domain(format!("precision must be positive, got {tau}")));
    }
    let matrix = SymCsc::identity(n).scaled(tau);
    Ok(SparsePrecision::new(matrix, 0, n as f64 * math::ln(tau)))
}

/// Inverse of the 2×2 covariance `[[1/τ_v, ρ], [ρ, 1/τ_w]]` as lower-triangle
/// entries `(a, b, c)` of `[[a, b], [b, c]]`.
pub fn iid2d_block(tau_v: f64, tau_w: f64, rho: f64) -> Result<[f64; 3]> {
    if !(tau_v > 0.0) || !(tau_w > 0.0) {
        return Err(Error::domain("iid2d precisions must be positive"));
    }
    let (var_v, var_w) = (1.0 / tau_v, 1.0 / tau_w);
    let det = var_v * var_w - rho * rho;
    if !(det > 0.0) || !(rho * rho < var_v * var_w) {
        return Err(Error::domain(format!(
            "iid2d covariance is not positive definite (rho = {rho}, tau_v = {tau_v}, tau_w = {tau_w})"
        )));
    }
    Ok([var_w / det, -rho / det, var_v / det])
}

/// Block-diagonal precision of `n_pairs` bivariate intercept/slope pairs.
/// Coordinates are interleaved: `(v_1, w_1, v_2, w_2, ...)`.
pub fn iid2d_precision(n_pairs: usize, tau_v: f64, tau_w: f64, rho: f64) -> Result<SparsePrecision> {
    if n_pairs == 0 {
        return Err(Error::domain("iid2d effect needs at least one pair"));
    }
    let [a, b, c] = iid2d_block(tau_v, tau_w, rho)?;
    let mut trip = Vec::with_capacity(3 * n_pairs);
    for i in 0..n_pairs {
        trip.push((2 * i, 2 * i, a));
        trip.push((2 * i + 1, 2 * i, b));
        trip.push((2 * i + 1, 2 * i + 1, c));
    }
    let matrix = SymCsc::from_triplets(2 * n_pairs, &trip)?;
    Ok(SparsePrecision::new(matrix, 0, n_pairs as f64 * math::ln(a * c - b * b)))
}

/// Scales `Q` so that the geometric mean of the marginal variances of its
/// generalised inverse, constrained to the complement of the null space, is 1.
pub fn scale_precision(q: &SparsePrecision) -> Result<SparsePrecision> {
    let n = q.dim();
    let r = q.rank_deficiency();
    if r > 2 {
        return Err(Error::domain(format!("scale_precision supports rank deficiency 0..=2, got {r}")));
    }
    if n > MAX_SCALE_DIM {
        return Err(Error::domain(format!(
            "scale_precision forms a dense inverse and is limited to n <= {MAX_SCALE_DIM}, got {n}"
        )));
    }
    if r >= n {
        return Err(Error::domain("rank deficiency must be smaller than the dimension"));
    }
    let dense = q.matrix().to_dense();
    let eig = dense.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let largest = eig.eigenvalues[order[n - 1]].abs().max(f64::MIN_POSITIVE);
    let tol = 1e-9 * largest;
    if eig.eigenvalues[order[r]] <= tol {
        return Err(Error::numeric(
            "precision matrix is numerically indefinite or has a larger null space than declared",
        ));
    }
    for &k in &order[..r] {
        if eig.eigenvalues[k].abs() > tol {
            return Err(Error::numeric("declared null space does not match the matrix"));
        }
    }
    // (Q + N Nᵀ)⁻¹ = Q⁺ + N Nᵀ for an orthonormal null-space basis N.
    let mut nnt = DMatrix::zeros(n, n);
    for &k in &order[..r] {
        let v = eig.eigenvectors.column(k);
        nnt += &v * v.transpose();
    }
    let augmented = &dense + &nnt;
    let inv = augmented
        .cholesky()
        .ok_or_else(|| Error::numeric("precision matrix is numerically indefinite"))?
        .inverse();
    let mut log_sum = 0.0;
    for i in 0..n {
        let var = inv[(i, i)] - nnt[(i, i)];
        if !(var > 0.0) {
            return Err(Error::numeric("non-positive constrained marginal variance"));
        }
        log_sum += math::ln(var);
    }
    let factor = math::exp(log_sum / n as f64);
    Ok(q.scaled(factor))
}

/// Equal-width grouping of a covariate over `[min, max]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Binning {
    min: f64,
    width: f64,
    n_groups: usize,
}

impl Binning {
    pub fn new(values: &[f64], n_groups: usize) -> Result<Self> {
        if n_groups < 2 {
            return Err(Error::domain("bin_covariate needs n_groups >= 2"));
        }
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in values {
            if !v.is_finite() {
                return Err(Error::domain("covariate values must be finite"));
            }
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !(hi > lo) {
            return Err(Error::domain("covariate values are constant (zero-width range)"));
        }
        Ok(Binning {
            min: lo,
            width: (hi - lo) / n_groups as f64,
            n_groups,
        })
    }

    pub fn n_groups(&self) -> usize {
        self.n_groups
    }

    /// 1-based bin of `value`; values outside the fitted range are clamped to
    /// the first or last bin.
    pub fn index_of(&self, value: f64) -> usize {
        let pos = math::floor((value - self.min) / self.width);
        if !(pos >= 0.0) {
            1
        } else if pos >= self.n_groups as f64 {
            self.n_groups
        } else {
            pos as usize + 1
        }
    }

    pub fn midpoints(&self) -> Vec<f64> {
        (0..self.n_groups)
            .map(|k| self.min + (k as f64 + 0.5) * self.width)
            .collect()
    }
}

/// Groups `values` into `n_groups` half-open equal-width bins `[lo, hi)`
/// (the last bin closed). Returns 1-based indices and the bin midpoints.
pub fn bin_covariate(values: &[f64], n_groups: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    let binning = Binning::new(values, n_groups)?;
    let idx = values.iter().map(|&v| binning.index_of(v)).collect();
    Ok((idx, binning.midpoints()))
}

/// Log-density of `x` under the (possibly improper) Gaussian with precision
/// `τ·Q`. Null-space directions carry no normaliser.
pub fn gmrf_log_density(x: &[f64], q: &SparsePrecision, tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::domain("precision scale must be positive"));
    }
    let quad = q.matrix().quad_form(x)?;
    let rank = (q.dim() - q.rank_deficiency()) as f64;
    Ok(0.5 * rank * (math::ln(tau) - math::LN_2PI) + 0.5 * q.log_det_constant() - 0.5 * tau * quad)
}
