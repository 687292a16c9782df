//! Assembly of the stacked latent Gaussian model.
//!
//! Rows are ordered `[longitudinal blocks..., cause blocks...]`; each cause
//! block holds one row per individual. The latent field is laid out as
//! `[fixed effects per block, structured effects, linear-predictor copies]`.
//! Copy scalings enter the design as θ-dependent weights, so the sparsity
//! pattern of the posterior precision does not depend on θ and is analysed
//! once here.

use alloc::{
    collections::{BTreeMap, BTreeSet},
    format,
    string::{String, ToString},
    sync::Arc,
    vec,
    vec::Vec,
};
use core::ops::Range;

use crate::data::{Covariates, JointDataset};
use crate::error::{Error, Result};
use crate::families::{self, LogLik, SurvivalOutcome};
use crate::gmrf::{self, Binning, EffectKind, EffectSpec, HyperSpec, IndexSpec, PriorSpec, SparsePrecision};
use crate::math;
use crate::sparse::{SymCsc, SymbolicCholesky};

/// Precision tying a linear-predictor coordinate to its additive definition.
pub const TIE_PRECISION: f64 = 1e6;

pub const DEFAULT_FIXED_PRECISION: f64 = 0.001;

/// Observation family of a block.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "family", rename_all = "snake_case"))]
pub enum Family {
    Gaussian {
        #[cfg_attr(feature = "serde", serde(default))]
        precision: Option<HyperSpec>,
    },
    Poisson,
    Exponential,
    Weibull {
        #[cfg_attr(feature = "serde", serde(default))]
        shape: Option<HyperSpec>,
    },
}

impl Family {
    pub fn gaussian() -> Self {
        Family::Gaussian { precision: None }
    }

    pub fn weibull() -> Self {
        Family::Weibull { shape: None }
    }

    pub fn is_survival(&self) -> bool {
        matches!(self, Family::Exponential | Family::Weibull { .. })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Family::Gaussian { .. } => "gaussian",
            Family::Poisson => "poisson",
            Family::Exponential => "exponential",
            Family::Weibull { .. } => "weibull",
        }
    }
}

/// Default prior of the Weibull shape: `10·ln α ~ N(0, 100)`.
pub fn default_shape() -> HyperSpec {
    HyperSpec::new(PriorSpec::GaussianOnScaledLog {
        scale: 10.0,
        precision: 0.01,
    })
}

/// Default copy scaling: `N(0, 10²)`, starting at 1.
pub fn default_scaling() -> HyperSpec {
    HyperSpec::new(PriorSpec::Gaussian {
        mean: 0.0,
        precision: 0.01,
    })
    .with_initial(1.0)
}

fn default_fixed_precision() -> f64 {
    DEFAULT_FIXED_PRECISION
}

/// An effect entering a block's predictor, optionally multiplied by a covariate.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Attachment {
    pub effect: String,
    #[cfg_attr(feature = "serde", serde(default))]
    pub weight: Option<String>,
}

/// One response block. Fixed-effect names are covariates, except the
/// reserved `intercept` (constant 1) and `time` (the row's time).
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BlockSpec {
    #[cfg_attr(feature = "serde", serde(default))]
    pub name: Option<String>,
    #[cfg_attr(feature = "serde", serde(flatten))]
    pub family: Family,
    #[cfg_attr(feature = "serde", serde(default))]
    pub fixed: Vec<String>,
    #[cfg_attr(feature = "serde", serde(default))]
    pub effects: Vec<Attachment>,
}

impl BlockSpec {
    pub fn new(family: Family) -> Self {
        BlockSpec {
            name: None,
            family,
            fixed: Vec::new(),
            effects: Vec::new(),
        }
    }

    pub fn named(mut self, name: &str) -> Self {
        self.name = Some(name.to_string());
        self
    }

    pub fn fixed(mut self, names: &[&str]) -> Self {
        self.fixed.extend(names.iter().map(|s| s.to_string()));
        self
    }

    pub fn attach(mut self, effect: &str) -> Self {
        self.effects.push(Attachment {
            effect: effect.to_string(),
            weight: None,
        });
        self
    }

    pub fn attach_weighted(mut self, effect: &str, weight: &str) -> Self {
        self.effects.push(Attachment {
            effect: effect.to_string(),
            weight: Some(weight.to_string()),
        });
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct NamedEffect {
    pub name: String,
    #[cfg_attr(feature = "serde", serde(flatten))]
    pub spec: EffectSpec,
}

/// Part of an intercept/slope effect that a copy reuses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Component {
    #[default]
    Full,
    Intercept,
    Slope,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum CopySource {
    Effect {
        name: String,
        #[cfg_attr(feature = "serde", serde(default))]
        component: Component,
    },
    /// The source block's predictor evaluated at each individual's survival
    /// time.
    LinearPredictor { block: String },
}

/// Reuse of a latent component in another block, multiplied by a scaling.
/// A `fixed` prior on the scaling holds it constant.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CopyLink {
    #[cfg_attr(feature = "serde", serde(default))]
    pub name: Option<String>,
    pub source: CopySource,
    pub target: String,
    #[cfg_attr(feature = "serde", serde(default = "default_scaling"))]
    pub scaling: HyperSpec,
}

impl CopyLink {
    pub fn effect(name: &str, component: Component, target: &str) -> Self {
        CopyLink {
            name: None,
            source: CopySource::Effect {
                name: name.to_string(),
                component,
            },
            target: target.to_string(),
            scaling: default_scaling(),
        }
    }

    pub fn linear_predictor(block: &str, target: &str) -> Self {
        CopyLink {
            name: None,
            source: CopySource::LinearPredictor {
                block: block.to_string(),
            },
            target: target.to_string(),
            scaling: default_scaling(),
        }
    }

    pub fn named(mut self, name: &str) -> Self {
        self.name = Some(name.to_string());
        self
    }

    pub fn with_scaling(mut self, scaling: HyperSpec) -> Self {
        self.scaling = scaling;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelSpec {
    #[cfg_attr(feature = "serde", serde(default))]
    pub longitudinal: Vec<BlockSpec>,
    pub causes: Vec<BlockSpec>,
    #[cfg_attr(feature = "serde", serde(default))]
    pub effects: Vec<NamedEffect>,
    #[cfg_attr(feature = "serde", serde(default))]
    pub copy_links: Vec<CopyLink>,
    #[cfg_attr(feature = "serde", serde(default = "default_fixed_precision"))]
    pub fixed_effect_prior_precision: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            longitudinal: Vec::new(),
            causes: Vec::new(),
            effects: Vec::new(),
            copy_links: Vec::new(),
            fixed_effect_prior_precision: default_fixed_precision(),
        }
    }
}

impl ModelSpec {
    pub fn new() -> Self {
        ModelSpec::default()
    }

    pub fn longitudinal(mut self, block: BlockSpec) -> Self {
        self.longitudinal.push(block);
        self
    }

    pub fn cause(mut self, block: BlockSpec) -> Self {
        self.causes.push(block);
        self
    }

    pub fn effect(mut self, name: &str, spec: EffectSpec) -> Self {
        self.effects.push(NamedEffect {
            name: name.to_string(),
            spec,
        });
        self
    }

    pub fn copy(mut self, link: CopyLink) -> Self {
        self.copy_links.push(link);
        self
    }

    /// Block names after defaults: `longitudinal` (or `longitudinal1..M`)
    /// and `cause1..C`.
    pub fn block_names(&self) -> Vec<String> {
        let m = self.longitudinal.len();
        let long = self.longitudinal.iter().enumerate().map(|(k, b)| {
            b.name.clone().unwrap_or_else(|| {
                if m == 1 {
                    String::from("longitudinal")
                } else {
                    format!("longitudinal{}", k + 1)
                }
            })
        });
        let causes = self
            .causes
            .iter()
            .enumerate()
            .map(|(j, b)| b.name.clone().unwrap_or_else(|| format!("cause{}", j + 1)));
        long.chain(causes).collect()
    }
}

/// Internal (unconstrained) parameterisation of a hyperparameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transform {
    Log,
    FisherZ,
    Identity,
}

impl Transform {
    pub fn to_natural(self, s: f64) -> f64 {
        match self {
            Transform::Log => math::exp(s),
            Transform::FisherZ => math::tanh(s),
            Transform::Identity => s,
        }
    }

    pub fn to_internal(self, v: f64) -> Result<f64> {
        match self {
            Transform::Log if v > 0.0 => Ok(math::ln(v)),
            Transform::FisherZ if v > -1.0 && v < 1.0 => Ok(math::atanh(v)),
            Transform::Identity if v.is_finite() => Ok(v),
            _ => Err(Error::domain(format!("value {v} outside the hyperparameter domain"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HyperRole {
    FamilyPrecision { block: usize },
    WeibullShape { block: usize },
    /// `component` is 0 for `iid`/`rw2`, 0 or 1 (intercept, slope) for `iid2d`.
    EffectPrecision { effect: usize, component: usize },
    Correlation { effect: usize },
    CopyScaling { link: usize },
}

/// One hyperparameter, estimated or fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperSlot {
    pub name: String,
    pub role: HyperRole,
    pub transform: Transform,
    pub prior: PriorSpec,
    /// Starting value on the internal scale (the fixed value's internal image
    /// for fixed slots).
    pub initial: f64,
}

impl HyperSlot {
    pub fn is_fixed(&self) -> bool {
        self.prior.is_fixed()
    }

    pub fn is_precision(&self) -> bool {
        matches!(
            self.role,
            HyperRole::FamilyPrecision { .. } | HyperRole::EffectPrecision { .. }
        )
    }

    /// Log prior density of the internal value `s`, Jacobian included.
    pub fn log_prior(&self, s: f64) -> f64 {
        let v = self.transform.to_natural(s);
        match self.prior {
            PriorSpec::PcPrec { u, alpha } => families::pc_prec_log_prior(v, u, alpha) + s,
            PriorSpec::GaussianOnScaledLog { scale, precision } => {
                families::scaled_log_gaussian_prior(v, scale, precision) + s
            }
            PriorSpec::Gaussian { mean, precision } => {
                let d = s - mean;
                0.5 * (math::ln(precision) - math::LN_2PI) - 0.5 * precision * d * d
            }
            PriorSpec::Fixed { .. } => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Longitudinal { marker: usize },
    Cause { cause: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum FamilyEval {
    Gaussian { slot: usize },
    Poisson,
    Exponential,
    Weibull { slot: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockInfo {
    pub name: String,
    pub kind: BlockKind,
    pub family: &'static str,
    pub rows: Range<usize>,
    pub fixed_offset: usize,
    pub fixed_names: Vec<String>,
    family_eval: FamilyEval,
    attachments: Vec<(usize, Option<String>)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Observation {
    Value(f64),
    Survival(SurvivalOutcome),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StackedRow {
    pub block: usize,
    /// Dense individual index, from 1.
    pub individual: u64,
    pub time: f64,
    pub observation: Observation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentKind {
    Fixed { block: usize },
    Effect { effect: usize, kind: EffectKind },
    LinearPredictor { block: usize },
}

/// A contiguous range of latent coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSegment {
    pub name: String,
    pub kind: SegmentKind,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EffectInfo {
    pub name: String,
    pub spec: EffectSpec,
    /// Number of index values (pairs for `iid2d`).
    pub units: usize,
    pub offset: usize,
    pub binning: Option<Binning>,
    slots: Vec<usize>,
    /// Unit-precision structure for `iid` and `rw2`.
    template: Option<SparsePrecision>,
    template_pos: Vec<usize>,
}

impl EffectInfo {
    pub fn dim(&self) -> usize {
        match self.spec.kind {
            EffectKind::Iid2d => 2 * self.units,
            _ => self.units,
        }
    }

    pub fn rank_deficiency(&self) -> usize {
        self.template.as_ref().map_or(0, |t| t.rank_deficiency())
    }

    /// Covariate value represented by each index: bin midpoints for binned
    /// effects, `1..=size` otherwise.
    pub fn locations(&self) -> Vec<f64> {
        match &self.binning {
            Some(b) => b.midpoints(),
            None => (1..=self.units).map(|k| k as f64).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Entry {
    col: usize,
    value: f64,
    link: Option<usize>,
}

/// Sparse rows with optional copy-scaling multipliers and the positions of
/// their outer products in the posterior pattern.
#[derive(Debug, Clone, Default, PartialEq)]
struct Design {
    ptr: Vec<usize>,
    entries: Vec<Entry>,
    pair_ptr: Vec<usize>,
    pair_pos: Vec<usize>,
    /// Row visiting order for accumulations. Sorted on row content so that
    /// sums do not depend on the order of the input records.
    order: Vec<usize>,
}

impl Design {
    fn new() -> Self {
        Design {
            ptr: vec![0],
            ..Design::default()
        }
    }

    fn push_row(&mut self, row: &[Entry]) {
        self.entries.extend_from_slice(row);
        self.ptr.push(self.entries.len());
    }

    fn n_rows(&self) -> usize {
        self.ptr.len() - 1
    }

    /// Sets the accumulation order from the row entries and a per-row key.
    fn canonicalize(&mut self, keys: &[[u64; 3]]) {
        let content = |r: usize| {
            self.entries[self.row(r)]
                .iter()
                .map(|e| (e.col, e.value.to_bits(), e.link))
                .collect::<Vec<_>>()
        };
        let mut order: Vec<usize> = (0..self.n_rows()).collect();
        order.sort_by_cached_key(|&r| (keys[r], content(r)));
        self.order = order;
    }

    fn row(&self, r: usize) -> Range<usize> {
        self.ptr[r]..self.ptr[r + 1]
    }

    fn pairs(&self, r: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        let range = self.row(r);
        range.clone().flat_map(move |k| (range.start..=k).map(move |l| (k, l)))
    }

    fn locate_pairs(&mut self, pattern: &SymCsc) {
        self.pair_ptr = vec![0];
        self.pair_pos.clear();
        for r in 0..self.n_rows() {
            for (k, l) in self.pairs(r).collect::<Vec<_>>() {
                let pos = pattern
                    .position(self.entries[k].col, self.entries[l].col)
                    .expect("pattern contains every design pair");
                self.pair_pos.push(pos);
            }
            self.pair_ptr.push(self.pair_pos.len());
        }
    }

    fn values(&self, scalings: &[f64]) -> Vec<f64> {
        self.entries
            .iter()
            .map(|e| e.link.map_or(e.value, |l| e.value * scalings[l]))
            .collect()
    }

    fn apply(&self, values: &[f64], x: &[f64]) -> Vec<f64> {
        (0..self.n_rows())
            .map(|r| self.row(r).map(|k| values[k] * x[self.entries[k].col]).sum())
            .collect()
    }

    /// Adds `Σ_r w_r a_r a_rᵀ` into pattern-ordered `out`.
    fn add_outer(&self, values: &[f64], weights: &[f64], out: &mut [f64]) {
        for &r in &self.order {
            let w = weights[r];
            if w == 0.0 {
                continue;
            }
            let mut p = self.pair_ptr[r];
            let range = self.row(r);
            for k in range.clone() {
                for l in range.start..=k {
                    let mut c = w * values[k] * values[l];
                    if k != l && self.entries[k].col == self.entries[l].col {
                        c *= 2.0;
                    }
                    out[self.pair_pos[p]] += c;
                    p += 1;
                }
            }
        }
    }

    /// `Aᵀ g`.
    fn transpose_apply(&self, values: &[f64], g: &[f64], out: &mut [f64]) {
        for &r in &self.order {
            for k in self.row(r) {
                out[self.entries[k].col] += values[k] * g[r];
            }
        }
    }
}

/// The assembled model. Immutable; every evaluation takes θ explicitly.
#[derive(Debug, Clone)]
pub struct StackedModel {
    blocks: Vec<BlockInfo>,
    rows: Vec<StackedRow>,
    effects: Vec<EffectInfo>,
    segments: Vec<LatentSegment>,
    hypers: Vec<HyperSlot>,
    free: Vec<usize>,
    link_slots: Vec<usize>,
    link_names: Vec<String>,
    /// `eta_offset[b]` is the first linear-predictor coordinate of block `b`.
    eta_offset: Vec<Option<usize>>,
    n_latent: usize,
    n_individuals: usize,
    n_fixed: usize,
    fixed_precision: f64,
    design: Design,
    ties: Design,
    pattern: SymCsc,
    symbolic: Arc<SymbolicCholesky>,
    fixed_pos: Vec<usize>,
    original_ids: Vec<u64>,
    constraints: Vec<Range<usize>>,
    links: Vec<(LinkSource, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
enum LinkSource {
    Effect { effect: usize, component: Component },
    LinearPredictor { block: usize },
}

/// Covariate lookup for one row: the row's own covariates first, then the
/// individual's survival covariates.
#[derive(Debug, Clone, Copy)]
struct RowCtx<'a> {
    individual: u64,
    time: f64,
    own: &'a Covariates,
    baseline: &'a Covariates,
}

impl RowCtx<'_> {
    fn covariate(&self, name: &str) -> Option<f64> {
        match name {
            "intercept" => Some(1.0),
            "time" => Some(self.time),
            _ => self.own.get(name).or_else(|| self.baseline.get(name)).copied(),
        }
    }

    fn require(&self, name: &str, block: &str) -> Result<f64> {
        self.covariate(name).ok_or_else(|| {
            Error::spec(format!(
                "unknown covariate `{name}` for block `{block}` (individual {})",
                self.individual
            ))
        })
    }
}

pub fn assemble(spec: &ModelSpec, data: &JointDataset) -> Result<StackedModel> {
    Builder::new(spec, data)?.build()
}

struct Builder<'a> {
    spec: &'a ModelSpec,
    data: &'a JointDataset,
    effects: Vec<EffectInfo>,
    links: Vec<(LinkSource, usize)>,
    blocks: Vec<BlockInfo>,
    eta_offset: Vec<Option<usize>>,
}

impl<'a> Builder<'a> {
    fn new(spec: &'a ModelSpec, data: &'a JointDataset) -> Result<Self> {
        if spec.causes.len() != data.n_causes() as usize {
            return Err(Error::spec(format!(
                "model has {} cause blocks but the data has {} causes",
                spec.causes.len(),
                data.n_causes()
            )));
        }
        if spec.longitudinal.len() != data.n_markers() {
            return Err(Error::spec(format!(
                "model has {} longitudinal blocks but the data has {} markers",
                spec.longitudinal.len(),
                data.n_markers()
            )));
        }
        if !(spec.fixed_effect_prior_precision > 0.0) {
            return Err(Error::spec("fixed_effect_prior_precision must be positive"));
        }
        let names = spec.block_names();
        let unique: BTreeSet<&String> = names.iter().collect();
        if unique.len() != names.len() {
            return Err(Error::spec("block names must be unique"));
        }
        for (b, block) in spec.longitudinal.iter().enumerate() {
            if block.family.is_survival() {
                return Err(Error::spec(format!(
                    "longitudinal block `{}` needs a gaussian or poisson family",
                    names[b]
                )));
            }
        }
        for (j, block) in spec.causes.iter().enumerate() {
            if !block.family.is_survival() {
                return Err(Error::spec(format!(
                    "cause block `{}` needs an exponential or weibull family",
                    names[spec.longitudinal.len() + j]
                )));
            }
        }
        let mut effect_index = BTreeMap::new();
        for (k, e) in spec.effects.iter().enumerate() {
            if effect_index.insert(e.name.clone(), k).is_some() {
                return Err(Error::spec(format!("effect `{}` declared twice", e.name)));
            }
            if let (EffectKind::Rw2, IndexSpec::Covariate { size, .. }) = (e.spec.kind, &e.spec.index) {
                if *size < 3 {
                    return Err(Error::spec(format!("rw2 effect `{}` needs size >= 3", e.name)));
                }
            }
            if let IndexSpec::Binned { n_groups, .. } = e.spec.index {
                if n_groups < 3 && e.spec.kind == EffectKind::Rw2 {
                    return Err(Error::spec(format!("rw2 effect `{}` needs at least 3 bins", e.name)));
                }
            }
        }
        let block_index = |name: &str| -> Result<usize> {
            names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| Error::spec(format!("unknown block `{name}`")))
        };
        let lookup_effect = |name: &str| -> Result<usize> {
            effect_index
                .get(name)
                .copied()
                .ok_or_else(|| Error::spec(format!("unknown effect `{name}`")))
        };

        let mut links = Vec::with_capacity(spec.copy_links.len());
        for link in &spec.copy_links {
            let target = block_index(&link.target)?;
            let source = match &link.source {
                CopySource::Effect { name, component } => {
                    let effect = lookup_effect(name)?;
                    if *component != Component::Full && spec.effects[effect].spec.kind != EffectKind::Iid2d {
                        return Err(Error::spec(format!(
                            "copy of `{name}`: intercept/slope components exist only for iid2d effects"
                        )));
                    }
                    LinkSource::Effect {
                        effect,
                        component: *component,
                    }
                }
                CopySource::LinearPredictor { block } => {
                    let b = block_index(block)?;
                    if b == target {
                        return Err(Error::spec(format!("block `{block}` copies its own linear predictor")));
                    }
                    LinkSource::LinearPredictor { block: b }
                }
            };
            link.scaling.prior.validate()?;
            links.push((source, target));
        }
        check_acyclic(&links, names.len(), &names)?;

        let all_blocks: Vec<&BlockSpec> = spec.longitudinal.iter().chain(&spec.causes).collect();
        let mut used = vec![false; spec.effects.len()];
        let mut attachments = Vec::with_capacity(all_blocks.len());
        for block in &all_blocks {
            let mut atts = Vec::new();
            for a in &block.effects {
                let k = lookup_effect(&a.effect)?;
                used[k] = true;
                atts.push((k, a.weight.clone()));
            }
            attachments.push(atts);
        }
        for (source, _) in &links {
            if let LinkSource::Effect { effect, .. } = source {
                used[*effect] = true;
            }
        }
        if let Some(k) = used.iter().position(|u| !u) {
            return Err(Error::spec(format!(
                "effect `{}` is declared but never attached or copied",
                spec.effects[k].name
            )));
        }

        let mut blocks = Vec::with_capacity(all_blocks.len());
        for (b, (block, atts)) in all_blocks.iter().zip(attachments).enumerate() {
            let kind = if b < spec.longitudinal.len() {
                BlockKind::Longitudinal { marker: b }
            } else {
                BlockKind::Cause {
                    cause: (b - spec.longitudinal.len() + 1) as u32,
                }
            };
            let fixed_unique: BTreeSet<&String> = block.fixed.iter().collect();
            if fixed_unique.len() != block.fixed.len() {
                return Err(Error::spec(format!("block `{}` repeats a fixed effect", names[b])));
            }
            blocks.push(BlockInfo {
                name: names[b].clone(),
                kind,
                family: block.family.name(),
                rows: 0..0,
                fixed_offset: 0,
                fixed_names: block.fixed.clone(),
                family_eval: FamilyEval::Poisson,
                attachments: atts,
            });
        }

        let effects = spec
            .effects
            .iter()
            .map(|e| EffectInfo {
                name: e.name.clone(),
                spec: e.spec.clone(),
                units: 0,
                offset: 0,
                binning: None,
                slots: Vec::new(),
                template: None,
                template_pos: Vec::new(),
            })
            .collect();

        Ok(Builder {
            spec,
            data,
            eta_offset: vec![None; names.len()],
            effects,
            links,
            blocks,
        })
    }

    fn unit_of(&self, e: usize, ctx: &RowCtx, block: &str) -> Result<usize> {
        let info = &self.effects[e];
        match &info.spec.index {
            IndexSpec::Individual => Ok((ctx.individual - 1) as usize),
            IndexSpec::Covariate { name, size } => {
                let v = ctx.require(name, block)?;
                if math::floor(v) != v || v < 1.0 || v > *size as f64 {
                    return Err(Error::spec(format!(
                        "effect `{}` is indexed by `{name}`, which must be an integer in 1..={size} (got {v}); \
                         continuous covariates must be binned (index by = \"binned\")",
                        info.name
                    )));
                }
                Ok(v as usize - 1)
            }
            IndexSpec::Binned { covariate, .. } => {
                let v = ctx.require(covariate, block)?;
                let binning = info.binning.as_ref().expect("binning fitted before rows are built");
                Ok(binning.index_of(v) - 1)
            }
        }
    }

    fn push_effect(
        &self,
        e: usize,
        component: Component,
        weight: f64,
        link: Option<usize>,
        ctx: &RowCtx,
        block: &str,
        out: &mut Vec<Entry>,
    ) -> Result<()> {
        let unit = self.unit_of(e, ctx, block)?;
        let info = &self.effects[e];
        match info.spec.kind {
            EffectKind::Iid | EffectKind::Rw2 => out.push(Entry {
                col: info.offset + unit,
                value: weight,
                link,
            }),
            EffectKind::Iid2d => {
                if component != Component::Slope {
                    out.push(Entry {
                        col: info.offset + 2 * unit,
                        value: weight,
                        link,
                    });
                }
                if component != Component::Intercept {
                    out.push(Entry {
                        col: info.offset + 2 * unit + 1,
                        value: weight * ctx.time,
                        link,
                    });
                }
            }
        }
        Ok(())
    }

    fn block_entries(&self, b: usize, ctx: &RowCtx, out: &mut Vec<Entry>) -> Result<()> {
        let block = &self.blocks[b];
        for (k, name) in block.fixed_names.iter().enumerate() {
            out.push(Entry {
                col: block.fixed_offset + k,
                value: ctx.require(name, &block.name)?,
                link: None,
            });
        }
        for (e, weight) in &block.attachments {
            let w = match weight {
                Some(name) => ctx.require(name, &block.name)?,
                None => 1.0,
            };
            self.push_effect(*e, Component::Full, w, None, ctx, &block.name, out)?;
        }
        for (l, (source, target)) in self.links.iter().enumerate() {
            if *target != b {
                continue;
            }
            match source {
                LinkSource::Effect { effect, component } => {
                    self.push_effect(*effect, *component, 1.0, Some(l), ctx, &block.name, out)?
                }
                LinkSource::LinearPredictor { block: s } => out.push(Entry {
                    col: self.eta_offset[*s].expect("offset assigned") + (ctx.individual - 1) as usize,
                    value: 1.0,
                    link: Some(l),
                }),
            }
        }
        Ok(())
    }

    fn build(mut self) -> Result<StackedModel> {
        let data = self.data;
        let spec = self.spec;
        let n_ind = data.n_individuals();
        let n_long_blocks = spec.longitudinal.len();

        // Row contexts in stacked order.
        let mut contexts: Vec<(usize, RowCtx, Observation)> = Vec::new();
        for (b, block_spec) in spec.longitudinal.iter().enumerate() {
            let start = contexts.len();
            for (k, rec) in data.longitudinal().iter().enumerate() {
                if rec.marker != b {
                    continue;
                }
                if block_spec.family == Family::Poisson && (rec.value < 0.0 || math::floor(rec.value) != rec.value) {
                    return Err(Error::Validation(format!(
                        "longitudinal row {}: poisson value {} is not a nonnegative integer",
                        k + 1,
                        rec.value
                    )));
                }
                let surv = data.survival_of(rec.individual_id);
                contexts.push((
                    b,
                    RowCtx {
                        individual: rec.individual_id,
                        time: rec.time,
                        own: &rec.covariates,
                        baseline: &surv.covariates,
                    },
                    Observation::Value(rec.value),
                ));
            }
            self.blocks[b].rows = start..contexts.len();
        }
        for j in 0..spec.causes.len() {
            let b = n_long_blocks + j;
            let start = contexts.len();
            for rec in data.survival() {
                contexts.push((
                    b,
                    RowCtx {
                        individual: rec.individual_id,
                        time: rec.time,
                        own: &rec.covariates,
                        baseline: &rec.covariates,
                    },
                    Observation::Survival(SurvivalOutcome::new(rec.time, rec.cause == (j + 1) as u32)?),
                ));
            }
            self.blocks[b].rows = start..contexts.len();
        }

        // Effect sizes and binning.
        for e in 0..self.effects.len() {
            let units = match self.effects[e].spec.index.clone() {
                IndexSpec::Individual => n_ind,
                IndexSpec::Covariate { size, .. } => size,
                IndexSpec::Binned { covariate, n_groups } => {
                    let attached: Vec<usize> = (0..self.blocks.len())
                        .filter(|&b| self.blocks[b].attachments.iter().any(|(k, _)| *k == e))
                        .collect();
                    let sources: Vec<usize> = if attached.is_empty() {
                        self.links
                            .iter()
                            .filter(|(s, _)| matches!(s, LinkSource::Effect { effect, .. } if *effect == e))
                            .map(|(_, t)| *t)
                            .collect()
                    } else {
                        attached
                    };
                    let mut values = Vec::new();
                    for (b, ctx, _) in &contexts {
                        if sources.contains(b) {
                            values.push(ctx.require(&covariate, &self.blocks[*b].name)?);
                        }
                    }
                    let binning = Binning::new(&values, n_groups).map_err(|err| {
                        Error::spec(format!("binning `{covariate}` for effect `{}`: {err}", self.effects[e].name))
                    })?;
                    self.effects[e].binning = Some(binning);
                    n_groups
                }
            };
            if units == 0 {
                return Err(Error::spec(format!("effect `{}` has size 0", self.effects[e].name)));
            }
            if self.effects[e].spec.kind == EffectKind::Rw2 && units < 3 {
                return Err(Error::spec(format!("rw2 effect `{}` needs size >= 3", self.effects[e].name)));
            }
            self.effects[e].units = units;
        }

        // Latent layout.
        let mut segments = Vec::new();
        let mut offset = 0;
        for b in 0..self.blocks.len() {
            self.blocks[b].fixed_offset = offset;
            let len = self.blocks[b].fixed_names.len();
            if len > 0 {
                segments.push(LatentSegment {
                    name: self.blocks[b].name.clone(),
                    kind: SegmentKind::Fixed { block: b },
                    offset,
                    len,
                });
            }
            offset += len;
        }
        let n_fixed = offset;
        for e in 0..self.effects.len() {
            self.effects[e].offset = offset;
            let len = self.effects[e].dim();
            segments.push(LatentSegment {
                name: self.effects[e].name.clone(),
                kind: SegmentKind::Effect {
                    effect: e,
                    kind: self.effects[e].spec.kind,
                },
                offset,
                len,
            });
            offset += len;
        }
        let eta_sources: BTreeSet<usize> = self
            .links
            .iter()
            .filter_map(|(s, _)| match s {
                LinkSource::LinearPredictor { block } => Some(*block),
                _ => None,
            })
            .collect();
        for &b in &eta_sources {
            self.eta_offset[b] = Some(offset);
            segments.push(LatentSegment {
                name: format!("eta:{}", self.blocks[b].name),
                kind: SegmentKind::LinearPredictor { block: b },
                offset,
                len: n_ind,
            });
            offset += n_ind;
        }
        let n_latent = offset;

        // Hyperparameters: families, effects, copy scalings.
        let mut hypers = Vec::new();
        let all_specs: Vec<&BlockSpec> = spec.longitudinal.iter().chain(&spec.causes).collect();
        for (b, block_spec) in all_specs.iter().enumerate() {
            let name = &self.blocks[b].name;
            self.blocks[b].family_eval = match &block_spec.family {
                Family::Gaussian { precision } => {
                    let h = precision.unwrap_or_else(gmrf::default_precision);
                    let slot = push_slot(
                        &mut hypers,
                        format!("{name}:precision"),
                        HyperRole::FamilyPrecision { block: b },
                        Transform::Log,
                        h,
                    )?;
                    FamilyEval::Gaussian { slot }
                }
                Family::Poisson => FamilyEval::Poisson,
                Family::Exponential => FamilyEval::Exponential,
                Family::Weibull { shape } => {
                    let h = shape.unwrap_or_else(default_shape);
                    let slot = push_slot(
                        &mut hypers,
                        format!("{name}:shape"),
                        HyperRole::WeibullShape { block: b },
                        Transform::Log,
                        h,
                    )?;
                    FamilyEval::Weibull { slot }
                }
            };
        }
        for e in 0..self.effects.len() {
            let resolved = self.effects[e].spec.resolved_hypers()?;
            let name = self.effects[e].name.clone();
            let slots = match self.effects[e].spec.kind {
                EffectKind::Iid | EffectKind::Rw2 => vec![push_slot(
                    &mut hypers,
                    format!("{name}:precision"),
                    HyperRole::EffectPrecision { effect: e, component: 0 },
                    Transform::Log,
                    resolved[0],
                )?],
                EffectKind::Iid2d => vec![
                    push_slot(
                        &mut hypers,
                        format!("{name}:precision_intercept"),
                        HyperRole::EffectPrecision { effect: e, component: 0 },
                        Transform::Log,
                        resolved[0],
                    )?,
                    push_slot(
                        &mut hypers,
                        format!("{name}:precision_slope"),
                        HyperRole::EffectPrecision { effect: e, component: 1 },
                        Transform::Log,
                        resolved[1],
                    )?,
                    push_slot(
                        &mut hypers,
                        format!("{name}:rho"),
                        HyperRole::Correlation { effect: e },
                        Transform::FisherZ,
                        resolved[2],
                    )?,
                ],
            };
            self.effects[e].slots = slots;
            self.effects[e].template = match self.effects[e].spec.kind {
                EffectKind::Iid => Some(gmrf::iid_precision(self.effects[e].units, 1.0)?),
                EffectKind::Rw2 => {
                    let q = gmrf::rw2_precision(self.effects[e].units)?;
                    Some(if self.effects[e].spec.scale_model {
                        gmrf::scale_precision(&q)?
                    } else {
                        q
                    })
                }
                EffectKind::Iid2d => None,
            };
        }
        let mut link_slots = Vec::with_capacity(self.links.len());
        let mut link_names = Vec::with_capacity(self.links.len());
        for (l, link) in spec.copy_links.iter().enumerate() {
            let name = link.name.clone().unwrap_or_else(|| {
                let source = match &link.source {
                    CopySource::Effect { name, component } => match component {
                        Component::Full => name.clone(),
                        Component::Intercept => format!("{name}.intercept"),
                        Component::Slope => format!("{name}.slope"),
                    },
                    CopySource::LinearPredictor { block } => format!("eta.{block}"),
                };
                format!("{}:scale:{source}", link.target)
            });
            let mut h = link.scaling;
            if h.initial.is_none() {
                h.initial = Some(1.0);
            }
            link_slots.push(push_slot(
                &mut hypers,
                name.clone(),
                HyperRole::CopyScaling { link: l },
                Transform::Identity,
                h,
            )?);
            link_names.push(name);
        }
        let free: Vec<usize> = (0..hypers.len()).filter(|&k| !hypers[k].is_fixed()).collect();

        // Design rows for observations and for linear-predictor ties.
        let mut design = Design::new();
        let mut rows = Vec::with_capacity(contexts.len());
        let mut scratch = Vec::new();
        for (b, ctx, obs) in &contexts {
            scratch.clear();
            self.block_entries(*b, ctx, &mut scratch)?;
            design.push_row(&scratch);
            rows.push(StackedRow {
                block: *b,
                individual: ctx.individual,
                time: ctx.time,
                observation: *obs,
            });
        }
        // Latest record per marker and individual, the first of equal times.
        let mut last_row: BTreeMap<(usize, u64), usize> = BTreeMap::new();
        for (k, rec) in data.longitudinal().iter().enumerate() {
            let slot = last_row.entry((rec.marker, rec.individual_id)).or_insert(k);
            if rec.time > data.longitudinal()[*slot].time {
                *slot = k;
            }
        }
        let mut ties = Design::new();
        for &b in &eta_sources {
            let z0 = self.eta_offset[b].expect("offset assigned");
            for surv in data.survival() {
                let own = match self.blocks[b].kind {
                    BlockKind::Longitudinal { marker } => last_row
                        .get(&(marker, surv.individual_id))
                        .map_or(&surv.covariates, |&k| &data.longitudinal()[k].covariates),
                    BlockKind::Cause { .. } => &surv.covariates,
                };
                let ctx = RowCtx {
                    individual: surv.individual_id,
                    time: surv.time,
                    own,
                    baseline: &surv.covariates,
                };
                scratch.clear();
                scratch.push(Entry {
                    col: z0 + (surv.individual_id - 1) as usize,
                    value: 1.0,
                    link: None,
                });
                let start = scratch.len();
                self.block_entries(b, &ctx, &mut scratch)?;
                scratch[start..].iter_mut().for_each(|e| e.value = -e.value);
                ties.push_row(&scratch);
            }
        }

        // Sparsity pattern of prior plus likelihood curvature.
        let mut pairs: Vec<(usize, usize)> = (0..n_latent).map(|i| (i, i)).collect();
        for info in &self.effects {
            match &info.template {
                Some(t) => pairs.extend(t.matrix().iter().map(|(r, c, _)| (info.offset + r, info.offset + c))),
                None => (0..info.units).for_each(|u| pairs.push((info.offset + 2 * u + 1, info.offset + 2 * u))),
            }
        }
        for d in [&design, &ties] {
            for r in 0..d.n_rows() {
                pairs.extend(d.pairs(r).map(|(k, l)| (d.entries[k].col, d.entries[l].col)));
            }
        }
        let pattern = SymCsc::from_pattern(n_latent, pairs)?;
        design.locate_pairs(&pattern);
        ties.locate_pairs(&pattern);
        let keys: Vec<[u64; 3]> = rows
            .iter()
            .map(|r| match r.observation {
                Observation::Value(y) => [r.block as u64, y.to_bits(), 0],
                Observation::Survival(o) => [r.block as u64, o.time.to_bits(), o.event as u64],
            })
            .collect();
        design.canonicalize(&keys);
        ties.canonicalize(&vec![[0; 3]; ties.n_rows()]);
        let fixed_pos = (0..n_fixed)
            .map(|i| pattern.position(i, i).expect("diagonal present"))
            .collect();
        for info in &mut self.effects {
            info.template_pos = match &info.template {
                Some(t) => t
                    .matrix()
                    .iter()
                    .map(|(r, c, _)| pattern.position(info.offset + r, info.offset + c).expect("present"))
                    .collect(),
                None => (0..info.units)
                    .flat_map(|u| {
                        let o = info.offset + 2 * u;
                        [(o, o), (o + 1, o), (o + 1, o + 1)]
                    })
                    .map(|(r, c)| pattern.position(r, c).expect("present"))
                    .collect(),
            };
        }
        let symbolic = Arc::new(SymbolicCholesky::analyze(&pattern));
        let constraints = self
            .effects
            .iter()
            .filter(|e| e.spec.kind == EffectKind::Rw2)
            .map(|e| e.offset..e.offset + e.units)
            .collect();

        Ok(StackedModel {
            blocks: self.blocks,
            rows,
            effects: self.effects,
            segments,
            hypers,
            free,
            link_slots,
            link_names,
            eta_offset: self.eta_offset,
            n_latent,
            n_individuals: n_ind,
            n_fixed,
            fixed_precision: spec.fixed_effect_prior_precision,
            design,
            ties,
            pattern,
            symbolic,
            fixed_pos,
            original_ids: data.original_ids().to_vec(),
            constraints,
            links: self.links,
        })
    }
}

fn push_slot(
    hypers: &mut Vec<HyperSlot>,
    name: String,
    role: HyperRole,
    transform: Transform,
    spec: HyperSpec,
) -> Result<usize> {
    spec.prior.validate()?;
    let allowed = match spec.prior {
        PriorSpec::PcPrec { .. } | PriorSpec::GaussianOnScaledLog { .. } => transform == Transform::Log,
        PriorSpec::Gaussian { .. } | PriorSpec::Fixed { .. } => true,
    };
    if !allowed {
        return Err(Error::spec(format!(
            "prior {:?} is only defined for positive hyperparameters (`{name}`)",
            spec.prior
        )));
    }
    let initial = match spec.prior {
        PriorSpec::Fixed { value } => transform.to_internal(value),
        _ => spec.initial.map_or(Ok(0.0), |v| transform.to_internal(v)),
    }
    .map_err(|e| Error::spec(format!("`{name}`: {e}")))?;
    hypers.push(HyperSlot {
        name,
        role,
        transform,
        prior: spec.prior,
        initial,
    });
    Ok(hypers.len() - 1)
}

fn check_acyclic(links: &[(LinkSource, usize)], n_blocks: usize, names: &[String]) -> Result<()> {
    let mut edges = vec![Vec::new(); n_blocks];
    for (source, target) in links {
        if let LinkSource::LinearPredictor { block } = source {
            edges[*block].push(*target);
        }
    }
    // 0 = unvisited, 1 = on stack, 2 = done.
    let mut state = vec![0u8; n_blocks];
    fn visit(v: usize, edges: &[Vec<usize>], state: &mut [u8]) -> bool {
        state[v] = 1;
        for &w in &edges[v] {
            if state[w] == 1 || (state[w] == 0 && !visit(w, edges, state)) {
                return false;
            }
        }
        state[v] = 2;
        true
    }
    for v in 0..n_blocks {
        if state[v] == 0 && !visit(v, &edges, &mut state) {
            return Err(Error::spec(format!(
                "copy links between linear predictors form a cycle through block `{}`",
                names[v]
            )));
        }
    }
    Ok(())
}

/// All per-θ quantities needed to evaluate the log conditional of `x`.
#[derive(Debug, Clone)]
pub struct ThetaState<'m> {
    model: &'m StackedModel,
    /// Natural-scale value of every hyperparameter slot.
    pub natural: Vec<f64>,
    design_values: Vec<f64>,
    tie_values: Vec<f64>,
    /// Prior precision values on the posterior pattern.
    pub prior: Vec<f64>,
    /// Log normaliser of the prior (null-space directions excluded).
    pub normalizer: f64,
    pub rank_deficiency: usize,
}

impl StackedModel {
    pub fn n_latent(&self) -> usize {
        self.n_latent
    }

    /// Number of estimated hyperparameters (length of θ).
    pub fn n_hyper(&self) -> usize {
        self.free.len()
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_individuals(&self) -> usize {
        self.n_individuals
    }

    pub fn n_fixed(&self) -> usize {
        self.n_fixed
    }

    pub fn rows(&self) -> &[StackedRow] {
        &self.rows
    }

    pub fn blocks(&self) -> &[BlockInfo] {
        &self.blocks
    }

    pub fn effects(&self) -> &[EffectInfo] {
        &self.effects
    }

    pub fn segments(&self) -> &[LatentSegment] {
        &self.segments
    }

    pub fn hyper_slots(&self) -> &[HyperSlot] {
        &self.hypers
    }

    /// Slot index of each entry of θ.
    pub fn free_slots(&self) -> &[usize] {
        &self.free
    }

    pub fn link_names(&self) -> &[String] {
        &self.link_names
    }

    pub fn original_ids(&self) -> &[u64] {
        &self.original_ids
    }

    pub fn pattern(&self) -> &SymCsc {
        &self.pattern
    }

    pub fn symbolic(&self) -> &Arc<SymbolicCholesky> {
        &self.symbolic
    }

    /// Coordinate ranges constrained to sum to zero (the rw2 effects).
    pub fn constraints(&self) -> &[Range<usize>] {
        &self.constraints
    }

    pub fn block_index(&self, name: &str) -> Option<usize> {
        self.blocks.iter().position(|b| b.name == name)
    }

    pub fn initial_theta(&self) -> Vec<f64> {
        self.free.iter().map(|&k| self.hypers[k].initial).collect()
    }

    /// Natural-scale values of all slots for internal θ.
    pub fn natural_values(&self, theta: &[f64]) -> Result<Vec<f64>> {
        if theta.len() != self.free.len() {
            return Err(Error::Dimension {
                expected: self.free.len(),
                got: theta.len(),
            });
        }
        let mut out: Vec<f64> = self
            .hypers
            .iter()
            .map(|h| h.transform.to_natural(h.initial))
            .collect();
        for (&k, &s) in self.free.iter().zip(theta) {
            if !s.is_finite() {
                return Err(Error::domain("non-finite hyperparameter"));
            }
            out[k] = self.hypers[k].transform.to_natural(s);
        }
        Ok(out)
    }

    /// `ln π(θ)` on the internal scale, Jacobians included.
    pub fn log_hyper_prior(&self, theta: &[f64]) -> Result<f64> {
        if theta.len() != self.free.len() {
            return Err(Error::Dimension {
                expected: self.free.len(),
                got: theta.len(),
            });
        }
        Ok(self
            .free
            .iter()
            .zip(theta)
            .map(|(&k, &s)| self.hypers[k].log_prior(s))
            .sum())
    }

    pub fn state(&self, theta: &[f64]) -> Result<ThetaState<'_>> {
        let natural = self.natural_values(theta)?;
        let scalings: Vec<f64> = self.link_slots.iter().map(|&k| natural[k]).collect();
        let design_values = self.design.values(&scalings);
        let tie_values = self.ties.values(&scalings);
        let mut prior = vec![0.0; self.pattern.nnz()];
        let mut normalizer = 0.0;
        let mut rank_deficiency = 0;
        for &p in &self.fixed_pos {
            prior[p] += self.fixed_precision;
        }
        normalizer += 0.5 * self.n_fixed as f64 * (math::ln(self.fixed_precision) - math::LN_2PI);
        for info in &self.effects {
            match &info.template {
                Some(t) => {
                    let tau = natural[info.slots[0]];
                    if !(tau > 0.0) {
                        return Err(Error::domain(format!("precision of `{}` must be positive", info.name)));
                    }
                    for (&p, (_, _, v)) in info.template_pos.iter().zip(t.matrix().iter()) {
                        prior[p] += tau * v;
                    }
                    let rank = (t.dim() - t.rank_deficiency()) as f64;
                    normalizer += 0.5 * rank * (math::ln(tau) - math::LN_2PI) + 0.5 * t.log_det_constant();
                    rank_deficiency += t.rank_deficiency();
                }
                None => {
                    let (tv, tw, r) = (natural[info.slots[0]], natural[info.slots[1]], natural[info.slots[2]]);
                    let rho = r / math::sqrt(tv * tw);
                    let block = gmrf::iid2d_block(tv, tw, rho)?;
                    for (k, &p) in info.template_pos.iter().enumerate() {
                        prior[p] += block[k % 3];
                    }
                    let det = block[0] * block[2] - block[1] * block[1];
                    normalizer += info.units as f64 * (0.5 * math::ln(det) - math::LN_2PI);
                }
            }
        }
        let n_ties = self.ties.n_rows();
        self.ties
            .add_outer(&tie_values, &vec![TIE_PRECISION; n_ties], &mut prior);
        normalizer += 0.5 * n_ties as f64 * (math::ln(TIE_PRECISION) - math::LN_2PI);
        Ok(ThetaState {
            model: self,
            natural,
            design_values,
            tie_values,
            prior,
            normalizer,
            rank_deficiency,
        })
    }

    /// Stacked predictor `η = A(θ)·x`, one value per row.
    pub fn linear_predictor(&self, x: &[f64], theta: &[f64]) -> Result<Vec<f64>> {
        self.check_len(x)?;
        let state = self.state(theta)?;
        Ok(state.eta(x))
    }

    /// Prior precision `Q(θ)` of the whole latent field.
    pub fn joint_prior_precision(&self, theta: &[f64]) -> Result<SparsePrecision> {
        let state = self.state(theta)?;
        let mut m = self.pattern.clone();
        m.values_mut().copy_from_slice(&state.prior);
        let n = self.n_latent as f64;
        // Normaliser = ((n - r)/2)(-ln 2π) + ½ log det*(Q).
        let log_det = 2.0 * state.normalizer + (n - state.rank_deficiency as f64) * math::LN_2PI;
        Ok(SparsePrecision::new(m, state.rank_deficiency, log_det))
    }

    fn check_len(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.n_latent {
            return Err(Error::Dimension {
                expected: self.n_latent,
                got: x.len(),
            });
        }
        Ok(())
    }

    /// `Σ_{ij} values_ij x_j` over the symmetric pattern.
    pub(crate) fn sym_mul(&self, values: &[f64], x: &[f64]) -> Vec<f64> {
        let p = &self.pattern;
        let mut y = vec![0.0; p.dim()];
        for c in 0..p.dim() {
            for q in p.col_ptr()[c]..p.col_ptr()[c + 1] {
                let r = p.row_idx()[q];
                let v = values[q];
                y[r] += v * x[c];
                if r != c {
                    y[c] += v * x[r];
                }
            }
        }
        y
    }

    /// Human-readable label of every latent coordinate.
    pub fn coordinate_labels(&self) -> Vec<String> {
        let mut labels = vec![String::new(); self.n_latent];
        for seg in &self.segments {
            match seg.kind {
                SegmentKind::Fixed { block } => {
                    for (k, name) in self.blocks[block].fixed_names.iter().enumerate() {
                        labels[seg.offset + k] = format!("{}:{name}", self.blocks[block].name);
                    }
                }
                SegmentKind::Effect { effect, kind } => {
                    let info = &self.effects[effect];
                    for u in 0..info.units {
                        let key = match info.spec.index {
                            IndexSpec::Individual => self.original_ids[u],
                            _ => (u + 1) as u64,
                        };
                        match kind {
                            EffectKind::Iid2d => {
                                labels[seg.offset + 2 * u] = format!("{}[{key}].intercept", info.name);
                                labels[seg.offset + 2 * u + 1] = format!("{}[{key}].slope", info.name);
                            }
                            _ => labels[seg.offset + u] = format!("{}[{key}]", info.name),
                        }
                    }
                }
                SegmentKind::LinearPredictor { .. } => {
                    for u in 0..seg.len {
                        labels[seg.offset + u] = format!("{}[{}]", seg.name, self.original_ids[u]);
                    }
                }
            }
        }
        labels
    }

    /// Predictor of `block` for a new row at `time` with `covariates`, with
    /// individual-level effects at their prior mean of zero. Copies of other
    /// blocks' predictors are evaluated the same way.
    pub fn population_predictor(
        &self,
        block: usize,
        time: f64,
        covariates: &Covariates,
        x: &[f64],
        natural: &[f64],
    ) -> Result<f64> {
        self.check_len(x)?;
        let info = &self.blocks[block];
        let ctx = RowCtx {
            individual: 0,
            time,
            own: covariates,
            baseline: covariates,
        };
        let mut eta = 0.0;
        for (k, name) in info.fixed_names.iter().enumerate() {
            eta += ctx.require(name, &info.name)? * x[info.fixed_offset + k];
        }
        let effect_value = |e: usize, component: Component, weight: f64| -> Result<f64> {
            let eff = &self.effects[e];
            let unit = match &eff.spec.index {
                IndexSpec::Individual => return Ok(0.0),
                IndexSpec::Covariate { name, size } => {
                    let v = ctx.require(name, &info.name)?;
                    if math::floor(v) != v || v < 1.0 || v > *size as f64 {
                        return Err(Error::spec(format!("`{name}` = {v} outside 1..={size}")));
                    }
                    v as usize - 1
                }
                IndexSpec::Binned { covariate, .. } => {
                    let v = ctx.require(covariate, &info.name)?;
                    eff.binning.as_ref().expect("fitted").index_of(v) - 1
                }
            };
            Ok(match eff.spec.kind {
                EffectKind::Iid2d => {
                    let base = eff.offset + 2 * unit;
                    let mut s = 0.0;
                    if component != Component::Slope {
                        s += x[base];
                    }
                    if component != Component::Intercept {
                        s += x[base + 1] * time;
                    }
                    weight * s
                }
                _ => weight * x[eff.offset + unit],
            })
        };
        for (e, weight) in &info.attachments {
            let w = match weight {
                Some(name) => ctx.require(name, &info.name)?,
                None => 1.0,
            };
            eta += effect_value(*e, Component::Full, w)?;
        }
        for (l, (source, target)) in self.links.iter().enumerate() {
            if *target != block {
                continue;
            }
            let scaling = natural[self.link_slots[l]];
            eta += scaling
                * match source {
                    LinkSource::Effect { effect, component } => effect_value(*effect, *component, 1.0)?,
                    LinkSource::LinearPredictor { block: s } => {
                        self.population_predictor(*s, time, covariates, x, natural)?
                    }
                };
        }
        Ok(eta)
    }

    /// First coordinate of the linear-predictor copy of `block`, if any.
    pub fn eta_offset(&self, block: usize) -> Option<usize> {
        self.eta_offset[block]
    }
}

impl ThetaState<'_> {
    pub fn model(&self) -> &StackedModel {
        self.model
    }

    pub fn eta(&self, x: &[f64]) -> Vec<f64> {
        self.model.design.apply(&self.design_values, x)
    }

    /// `ln π(x|θ)`, improper directions without normaliser.
    pub fn prior_log_density(&self, x: &[f64]) -> f64 {
        let qx = self.model.sym_mul(&self.prior, x);
        self.normalizer - 0.5 * x.iter().zip(&qx).map(|(a, b)| a * b).sum::<f64>()
    }

    pub fn prior_mul(&self, x: &[f64]) -> Vec<f64> {
        self.model.sym_mul(&self.prior, x)
    }

    /// Row indices in the order likelihood sums visit them.
    pub fn row_order(&self) -> &[usize] {
        &self.model.design.order
    }

    pub fn row_loglik(&self, r: usize, eta: f64) -> Result<LogLik> {
        let row = &self.model.rows[r];
        let family = self.model.blocks[row.block].family_eval;
        match (family, row.observation) {
            (FamilyEval::Gaussian { slot }, Observation::Value(y)) => {
                Ok(families::gaussian_loglik(y, eta, self.natural[slot]))
            }
            (FamilyEval::Poisson, Observation::Value(y)) => families::poisson_loglik(y, eta),
            (FamilyEval::Exponential, Observation::Survival(o)) => families::exponential_surv_loglik(o, eta),
            (FamilyEval::Weibull { slot }, Observation::Survival(o)) => {
                families::weibull_surv_loglik(o, eta, self.natural[slot])
            }
            _ => unreachable!("family and observation kinds are matched at assembly"),
        }
    }

    /// Adds `Aᵀ g` to `out`.
    pub fn add_design_transpose(&self, g: &[f64], out: &mut [f64]) {
        self.model.design.transpose_apply(&self.design_values, g, out);
    }

    /// Posterior precision values `Q(θ) + Aᵀ diag(w) A` on the pattern.
    pub fn posterior_values(&self, weights: &[f64]) -> Vec<f64> {
        let mut values = self.prior.clone();
        self.model.design.add_outer(&self.design_values, weights, &mut values);
        values
    }

    /// Tie residuals `z − definition`, for diagnostics.
    pub fn tie_residuals(&self, x: &[f64]) -> Vec<f64> {
        self.model.ties.apply(&self.tie_values, x)
    }
}
