//! Fully Gaussian joint models with a dense closed-form oracle: design,
//! prior covariance and noise are built from the records alone.

use std::collections::BTreeMap;

use cmprsk_core::gmrf::{EffectSpec, HyperSpec, IndexSpec};
use cmprsk_core::stacker::{BlockSpec, Component, CopyLink, Family};
use cmprsk_core::{JointDataset, ModelSpec, StackedModel};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{dataset, long, surv};

pub const FIXED_VAR: f64 = 1000.0;

/// A random dataset with one or two Gaussian markers and a single cause.
pub struct Case {
    pub data: JointDataset,
    pub two_markers: bool,
    /// Survival times; the cause block has η = 0, contributing `−Σ t`.
    pub times: Vec<f64>,
}

pub fn random_case(rng: &mut ChaCha8Rng, max_individuals: usize) -> Case {
    let n = rng.random_range(3..=max_individuals);
    let two_markers = rng.random_bool(0.5);
    let mut l = Vec::new();
    let mut s = Vec::new();
    let mut times = Vec::new();
    for k in 0..n {
        let id = 10 * k as u64 + rng.random_range(0..10);
        let t = rng.random_range(5.0..10.0);
        times.push(t);
        s.push(surv(id, t, rng.random_range(0..=1), &[]));
        for marker in 0..if two_markers { 2 } else { 1 } {
            for _ in 0..rng.random_range(1..=4) {
                let a: f64 = StandardNormal.sample(rng);
                let g = rng.random_range(1..=3) as f64;
                let noise: f64 = StandardNormal.sample(rng);
                l.push(long(id, rng.random_range(0.0..4.0), 1.0 + 2.0 * noise, &[("a", a), ("g", g)], marker));
            }
        }
    }
    Case {
        data: dataset(l, s, 1),
        two_markers,
        times,
    }
}

pub fn spec(two_markers: bool, fixed: Option<&BTreeMap<String, f64>>) -> ModelSpec {
    let hyper = |name: &str| -> Option<HyperSpec> { fixed.map(|f| HyperSpec::fixed(f[name])) };
    let gaussian = |name: &str| Family::Gaussian {
        precision: hyper(&format!("{name}:precision")),
    };
    let effect_hypers = |names: &[&str]| -> Vec<HyperSpec> { names.iter().filter_map(|n| hyper(n)).collect() };
    let mut spec = ModelSpec::new()
        .longitudinal(
            BlockSpec::new(gaussian("m0"))
                .named("m0")
                .fixed(&["intercept", "a"])
                .attach("u")
                .attach("v")
                .attach("grp"),
        )
        .cause(BlockSpec::new(Family::Exponential).named("cause1"))
        .effect("u", EffectSpec::iid(IndexSpec::Individual).with_hypers(effect_hypers(&["u:precision"])))
        .effect(
            "v",
            EffectSpec::iid2d(IndexSpec::Individual).with_hypers(effect_hypers(&[
                "v:precision_intercept",
                "v:precision_slope",
                "v:rho",
            ])),
        )
        .effect(
            "grp",
            EffectSpec::iid(IndexSpec::Covariate {
                name: "g".into(),
                size: 3,
            })
            .with_hypers(effect_hypers(&["grp:precision"])),
        );
    if two_markers {
        spec = spec
            .longitudinal(BlockSpec::new(gaussian("m1")).named("m1").fixed(&["intercept"]))
            .copy(CopyLink::effect("u", Component::Full, "m1"))
            .copy(CopyLink::effect("v", Component::Intercept, "m1"));
        if let Some(f) = fixed {
            let n = spec.copy_links.len();
            spec.copy_links[n - 2].scaling = HyperSpec::fixed(f["m1:scale:u"]);
            spec.copy_links[n - 1].scaling = HyperSpec::fixed(f["m1:scale:v.intercept"]);
        }
    }
    spec
}

pub struct Oracle {
    pub labels: Vec<String>,
    pub a: DMatrix<f64>,
    pub prior_cov: DMatrix<f64>,
    pub noise: DVector<f64>,
    pub y: DVector<f64>,
}

/// Dense design and prior covariance built from the records alone.
pub fn oracle(case: &Case, hyper: &BTreeMap<String, f64>) -> Oracle {
    let ids: Vec<u64> = case.data.original_ids().to_vec();
    let mut labels: Vec<String> = vec!["m0:intercept".into(), "m0:a".into()];
    if case.two_markers {
        labels.push("m1:intercept".into());
    }
    let u0 = labels.len();
    labels.extend(ids.iter().map(|id| format!("u[{id}]")));
    let v0 = labels.len();
    for id in &ids {
        labels.push(format!("v[{id}].intercept"));
        labels.push(format!("v[{id}].slope"));
    }
    let g0 = labels.len();
    labels.extend((1..=3).map(|k| format!("grp[{k}]")));
    let n = labels.len();

    let mut cov = DMatrix::zeros(n, n);
    let fixed_count = u0;
    for i in 0..fixed_count {
        cov[(i, i)] = FIXED_VAR;
    }
    for i in 0..ids.len() {
        cov[(u0 + i, u0 + i)] = 1.0 / hyper["u:precision"];
        let (tv, tw, rho) = (hyper["v:precision_intercept"], hyper["v:precision_slope"], hyper["v:rho"]);
        let (p, q) = (v0 + 2 * i, v0 + 2 * i + 1);
        cov[(p, p)] = 1.0 / tv;
        cov[(q, q)] = 1.0 / tw;
        cov[(p, q)] = rho / (tv * tw).sqrt();
        cov[(q, p)] = cov[(p, q)];
    }
    for k in 0..3 {
        cov[(g0 + k, g0 + k)] = 1.0 / hyper["grp:precision"];
    }

    let records = case.data.longitudinal();
    let mut a = DMatrix::zeros(records.len(), n);
    let mut noise = DVector::zeros(records.len());
    let mut y = DVector::zeros(records.len());
    for (r, rec) in records.iter().enumerate() {
        let i = (rec.individual_id - 1) as usize;
        y[r] = rec.value;
        if rec.marker == 0 {
            a[(r, 0)] = 1.0;
            a[(r, 1)] = rec.covariates["a"];
            a[(r, u0 + i)] = 1.0;
            a[(r, v0 + 2 * i)] = 1.0;
            a[(r, v0 + 2 * i + 1)] = rec.time;
            a[(r, g0 + rec.covariates["g"] as usize - 1)] = 1.0;
            noise[r] = 1.0 / hyper["m0:precision"];
        } else {
            a[(r, 2)] = 1.0;
            a[(r, u0 + i)] = hyper["m1:scale:u"];
            a[(r, v0 + 2 * i)] = hyper["m1:scale:v.intercept"];
            noise[r] = 1.0 / hyper["m1:precision"];
        }
    }
    Oracle {
        labels,
        a,
        prior_cov: cov,
        noise,
        y,
    }
}

impl Oracle {
    pub fn marginal_cov(&self) -> DMatrix<f64> {
        &self.a * &self.prior_cov * self.a.transpose() + DMatrix::from_diagonal(&self.noise)
    }

    pub fn log_marginal(&self) -> f64 {
        let s = self.marginal_cov();
        let chol = s.cholesky().expect("marginal covariance is SPD");
        let ld = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let alpha = chol.solve(&self.y);
        -0.5 * self.y.len() as f64 * (2.0 * std::f64::consts::PI).ln() - 0.5 * ld - 0.5 * self.y.dot(&alpha)
    }

    pub fn posterior_mean(&self) -> DVector<f64> {
        let s = self.marginal_cov();
        let alpha = s.cholesky().unwrap().solve(&self.y);
        &self.prior_cov * self.a.transpose() * alpha
    }
}

pub fn hyper_map(model: &StackedModel, theta: &[f64]) -> BTreeMap<String, f64> {
    let natural = model.natural_values(theta).unwrap();
    model.hyper_slots().iter().map(|s| s.name.clone()).zip(natural).collect()
}

