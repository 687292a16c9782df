//! Fit reports: `summary.json`, `latent.csv`, `hyper.csv` and `curves.csv`.
//!
//! `summary.json` always carries the same keys; values that do not exist
//! (a missing evidence, a non-finite number) are written as `null`.

use std::io::Write;

use cmprsk_core::data::Covariates;
use cmprsk_core::families::{cumulative_incidence, CauseHazard, HazardForm};
use cmprsk_core::gmrf::IndexSpec;
use cmprsk_core::inference::Summary;
use cmprsk_core::stacker::{BlockKind, HyperRole};
use cmprsk_core::{FitResult, JointDataset};
use serde_json::{json, Value};

use crate::config::{CurveGroup, CurvesSection};

/// Identifies the layout of `summary.json`.
pub const SUMMARY_SCHEMA: &str = "lgm-cmprsk/summary/1";

fn summary_fields(s: &Summary) -> Value {
    json!({
        "mean": s.mean,
        "sd": s.sd,
        "q025": s.q025,
        "q50": s.q50,
        "q975": s.q975,
    })
}

fn with(mut base: Value, extra: Value) -> Value {
    if let (Value::Object(b), Value::Object(e)) = (&mut base, extra) {
        b.extend(e);
    }
    base
}

/// Information about the input that the fit itself does not know.
#[derive(Debug, Clone, Copy, Default)]
pub struct DataInfo {
    pub dropped_late: usize,
    /// Divisor applied to every time, when rescaled.
    pub time_scale: Option<f64>,
}

pub fn summary_json(result: &FitResult, data: &JointDataset, info: DataInfo) -> Value {
    let model = &result.model;
    let blocks: Vec<Value> = model
        .blocks()
        .iter()
        .map(|b| json!({"name": b.name, "family": b.family, "rows": b.rows.len()}))
        .collect();
    let hyper: Vec<Value> = result
        .hyper
        .iter()
        .map(|h| {
            let below = match h.role {
                HyperRole::CopyScaling { .. } | HyperRole::Correlation { .. } => Some(h.mass_below_zero()),
                _ => None,
            };
            with(
                json!({"name": h.name, "fixed": h.fixed, "mass_below_zero": below}),
                summary_fields(&h.natural),
            )
        })
        .collect();
    let derived: Vec<Value> = result
        .derived
        .iter()
        .map(|(n, s)| with(json!({"name": n}), summary_fields(s)))
        .collect();
    let fixed: Vec<Value> = (0..model.n_fixed())
        .map(|i| with(json!({"label": result.labels[i]}), summary_fields(&result.latent[i])))
        .collect();
    let d = &result.diagnostics;
    json!({
        "schema": SUMMARY_SCHEMA,
        "model": {
            "n_latent": model.n_latent(),
            "n_hyper": model.n_hyper(),
            "n_rows": model.n_rows(),
            "n_individuals": model.n_individuals(),
            "n_causes": data.n_causes(),
            "blocks": blocks,
        },
        "data": {
            "dropped_late": info.dropped_late,
            "time_scale": info.time_scale,
        },
        "log_evidence": result.log_evidence,
        "log_posterior_mode": result.log_post_star,
        "theta_mode": result.theta_star,
        "hyperparameters": hyper,
        "derived": derived,
        "fixed_effects": fixed,
        "diagnostics": {
            "optimizer_evaluations": d.optimizer_evaluations,
            "newton_iterations": d.newton_iterations,
            "grid_size": d.grid_size,
            "grid_evaluations": d.grid_evaluations,
            "grid_fallback": d.grid_fallback,
            "coarse_axes": d.coarse_axes,
        },
    })
}

const SUMMARY_HEADER: [&str; 5] = ["mean", "sd", "q025", "q50", "q975"];

fn summary_cells(s: &Summary) -> [String; 5] {
    [s.mean, s.sd, s.q025, s.q50, s.q975].map(|v| v.to_string())
}

/// One row per latent coordinate.
pub fn write_latent_csv<W: Write>(writer: W, result: &FitResult) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["index", "label"];
    header.extend(SUMMARY_HEADER);
    w.write_record(&header)?;
    for (i, (label, s)) in result.labels.iter().zip(&result.latent).enumerate() {
        let mut row = vec![i.to_string(), label.clone()];
        row.extend(summary_cells(s));
        w.write_record(&row)?;
    }
    w.flush()
}

/// Parameter table: standard deviations of precisions, every
/// hyperparameter on its natural scale, then the fixed effects.
pub fn write_hyper_csv<W: Write>(writer: W, result: &FitResult) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["parameter", "kind"];
    header.extend(SUMMARY_HEADER);
    w.write_record(&header)?;
    let mut put = |name: &str, kind: &str, s: &Summary| {
        let mut row = vec![name.to_string(), kind.to_string()];
        row.extend(summary_cells(s));
        w.write_record(&row)
    };
    for (n, s) in &result.derived {
        put(n, "sd", s)?;
    }
    for h in &result.hyper {
        put(&h.name, if h.fixed { "fixed_hyper" } else { "hyper" }, &h.natural)?;
    }
    for i in 0..result.model.n_fixed() {
        put(&result.labels[i], "fixed_effect", &result.latent[i])?;
    }
    w.flush()
}

/// One point of a plotted curve.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    /// `trajectory`, `incidence` or `survival`.
    pub curve: &'static str,
    pub group: String,
    pub block: String,
    pub time: f64,
    /// Linear predictor, absent for incidence and survival.
    pub eta: Option<f64>,
    pub value: f64,
}

fn mean_covariates<'a>(all: impl Iterator<Item = &'a Covariates>) -> Covariates {
    let mut sums: Covariates = Covariates::new();
    let mut counts = std::collections::BTreeMap::<String, f64>::new();
    for c in all {
        for (k, v) in c {
            *sums.entry(k.clone()).or_default() += v;
            *counts.entry(k.clone()).or_default() += 1.0;
        }
    }
    sums.iter().map(|(k, s)| (k.clone(), s / counts[k])).collect()
}

/// Groups to draw: the configured ones, or a single `mean` group at the
/// covariate means (survival records first, longitudinal ones fill gaps).
pub fn curve_groups(curves: &CurvesSection, data: &JointDataset) -> Vec<CurveGroup> {
    if !curves.groups.is_empty() {
        return curves.groups.clone();
    }
    let mut covariates = mean_covariates(data.longitudinal().iter().map(|r| &r.covariates));
    covariates.extend(mean_covariates(data.survival().iter().map(|r| &r.covariates)));
    vec![CurveGroup {
        name: String::from("mean"),
        covariates,
    }]
}

/// Mean trajectories of every longitudinal block, on the bins of the first
/// time-binned effect (or an even grid), and cumulative incidence of every
/// cause from the posterior-mean predictors at time 0.
pub fn curves(result: &FitResult, data: &JointDataset, section: &CurvesSection) -> cmprsk_core::Result<Vec<CurvePoint>> {
    let model = &result.model;
    let x: Vec<f64> = result.latent.iter().map(|s| s.mean).collect();
    let natural: Vec<f64> = result.hyper.iter().map(|h| h.natural.mean).collect();
    let t_max = section
        .t_max
        .unwrap_or_else(|| data.survival().iter().map(|r| r.time).fold(0.0, f64::max));
    let n = section.n_times.max(2);
    let even: Vec<f64> = (0..n).map(|k| t_max * k as f64 / (n - 1) as f64).collect();
    let bins = model
        .effects()
        .iter()
        .find(|e| matches!(&e.spec.index, IndexSpec::Binned { covariate, .. } if covariate == "time"))
        .map(|e| e.locations());
    let trajectory_times = bins.unwrap_or_else(|| even.clone());

    let mut out = Vec::new();
    for group in curve_groups(section, data) {
        let cov: Covariates = group.covariates.clone().into_iter().collect();
        let mut hazards = Vec::new();
        let mut cause_names = Vec::new();
        for (b, block) in model.blocks().iter().enumerate() {
            match block.kind {
                BlockKind::Longitudinal { .. } => {
                    for &t in &trajectory_times {
                        let eta = model.population_predictor(b, t, &cov, &x, &natural)?;
                        let value = if block.family == "poisson" { eta.exp() } else { eta };
                        out.push(CurvePoint {
                            curve: "trajectory",
                            group: group.name.clone(),
                            block: block.name.clone(),
                            time: t,
                            eta: Some(eta),
                            value,
                        });
                    }
                }
                BlockKind::Cause { .. } => {
                    let eta = model.population_predictor(b, 0.0, &cov, &x, &natural)?;
                    let form = model
                        .hyper_slots()
                        .iter()
                        .position(|s| s.role == HyperRole::WeibullShape { block: b })
                        .map_or(HazardForm::Exponential, |k| HazardForm::Weibull { alpha: natural[k] });
                    hazards.push(CauseHazard { form, eta });
                    cause_names.push(block.name.clone());
                }
            }
        }
        if hazards.is_empty() {
            continue;
        }
        let cif = cumulative_incidence(&hazards, &even)?;
        for (j, name) in cause_names.iter().enumerate() {
            for (k, &t) in cif.times.iter().enumerate() {
                out.push(CurvePoint {
                    curve: "incidence",
                    group: group.name.clone(),
                    block: name.clone(),
                    time: t,
                    eta: None,
                    value: cif.incidence[j][k],
                });
            }
        }
        for (k, &t) in cif.times.iter().enumerate() {
            out.push(CurvePoint {
                curve: "survival",
                group: group.name.clone(),
                block: String::from("all"),
                time: t,
                eta: None,
                value: cif.survival[k],
            });
        }
    }
    Ok(out)
}

pub fn write_curves_csv<W: Write>(writer: W, points: &[CurvePoint]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["curve", "group", "block", "time", "eta", "value"])?;
    for p in points {
        w.write_record([
            p.curve.to_string(),
            p.group.clone(),
            p.block.clone(),
            p.time.to_string(),
            p.eta.map_or(String::new(), |e| e.to_string()),
            p.value.to_string(),
        ])?;
    }
    w.flush()
}
