//! The `simulate`, `fit` and `check` commands.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use cmprsk_core::data::validate_joint_dataset;
use cmprsk_core::inference::fit_with;
use cmprsk_core::simulate::{
    example1_spec, example5_spec, simulate_example1, simulate_example5, Example1Config, SimConfig,
};
use cmprsk_core::stacker::Family;
use cmprsk_core::{FitResult, JointDataset, LatePolicy, ModelSpec};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{ReportFormat, RunConfig, SimulateSection};
use crate::csvio::{self, MarkerFamily};
use crate::pool::Pool;
use crate::report::{self, DataInfo};
use crate::{CliError, Result};

/// Command-line switches shared by every command.
#[derive(Debug, Clone, Default)]
pub struct Flags {
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
    pub rescale_time: bool,
    pub legacy_appendix: bool,
}

/// Description of the random source, recorded next to simulated data.
pub const RNG_NOTE: &str = "ChaCha8 (rand_chacha 0.9), one stream per individual seeded by (seed, index)";

fn write_file(path: &Path, body: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = BufWriter::new(file);
    body(&mut w).and_then(|_| w.flush()).map_err(|e| CliError::io(path, e))
}

fn write_json(path: &Path, value: &Value, format: ReportFormat) -> Result<()> {
    write_file(path, |w| {
        match format {
            ReportFormat::Pretty => serde_json::to_writer_pretty(&mut *w, value)?,
            ReportFormat::Compact => serde_json::to_writer(&mut *w, value)?,
        }
        writeln!(w)
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// Simulated data with the parameters that generated it.
#[derive(Debug, Clone)]
pub struct Simulated {
    pub data: JointDataset,
    /// Parameter values keyed by the names a fit reports them under.
    pub truth: BTreeMap<String, f64>,
    pub generator: &'static str,
    pub config: Value,
}

pub fn example5_truth(config: &SimConfig) -> BTreeMap<String, f64> {
    let mut t = BTreeMap::new();
    t.insert(String::from("u:sd"), config.sigma_u);
    for (j, c) in config.causes.iter().enumerate() {
        t.insert(format!("cause{}:scale:u", j + 1), c.gamma);
        t.insert(format!("cause{}:age", j + 1), c.beta);
    }
    t
}

pub fn example1_truth(config: &Example1Config) -> BTreeMap<String, f64> {
    let mut t = BTreeMap::new();
    t.insert(String::from("vw:sd_intercept"), config.tau_v.powf(-0.5));
    t.insert(String::from("vw:sd_slope"), config.tau_w.powf(-0.5));
    t.insert(String::from("vw:rho"), config.rho);
    t.insert(String::from("longitudinal:intercept"), config.beta.0);
    t.insert(String::from("longitudinal:time"), config.beta.1);
    for (j, c) in config.causes.iter().enumerate() {
        let k = j + 1;
        t.insert(format!("cause{k}:intercept"), c.intercept);
        t.insert(format!("cause{k}:scale:vw.intercept"), c.gamma);
        t.insert(format!("cause{k}:scale:vw.slope"), c.kappa);
        t.insert(format!("cause{k}:shape"), c.shape);
    }
    t
}

fn usage(e: cmprsk_core::Error) -> CliError {
    CliError::Usage(format!("invalid simulation config: {e}"))
}

pub fn run_simulation(section: &SimulateSection, legacy_appendix: bool) -> Result<Simulated> {
    match section {
        SimulateSection::Example5(c) => {
            let mut c = c.clone();
            c.legacy_appendix |= legacy_appendix;
            c.validate().map_err(usage)?;
            Ok(Simulated {
                data: simulate_example5(&c)?,
                truth: example5_truth(&c),
                generator: "example5",
                config: serde_json::to_value(&c).expect("serialisable"),
            })
        }
        SimulateSection::Example1(c) => {
            if legacy_appendix {
                return Err(CliError::Usage(String::from(
                    "--legacy-appendix applies to the example5 generator only",
                )));
            }
            c.validate().map_err(usage)?;
            Ok(Simulated {
                data: simulate_example1(c)?,
                truth: example1_truth(c),
                generator: "example1",
                config: serde_json::to_value(c).expect("serialisable"),
            })
        }
    }
}

/// Writes `longitudinal.csv` (`longitudinal{k}.csv` for several markers),
/// `survival.csv` and `truth.json`; returns the written paths.
pub fn write_simulation(sim: &Simulated, dir: &Path, format: ReportFormat) -> Result<Vec<PathBuf>> {
    create_dir(dir)?;
    let data = &sim.data;
    let ids = |id: u64| data.original_id(id);
    let mut written = Vec::new();
    let markers = data.n_markers();
    for m in 0..markers {
        let name = if markers == 1 {
            String::from("longitudinal.csv")
        } else {
            format!("longitudinal{}.csv", m + 1)
        };
        let path = dir.join(name);
        let records: Vec<_> = data.longitudinal().iter().filter(|r| r.marker == m).cloned().collect();
        write_file(&path, |w| csvio::write_longitudinal(w, &records, ids))?;
        written.push(path);
    }
    let path = dir.join("survival.csv");
    write_file(&path, |w| csvio::write_survival(w, data.survival(), ids))?;
    written.push(path);
    let truth = json!({
        "generator": sim.generator,
        "rng": RNG_NOTE,
        "config": sim.config,
        "parameters": sim.truth,
        "n_individuals": data.n_individuals(),
        "n_longitudinal": data.longitudinal().len(),
        "dropped_late": data.dropped_late(),
    });
    let path = dir.join("truth.json");
    write_json(&path, &truth, format)?;
    written.push(path);
    Ok(written)
}

pub fn simulate(config: &RunConfig, flags: &Flags) -> Result<Vec<PathBuf>> {
    let section = config
        .simulate
        .as_ref()
        .ok_or_else(|| CliError::Usage(String::from("config has no [simulate] section")))?;
    let sim = run_simulation(section, flags.legacy_appendix)?;
    write_simulation(&sim, &config.out_dir(flags.out.as_deref()), config.output.format)
}

/// Reads the `[data]` files for `model`.
pub fn load_data(config: &RunConfig, model: &ModelSpec) -> Result<JointDataset> {
    let section = config
        .data
        .as_ref()
        .ok_or_else(|| CliError::Usage(String::from("config has no [data] section")))?;
    if section.longitudinal.len() != model.longitudinal.len() {
        return Err(CliError::Usage(format!(
            "{} longitudinal files for {} longitudinal blocks",
            section.longitudinal.len(),
            model.longitudinal.len()
        )));
    }
    let mut long = Vec::new();
    for (m, (file, block)) in section.longitudinal.iter().zip(&model.longitudinal).enumerate() {
        let family = match block.family {
            Family::Poisson => MarkerFamily::Poisson,
            _ => MarkerFamily::Gaussian,
        };
        long.extend(csvio::load_longitudinal_csv(&config.resolve(file), family, m)?);
    }
    let n_causes = section.n_causes.unwrap_or(model.causes.len() as u32);
    let surv_path = config.resolve(&section.survival);
    let surv = csvio::load_survival_csv(&surv_path, n_causes)?;
    let policy: LatePolicy = section.late.into();
    validate_joint_dataset(long, surv, n_causes, policy).map_err(|e| CliError::input(&surv_path, e.to_string()))
}

fn threads(config: &RunConfig, flags: &Flags) -> usize {
    flags.threads.or(config.options.threads).unwrap_or(1)
}

fn pool(n: usize) -> Result<Pool> {
    Pool::new(n).map_err(|e| CliError::Usage(format!("cannot start {n} threads: {e}")))
}

/// Fit result with the dataset it was computed from.
pub struct Fitted {
    pub result: FitResult,
    pub data: JointDataset,
    pub info: DataInfo,
}

pub fn fit_data(config: &RunConfig, flags: &Flags) -> Result<Fitted> {
    let model = config
        .model
        .as_ref()
        .ok_or_else(|| CliError::Usage(String::from("config has no [model] section")))?;
    let mut data = load_data(config, model)?;
    let mut info = DataInfo {
        dropped_late: data.dropped_late(),
        time_scale: None,
    };
    if flags.rescale_time || config.data.as_ref().is_some_and(|d| d.rescale_time) {
        let max = data
            .survival()
            .iter()
            .map(|r| r.time)
            .chain(data.longitudinal().iter().map(|r| r.time))
            .fold(0.0, f64::max);
        data = data.rescale_time();
        info.time_scale = Some(max);
    }
    let exec = pool(threads(config, flags))?;
    let result = fit_with(model, &data, &config.options.fit_options(), &exec)?;
    Ok(Fitted { result, data, info })
}

/// Writes the four reports of a fit; returns their paths.
pub fn write_fit(fitted: &Fitted, config: &RunConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    create_dir(dir)?;
    let Fitted { result, data, info } = fitted;
    let mut written = Vec::new();
    let path = dir.join("summary.json");
    write_json(&path, &report::summary_json(result, data, *info), config.output.format)?;
    written.push(path);
    let path = dir.join("latent.csv");
    write_file(&path, |w| report::write_latent_csv(w, result))?;
    written.push(path);
    let path = dir.join("hyper.csv");
    write_file(&path, |w| report::write_hyper_csv(w, result))?;
    written.push(path);
    let points = report::curves(result, data, &config.curves)?;
    let path = dir.join("curves.csv");
    write_file(&path, |w| report::write_curves_csv(w, &points))?;
    written.push(path);
    Ok(written)
}

/// Fits and writes the reports, plus `run_info.json` with timings (kept
/// apart so the reports themselves are reproducible byte for byte).
pub fn fit(config: &RunConfig, flags: &Flags) -> Result<Vec<PathBuf>> {
    let start = Instant::now();
    let fitted = fit_data(config, flags)?;
    let elapsed = start.elapsed().as_secs_f64();
    let dir = config.out_dir(flags.out.as_deref());
    let mut written = write_fit(&fitted, config, &dir)?;
    let info = json!({
        "version": env!("CARGO_PKG_VERSION"),
        "threads": threads(config, flags),
        "fit_seconds": elapsed,
    });
    let path = dir.join("run_info.json");
    write_json(&path, &info, config.output.format)?;
    written.push(path);
    Ok(written)
}

/// Tolerances of the recovery check, all multiplied by `scale`.
#[derive(Debug, Clone, Serialize)]
pub struct Tolerances {
    pub scale: f64,
    /// Largest allowed `|posterior mean − truth|` per parameter.
    pub point: BTreeMap<String, f64>,
    /// Fewest covered parameters per seed.
    pub min_covered: usize,
    pub min_pooled_coverage: f64,
    /// Least posterior mass on the true side of zero for negative scalings.
    pub sign_mass: f64,
}

impl Tolerances {
    pub fn example5(scale: f64) -> Self {
        let point = [
            ("u:sd", 0.15),
            ("cause1:scale:u", 0.12),
            ("cause2:scale:u", 0.12),
            ("cause3:scale:u", 0.17),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        Tolerances {
            scale,
            point,
            min_covered: 5,
            min_pooled_coverage: 0.9,
            sign_mass: 0.95,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ParameterCheck {
    pub name: String,
    pub truth: f64,
    pub mean: f64,
    pub q025: f64,
    pub q975: f64,
    pub covered: bool,
    /// `None` without a point tolerance.
    pub point_ok: Option<bool>,
    /// Posterior mass below zero, for scalings with a negative truth.
    pub mass_below_zero: Option<f64>,
    pub sign_ok: Option<bool>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SeedCheck {
    pub seed: u64,
    pub parameters: Vec<ParameterCheck>,
    pub covered: usize,
    pub coverage_ok: bool,
    pub points_ok: bool,
    pub signs_ok: bool,
}

/// Compares a fit with the generating values.
pub fn compare(result: &FitResult, truth: &BTreeMap<String, f64>, tol: &Tolerances, seed: u64) -> Result<SeedCheck> {
    let s = tol.scale;
    let mut parameters = Vec::new();
    for (name, &value) in truth {
        let (summary, below) = if let Some(d) = result.derived_summary(name) {
            (*d, None)
        } else if let Some(h) = result.hyper_summary(name) {
            (h.natural, Some(h.mass_below_zero()))
        } else if let Some(l) = result.latent_summary(name) {
            (*l, None)
        } else {
            return Err(CliError::Usage(format!("the fit reports no parameter `{name}`")));
        };
        let lo = summary.mean - s * (summary.mean - summary.q025);
        let hi = summary.mean + s * (summary.q975 - summary.mean);
        let negative_scaling = name.contains(":scale:") && value < 0.0;
        let mass = below.filter(|_| negative_scaling);
        parameters.push(ParameterCheck {
            name: name.clone(),
            truth: value,
            mean: summary.mean,
            q025: summary.q025,
            q975: summary.q975,
            covered: lo <= value && value <= hi && s > 0.0,
            point_ok: tol.point.get(name).map(|t| (summary.mean - value).abs() < s * t),
            mass_below_zero: mass,
            sign_ok: mass.map(|m| m >= 1.0 - s * (1.0 - tol.sign_mass)),
        });
    }
    let covered = parameters.iter().filter(|p| p.covered).count();
    Ok(SeedCheck {
        seed,
        covered,
        coverage_ok: covered >= tol.min_covered && s > 0.0,
        points_ok: parameters.iter().all(|p| p.point_ok != Some(false)),
        signs_ok: parameters.iter().all(|p| p.sign_ok != Some(false)),
        parameters,
    })
}

/// Outcome of `check`: per-seed comparisons and one row per criterion.
#[derive(Debug, Clone, Serialize)]
pub struct Verdict {
    pub seeds: Vec<SeedCheck>,
    /// Covered seeds per parameter.
    pub coverage: BTreeMap<String, (usize, usize)>,
    pub pooled_coverage: f64,
    pub criteria: Vec<(String, bool)>,
    pub pass: bool,
}

pub fn verdict(seeds: Vec<SeedCheck>, tol: &Tolerances) -> Verdict {
    let mut coverage: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for p in seeds.iter().flat_map(|s| &s.parameters) {
        let e = coverage.entry(p.name.clone()).or_default();
        e.0 += p.covered as usize;
        e.1 += 1;
    }
    let (hit, total) = coverage.values().fold((0, 0), |(a, b), &(c, t)| (a + c, b + t));
    let pooled_coverage = if total == 0 { 0.0 } else { hit as f64 / total as f64 };
    let criteria = vec![
        (String::from("coverage_per_seed"), seeds.iter().all(|s| s.coverage_ok)),
        (
            String::from("coverage_pooled"),
            tol.scale > 0.0 && pooled_coverage >= tol.min_pooled_coverage,
        ),
        (String::from("point_estimates"), seeds.iter().all(|s| s.points_ok)),
        (String::from("sign_recovery"), seeds.iter().all(|s| s.signs_ok)),
    ];
    let pass = !seeds.is_empty() && criteria.iter().all(|c| c.1);
    Verdict {
        seeds,
        coverage,
        pooled_coverage,
        criteria,
        pass,
    }
}

/// Simulates, fits and compares once per configured seed. Writes
/// `verdict.json` to the output directory.
pub fn check(config: &RunConfig, flags: &Flags) -> Result<Verdict> {
    let c = &config.check;
    let exec = pool(threads(config, flags))?;
    let options = config.options.fit_options();
    let mut seeds = Vec::new();
    let tol = Tolerances::example5(c.tolerance_scale);
    for &seed in &c.seeds {
        let section = match &config.simulate {
            Some(SimulateSection::Example5(s)) => SimulateSection::Example5(SimConfig { seed, ..s.clone() }),
            Some(SimulateSection::Example1(s)) => SimulateSection::Example1(Example1Config { seed, ..s.clone() }),
            None => SimulateSection::Example5(SimConfig::example5(seed)),
        };
        let mut section = section;
        if let Some(n) = c.n_individuals {
            match &mut section {
                SimulateSection::Example5(s) => s.n_individuals = n,
                SimulateSection::Example1(s) => s.n_individuals = n,
            }
        }
        let sim = run_simulation(&section, flags.legacy_appendix)?;
        let spec = match (&config.model, &section) {
            (Some(m), _) => m.clone(),
            (None, SimulateSection::Example5(s)) => example5_spec(s.causes.len(), c.n_bins, Family::Exponential),
            (None, SimulateSection::Example1(s)) => example1_spec(s.causes.len()),
        };
        let result = fit_with(&spec, &sim.data, &options, &exec)?;
        seeds.push(compare(&result, &sim.truth, &tol, seed)?);
    }
    let v = verdict(seeds, &tol);
    let dir = config.out_dir(flags.out.as_deref());
    create_dir(&dir)?;
    let value = json!({
        "tolerances": tol,
        "verdict": v,
    });
    write_json(&dir.join("verdict.json"), &value, config.output.format)?;
    Ok(v)
}
