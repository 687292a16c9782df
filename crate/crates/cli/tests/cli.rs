use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use cmprsk_core::data::validate_joint_dataset;
use cmprsk_core::simulate::{example1_spec, example5_spec, simulate_example5, SimConfig};
use cmprsk_core::stacker::Family;
use cmprsk_core::{assemble, LatePolicy, ModelSpec};
use lgm_cmprsk::commands::{self, Flags};
use lgm_cmprsk::config::RunConfig;
use lgm_cmprsk::csvio::{load_longitudinal_csv, load_survival_csv, MarkerFamily};
use nalgebra::{DMatrix, DVector};
use sha2::{Digest, Sha256};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lgm-cmprsk"))
}

fn digest(path: &Path) -> String {
    hex::encode(Sha256::digest(fs::read(path).unwrap()))
}

/// Example 5 configuration with a smaller population, writing to `dir`.
fn small_example5(dir: &Path, n: usize, seed: u64) -> PathBuf {
    let text = fs::read_to_string(configs().join("example5.toml"))
        .unwrap()
        .replace("n_individuals = 1000", &format!("n_individuals = {n}"))
        .replace("seed = 1", &format!("seed = {seed}"))
        .replace("example5-run/", "")
        .replace("dir = \"example5-run\"", "dir = \".\"");
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn shipped_configs_describe_the_builtin_models() {
    let data = simulate_example5(&SimConfig {
        n_individuals: 20,
        ..SimConfig::example5(1)
    })
    .unwrap();
    let c5 = RunConfig::load(&configs().join("example5.toml")).unwrap();
    let from_toml = assemble(c5.model.as_ref().unwrap(), &data).unwrap();
    let builtin = assemble(&example5_spec(3, 50, Family::Exponential), &data).unwrap();
    assert_eq!(from_toml.hyper_slots(), builtin.hyper_slots());
    assert_eq!(from_toml.coordinate_labels(), builtin.coordinate_labels());

    let c1 = RunConfig::load(&configs().join("example1.toml")).unwrap();
    let Some(lgm_cmprsk::config::SimulateSection::Example1(sim)) = &c1.simulate else {
        panic!("example1 generator expected")
    };
    let data = cmprsk_core::simulate::simulate_example1(&sim.clone()).unwrap();
    let from_toml = assemble(c1.model.as_ref().unwrap(), &data).unwrap();
    let builtin = assemble(&example1_spec(2), &data).unwrap();
    assert_eq!(from_toml.hyper_slots(), builtin.hyper_slots());
    assert_eq!(from_toml.coordinate_labels(), builtin.coordinate_labels());
}

#[test]
fn simulated_files_round_trip_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let config = RunConfig::load(&small_example5(dir.path(), 1000, 1)).unwrap();
    commands::simulate(&config, &Flags::default()).unwrap();
    let long = load_longitudinal_csv(&dir.path().join("longitudinal.csv"), MarkerFamily::Poisson, 0).unwrap();
    let surv = load_survival_csv(&dir.path().join("survival.csv"), 3).unwrap();
    assert_eq!(surv.len(), 1000);
    assert!((10_000..=15_000).contains(&long.len()), "{}", long.len());
    let ids: BTreeSet<u64> = long.iter().map(|r| r.individual_id).collect();
    assert_eq!(ids.len(), 1000);
    let reloaded = validate_joint_dataset(long, surv, 3, LatePolicy::Error).unwrap();
    let original = simulate_example5(&SimConfig::example5(1)).unwrap();
    assert_eq!(reloaded, original);

    let truth: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("truth.json")).unwrap()).unwrap();
    assert_eq!(truth["parameters"]["cause2:scale:u"], -0.1);
    assert_eq!(truth["parameters"]["u:sd"], 1.0);
    assert_eq!(truth["config"]["seed"], 1);
}

#[test]
fn one_individual() {
    let dir = tempfile::tempdir().unwrap();
    let config = RunConfig::load(&small_example5(dir.path(), 1, 3)).unwrap();
    commands::simulate(&config, &Flags::default()).unwrap();
    let surv = load_survival_csv(&dir.path().join("survival.csv"), 3).unwrap();
    let long = load_longitudinal_csv(&dir.path().join("longitudinal.csv"), MarkerFamily::Poisson, 0).unwrap();
    assert_eq!(surv.len(), 1);
    assert!((10..=15).contains(&long.len()));
}

#[test]
fn repeated_runs_are_checksum_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [&a, &b] {
        let cfg = small_example5(dir.path(), 80, 2);
        for cmd in ["simulate", "fit"] {
            let status = bin()
                .args([cmd, "--config"])
                .arg(&cfg)
                .args(["--threads", "1"])
                .output()
                .unwrap();
            assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
        }
    }
    for f in [
        "longitudinal.csv",
        "survival.csv",
        "truth.json",
        "summary.json",
        "latent.csv",
        "hyper.csv",
        "curves.csv",
    ] {
        assert_eq!(digest(&a.path().join(f)), digest(&b.path().join(f)), "{f}");
    }
}

#[test]
fn thread_count_does_not_change_reports() {
    let dir = tempfile::tempdir().unwrap();
    let config = RunConfig::load(&small_example5(dir.path(), 60, 4)).unwrap();
    commands::simulate(&config, &Flags::default()).unwrap();
    let mut sums = Vec::new();
    for threads in [1, 3] {
        let out = dir.path().join(format!("t{threads}"));
        let flags = Flags {
            out: Some(out.clone()),
            threads: Some(threads),
            ..Flags::default()
        };
        commands::fit(&config, &flags).unwrap();
        sums.push(["summary.json", "latent.csv", "hyper.csv", "curves.csv"].map(|f| digest(&out.join(f))));
    }
    assert_eq!(sums[0], sums[1]);
}

#[test]
fn parameter_table_has_the_recovery_rows() {
    let dir = tempfile::tempdir().unwrap();
    let config = RunConfig::load(&small_example5(dir.path(), 200, 1)).unwrap();
    commands::simulate(&config, &Flags::default()).unwrap();
    commands::fit(&config, &Flags::default()).unwrap();
    let mut rdr = csv::Reader::from_path(dir.path().join("hyper.csv")).unwrap();
    assert_eq!(
        rdr.headers().unwrap(),
        vec!["parameter", "kind", "mean", "sd", "q025", "q50", "q975"]
    );
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    let want = [
        "u:sd",
        "cause1:scale:u",
        "cause2:scale:u",
        "cause3:scale:u",
        "cause1:age",
        "cause2:age",
        "cause3:age",
        "f:precision",
    ];
    for name in want {
        let row = rows.iter().find(|r| &r[0] == name).unwrap_or_else(|| panic!("{name} missing"));
        let v: Vec<f64> = (2..7).map(|k| row[k].parse().unwrap()).collect();
        assert!(v.iter().all(|x| x.is_finite()));
        assert!(v[2] <= v[3] && v[3] <= v[4], "{name}: {v:?}");
    }
    let tau: f64 = rows.iter().find(|r| &r[0] == "f:precision").unwrap()[2].parse().unwrap();
    assert!(tau > 0.0);

    let summary: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("summary.json")).unwrap()).unwrap();
    let keys: Vec<&String> = summary.as_object().unwrap().keys().collect();
    assert_eq!(
        keys,
        [
            "data",
            "derived",
            "diagnostics",
            "fixed_effects",
            "hyperparameters",
            "log_evidence",
            "log_posterior_mode",
            "model",
            "schema",
            "theta_mode"
        ]
    );
    for h in summary["hyperparameters"].as_array().unwrap() {
        let obj = h.as_object().unwrap();
        for k in ["name", "fixed", "mass_below_zero", "mean", "sd", "q025", "q50", "q975"] {
            assert!(obj.contains_key(k), "{k}");
        }
    }
    assert!(summary["data"]["time_scale"].is_null());

    // Cumulative incidence and survival partition probability at every time.
    let mut rdr = csv::Reader::from_path(dir.path().join("curves.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    let trajectory = rows.iter().filter(|r| &r[0] == "trajectory").count();
    assert_eq!(trajectory, 50);
    let mut totals = std::collections::BTreeMap::<String, f64>::new();
    for r in rows.iter().filter(|r| &r[0] != "trajectory") {
        *totals.entry(r[3].to_string()).or_default() += r[5].parse::<f64>().unwrap();
    }
    assert_eq!(totals.len(), 101);
    assert!(totals.values().all(|t| (t - 1.0).abs() < 2e-4));
}

#[test]
fn rescaled_times_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let config = RunConfig::load(&small_example5(dir.path(), 50, 5)).unwrap();
    commands::simulate(&config, &Flags::default()).unwrap();
    let flags = Flags {
        rescale_time: true,
        ..Flags::default()
    };
    let fitted = commands::fit_data(&config, &flags).unwrap();
    let times = |d: &cmprsk_core::JointDataset| {
        d.survival()
            .iter()
            .map(|r| r.time)
            .chain(d.longitudinal().iter().map(|r| r.time))
            .fold(0.0, f64::max)
    };
    assert_eq!(times(&fitted.data), 1.0);
    let original = commands::load_data(&config, config.model.as_ref().unwrap()).unwrap();
    assert_eq!(fitted.info.time_scale, Some(times(&original)));
}

/// Dense log marginal of `y` for a Gaussian marker with intercept and iid
/// individual effect, all precisions known.
fn gaussian_evidence(ids: &[usize], y: &[f64], tau_e: f64, tau_u: f64, tau_b: f64) -> f64 {
    let n = y.len();
    let cov = DMatrix::from_fn(n, n, |i, j| {
        1.0 / tau_b + if ids[i] == ids[j] { 1.0 / tau_u } else { 0.0 } + if i == j { 1.0 / tau_e } else { 0.0 }
    });
    let chol = cov.cholesky().unwrap();
    let yv = DVector::from_column_slice(y);
    let quad = yv.dot(&chol.solve(&yv));
    let log_det = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    -0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + log_det + quad)
}

#[test]
fn conjugate_model_evidence_in_summary() {
    let dir = tempfile::tempdir().unwrap();
    let ids = [1, 1, 2, 3, 3, 3, 4, 5, 5];
    let y = [0.3, -0.2, 1.4, 0.8, 1.1, 0.5, -0.7, 0.0, 0.4];
    let mut long = String::from("id,time,value\n");
    for (k, (i, v)) in ids.iter().zip(&y).enumerate() {
        long += &format!("{i},{},{v}\n", 0.1 * (k + 1) as f64);
    }
    fs::write(dir.path().join("long.csv"), long).unwrap();
    let times = [1.0, 2.0, 1.5, 3.0, 2.5];
    let mut surv = String::from("id,time,cause\n");
    for (i, t) in times.iter().enumerate() {
        surv += &format!("{},{t},{}\n", i + 1, i % 2);
    }
    fs::write(dir.path().join("surv.csv"), surv).unwrap();
    let toml = r#"
[data]
longitudinal = ["long.csv"]
survival = "surv.csv"

[[model.longitudinal]]
family = "gaussian"
precision = { prior = "fixed", value = 2.0 }
fixed = ["intercept"]
effects = [{ effect = "u" }]

[[model.causes]]
family = "exponential"

[[model.effects]]
name = "u"
kind = "iid"
index = { by = "individual" }
hypers = [{ prior = "fixed", value = 3.0 }]
"#;
    let cfg = dir.path().join("micro.toml");
    fs::write(&cfg, toml).unwrap();
    let out = bin().args(["fit", "--config"]).arg(&cfg).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("summary.json")).unwrap()).unwrap();
    // The cause block has predictor 0, so it adds −Σt.
    let oracle = gaussian_evidence(&ids, &y, 2.0, 3.0, 0.001) - times.iter().sum::<f64>();
    let got = summary["log_evidence"].as_f64().unwrap();
    assert!((got - oracle).abs() < 1e-8, "{got} vs {oracle}");
    assert_eq!(summary["theta_mode"].as_array().unwrap().len(), 0);
}

#[test]
fn missing_input_exits_with_two_and_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_example5(dir.path(), 10, 1);
    let out = bin().args(["fit", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("longitudinal.csv"), "{err}");

    let out = bin().args(["fit", "--config", "/nonexistent/run.toml"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/run.toml"));

    let out = bin().arg("fit").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = bin().arg("bogus").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn numerical_failure_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_example5(dir.path(), 30, 1);
    let mut text = fs::read_to_string(&cfg).unwrap();
    text += "\n[options]\nmax_evaluations = 3\n";
    fs::write(&cfg, text).unwrap();
    assert!(bin().args(["simulate", "--config"]).arg(&cfg).output().unwrap().status.success());
    let out = bin().args(["fit", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("optimize_hyper"));
}

#[test]
fn legacy_generator_only_for_example5() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_example5(dir.path(), 200, 1);
    let out = bin()
        .args(["simulate", "--legacy-appendix", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert!(out.status.success());
    let truth: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("truth.json")).unwrap()).unwrap();
    assert_eq!(truth["config"]["legacy_appendix"], true);

    let mut config = RunConfig::load(&configs().join("example1.toml")).unwrap();
    config.output.dir = Some(dir.path().to_path_buf());
    let flags = Flags {
        legacy_appendix: true,
        ..Flags::default()
    };
    assert_eq!(commands::simulate(&config, &flags).unwrap_err().exit_code(), 2);
}

#[test]
fn check_reports_every_criterion_and_zero_tolerance_fails_all() {
    let dir = tempfile::tempdir().unwrap();
    let text = "[check]\nseeds = [1]\nn_individuals = 150\nn_bins = 20\n";
    let cfg = dir.path().join("check.toml");
    fs::write(&cfg, text).unwrap();
    let config = RunConfig::load(&cfg).unwrap();
    let v = commands::check(&config, &Flags::default()).unwrap();
    let names: Vec<&str> = v.criteria.iter().map(|c| c.0.as_str()).collect();
    assert_eq!(names, ["coverage_per_seed", "coverage_pooled", "point_estimates", "sign_recovery"]);
    assert_eq!(v.seeds[0].parameters.len(), 7);
    assert_eq!(v.coverage.len(), 7);
    assert!(dir.path().join("verdict.json").exists());

    fs::write(&cfg, format!("{text}tolerance_scale = 0.0\n")).unwrap();
    let config = RunConfig::load(&cfg).unwrap();
    let v = commands::check(&config, &Flags::default()).unwrap();
    assert!(v.criteria.iter().all(|c| !c.1), "{:?}", v.criteria);
    assert!(v.seeds[0].parameters.iter().all(|p| !p.covered && p.point_ok != Some(true)));
    assert!(!v.pass);
}

#[test]
fn model_spec_parses_copy_of_linear_predictor() {
    let text = r#"
longitudinal = [{ family = "gaussian", fixed = ["intercept", "time"], effects = [{ effect = "u" }] }]
causes = [{ family = "weibull", shape = { prior = "fixed", value = 1.0 }, fixed = ["intercept"] }]
effects = [{ name = "u", kind = "iid", index = { by = "individual" } }]
copy_links = [{ source = { kind = "linear_predictor", block = "longitudinal" }, target = "cause1" }]
"#;
    let spec: ModelSpec = toml::from_str(text).unwrap();
    assert_eq!(spec.copy_links.len(), 1);
    assert_eq!(spec.causes[0].family.name(), "weibull");
}
