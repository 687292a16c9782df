mod common;

use cmprsk_core::families::{exponential_surv_loglik, poisson_loglik};
use cmprsk_core::gmrf::{EffectSpec, HyperSpec, IndexSpec};
use cmprsk_core::inference::{find_mode, log_conditional, NewtonOptions};
use cmprsk_core::simulate::{example1_spec, example5_spec, simulate_example1, simulate_example5, Example1Config, SimConfig, WeibullCause};
use cmprsk_core::stacker::{BlockSpec, Family, Observation};
use cmprsk_core::{assemble, Error, ModelSpec, StackedModel};
use common::{dataset, long, surv};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn small_example5() -> StackedModel {
    let mut config = SimConfig::example5(4);
    config.n_individuals = 40;
    let data = simulate_example5(&config).unwrap();
    assemble(&example5_spec(3, 20, Family::Exponential), &data).unwrap()
}

fn small_example1() -> StackedModel {
    let config = Example1Config {
        n_individuals: 30,
        n_obs_range: (3, 6),
        beta: (0.5, 0.2),
        tau_v: 2.0,
        tau_w: 4.0,
        rho: 0.2,
        causes: vec![
            WeibullCause {
                intercept: -1.0,
                gamma: 0.5,
                kappa: -0.3,
                shape: 1.4,
            },
            WeibullCause {
                intercept: -1.5,
                gamma: -0.4,
                kappa: 0.2,
                shape: 0.8,
            },
        ],
        seed: 2,
        censoring_rate: 0.1,
    };
    assemble(&example1_spec(2), &simulate_example1(&config).unwrap()).unwrap()
}

#[test]
fn gradient_matches_finite_differences_at_20_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    // Age enters the hazards multiplied by ~45, so points are drawn around
    // the conditional mode to keep the objective well scaled.
    let noise = Normal::new(0.0, 0.05).unwrap();
    for model in [small_example5(), small_example1()] {
        let theta: Vec<f64> = model.initial_theta().iter().map(|t| t + 0.2).collect();
        let n = model.n_latent();
        let mode = find_mode(&model, &theta, &vec![0.0; n], &NewtonOptions::default()).unwrap().mode;
        for _ in 0..10 {
            let x: Vec<f64> = mode.iter().map(|m| m + noise.sample(&mut rng)).collect();
            let c = log_conditional(&model, &theta, &x).unwrap();
            for i in 0..n {
                let h = 1e-6 * x[i].abs().max(1.0);
                let mut hi = x.clone();
                hi[i] += h;
                let mut lo = x.clone();
                lo[i] -= h;
                let fd = (log_conditional(&model, &theta, &hi).unwrap().value
                    - log_conditional(&model, &theta, &lo).unwrap().value)
                    / (2.0 * h);
                let rel = (fd - c.gradient[i]).abs() / c.gradient[i].abs().max(1.0);
                assert!(rel < 1e-5, "coordinate {i}: {fd} vs {}", c.gradient[i]);
            }
        }
    }
}

/// One Poisson count on a single latent coordinate with a fixed unit prior.
fn single_count_model(y: f64) -> StackedModel {
    let spec = ModelSpec::new()
        .longitudinal(BlockSpec::new(Family::Poisson).attach("g"))
        .cause(BlockSpec::new(Family::Exponential))
        .effect(
            "g",
            EffectSpec::iid(IndexSpec::Covariate {
                name: "g".into(),
                size: 1,
            })
            .with_hypers(vec![HyperSpec::fixed(1.0)]),
        );
    let data = dataset(vec![long(1, 0.5, y, &[("g", 1.0)], 0)], vec![surv(1, 1.0, 0, &[])], 1);
    assemble(&spec, &data).unwrap()
}

#[test]
fn single_poisson_mode_matches_scalar_newton() {
    let model = single_count_model(3.0);
    assert_eq!(model.n_latent(), 1);
    let approx = find_mode(&model, &[], &[0.0], &NewtonOptions::default()).unwrap();
    // Stationary point of 3x − eˣ − x²/2.
    let mut x: f64 = 0.0;
    for _ in 0..100 {
        x -= (3.0 - x.exp() - x) / (-x.exp() - 1.0);
    }
    // A gradient below 1e-8 places the mode within 1e-8 / (eˣ + 1).
    assert!((approx.mode[0] - x).abs() < 1e-8, "{} vs {x}", approx.mode[0]);
    assert!(approx.converged);
    // Posterior precision at the mode is eˣ + 1.
    assert!((approx.log_det_half - 0.5 * (x.exp() + 1.0).ln()).abs() < 1e-8);
}

#[test]
fn accepted_newton_steps_never_decrease_the_objective() {
    for model in [small_example5(), small_example1()] {
        let theta = model.initial_theta();
        let x0 = vec![0.0; model.n_latent()];
        let mut previous = log_conditional(&model, &theta, &x0).unwrap().value;
        for k in 1..30 {
            let options = NewtonOptions {
                tolerance: 1e-8,
                max_iterations: k,
            };
            let x = match find_mode(&model, &theta, &x0, &options) {
                Ok(a) => a.mode,
                Err(Error::NotConverged { last, .. }) => last,
                Err(e) => panic!("{e}"),
            };
            let value = log_conditional(&model, &theta, &x).unwrap().value;
            assert!(value >= previous, "iteration {k}: {value} < {previous}");
            previous = value;
        }
    }
}

#[test]
fn objective_at_zero_is_prior_normaliser_plus_likelihood() {
    let model = small_example5();
    let theta = model.initial_theta();
    let prior = model.joint_prior_precision(&theta).unwrap();
    let rank = (prior.dim() - prior.rank_deficiency()) as f64;
    let normaliser = -0.5 * rank * (2.0 * std::f64::consts::PI).ln() + 0.5 * prior.log_det_constant();
    let mut ll = 0.0;
    for row in model.rows() {
        ll += match row.observation {
            Observation::Value(y) => poisson_loglik(y, 0.0).unwrap().value,
            Observation::Survival(o) => exponential_surv_loglik(o, 0.0).unwrap().value,
        };
    }
    let c = log_conditional(&model, &theta, &vec![0.0; model.n_latent()]).unwrap();
    assert!((c.value - (normaliser + ll)).abs() < 1e-9 * ll.abs());
    // With η = 0 every Poisson row has curvature 1 and every survival row its time.
    for (row, k) in model.rows().iter().zip(&c.curvature) {
        let want = match row.observation {
            Observation::Value(_) => 1.0,
            Observation::Survival(o) => o.time,
        };
        assert!((k - want).abs() < 1e-12);
    }
}

#[test]
fn wrong_dimensions_are_rejected() {
    let model = single_count_model(2.0);
    assert!(matches!(log_conditional(&model, &[], &[0.0, 1.0]), Err(Error::Dimension { .. })));
    assert!(find_mode(&model, &[], &[f64::NAN], &NewtonOptions::default()).is_err());
}
