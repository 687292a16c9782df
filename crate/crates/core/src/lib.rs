//! Competing-risks joint models as stacked latent Gaussian models.
//!
//! A longitudinal marker and `C` mutually exclusive cause-specific hazards are
//! stacked into one latent Gaussian model and fitted by nested Laplace
//! approximation: Newton iterations for the latent mode at fixed
//! hyperparameters, a Laplace approximation of the hyperparameter posterior,
//! simplex optimisation and grid exploration of the hyperparameters, and
//! Gaussian-mixture marginals for every latent coordinate.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, configuration
//! and the command-line front end live in the `lgm-cmprsk` crate.

#![no_std]
#![warn(missing_debug_implementations)]

extern crate alloc;

pub mod data;
pub mod error;
pub mod families;
pub mod gmrf;
pub mod inference;
pub(crate) mod math;
pub mod simulate;
pub mod sparse;
pub mod stacker;

pub use data::{JointDataset, LatePolicy, LongitudinalRecord, SurvivalRecord};
pub use error::{Error, Result};
pub use gmrf::{EffectKind, EffectSpec, IndexSpec, PriorSpec, SparsePrecision};
pub use inference::{fit, FitOptions, FitResult, Sequential};
pub use stacker::{assemble, ModelSpec, StackedModel};
