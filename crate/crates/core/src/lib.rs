//! Federated-learning poisoning benchmark at desk scale.
//!
//! Clients train a small classifier on their share of the data, adversarial
//! clients attack, and the server combines the submissions with a robust
//! aggregation rule. [`harness`] turns a flat text config into a run;
//! [`attacks`], [`defenses`] and [`fl`] hold the pieces it wires together.
//!
//! ```
//! use flbench::harness::{run_experiment, ExperimentConfig};
//!
//! let cfg = ExperimentConfig::from_text("attack.name = ipm\ndefense.name = trimmedmean\ntrain.rounds = 10").unwrap();
//! let report = run_experiment(&cfg).unwrap();
//! assert!(report.summary.final_acc > 0.0);
//! ```

pub mod attacks;
pub mod data;
pub mod defenses;
pub mod error;
pub mod fl;
pub mod harness;
pub mod model;
pub mod params;
pub mod registry;
pub mod rng;
pub mod train;
pub mod vector;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    struct Introduction;
    #[doc = include_str!("../../../book/src/quickstart.md")]
    struct Quickstart;
    #[doc = include_str!("../../../book/src/configuration.md")]
    struct Configuration;
    #[doc = include_str!("../../../book/src/algorithms.md")]
    struct Algorithms;
    #[doc = include_str!("../../../book/src/attacks.md")]
    struct Attacks;
    #[doc = include_str!("../../../book/src/defenses.md")]
    struct Defenses;
    #[doc = include_str!("../../../book/src/outputs.md")]
    struct Outputs;
    #[doc = include_str!("../../../book/src/library.md")]
    struct Library;
    #[doc = include_str!("../../../book/src/determinism.md")]
    struct Determinism;
}
