//! Experiment orchestration: configuration, training, evaluation, sweeps,
//! pseudo-label files and the command-line front end.
//!
//! A run directory looks like
//!
//! ```text
//! run/
//!   config.echo        effective configuration (TOML)
//!   metrics.csv        one row per epoch, byte-reproducible
//!   timing.csv         wall-clock seconds per epoch
//!   checkpoints/       last.ckpt (weights, optimizer, epoch) and best.ckpt
//!   masks/             mined mask store, when mining ran inside the run
//!   plots/             curves.csv, gate.csv
//! ```

pub mod cli;
pub mod config;
pub mod evaluate;
pub mod pseudo;
pub mod sweep;
pub mod train;

pub use config::{ExperimentConfig, LabelLevel, Mode};
pub use evaluate::{evaluate, evaluate_model, EvalReport};
pub use pseudo::{compute_pseudo_labels, read_pseudo_labels, write_pseudo_labels, LoadedPseudo, PseudoRecord, PseudoSummary};
pub use sweep::{mean_std, sweep, Axis};
pub use train::{train, train_with, MetricsRecord, RunData, RunSummary};
