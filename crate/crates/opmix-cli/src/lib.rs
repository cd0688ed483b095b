//! Experiment harness around the `opmix` library.
//!
//! Everything the binary can do lives here as plain functions over paths and
//! parsed configs, so the whole surface is testable without spawning a
//! process:
//!
//! - [`config`]: strict TOML experiment configs with collect-all validation.
//! - [`runner`]: executes the strategy x ordering x seed matrix into a
//!   self-describing run directory.
//! - [`report`]: recomputes comparison tables from persisted stage records.
//! - [`inspect`]: gap-bound audits and grid regret sweeps over a finished
//!   run.

#![forbid(unsafe_code)]

pub mod config;
pub mod inspect;
pub mod report;
pub mod runner;

pub use config::ExperimentConfig;
pub use inspect::InspectArgs;
pub use runner::RunOutcome;
