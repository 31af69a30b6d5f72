//! Deterministic simulation harness for bizur.
//!
//! [`net::Sim`] runs any number of bizur instances and clients over a
//! simulated network in virtual time, with message loss, partitions, crashes
//! and per-bucket delays. Clients run closed-loop programs from
//! [`workload`]; every invocation and response lands in a [`history::History`]
//! that [`checker::check`] tests for per-key linearizability. [`scenario`]
//! reads TOML scenario files and produces per-second metrics.

pub mod checker;
pub mod history;
pub mod metrics;
pub mod net;
pub mod scenario;
pub mod suite;
pub mod workload;

pub use checker::{check, CheckError, Verdict};
pub use history::{History, OpKind, Operation, Outcome};
pub use net::{CrashMode, Sim, SimConfig, SimError};
pub use workload::{KeyDistribution, OpMix, WorkloadParams};
