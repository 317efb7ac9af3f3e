//! Voltage-prediction surrogate for AC optimal power flow.
//!
//! Two neural predictors map bus loads to voltage magnitudes and angles; every
//! other operating quantity is reconstructed from the power-flow equations and
//! box violations are repaired by a linearized pseudo-inverse correction. A
//! built-in interior-point AC-OPF solver provides ground truth and the timing
//! baseline.

pub mod acpf;
pub mod cases;
#[cfg(feature = "cli")]
pub mod cli;
pub mod dataset;
pub mod evalkit;
pub mod netmodel;
pub mod nnet;
pub mod oracle;
pub mod recon;
mod timer;

pub use acpf::{BranchFlow, Injection, VoltageState};
pub use netmodel::{parse_case, Loads, Network};
