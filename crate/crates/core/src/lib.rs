//! Noise calibration, utility/rate bounds and a seeded FedSGD simulator for
//! locally differentially private federated learning.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod accountants;
pub mod error;
pub mod fedsgd_sim;
pub mod privacy_core;
pub mod rdp_oracle;
pub mod tradeoff;
pub mod validation;

pub use accountants::{calibrate, CalibrationRequest, CalibrationResult, Method};
pub use error::{Error, Result};
pub use fedsgd_sim::{run_simulation, SimConfig, SimResult};
pub use privacy_core::{check_validity, MechanismParams, PrivacyBudget, RdpCost, ValidityReport};
pub use tradeoff::{sweep, LossRegularity, SweepConfig, TradeoffPoint, UserSpec};
