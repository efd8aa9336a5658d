//! Small-area estimation under the gamma-gamma unit-level model.

pub mod data;
pub mod diagnostics;
pub mod error;
pub mod gamma_gamma;
pub mod glmm;
pub mod informative;
pub mod mse;
pub mod numerics;
pub mod sim;
pub mod table;
pub mod targets;

pub use error::{Error, Result};

#[cfg(test)]
#[path = "../tests/common/oracles.rs"]
mod testutil;

/// Library version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
