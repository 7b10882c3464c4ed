//! Sample-size design for Bayesian equivalence and noninferiority tests via sufficient
//! sample size distributions (SSSDs).
//!
//! The fast path runs in two stages. [`stage1`] approximates the power curve from
//! quasi-Monte Carlo draws of limiting MLEs and converts a target power into a target HDI
//! length. [`stage2`] adjusts that estimate for the analysis priors using representative
//! samples and Laplace approximations. [`oracle`] is the slow brute-force check.

pub mod asymptotics;
pub mod error;
pub mod laplace;
pub mod model;
pub mod numdiff;
pub mod oracle;
pub mod presets;
pub mod prior;
pub mod qmc;
pub mod report;
pub mod serde_ext;
pub mod special;
pub mod stage1;
pub mod stage2;

pub use error::{ErrorCode, Result, SssdError, Warning, WarningKind};
pub use model::{Characteristic, Comparison, DesignSpec, ModelFamily};
