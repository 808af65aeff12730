//! Linear mixed-effects models driven by integrated Ornstein-Uhlenbeck
//! system noise: exact maximum likelihood, efficient standard errors,
//! simulation and asymptotic diagnostics.

pub mod cli;
pub mod covariance;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod estimation;
pub mod likelihood;
pub mod numeric;
pub mod optim;
pub mod rng;
pub mod simulation;

pub use covariance::{CovParams, GParam, KernelKind, KernelSpec};
pub use data::{Dataset, Subject};
pub use error::{Error, Result};
pub use estimation::{fit, FitConfig, FitResult};
pub use likelihood::{Likelihood, ParamVector};
pub use simulation::{generate_design, run_mc_study, simulate_responses, DesignConfig, McConfig, McReport};
