//! Maximum-likelihood fitting of linear mixed models for multivariate
//! crossover trials in which either the error vector or the subject random
//! effect is skew-normal.

pub mod cli;
pub mod data;
pub mod design;
pub mod diagnostics;
pub mod em;
pub mod error;
pub mod io;
pub mod rng;
pub mod simulation;
pub mod skew_normal;
pub mod special;

pub use data::{Dataset, Subject};
pub use design::{build_design, covariate_w, response_order, CrossoverLayout, DesignPair};
pub use em::{fit, FitOptions, FitResult, Scenario, ThetaState};
pub use error::{Error, Result};
pub use rng::RngStream;
