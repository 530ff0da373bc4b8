//! Adaptive borrowing of external controls for average-treatment-effect
//! estimation in randomized trials.
//!
//! External controls (ECs) are ranked by how much each would perturb the
//! outcome model of the trial's own control arm (an influence score), and the
//! top-ranked prefix that minimizes the estimated mean squared error of a
//! semiparametric combined estimator is borrowed. An optional calibration step
//! first removes a fitted bias function from EC outcomes.

pub mod data;
pub mod error;
pub mod linalg;
pub mod nuisance;
pub mod influence;
pub mod estimators;
pub mod borrowing;
pub mod calibration;
pub mod baselines;
pub mod methods;
pub mod simulation;

pub use error::{Error, Result};
pub use methods::{estimate, Method, MethodOptions, MethodResult};
