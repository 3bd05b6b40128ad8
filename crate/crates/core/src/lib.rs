//! Cox proportional-hazards regression with a semiparametric relative risk
//! `exp(Uᵀβ + η(W))`.
//!
//! The nonparametric part `η` is a smoothing-spline ANOVA function of one or
//! two covariates rescaled to `[0, 1]`; the parametric part `β` is selected by
//! a one-step SCAD or adaptive-LASSO update solved with LARS. The two parts
//! are estimated by alternating between them ([`backfit::fit`]).

pub mod backfit;
pub mod beta_solver;
pub mod data;
pub mod error;
pub mod eta_solver;
pub mod inference;
pub mod kl_select;
mod linalg;
pub mod partial_lik;
pub mod simbench;
pub mod spline;

pub use data::{build_risk_sets, load_dataset, ColumnSchema, RiskSet, SurvivalDataset};
pub use error::{Error, Result};
pub use eta_solver::EtaFit;

pub use spline::{EtaCoefficients, SplineBasis, Structure, Term};
pub use backfit::{fit, FitConfig, FitResult};
pub use beta_solver::{BetaFit, PenaltyKind, PenaltySpec};
pub use kl_select::KLReport;
