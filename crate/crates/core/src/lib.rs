//! Optimal refraction of controlled Lévy processes: path simulation,
//! Monte Carlo estimation of the optimal threshold, scale functions and
//! resolvents for spectrally negative models, and verification tools.

pub mod cli;
pub mod cost;
pub mod error;
pub mod levy_model;
pub mod pathsim;
pub mod quad;
pub mod refraction;
pub mod resolvent;
pub mod scale;
pub mod threshold;
pub mod verify;

pub use cost::{CostSpec, Growth};
pub use error::{AssumptionViolation, Error, Result};
pub use levy_model::{CaseTag, JumpKind, JumpSpec, JumpTerm, LevyModel, PathClass, ProblemSpec, Side};
pub use pathsim::{DrivingPath, JumpMark, RngStreamKey, TimeGrid};
pub use refraction::{apply_strategy, refract_path, ControlledPath, FeedbackRule, RateProfile, Strategy};
pub use resolvent::{
    resolvent_apply, resolvent_apply_dx, resolvent_density, resolvent_density_dx, semi_analytic_threshold,
    semi_analytic_v_prime, solve_two_sided, FixedPointConfig, QuadratureConfig, ResolventKernel, TwoSidedSolution,
};
pub use scale::{laplace_exponent, right_inverse, scale_w, ScaleFn, SnModel};
pub use threshold::{
    compare_strategies, coupling_check, derivative_identity, estimate_rho_curve, estimate_value, estimate_value_derivative,
    occupation_histogram, sandwich_check, solve_threshold, MonteCarloConfig, RhoCurve, Summary, ThresholdResult,
    ValueEstimate,
};
pub use verify::{check_hjb_inequality, check_martingale_identities, generator_apply, Candidate, ResidualReport};
