//! Posterior-sampling model predictive control for linear-Gaussian systems.
//!
//! The crate simulates episodic learning control: an unknown linear system
//! with polytopic state/input constraints is controlled by a soft-constrained,
//! constraint-tightened MPC whose model parameters are drawn from a conjugate
//! Gaussian posterior (or set to its mean, or to the ground truth), and the
//! resulting closed-loop performance is scored with regret and safety
//! metrics.
//!
//! Module map:
//! - [`qp`]: generic convex QP solver (operator splitting + polish),
//! - [`model`]: domain types (systems, constraints, rewards, beliefs),
//! - [`posterior`]: conjugate Bayesian updates, sampling, MAP extraction,
//! - [`mpc`]: the shrinking-horizon soft-constrained MPC policy,
//! - [`sim`]: plant simulation and the episodic learning loop,
//! - [`metrics`]: regret/safety estimators and theory-side diagnostics,
//! - [`bench`]: cooling-grid benchmark generators,
//! - [`config`]: TOML experiment configuration,
//! - [`runner`]: experiment driver and result artifacts (used by the CLI).

pub mod model;
pub mod qp;
