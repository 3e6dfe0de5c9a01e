//! Synthesis of recurrent-equilibrium-network (REN) output-feedback
//! controllers for partially observed plants, with exponential stability
//! guaranteed at every training iterate.
//!
//! The toolkit revolves around one idea: the set of REN controllers that
//! exponentially stabilize a given plant admits a convex inner description.
//! A loop transformation normalizes every sector-bounded nonlinearity to
//! [-1, 1], a Lyapunov/quadratic-constraint inequality certifies decay rate
//! rho in those coordinates, and a change of controller variables turns that
//! inequality into a linear matrix inequality. Reinforcement learning then
//! alternates unconstrained policy-gradient steps with Euclidean projections
//! onto the LMI set, so stability never has to be traded against reward.
//!
//! Module layout, roughly bottom-up:
//!
//! - [`linalg`]: small dense-matrix helpers shared by everything else.
//! - [`implicit`]: damped fixed-point iteration for implicit (equilibrium)
//!   layers, with a Newton fallback.
//! - [`activation`]: scalar nonlinearities with sector/slope metadata and
//!   their loop-transformed (normalized) forms.
//! - [`plant`]: linear and sector-bounded-nonlinear plant models, the
//!   implicit neural plant used for system identification, and plant-side
//!   loop transformations.
//! - [`sysid`]: fits the implicit neural plant to sampled transition data
//!   while keeping its equilibrium layer well posed.
//! - [`ren`]: the REN controller parameterization, its loop-transformed
//!   twin, equilibrium solves, and simulation steps.
//! - [`stability`]: closed-loop assembly, the Lyapunov/sector matrix
//!   inequality, decay envelopes, and certificates.
//! - [`convex`]: the convex reparameterization of the controller, the LMI
//!   that is affine in those variables, and recovery of controller matrices
//!   plus a Lyapunov certificate from a feasible point.
//! - [`sdp`]: a thin conic-programming layer (quadratic objective, PSD and
//!   nonnegative cones) over an interior-point solver.
//! - [`projection`]: Euclidean projection onto the feasible set, sector
//!   re-centering, feasibility margins, and feasible sampling.
//! - [`training`]: reward oracles, closed-loop rollouts, analytic and
//!   finite-difference policy gradients, and the projected training loop.
//! - [`io`]: on-disk formats (plants, controllers, certificates, datasets,
//!   training history) and content hashes.
//! - [`plot`]: minimal SVG line/phase plots for training and simulation
//!   output.

// Pulled in so the `system` feature reaches clarabel's BLAS backend.
use openblas_src as _;

pub mod activation;
pub mod convex;
pub mod error;
pub mod implicit;
pub mod io;
pub mod linalg;
pub mod plant;
pub mod plot;
pub mod projection;
pub mod ren;
pub mod sdp;
pub mod stability;
pub mod sysid;
pub mod training;

pub use error::{Error, Result};
