//! Hydraulic state estimation for water distribution networks.
//!
//! Recovers every node head and link flow from a sparse set of
//! head-difference measurements. The nonlinear pipe and pump energy
//! equations are replaced each iteration by linear constraints whose
//! constants come from the previous iterate (a log-domain change of
//! variables makes the replacement exact at the linearization point),
//! so each iteration is a small LP or QP. An independent nonlinear
//! solver ([`oracle`]) provides ground truth for validation and is
//! never consulted by the estimator itself.
//!
//! Modules:
//! - [`network`]: graph model, EPANET `.inp` subset parser, incidence operators
//! - [`hydraulics`]: exact head loss / head gain / tank / balance relations
//! - [`linearization`]: per-iteration constants and the GP-form self-check
//! - [`solver`]: dense active-set solver for the convex subproblems
//! - [`estimator`]: subproblem assembly and the successive-approximation loop
//! - [`oracle`]: Newton hydraulic solver and multi-start nonlinear SE
//! - [`cli`]: `estimate` / `simulate` / `compare` commands

pub mod cli;
pub mod estimator;
pub mod hydraulics;
pub mod linearization;
pub mod network;
pub mod oracle;
pub mod solver;

pub use estimator::{EstimatorConfig, IterationTrace, MeasurementSet, StateVector};
pub use hydraulics::{HeadLossModel, PumpCurve};
pub use linearization::{GpConfig, LinearCoefficients};
pub use network::{IncidenceOperators, Network};
pub use solver::{ConvexProgram, ObjectiveKind, SolveResult, SolveStatus};
