//! Guaranteed-cost leader-follower consensus for linear multi-agent systems
//! whose agents interact through uncertain couplings bounded by integral
//! quadratic constraints (IQCs).
//!
//! The crate is organised as a pipeline:
//!
//! * [`graph`] builds the coupling and control graphs and the constants
//!   derived from the pinned control Laplacian.
//! * [`lmi`] models affine linear matrix inequalities and solves small
//!   semidefinite programs with a log-barrier interior-point method.
//! * [`synthesis`] assembles the per-node certificate LMIs, minimises the
//!   guaranteed cost and extracts the feedback gain.
//! * [`uncertainty`] provides coupling operators and checks their IQCs along
//!   sampled signals.
//! * [`simulation`] integrates the closed loop, evaluates the quadratic cost
//!   and checks the Lyapunov dissipation inequality.
//! * [`cli`] wires everything to a JSON configuration and report.

pub mod cli;
pub mod error;
pub mod graph;
pub mod linalg;
pub mod lmi;
pub mod pendulum;
pub mod simulation;
pub mod synthesis;
pub mod uncertainty;

pub use error::{Error, Result};
