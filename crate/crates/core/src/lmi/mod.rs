//! Linear matrix inequality programs over one symmetric matrix variable and
//! a list of named scalars, with a dense interior-point solver.

pub mod program;
pub mod solver;
pub mod sym;

pub use program::{evaluate_constraint, AffineLmiConstraint, BlockLmiBuilder, ConstraintValue, LmiPoint, LmiProgram, MatrixTerm, Sense};
pub use solver::{solve, solve_from, SdpSolution, SolveStatus, SolverOptions};
pub use sym::{symmetric_sqrt, SymMatrix};
