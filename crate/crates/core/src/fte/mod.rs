//! Full trajectory estimation: a bound-constrained batch solve over every frame.

mod banded;
mod cost;
mod problem;
mod solver;

pub use banded::{BandedCholesky, BandedSpd};
pub use cost::{robust_cost, robust_cost_derivative, robust_weight, RobustCostParams};
pub use problem::{
    measurement_cost, model_cost, Channel, FteConfig, FteProblem, FteVariables,
    MeasurementResidual, VIRTUAL_BLOCKS,
};
pub use solver::{initial_poses, solve_fte, solve_problem, windows, FteResult, FteSolution};
