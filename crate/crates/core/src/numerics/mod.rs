//! Dense linear solves, damped Newton iteration and fixed-step RK4.
//!
//! Everything here is pure: problems are plain values and results are fresh
//! allocations, so independent solves and integrations may run concurrently.

mod linalg;
mod newton;
mod rk4;

pub use linalg::{
    condition_estimate, linear_solve, linear_solve_with_bound, LinearSystem, LuFactors, DEFAULT_CONDITION_BOUND,
    PIVOT_RELATIVE_THRESHOLD,
};
pub use newton::{newton_solve, NewtonProblem, NewtonSolution, DEFAULT_MAX_ITER, DEFAULT_TOL};
pub use rk4::{rk4_integrate, rk4_integrate_with, IvpProblem, TrajectoryRecord};

/// Maximum absolute entry of a vector (0 for an empty slice).
pub fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}
