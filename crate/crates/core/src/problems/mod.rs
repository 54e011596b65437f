//! Benchmark objectives and inverse problems.

mod ackley;
mod fokker_planck;

pub use ackley::{ackley, Ackley};
pub use fokker_planck::{
    fp_exact_solution, generate_observations, misfit_weights, observation_grid, misfit_weights_variances,
    misfit_weights_variances_gradient, sample_simplex, simplex_constraints,
    simplex_variance_constraints, GaussianMixture, ObservationSet, WeightsForward,
    WeightsVariancesForward,
};

use nalgebra::DMatrix;

use crate::constraints::{ConstraintKind, QuadraticConstraint};
use crate::error::Result;

/// `x^T A x - c` as an equality or an outside-inequality; rejects non-SPD `A`.
pub fn make_quadratic_constraint(
    kind: ConstraintKind,
    matrix: DMatrix<f64>,
    level: f64,
) -> Result<QuadraticConstraint> {
    QuadraticConstraint::new(kind, matrix, level)
}
