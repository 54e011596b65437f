//! Constrained ensemble Kalman inversion.
//!
//! The constraint residual `A(x)` is appended to the forward map as an extra
//! observation with target zero, so that the unconstrained ensemble update
//! applied to the augmented map `x -> (G(x), x, A(x))` drives the ensemble
//! towards minimizers of `Phi_R + |A|^2 / nu`.

mod problem;
mod run;
mod step;

pub use problem::{ForwardMap, InverseProblem, LinearForward, Prior};
pub use run::{run_eki, run_from_ensemble, EkiProblem, EkiSolver};
pub use step::{
    adapt_timestep, covariance_norm, eki_drift_separate, eki_drift_unified, eki_step_explicit,
    eki_step_semi_implicit, eki_update_explicit, eki_update_semi_implicit, eki_update_uncentered,
    interaction_matrix, spectral_norm, EkiStep, CONDITION_LIMIT,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EkiScheme {
    /// `X - dt (X - xbar) M`.
    Explicit,
    /// `xbar + (X - xbar)(I + dt M)^{-1}`.
    SemiImplicit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EkiParams {
    /// Base step `dt*` of the adaptive rule `dt = dt* / (|M| + dt*/dt_max)`.
    pub dt_base: f64,
    #[serde(with = "crate::serde_inf")]
    pub dt_max: f64,
    pub scheme: EkiScheme,
    pub max_iters: u64,
    /// Runs stop once the spectral norm of the sample covariance drops below this value.
    pub collapse_tol: f64,
}

impl Default for EkiParams {
    fn default() -> Self {
        Self {
            dt_base: 1.0,
            dt_max: f64::INFINITY,
            scheme: EkiScheme::Explicit,
            max_iters: 200,
            collapse_tol: 1e-14,
        }
    }
}

impl EkiParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt_base > 0.0) || !self.dt_base.is_finite() {
            return Err(Error::config(format!("dt_base must be positive, got {}", self.dt_base)));
        }
        if !(self.dt_max > 0.0) {
            return Err(Error::config(format!("dt_max must be positive or inf, got {}", self.dt_max)));
        }
        if !(self.collapse_tol >= 0.0) || !self.collapse_tol.is_finite() {
            return Err(Error::config(format!("collapse_tol must be nonnegative, got {}", self.collapse_tol)));
        }
        Ok(())
    }
}
