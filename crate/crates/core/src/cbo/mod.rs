//! Constrained consensus-based optimization.
//!
//! Particles relax towards the Gibbs-weighted mean of the penalized objective
//! `g = f + |A|^2 / nu`, diffuse component-wise in proportion to their distance
//! from it, and (for finite `epsilon`) follow the relaxation drift
//! `-(1/epsilon) grad |A|^2` towards the feasible set.

mod mean;
mod run;
mod step;

pub use mean::{gibbs_weights, weighted_mean, weighted_mean_of_values};
pub use run::{run_cbo, steps_for, CboProblem, CboSolver, StoppingRule};
pub use step::{
    cbo_step_explicit, cbo_step_explicit_with_noise, cbo_step_projected, cbo_step_projected_with_noise,
    cbo_step_semi_implicit, cbo_step_semi_implicit_with_noise, draw_noise, ImplicitFactor,
};

pub use crate::constraints::QuadraticConstraint;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest accepted Gibbs exponent.
pub const ALPHA_GUARD: f64 = 1e15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    /// Euler-Maruyama on the full dynamics.
    Explicit,
    /// Relaxation drift of a single quadratic constraint treated implicitly.
    SemiImplicit,
    /// Unconstrained update followed by projection onto a sphere.
    Projection,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CboParams {
    pub alpha: f64,
    pub sigma: f64,
    #[serde(with = "crate::serde_inf")]
    pub nu: f64,
    #[serde(with = "crate::serde_inf")]
    pub epsilon: f64,
    pub dt: f64,
    pub max_time: f64,
    pub scheme: Scheme,
}

impl Default for CboParams {
    fn default() -> Self {
        Self {
            alpha: 30.0,
            sigma: 0.7,
            nu: 1.0,
            epsilon: 0.1,
            dt: 5e-4,
            max_time: 15.0,
            scheme: Scheme::SemiImplicit,
        }
    }
}

impl CboParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha < ALPHA_GUARD) {
            return Err(Error::config(format!("alpha must lie in [0, {ALPHA_GUARD:e}), got {}", self.alpha)));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(Error::config(format!("sigma must be nonnegative, got {}", self.sigma)));
        }
        if !(self.nu > 0.0) {
            return Err(Error::config(format!("nu must be positive or inf, got {}", self.nu)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config(format!("epsilon must be positive or inf, got {}", self.epsilon)));
        }
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::config(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.max_time >= 0.0) || !self.max_time.is_finite() {
            return Err(Error::config(format!("max_time must be nonnegative, got {}", self.max_time)));
        }
        if self.max_time > 0.0 && self.dt >= self.max_time {
            return Err(Error::config("dt must be smaller than max_time"));
        }
        Ok(())
    }
}
