use super::step::{covariance_norm, eki_step_explicit, eki_step_semi_implicit, EkiStep};
use super::{EkiParams, EkiScheme, InverseProblem};
use crate::diagnostics::{constraint_energy, ensemble_variance, w2_to_dirac, Record, RunTrace, TraceMeta};
use crate::ensemble::{init_ensemble, Ensemble, GaussianInit};
use crate::error::{Error, Result};
use crate::rng::particle_streams;

/// An inverse problem with its initial ensemble law and, when known, the
/// parameters that generated the data.
#[derive(Debug, Clone)]
pub struct EkiProblem {
    pub id: String,
    pub inverse: InverseProblem,
    pub init: GaussianInit,
    pub truth: Option<Vec<f64>>,
}

/// One EKI run from a fixed initial ensemble.
pub struct EkiSolver {
    problem: EkiProblem,
    params: EkiParams,
    ensemble: Ensemble,
    stagnated: bool,
}

impl EkiSolver {
    /// Draws `particles` initial members from the streams of `(seed, run)`.
    pub fn new(problem: EkiProblem, params: EkiParams, particles: usize, seed: u64, run: u32) -> Result<Self> {
        problem.init.validate()?;
        if particles == 0 {
            return Err(Error::config("at least one particle is required"));
        }
        let mut streams = particle_streams(seed, run, particles);
        let ensemble = init_ensemble(&problem.init, &mut streams)?;
        Self::from_ensemble(problem, params, ensemble)
    }

    pub fn from_ensemble(problem: EkiProblem, params: EkiParams, ensemble: Ensemble) -> Result<Self> {
        params.validate()?;
        if ensemble.dim() != problem.inverse.dim() {
            return Err(Error::config(format!(
                "initial ensemble has dimension {} but the problem has {}",
                ensemble.dim(),
                problem.inverse.dim()
            )));
        }
        if let Some(truth) = &problem.truth {
            if truth.len() != ensemble.dim() {
                return Err(Error::config("truth has the wrong dimension"));
            }
        }
        Ok(Self {
            problem,
            params,
            ensemble,
            stagnated: false,
        })
    }

    pub fn ensemble(&self) -> &Ensemble {
        &self.ensemble
    }

    pub fn stagnated(&self) -> bool {
        self.stagnated
    }

    pub fn step(&mut self) -> Result<EkiStep> {
        let step = match self.params.scheme {
            EkiScheme::Explicit => eki_step_explicit(&self.ensemble, &self.problem.inverse, &self.params),
            EkiScheme::SemiImplicit => eki_step_semi_implicit(&self.ensemble, &self.problem.inverse, &self.params),
        }?;
        self.ensemble = step.ensemble.clone();
        self.stagnated = step.stagnated;
        Ok(step)
    }

    pub fn record(&self) -> Result<Record> {
        let mean = self.ensemble.mean().as_slice().to_vec();
        let truth = self.problem.truth.as_deref();
        Ok(Record {
            generation: self.ensemble.generation(),
            time: self.ensemble.time(),
            variance: ensemble_variance(&[&self.ensemble]),
            w2_dirac: truth.map(|t| w2_to_dirac(&self.ensemble, t)),
            constraint_energy: constraint_energy(&[&self.ensemble], self.problem.inverse.constraints())?,
            error: truth.map(|t| mean.iter().zip(t).map(|(a, b)| (a - b).abs()).sum()),
            cov_norm: Some(covariance_norm(&self.ensemble)),
            ensemble_mean: mean.clone(),
            reported_point: mean,
        })
    }
}

fn meta(problem: &EkiProblem, params: &EkiParams, seed: u64, run: u32) -> Result<TraceMeta> {
    let mut value = serde_json::to_value(params).map_err(|e| Error::config(e.to_string()))?;
    let nu = problem.inverse.nu();
    value["nu"] = if nu.is_finite() { nu.into() } else { "inf".into() };
    Ok(TraceMeta {
        problem: problem.id.clone(),
        seed,
        run,
        params: value,
    })
}

/// Iterates until `max_iters`, covariance collapse or stagnation, recording
/// every iteration. Step errors end the run with a partial, failed trace.
pub fn run_eki(problem: &EkiProblem, params: &EkiParams, particles: usize, seed: u64, run: u32) -> Result<RunTrace> {
    let solver = EkiSolver::new(problem.clone(), *params, particles, seed, run)?;
    run_solver(solver, meta(problem, params, seed, run)?)
}

/// As [`run_eki`] from a given initial ensemble; `seed` and `run` only label the trace.
pub fn run_from_ensemble(
    problem: &EkiProblem,
    params: &EkiParams,
    ensemble: Ensemble,
    seed: u64,
    run: u32,
) -> Result<RunTrace> {
    let solver = EkiSolver::from_ensemble(problem.clone(), *params, ensemble)?;
    run_solver(solver, meta(problem, params, seed, run)?)
}

fn run_solver(mut solver: EkiSolver, meta: TraceMeta) -> Result<RunTrace> {
    let params = solver.params;
    let mut trace = RunTrace::new(meta);
    let first = solver.record()?;
    let collapsed = first.cov_norm.unwrap_or(0.0) < params.collapse_tol;
    trace.push(first);
    if collapsed {
        trace.stopped_early = true;
        return Ok(trace);
    }
    for _ in 0..params.max_iters {
        let step = match solver.step() {
            Ok(s) => s,
            Err(e) => {
                trace.failure = Some(e.to_string());
                break;
            }
        };
        let record = match solver.record() {
            Ok(r) => r,
            Err(e) => {
                trace.failure = Some(e.to_string());
                break;
            }
        };
        let collapsed = record.cov_norm.unwrap_or(0.0) < params.collapse_tol;
        trace.push(record);
        if step.stagnated || collapsed {
            trace.stopped_early = true;
            break;
        }
    }
    Ok(trace)
}
