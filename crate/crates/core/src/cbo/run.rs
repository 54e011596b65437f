use std::sync::Arc;

use super::mean::weighted_mean;
use super::step::{
    cbo_step_explicit, cbo_step_projected, cbo_step_semi_implicit, project_onto_sphere, ImplicitFactor,
};
use super::{CboParams, Scheme};
use crate::constraints::{ConstraintKind, ConstraintSet, Objective, PenalizedObjective, QuadraticConstraint};
use crate::diagnostics::{constraint_energy, ensemble_variance, w2_to_dirac, Record, RunTrace, TraceMeta};
use crate::ensemble::{init_ensemble, Ensemble, GaussianInit};
use crate::error::{Error, Result};
use crate::rng::{particle_streams, RngStream};

/// A constrained minimization problem together with its initial law.
#[derive(Clone)]
pub struct CboProblem {
    pub id: String,
    pub objective: Arc<dyn Objective>,
    pub constraints: ConstraintSet,
    /// The single quadratic constraint required by the semi-implicit and
    /// projection schemes.
    pub quadratic: Option<QuadraticConstraint>,
    /// Known minimizer used for the `W_2` diagnostic and error reporting.
    pub reference: Option<Vec<f64>>,
    pub init: GaussianInit,
}

impl std::fmt::Debug for CboProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CboProblem")
            .field("id", &self.id)
            .field("constraints", &self.constraints)
            .field("quadratic", &self.quadratic)
            .field("reference", &self.reference)
            .field("init", &self.init)
            .finish_non_exhaustive()
    }
}

impl CboProblem {
    /// Problem whose only constraint is the quadratic `qc`.
    pub fn with_quadratic(
        id: impl Into<String>,
        objective: Arc<dyn Objective>,
        qc: QuadraticConstraint,
        init: GaussianInit,
    ) -> Self {
        Self {
            id: id.into(),
            objective,
            constraints: qc.to_constraint_set(),
            quadratic: Some(qc),
            reference: None,
            init,
        }
    }

    pub fn with_reference(mut self, reference: Vec<f64>) -> Self {
        self.reference = Some(reference);
        self
    }

    pub fn dim(&self) -> usize {
        self.init.dim()
    }
}

/// When to stop early and how often to record diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StoppingRule {
    /// Runs stop once the ensemble variance drops below this value.
    pub collapse_tol: f64,
    pub record_every: u64,
}

impl Default for StoppingRule {
    fn default() -> Self {
        Self {
            collapse_tol: 1e-8,
            record_every: 10,
        }
    }
}

/// Number of steps of size `dt` needed to reach `max_time`.
pub fn steps_for(max_time: f64, dt: f64) -> u64 {
    if max_time <= 0.0 {
        return 0;
    }
    (max_time / dt - 1e-9).ceil() as u64
}

enum Stepper {
    Explicit,
    SemiImplicit(ImplicitFactor),
    Projection(f64),
}

/// One CBO run: the ensemble, its noise streams and the chosen scheme.
pub struct CboSolver {
    problem: CboProblem,
    params: CboParams,
    objective: PenalizedObjective,
    stepper: Stepper,
    streams: Vec<RngStream>,
    ensemble: Ensemble,
}

impl CboSolver {
    /// Draws the initial ensemble of `particles` from the problem's initial
    /// law using the streams of `(seed, run)`.
    pub fn new(problem: CboProblem, params: CboParams, particles: usize, seed: u64, run: u32) -> Result<Self> {
        params.validate()?;
        problem.init.validate()?;
        if particles == 0 {
            return Err(Error::config("at least one particle is required"));
        }
        let stepper = match params.scheme {
            Scheme::Explicit => Stepper::Explicit,
            Scheme::SemiImplicit => {
                let qc = problem
                    .quadratic
                    .as_ref()
                    .ok_or_else(|| Error::config("the semi-implicit scheme needs a quadratic constraint"))?;
                Stepper::SemiImplicit(ImplicitFactor::new(qc))
            }
            Scheme::Projection => {
                let qc = problem
                    .quadratic
                    .as_ref()
                    .ok_or_else(|| Error::config("the projection scheme needs a sphere constraint"))?;
                if !qc.is_sphere() || qc.kind() != ConstraintKind::Equality {
                    return Err(Error::config("the projection scheme needs a sphere equality constraint"));
                }
                Stepper::Projection(qc.level().sqrt())
            }
        };
        if let Some(qc) = &problem.quadratic {
            if qc.dim() != problem.dim() {
                return Err(Error::config("constraint and initial law have different dimensions"));
            }
        }
        let objective = PenalizedObjective::new(problem.objective.clone(), problem.constraints.clone(), params.nu)?;
        let mut streams = particle_streams(seed, run, particles);
        let mut ensemble = init_ensemble(&problem.init, &mut streams)?;
        if let Stepper::Projection(radius) = stepper {
            let mut positions = ensemble.positions().clone();
            for (j, mut col) in positions.column_iter_mut().enumerate() {
                project_onto_sphere(col.as_mut_slice(), radius).map_err(|_| Error::ProjectionUndefined { particle: j })?;
            }
            ensemble = Ensemble::new(positions)?;
        }
        Ok(Self {
            problem,
            params,
            objective,
            stepper,
            streams,
            ensemble,
        })
    }

    pub fn ensemble(&self) -> &Ensemble {
        &self.ensemble
    }

    pub fn params(&self) -> &CboParams {
        &self.params
    }

    pub fn step(&mut self) -> Result<()> {
        let next = match &self.stepper {
            Stepper::Explicit => cbo_step_explicit(&self.ensemble, &self.objective, &self.params, &mut self.streams),
            Stepper::SemiImplicit(factor) => {
                cbo_step_semi_implicit(&self.ensemble, &self.objective, factor, &self.params, &mut self.streams)
            }
            Stepper::Projection(radius) => {
                cbo_step_projected(&self.ensemble, &self.objective, *radius, &self.params, &mut self.streams)
            }
        }?;
        self.ensemble = next;
        Ok(())
    }

    /// The reported optimizer: the Gibbs mean of the objective driving the scheme.
    pub fn weighted_mean(&self) -> Result<Vec<f64>> {
        let m = match self.stepper {
            Stepper::Projection(_) => {
                let plain = PenalizedObjective::unconstrained(self.objective.objective.clone());
                weighted_mean(&self.ensemble, &plain, self.params.alpha)?
            }
            _ => weighted_mean(&self.ensemble, &self.objective, self.params.alpha)?,
        };
        Ok(m.as_slice().to_vec())
    }

    pub fn record(&self) -> Result<Record> {
        let reported = self.weighted_mean()?;
        let reference = self.problem.reference.as_deref();
        Ok(Record {
            generation: self.ensemble.generation(),
            time: self.ensemble.time(),
            variance: ensemble_variance(&[&self.ensemble]),
            w2_dirac: reference.map(|r| w2_to_dirac(&self.ensemble, r)),
            constraint_energy: constraint_energy(&[&self.ensemble], &self.problem.constraints)?,
            error: reference.map(|r| reported.iter().zip(r).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()),
            reported_point: reported,
            ensemble_mean: self.ensemble.mean().as_slice().to_vec(),
            cov_norm: None,
        })
    }
}

/// Runs one CBO trajectory until `max_time` or collapse.
///
/// Invalid configurations are returned as errors; a failing step ends the
/// run and yields the partial trace with its failure message.
pub fn run_cbo(
    problem: &CboProblem,
    params: &CboParams,
    stopping: &StoppingRule,
    particles: usize,
    seed: u64,
    run: u32,
) -> Result<RunTrace> {
    if stopping.record_every == 0 {
        return Err(Error::config("record_every must be at least 1"));
    }
    let mut solver = CboSolver::new(problem.clone(), *params, particles, seed, run)?;
    let meta = TraceMeta {
        problem: problem.id.clone(),
        seed,
        run,
        params: serde_json::to_value(params).map_err(|e| Error::config(e.to_string()))?,
    };
    let mut trace = RunTrace::new(meta);
    let first = solver.record()?;
    let collapsed = first.variance < stopping.collapse_tol;
    trace.push(first);
    if collapsed {
        trace.stopped_early = true;
        return Ok(trace);
    }
    let steps = steps_for(params.max_time, params.dt);
    for n in 1..=steps {
        if let Err(e) = solver.step() {
            trace.failure = Some(e.to_string());
            break;
        }
        let collapsed = ensemble_variance(&[solver.ensemble()]) < stopping.collapse_tol;
        if collapsed || n % stopping.record_every == 0 || n == steps {
            match solver.record() {
                Ok(r) => trace.push(r),
                Err(e) => {
                    trace.failure = Some(e.to_string());
                    break;
                }
            }
        }
        if collapsed {
            trace.stopped_early = true;
            break;
        }
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::Ackley;

    fn circle_problem() -> CboProblem {
        let qc = QuadraticConstraint::sphere(ConstraintKind::Equality, 2, 3.0).unwrap();
        CboProblem::with_quadratic("ackley-circle", Arc::new(Ackley::new(vec![3.0, 0.0])), qc, GaussianInit::isotropic(2, 0.0, 3.0))
            .with_reference(vec![3.0, 0.0])
    }

    #[test]
    fn step_counts() {
        assert_eq!(steps_for(0.0, 0.1), 0);
        assert_eq!(steps_for(15.0, 5e-4), 30_000);
        assert_eq!(steps_for(1.0, 0.3), 4);
        assert_eq!(steps_for(0.3, 0.1), 3);
    }

    #[test]
    fn zero_horizon_records_initial_state_only() {
        let params = CboParams { max_time: 0.0, ..CboParams::default() };
        let trace = run_cbo(&circle_problem(), &params, &StoppingRule::default(), 10, 1, 0).unwrap();
        assert_eq!(trace.records.len(), 1);
        assert_eq!(trace.records[0].generation, 0);
        assert!(!trace.failed());
    }

    #[test]
    fn recording_cadence_and_final_record() {
        let params = CboParams { max_time: 0.0105, dt: 5e-4, ..CboParams::default() };
        let trace = run_cbo(&circle_problem(), &params, &StoppingRule::default(), 10, 1, 0).unwrap();
        let gens: Vec<u64> = trace.records.iter().map(|r| r.generation).collect();
        assert_eq!(gens, vec![0, 10, 20, 21]);
        assert!((trace.last().unwrap().time - 0.0105).abs() < 1e-12);
    }

    #[test]
    fn runs_are_deterministic_per_seed_and_run() {
        let params = CboParams { max_time: 0.05, ..CboParams::default() };
        let a = run_cbo(&circle_problem(), &params, &StoppingRule::default(), 20, 7, 3).unwrap();
        let b = run_cbo(&circle_problem(), &params, &StoppingRule::default(), 20, 7, 3).unwrap();
        let c = run_cbo(&circle_problem(), &params, &StoppingRule::default(), 20, 7, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.records, c.records);
    }

    #[test]
    fn semi_implicit_requires_a_quadratic_constraint() {
        let mut problem = circle_problem();
        problem.quadratic = None;
        assert!(CboSolver::new(problem, CboParams::default(), 5, 0, 0).is_err());
    }

    #[test]
    fn projection_keeps_particles_on_the_sphere() {
        let params = CboParams {
            scheme: Scheme::Projection,
            nu: f64::INFINITY,
            epsilon: f64::INFINITY,
            max_time: 0.05,
            ..CboParams::default()
        };
        let mut solver = CboSolver::new(circle_problem(), params, 30, 2, 0).unwrap();
        for _ in 0..20 {
            for p in solver.ensemble().particles() {
                assert!(((p[0] * p[0] + p[1] * p[1]).sqrt() - 3.0).abs() <= 1e-12);
            }
            solver.step().unwrap();
        }
    }

    #[test]
    fn step_failure_yields_partial_trace() {
        let params = CboParams {
            scheme: Scheme::Explicit,
            epsilon: 1e-6,
            dt: 0.1,
            max_time: 100.0,
            ..CboParams::default()
        };
        let trace = run_cbo(&circle_problem(), &params, &StoppingRule::default(), 10, 1, 0).unwrap();
        assert!(trace.failed(), "{trace:?}");
        assert!(!trace.failure.as_deref().unwrap().is_empty());
        assert_eq!(trace.records[0].generation, 0);
    }

    #[test]
    fn deterministic_contraction_locks_onto_best_initial_particle() {
        // All particles lie on one side of the minimizer, so the best initial
        // particle stays the best one while the others contract towards it.
        let problem = CboProblem {
            id: "bowl".into(),
            objective: Arc::new(|x: &[f64]| x[0] * x[0]),
            constraints: ConstraintSet::new(),
            quadratic: None,
            reference: None,
            init: GaussianInit::isotropic(1, 5.0, 0.25),
        };
        let params = CboParams {
            alpha: 1e4,
            sigma: 0.0,
            nu: f64::INFINITY,
            epsilon: f64::INFINITY,
            dt: 1e-3,
            max_time: 10.0,
            scheme: Scheme::Explicit,
        };
        let solver = CboSolver::new(problem.clone(), params, 20, 11, 0).unwrap();
        assert!(solver.ensemble().particles().all(|p| p[0] > 0.0));
        let best = solver.ensemble().particles().map(|p| p[0]).fold(f64::INFINITY, f64::min);
        let stopping = StoppingRule { collapse_tol: 0.0, record_every: 1000 };
        let trace = run_cbo(&problem, &params, &stopping, 20, 11, 0).unwrap();
        let m = trace.last().unwrap().reported_point[0];
        assert!((m - best).abs() < 1e-3, "{m} vs {best}");
    }
}
