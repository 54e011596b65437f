use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::mean::weighted_mean;
use super::CboParams;
use crate::constraints::{PenalizedObjective, QuadraticConstraint};
use crate::ensemble::Ensemble;
use crate::error::{Error, Result};
use crate::rng::RngStream;

/// `d x J` standard normal increments, column `j` drawn from `streams[j]`.
pub fn draw_noise(dim: usize, streams: &mut [RngStream]) -> DMatrix<f64> {
    let mut noise = DMatrix::zeros(dim, streams.len());
    for (mut col, rng) in noise.column_iter_mut().zip(streams.iter_mut()) {
        rng.fill_normal(col.as_mut_slice());
    }
    noise
}

/// Consensus drift plus diagonal multiplicative noise for one particle.
#[inline]
fn consensus_update(x: &[f64], m: &DVector<f64>, xi: &[f64], dt: f64, noise_scale: f64, out: &mut [f64]) {
    for i in 0..x.len() {
        let diff = x[i] - m[i];
        out[i] = x[i] - dt * diff + noise_scale * diff * xi[i];
    }
}

fn check_noise(ens: &Ensemble, noise: &DMatrix<f64>) -> Result<()> {
    if noise.shape() != ens.positions().shape() {
        return Err(Error::config("noise matrix must match the ensemble shape"));
    }
    Ok(())
}

/// Euler-Maruyama step of the constrained dynamics with the given increments.
pub fn cbo_step_explicit_with_noise(
    ens: &Ensemble,
    obj: &PenalizedObjective,
    params: &CboParams,
    noise: &DMatrix<f64>,
) -> Result<Ensemble> {
    check_noise(ens, noise)?;
    let m = weighted_mean(ens, obj, params.alpha)?;
    let dt = params.dt;
    let noise_scale = (2.0 * dt).sqrt() * params.sigma;
    let relax = params.epsilon.is_finite() && !obj.constraints.is_empty();
    let d = ens.dim();
    let mut next = DMatrix::zeros(d, ens.len());
    let mut grad = vec![0.0; d];
    for (j, x) in ens.particles().enumerate() {
        let out = &mut next.as_mut_slice()[j * d..(j + 1) * d];
        consensus_update(x, &m, noise.column(j).as_slice(), dt, noise_scale, out);
        if relax {
            obj.constraints.grad_norm_sq_into(x, &mut grad)?;
            let rate = dt / params.epsilon;
            for (o, g) in out.iter_mut().zip(&grad) {
                *o -= rate * g;
            }
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { particle: j, dt });
        }
    }
    Ok(ens.advance(next, dt))
}

pub fn cbo_step_explicit(
    ens: &Ensemble,
    obj: &PenalizedObjective,
    params: &CboParams,
    streams: &mut [RngStream],
) -> Result<Ensemble> {
    let noise = draw_noise(ens.dim(), streams);
    cbo_step_explicit_with_noise(ens, obj, params, &noise)
}

/// Solver for `(I + kappa A) x = y` with `A` symmetric positive definite,
/// reusing one eigendecomposition of `A` for every `kappa`.
#[derive(Debug, Clone)]
pub struct ImplicitFactor {
    constraint: QuadraticConstraint,
    basis: DMatrix<f64>,
    eigenvalues: DVector<f64>,
    sphere: bool,
}

impl ImplicitFactor {
    pub fn new(constraint: &QuadraticConstraint) -> Self {
        let eig = SymmetricEigen::new(constraint.matrix().clone());
        Self {
            constraint: constraint.clone(),
            basis: eig.eigenvectors,
            eigenvalues: eig.eigenvalues,
            sphere: constraint.is_sphere(),
        }
    }

    pub fn constraint(&self) -> &QuadraticConstraint {
        &self.constraint
    }

    /// Solves in place. Fails when some `1 + kappa lambda_i <= 0`, which can
    /// only happen for strongly infeasible interior points (`A(x) < 0`).
    pub fn solve(&self, kappa: f64, y: &mut [f64]) -> Result<()> {
        const PIVOT_FLOOR: f64 = 1e-12;
        if kappa == 0.0 {
            return Ok(());
        }
        if self.sphere {
            let factor = 1.0 + kappa;
            if factor <= PIVOT_FLOOR {
                return Err(singular(factor));
            }
            y.iter_mut().for_each(|v| *v /= factor);
            return Ok(());
        }
        let mut coords = self.basis.tr_mul(&DVector::from_column_slice(y));
        for (c, lambda) in coords.iter_mut().zip(self.eigenvalues.iter()) {
            let factor = 1.0 + kappa * lambda;
            if factor <= PIVOT_FLOOR {
                return Err(singular(factor));
            }
            *c /= factor;
        }
        let x = &self.basis * coords;
        y.copy_from_slice(x.as_slice());
        Ok(())
    }
}

fn singular(pivot: f64) -> Error {
    Error::StepFailure {
        reason: format!("semi-implicit system matrix is not positive definite (pivot {pivot:e})"),
    }
}

/// Semi-implicit step: consensus and noise explicit, then
/// `x_new = (I + (4 dt / epsilon) A(x) A)^{-1} y` with the clamped residual `A(x)`.
pub fn cbo_step_semi_implicit_with_noise(
    ens: &Ensemble,
    obj: &PenalizedObjective,
    factor: &ImplicitFactor,
    params: &CboParams,
    noise: &DMatrix<f64>,
) -> Result<Ensemble> {
    check_noise(ens, noise)?;
    if factor.constraint().dim() != ens.dim() {
        return Err(Error::config("quadratic constraint dimension differs from the ensemble"));
    }
    let m = weighted_mean(ens, obj, params.alpha)?;
    let dt = params.dt;
    let noise_scale = (2.0 * dt).sqrt() * params.sigma;
    let d = ens.dim();
    let mut next = DMatrix::zeros(d, ens.len());
    for (j, x) in ens.particles().enumerate() {
        let out = &mut next.as_mut_slice()[j * d..(j + 1) * d];
        consensus_update(x, &m, noise.column(j).as_slice(), dt, noise_scale, out);
        if params.epsilon.is_finite() {
            let residual = factor.constraint().residual(x);
            factor.solve(4.0 * dt / params.epsilon * residual, out)?;
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { particle: j, dt });
        }
    }
    Ok(ens.advance(next, dt))
}

pub fn cbo_step_semi_implicit(
    ens: &Ensemble,
    obj: &PenalizedObjective,
    factor: &ImplicitFactor,
    params: &CboParams,
    streams: &mut [RngStream],
) -> Result<Ensemble> {
    let noise = draw_noise(ens.dim(), streams);
    cbo_step_semi_implicit_with_noise(ens, obj, factor, params, &noise)
}

/// Projection baseline: unconstrained update driven by the unpenalized
/// objective, then every particle rescaled onto the sphere of `radius`.
pub fn cbo_step_projected_with_noise(
    ens: &Ensemble,
    obj: &PenalizedObjective,
    radius: f64,
    params: &CboParams,
    noise: &DMatrix<f64>,
) -> Result<Ensemble> {
    check_noise(ens, noise)?;
    if let Some(j) = ens.particles().position(|p| p.iter().all(|v| *v == 0.0)) {
        return Err(Error::ProjectionUndefined { particle: j });
    }
    let plain = PenalizedObjective::unconstrained(obj.objective.clone());
    let m = weighted_mean(ens, &plain, params.alpha)?;
    let dt = params.dt;
    let noise_scale = (2.0 * dt).sqrt() * params.sigma;
    let d = ens.dim();
    let mut next = DMatrix::zeros(d, ens.len());
    for (j, x) in ens.particles().enumerate() {
        let out = &mut next.as_mut_slice()[j * d..(j + 1) * d];
        consensus_update(x, &m, noise.column(j).as_slice(), dt, noise_scale, out);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { particle: j, dt });
        }
        project_onto_sphere(out, radius).map_err(|_| Error::ProjectionUndefined { particle: j })?;
    }
    Ok(ens.advance(next, dt))
}

pub fn cbo_step_projected(
    ens: &Ensemble,
    obj: &PenalizedObjective,
    radius: f64,
    params: &CboParams,
    streams: &mut [RngStream],
) -> Result<Ensemble> {
    let noise = draw_noise(ens.dim(), streams);
    cbo_step_projected_with_noise(ens, obj, radius, params, &noise)
}

pub(crate) fn project_onto_sphere(x: &mut [f64], radius: f64) -> std::result::Result<(), ()> {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(());
    }
    let scale = radius / norm;
    x.iter_mut().for_each(|v| *v *= scale);
    Ok(())
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::cbo::Scheme;
    use crate::constraints::{ConstraintKind, ConstraintSet, Objective};
    use crate::problems::Ackley;
    use crate::rng::particle_streams;

    fn params(sigma: f64, epsilon: f64, alpha: f64, dt: f64) -> CboParams {
        CboParams {
            alpha,
            sigma,
            nu: f64::INFINITY,
            epsilon,
            dt,
            max_time: 1.0,
            scheme: Scheme::Explicit,
        }
    }

    fn square() -> Arc<dyn Objective> {
        Arc::new(|x: &[f64]| x[0] * x[0])
    }

    fn line_circle(level: f64) -> QuadraticConstraint {
        QuadraticConstraint::new(ConstraintKind::Equality, DMatrix::identity(1, 1), level).unwrap()
    }

    #[test]
    fn collapsed_ensemble_is_a_fixed_point() {
        let p = vec![0.3, -1.1];
        let ens = Ensemble::from_points(&[p.clone(), p.clone(), p.clone()]).unwrap();
        let obj = PenalizedObjective::unconstrained(Arc::new(Ackley::new(vec![3.0, 0.0])));
        let noise = DMatrix::from_element(2, 3, 0.7);
        let next = cbo_step_explicit_with_noise(&ens, &obj, &params(0.0, f64::INFINITY, 30.0, 0.1), &noise).unwrap();
        assert_eq!(next.positions(), ens.positions());
        assert_eq!(next.generation(), 1);
    }

    #[test]
    fn drift_only_two_particle_step() {
        let ens = Ensemble::from_points(&[vec![0.0], vec![1.0]]).unwrap();
        let obj = PenalizedObjective::unconstrained(square());
        let noise = DMatrix::zeros(1, 2);
        let next = cbo_step_explicit_with_noise(&ens, &obj, &params(0.0, f64::INFINITY, 0.0, 0.1), &noise).unwrap();
        assert!((next.particle(0)[0] - 0.05).abs() < 1e-15);
        assert!((next.particle(1)[0] - 0.95).abs() < 1e-15);
        assert!((next.time() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn relaxation_drift_single_particle() {
        let ens = Ensemble::from_points(&[vec![4.0]]).unwrap();
        let obj = PenalizedObjective::new(square(), line_circle(9.0).to_constraint_set(), f64::INFINITY).unwrap();
        let noise = DMatrix::zeros(1, 1);
        let next = cbo_step_explicit_with_noise(&ens, &obj, &params(0.0, 1.0, 0.0, 0.01), &noise).unwrap();
        assert!((next.particle(0)[0] - 2.88).abs() < 1e-13);
    }

    #[test]
    fn divergence_reports_particle_and_dt() {
        let ens = Ensemble::from_points(&[vec![1.0], vec![1e102]]).unwrap();
        let flat: Arc<dyn Objective> = Arc::new(|_: &[f64]| 0.0);
        let obj = PenalizedObjective::new(flat, line_circle(9.0).to_constraint_set(), f64::INFINITY).unwrap();
        let noise = DMatrix::zeros(1, 2);
        match cbo_step_explicit_with_noise(&ens, &obj, &params(0.0, 1e-10, 0.0, 0.5), &noise) {
            Err(Error::Divergence { particle, dt }) => {
                assert_eq!(particle, 1);
                assert_eq!(dt, 0.5);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn scalar_semi_implicit_solve() {
        let qc = line_circle(9.0);
        let factor = ImplicitFactor::new(&qc);
        let ens = Ensemble::from_points(&[vec![4.0]]).unwrap();
        let obj = PenalizedObjective::new(square(), qc.to_constraint_set(), f64::INFINITY).unwrap();
        let noise = DMatrix::zeros(1, 1);
        let next =
            cbo_step_semi_implicit_with_noise(&ens, &obj, &factor, &params(0.5, 1.0, 0.0, 0.1), &noise).unwrap();
        assert!((next.particle(0)[0] - 4.0 / 3.8).abs() < 1e-14);
    }

    #[test]
    fn on_manifold_particle_is_unchanged() {
        let qc = QuadraticConstraint::sphere(ConstraintKind::Equality, 2, 3.0).unwrap();
        let factor = ImplicitFactor::new(&qc);
        let ens = Ensemble::from_points(&[vec![3.0, 0.0]]).unwrap();
        let obj = PenalizedObjective::new(Arc::new(Ackley::centered(2)), qc.to_constraint_set(), 1.0).unwrap();
        let next = cbo_step_semi_implicit_with_noise(&ens, &obj, &factor, &params(0.0, 0.1, 30.0, 0.01), &DMatrix::zeros(2, 1))
            .unwrap();
        assert_eq!(next.particle(0), &[3.0, 0.0]);
    }

    #[test]
    fn semi_implicit_without_relaxation_matches_explicit_bitwise() {
        let qc = QuadraticConstraint::sphere(ConstraintKind::Equality, 2, 3.0).unwrap();
        let factor = ImplicitFactor::new(&qc);
        let obj = PenalizedObjective::new(Arc::new(Ackley::new(vec![3.0, 0.0])), qc.to_constraint_set(), 1.0).unwrap();
        let mut streams = particle_streams(5, 0, 20);
        let ens = crate::ensemble::init_ensemble(&crate::ensemble::GaussianInit::isotropic(2, 0.0, 3.0), &mut streams)
            .unwrap();
        let noise = draw_noise(2, &mut streams);
        let p = params(0.7, f64::INFINITY, 30.0, 5e-4);
        let a = cbo_step_explicit_with_noise(&ens, &obj, &p, &noise).unwrap();
        let b = cbo_step_semi_implicit_with_noise(&ens, &obj, &factor, &p, &noise).unwrap();
        assert_eq!(a.positions(), b.positions());
    }

    #[test]
    fn general_ellipse_solve_matches_dense_solve() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.4, 0.4, 1.0]);
        let qc = QuadraticConstraint::new(ConstraintKind::Equality, a.clone(), 3.0).unwrap();
        let factor = ImplicitFactor::new(&qc);
        let mut y = [1.5, -0.7];
        factor.solve(0.3, &mut y).unwrap();
        let system = DMatrix::identity(2, 2) + a * 0.3;
        let x = system.lu().solve(&DVector::from_column_slice(&[1.5, -0.7])).unwrap();
        assert!((x[0] - y[0]).abs() < 1e-14 && (x[1] - y[1]).abs() < 1e-14);
    }

    #[test]
    fn singular_implicit_system_is_a_step_failure() {
        let qc = line_circle(9.0);
        let factor = ImplicitFactor::new(&qc);
        let mut y = [1.0];
        assert!(matches!(factor.solve(-1.0, &mut y), Err(Error::StepFailure { .. })));
    }

    #[test]
    fn projection_examples() {
        let mut v = [6.0, 8.0];
        project_onto_sphere(&mut v, 3.0).unwrap();
        assert!((v[0] - 1.8).abs() < 1e-15 && (v[1] - 2.4).abs() < 1e-15);

        let obj = PenalizedObjective::unconstrained(Arc::new(Ackley::new(vec![3.0, 0.0])));
        let p = vec![0.0, 3.0];
        let ens = Ensemble::from_points(&[p.clone(), p.clone()]).unwrap();
        let next = cbo_step_projected_with_noise(&ens, &obj, 3.0, &params(0.0, f64::INFINITY, 30.0, 0.01), &DMatrix::zeros(2, 2))
            .unwrap();
        assert_eq!(next.particle(0), p.as_slice());

        let origin = Ensemble::from_points(&[vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap();
        assert!(matches!(
            cbo_step_projected_with_noise(&origin, &obj, 3.0, &params(0.7, f64::INFINITY, 30.0, 0.01), &DMatrix::zeros(2, 2)),
            Err(Error::ProjectionUndefined { particle: 0 })
        ));
    }

    #[test]
    fn projection_lands_on_sphere_from_anywhere() {
        let obj = PenalizedObjective::new(Arc::new(Ackley::new(vec![3.0, 0.0])), ConstraintSet::new(), 1.0).unwrap();
        let mut streams = particle_streams(9, 0, 40);
        let ens = crate::ensemble::init_ensemble(&crate::ensemble::GaussianInit::isotropic(2, 0.0, 3.0), &mut streams)
            .unwrap();
        let next = cbo_step_projected(&ens, &obj, 3.0, &params(0.7, f64::INFINITY, 30.0, 5e-4), &mut streams).unwrap();
        for p in next.particles() {
            let r = (p[0] * p[0] + p[1] * p[1]).sqrt();
            assert!((r - 3.0).abs() <= 1e-12);
        }
    }
}
