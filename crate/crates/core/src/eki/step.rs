use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::{EkiParams, InverseProblem};
use crate::ensemble::Ensemble;
use crate::error::{Error, Result};

/// Largest accepted 1-norm condition number of `I + dt M`.
pub const CONDITION_LIMIT: f64 = 1e14;

const EXACT_NORM_LIMIT: usize = 64;
const POWER_TOL: f64 = 1e-6;
const POWER_MAX_ITERS: usize = 200;

/// Outcome of one adaptive EKI step.
#[derive(Debug, Clone)]
pub struct EkiStep {
    pub ensemble: Ensemble,
    pub dt: f64,
    /// Set when `M = 0` and no step cap applies, so the ensemble cannot move.
    pub stagnated: bool,
    pub interaction_norm: f64,
}

/// Augmented images of all particles as the columns of a matrix.
fn augmented_images(ens: &Ensemble, problem: &InverseProblem) -> Result<DMatrix<f64>> {
    if ens.dim() != problem.dim() {
        return Err(Error::config(format!(
            "ensemble dimension {} differs from the parameter dimension {}",
            ens.dim(),
            problem.dim()
        )));
    }
    let mut images = DMatrix::zeros(problem.augmented_dim(), ens.len());
    for (j, x) in ens.particles().enumerate() {
        images.set_column(j, &problem.augmented_forward(x, j)?);
    }
    Ok(images)
}

/// Column mean anchored at the first column, so identical columns have
/// exactly zero deviation.
fn anchored_mean(m: &DMatrix<f64>) -> DVector<f64> {
    let first = m.column(0).clone_owned();
    let mut acc = DVector::zeros(m.nrows());
    for col in m.column_iter() {
        acc += col - &first;
    }
    first + acc / m.ncols() as f64
}

fn centered(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mean = anchored_mean(m);
    let mut c = m.clone();
    for mut col in c.column_iter_mut() {
        col -= &mean;
    }
    c
}

/// `M^{kj} = (1/J) <G(x^k) - Gbar, G(x^j) - y~>` in the weighted inner product
/// of the augmented space.
pub fn interaction_matrix(ens: &Ensemble, problem: &InverseProblem) -> Result<DMatrix<f64>> {
    let images = augmented_images(ens, problem)?;
    let deviations = centered(&images);
    let target = problem.augmented_target();
    let mut weighted = DMatrix::zeros(images.nrows(), images.ncols());
    for (j, col) in images.column_iter().enumerate() {
        let residual: DVector<f64> = col - &target;
        weighted.set_column(j, &problem.apply_weight(&residual));
    }
    Ok(deviations.tr_mul(&weighted) / ens.len() as f64)
}

/// Spectral norm, exact for small matrices and by power iteration on
/// `M^T M` otherwise.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    if m.ncols() <= EXACT_NORM_LIMIT && m.nrows() <= EXACT_NORM_LIMIT {
        return m.clone().singular_values().max();
    }
    let gram = m.tr_mul(m);
    let n = gram.ncols();
    let mut v = DVector::from_fn(n, |i, _| 1.0 + 0.5 * ((i as f64) * 0.618_033_988_75).fract());
    v /= v.norm();
    let mut lambda = 0.0;
    for _ in 0..POWER_MAX_ITERS {
        let w = &gram * &v;
        let next = w.norm();
        if next == 0.0 {
            return 0.0;
        }
        v = w / next;
        let converged = (next - lambda).abs() <= POWER_TOL * next;
        lambda = next;
        if converged {
            break;
        }
    }
    lambda.sqrt()
}

/// `dt = dt* / (|M|_2 + dt*/dt_max)`; returns `dt*` with the stagnation flag
/// when the denominator vanishes.
pub fn adapt_timestep(m: &DMatrix<f64>, params: &EkiParams) -> (f64, bool) {
    adapt_from_norm(spectral_norm(m), params)
}

fn adapt_from_norm(norm: f64, params: &EkiParams) -> (f64, bool) {
    let denom = norm + params.dt_base / params.dt_max;
    if denom == 0.0 {
        (params.dt_base, true)
    } else {
        (params.dt_base / denom, false)
    }
}

/// Spectral norm of the sample covariance `(1/J) (X - xbar)(X - xbar)^T`.
pub fn covariance_norm(ens: &Ensemble) -> f64 {
    let dev = centered(ens.positions());
    let cov = &dev * dev.transpose() / ens.len() as f64;
    SymmetricEigen::new(cov).eigenvalues.iter().fold(0.0_f64, |a, v| a.max(v.abs()))
}

fn finish(ens: &Ensemble, next: DMatrix<f64>, dt: f64) -> Result<Ensemble> {
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::EkiDivergence {
            iteration: ens.generation(),
        });
    }
    Ok(ens.advance(next, dt))
}

fn check_shape(ens: &Ensemble, m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() != ens.len() || m.ncols() != ens.len() {
        return Err(Error::config("interaction matrix must be J x J"));
    }
    Ok(())
}

/// `X - dt (X - xbar) M` for a given step.
pub fn eki_update_explicit(ens: &Ensemble, m: &DMatrix<f64>, dt: f64) -> Result<Ensemble> {
    check_shape(ens, m)?;
    let dev = centered(ens.positions());
    let next = ens.positions() - (dev * m) * dt;
    finish(ens, next, dt)
}

/// `X - dt X M`; agrees with [`eki_update_explicit`] because the columns of
/// `M` sum to zero, but loses accuracy when the ensemble is far from the origin.
pub fn eki_update_uncentered(ens: &Ensemble, m: &DMatrix<f64>, dt: f64) -> Result<Ensemble> {
    check_shape(ens, m)?;
    let next = ens.positions() - (ens.positions() * m) * dt;
    finish(ens, next, dt)
}

/// `xbar + (X - xbar)(I + dt M)^{-1}`, solved through the transposed system.
pub fn eki_update_semi_implicit(ens: &Ensemble, m: &DMatrix<f64>, dt: f64) -> Result<Ensemble> {
    check_shape(ens, m)?;
    let j = ens.len();
    let system_t = (DMatrix::identity(j, j) + m * dt).transpose();
    let lu = system_t.clone().lu();
    let inverse = lu.try_inverse().ok_or_else(|| Error::StepFailure {
        reason: format!("I + dt M is singular at dt = {dt:e}; reduce the time step"),
    })?;
    let cond = one_norm(&system_t) * one_norm(&inverse);
    if !(cond <= CONDITION_LIMIT) {
        return Err(Error::StepFailure {
            reason: format!("I + dt M is ill-conditioned (condition {cond:e}) at dt = {dt:e}; reduce the time step"),
        });
    }
    let mean = anchored_mean(ens.positions());
    let dev = centered(ens.positions());
    let solved = system_t.lu().solve(&dev.transpose()).ok_or_else(|| Error::StepFailure {
        reason: format!("I + dt M is singular at dt = {dt:e}; reduce the time step"),
    })?;
    let mut next = solved.transpose();
    for mut col in next.column_iter_mut() {
        col += &mean;
    }
    finish(ens, next, dt)
}

fn one_norm(m: &DMatrix<f64>) -> f64 {
    m.column_iter().map(|c| c.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
}

fn adaptive(
    ens: &Ensemble,
    problem: &InverseProblem,
    params: &EkiParams,
    update: fn(&Ensemble, &DMatrix<f64>, f64) -> Result<Ensemble>,
) -> Result<EkiStep> {
    let m = interaction_matrix(ens, problem)?;
    let norm = spectral_norm(&m);
    let (dt, stagnated) = adapt_from_norm(norm, params);
    Ok(EkiStep {
        ensemble: update(ens, &m, dt)?,
        dt,
        stagnated,
        interaction_norm: norm,
    })
}

pub fn eki_step_explicit(ens: &Ensemble, problem: &InverseProblem, params: &EkiParams) -> Result<EkiStep> {
    adaptive(ens, problem, params, eki_update_explicit)
}

pub fn eki_step_semi_implicit(ens: &Ensemble, problem: &InverseProblem, params: &EkiParams) -> Result<EkiStep> {
    adaptive(ens, problem, params, eki_update_semi_implicit)
}

/// Continuous-time drift `-(X - xbar) M` of the augmented form, one column per particle.
pub fn eki_drift_unified(ens: &Ensemble, problem: &InverseProblem) -> Result<DMatrix<f64>> {
    let m = interaction_matrix(ens, problem)?;
    Ok(-(centered(ens.positions()) * m))
}

/// The same drift assembled from its data-misfit, prior and constraint terms.
///
/// The constraint term is either the ensemble approximation
/// `-(2/(nu J)) sum_k <A(x^k) - Abar, A(x^j)> (x^k - xbar)` or, with
/// `analytic`, the preconditioned gradient `-(2/nu) C A(x^j) grad A(x^j)`.
pub fn eki_drift_separate(ens: &Ensemble, problem: &InverseProblem, analytic: bool) -> Result<DMatrix<f64>> {
    if ens.dim() != problem.dim() {
        return Err(Error::config("ensemble and problem dimensions differ"));
    }
    let jf = ens.len() as f64;
    let dev = centered(ens.positions());
    let k = problem.data_dim();

    let mut g = DMatrix::zeros(k, ens.len());
    for (j, x) in ens.particles().enumerate() {
        problem
            .forward()
            .evaluate(x, g.column_mut(j).as_mut_slice())
            .map_err(|reason| Error::Forward { particle: j, reason })?;
    }
    let g_dev = centered(&g);
    let mut g_res = g;
    for mut col in g_res.column_iter_mut() {
        col -= problem.data();
    }
    let data_m = g_dev.tr_mul(&(problem.noise_precision() * g_res)) / jf;
    let mut drift = -(&dev * data_m);

    let cov = &dev * dev.transpose() / jf;
    if let (Some(prior), Some(prec)) = (problem.prior(), problem.prior_precision()) {
        let mut offset = ens.positions().clone();
        for mut col in offset.column_iter_mut() {
            col -= &prior.mean;
        }
        drift -= &cov * (prec * offset);
    }

    if problem.constrained() {
        let nu = problem.nu();
        if analytic {
            let mut grad = vec![0.0; ens.dim()];
            for (j, x) in ens.particles().enumerate() {
                problem.constraints().grad_norm_sq_into(x, &mut grad)?;
                let g = DVector::from_column_slice(&grad);
                let term = &cov * g / nu;
                let mut col = drift.column_mut(j);
                col -= term;
            }
        } else {
            let nc = problem.constraints().len();
            let mut a = DMatrix::zeros(nc, ens.len());
            for (j, x) in ens.particles().enumerate() {
                problem.constraints().residual_into(x, a.column_mut(j).as_mut_slice())?;
            }
            let constraint_m = centered(&a).tr_mul(&a) * (2.0 / (nu * jf));
            drift -= &dev * constraint_m;
        }
    }
    Ok(drift)
}
