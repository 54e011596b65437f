//! Ensemble statistics, Wasserstein distances and run traces.

mod assignment;
mod trace;
mod wasserstein;

pub use assignment::linear_assignment;
pub use trace::{detect_collapse, first_below, format_float, Record, RunTrace, TraceMeta};
pub use wasserstein::{w2_between, w2_empirical, w2_to_dirac, SUBSAMPLE_REPEATS};

use nalgebra::DVector;

use crate::constraints::ConstraintSet;
use crate::ensemble::Ensemble;
use crate::error::Result;

/// Trace of the covariance of the pooled empirical measure of all
/// `ensembles`, each particle carrying equal mass.
pub fn ensemble_variance(ensembles: &[&Ensemble]) -> f64 {
    let total: usize = ensembles.iter().map(|e| e.len()).sum();
    if total == 0 {
        return 0.0;
    }
    let d = ensembles[0].dim();
    let mut mean = DVector::zeros(d);
    for ens in ensembles {
        for p in ens.particles() {
            for (m, x) in mean.iter_mut().zip(p) {
                *m += x;
            }
        }
    }
    mean /= total as f64;
    let mut acc = 0.0;
    for ens in ensembles {
        for p in ens.particles() {
            acc += p.iter().zip(mean.iter()).map(|(x, m)| (x - m).powi(2)).sum::<f64>();
        }
    }
    acc / total as f64
}

/// Pooled variance from per-run summaries `(variance, mean)` of equally sized
/// ensembles: the mean within-run variance plus the spread of the run means.
pub fn pooled_variance_from_moments(runs: &[(f64, &[f64])]) -> f64 {
    if runs.is_empty() {
        return 0.0;
    }
    let m = runs.len() as f64;
    let d = runs[0].1.len();
    let mut grand = vec![0.0; d];
    for (_, mean) in runs {
        for (g, x) in grand.iter_mut().zip(mean.iter()) {
            *g += x / m;
        }
    }
    runs.iter()
        .map(|(var, mean)| var + mean.iter().zip(&grand).map(|(x, g)| (x - g).powi(2)).sum::<f64>())
        .sum::<f64>()
        / m
}

/// `(1/M) sum_m (1/J) sum_j |A(x^{(m,j)})|^2`.
pub fn constraint_energy(runs: &[&Ensemble], constraints: &ConstraintSet) -> Result<f64> {
    if runs.is_empty() || constraints.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for ens in runs {
        let mut run = 0.0;
        for p in ens.particles() {
            run += constraints.residual_norm_sq(p)?;
        }
        total += run / ens.len() as f64;
    }
    Ok(total / runs.len() as f64)
}
