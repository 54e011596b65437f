use nalgebra::DMatrix;

use super::assignment::linear_assignment;
use crate::ensemble::Ensemble;
use crate::error::{Error, Result};
use crate::rng::{RngStream, StreamId, AUX_PARTICLE};

/// Number of subsamples averaged when ensemble sizes differ.
pub const SUBSAMPLE_REPEATS: usize = 10;

/// `W_2(mu^J, delta_{x*}) = sqrt((1/J) sum_j |x_j - x*|^2)`.
pub fn w2_to_dirac(ens: &Ensemble, target: &[f64]) -> f64 {
    let sum: f64 = ens
        .particles()
        .map(|p| p.iter().zip(target).map(|(x, t)| (x - t).powi(2)).sum::<f64>())
        .sum();
    (sum / ens.len() as f64).sqrt()
}

/// Exact `W_2` between two equally sized empirical measures.
pub fn w2_empirical(a: &Ensemble, b: &Ensemble) -> Result<f64> {
    if a.len() != b.len() || a.dim() != b.dim() {
        return Err(Error::config(format!(
            "w2_empirical needs equal sizes and dimensions, got {}x{} and {}x{}",
            a.len(),
            a.dim(),
            b.len(),
            b.dim()
        )));
    }
    let cols_a: Vec<&[f64]> = a.particles().collect();
    let cols_b: Vec<&[f64]> = b.particles().collect();
    w2_points(&cols_a, &cols_b)
}

fn w2_points(a: &[&[f64]], b: &[&[f64]]) -> Result<f64> {
    let n = a.len();
    let cost = DMatrix::from_fn(n, n, |i, j| {
        a[i].iter().zip(b[j]).map(|(x, y)| (x - y).powi(2)).sum::<f64>()
    });
    let assign = linear_assignment(&cost)?;
    let total: f64 = assign.iter().enumerate().map(|(i, &j)| cost[(i, j)]).sum();
    Ok((total.max(0.0) / n as f64).sqrt())
}

/// `W_2` between ensembles of possibly different sizes. The larger one is
/// subsampled without replacement to the smaller size, [`SUBSAMPLE_REPEATS`]
/// times, and the distances averaged. Equal sizes are computed exactly.
pub fn w2_between(a: &Ensemble, b: &Ensemble, seed: u64) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::config("w2_between needs ensembles of equal dimension"));
    }
    if a.len() == b.len() {
        return w2_empirical(a, b);
    }
    let (small, large) = if a.len() < b.len() { (a, b) } else { (b, a) };
    let small_pts: Vec<&[f64]> = small.particles().collect();
    let large_pts: Vec<&[f64]> = large.particles().collect();
    let mut rng = RngStream::new(seed, StreamId::new(AUX_PARTICLE, 2));
    let mut total = 0.0;
    for _ in 0..SUBSAMPLE_REPEATS {
        let mut idx: Vec<usize> = (0..large_pts.len()).collect();
        for i in 0..small_pts.len() {
            let k = i + rng.index(idx.len() - i);
            idx.swap(i, k);
        }
        let picked: Vec<&[f64]> = idx[..small_pts.len()].iter().map(|&i| large_pts[i]).collect();
        total += w2_points(&small_pts, &picked)?;
    }
    Ok(total / SUBSAMPLE_REPEATS as f64)
}
