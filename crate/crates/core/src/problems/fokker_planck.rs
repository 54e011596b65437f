//! Recovery of a 1-D Gaussian-mixture initial condition for the
//! Ornstein-Uhlenbeck Fokker-Planck equation `rho_t = (x rho + rho_x)_x`.
//!
//! Each component evolves in closed form: the mean decays as `e^{-t} m` and
//! the variance relaxes as `1 + (s^2 - 1) e^{-2t}`, so the forward map is
//! linear in the weights.

use std::f64::consts::PI;

use crate::constraints::{AffineConstraint, ConstraintSet};
use crate::eki::ForwardMap;
use crate::error::{Error, Result};
use crate::rng::{RngStream, StreamId, AUX_PARTICLE};

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<f64>, variances: Vec<f64>) -> Result<Self> {
        if weights.is_empty() || weights.len() != means.len() || means.len() != variances.len() {
            return Err(Error::config("mixture weights, means and variances must have equal nonzero length"));
        }
        Ok(Self {
            weights,
            means,
            variances,
        })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Density of the evolved mixture at `(x, t)`.
    pub fn density(&self, x: f64, t: f64) -> Result<f64> {
        fp_exact_solution(self, x, t)
    }
}

fn evolved_variance(variance: f64, t: f64) -> f64 {
    1.0 + (variance - 1.0) * (-2.0 * t).exp()
}

fn gaussian(x: f64, mean: f64, var: f64) -> f64 {
    (-(x - mean).powi(2) / (2.0 * var)).exp() / (2.0 * PI * var).sqrt()
}

fn component(x: f64, mean: f64, variance: f64, t: f64) -> Result<f64> {
    let var = evolved_variance(variance, t);
    if !(var > 0.0) {
        return Err(Error::config(format!(
            "evolved component variance {var} is not positive (variance {variance}, t {t})"
        )));
    }
    Ok(gaussian(x, (-t).exp() * mean, var))
}

/// Exact solution at `(x, t)` for the mixture initial condition.
pub fn fp_exact_solution(mix: &GaussianMixture, x: f64, t: f64) -> Result<f64> {
    let mut sum = 0.0;
    for n in 0..mix.len() {
        sum += mix.weights[n] * component(x, mix.means[n], mix.variances[n], t)?;
    }
    Ok(sum)
}

/// Noisy point observations of the evolved density on a uniform grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    pub positions: Vec<f64>,
    pub values: Vec<f64>,
    pub noise_std: f64,
    pub final_time: f64,
}

impl ObservationSet {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Per-datum misfit weight `1 / gamma^2`; unit weight for noiseless data.
    fn weight(&self) -> f64 {
        if self.noise_std > 0.0 {
            1.0 / (self.noise_std * self.noise_std)
        } else {
            1.0
        }
    }
}

/// `K` points from `-L` to `L` inclusive, spacing `2L / (K - 1)`.
pub fn observation_grid(half_width: f64, count: usize) -> Vec<f64> {
    let h = 2.0 * half_width / (count - 1) as f64;
    (0..count)
        .map(|k| if k + 1 == count { half_width } else { -half_width + k as f64 * h })
        .collect()
}

pub fn generate_observations(
    truth: &GaussianMixture,
    half_width: f64,
    count: usize,
    final_time: f64,
    noise_std: f64,
    seed: u64,
) -> Result<ObservationSet> {
    if count < 2 {
        return Err(Error::config("need at least two observation points"));
    }
    if !(noise_std >= 0.0) || !(half_width > 0.0) || !(final_time >= 0.0) {
        return Err(Error::config("observation half-width must be positive, noise and time nonnegative"));
    }
    let positions = observation_grid(half_width, count);
    let mut rng = RngStream::new(seed, StreamId::new(AUX_PARTICLE, 0));
    let values = positions
        .iter()
        .map(|&x| Ok(fp_exact_solution(truth, x, final_time)? + noise_std * rng.normal()))
        .collect::<Result<Vec<_>>>()?;
    Ok(ObservationSet {
        positions,
        values,
        noise_std,
        final_time,
    })
}

/// Uniform draw from the probability simplex in `R^n`.
pub fn sample_simplex(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = RngStream::new(seed, StreamId::new(AUX_PARTICLE, 1));
    let e: Vec<f64> = (0..n).map(|_| -(1.0 - rng.uniform()).ln()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|v| v / total).collect()
}

/// Weights-only forward map `w -> (rho_e(x_k, T; w))_k`; linear in `w`.
#[derive(Debug, Clone)]
pub struct WeightsForward {
    /// `basis[n][k]` is component `n` evolved to `T` at `x_k`.
    basis: Vec<Vec<f64>>,
}

impl WeightsForward {
    pub fn new(means: &[f64], variances: &[f64], positions: &[f64], final_time: f64) -> Result<Self> {
        if means.len() != variances.len() || means.is_empty() {
            return Err(Error::config("means and variances must have equal nonzero length"));
        }
        let basis = means
            .iter()
            .zip(variances)
            .map(|(&m, &v)| positions.iter().map(|&x| component(x, m, v, final_time)).collect())
            .collect::<Result<Vec<Vec<f64>>>>()?;
        Ok(Self { basis })
    }

    pub fn predict(&self, weights: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.basis[0].len()];
        self.accumulate(weights, &mut out);
        out
    }

    fn accumulate(&self, weights: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (w, column) in weights.iter().zip(&self.basis) {
            for (o, b) in out.iter_mut().zip(column) {
                *o += w * b;
            }
        }
    }
}

impl ForwardMap for WeightsForward {
    fn input_dim(&self) -> usize {
        self.basis.len()
    }

    fn output_dim(&self) -> usize {
        self.basis[0].len()
    }

    fn evaluate(&self, x: &[f64], out: &mut [f64]) -> std::result::Result<(), String> {
        self.accumulate(x, out);
        Ok(())
    }
}

/// Joint forward map `(w, v) -> (rho_e(x_k, T; w, |v|))_k` with known means.
#[derive(Debug, Clone)]
pub struct WeightsVariancesForward {
    means: Vec<f64>,
    positions: Vec<f64>,
    final_time: f64,
}

impl WeightsVariancesForward {
    pub fn new(means: Vec<f64>, positions: Vec<f64>, final_time: f64) -> Result<Self> {
        if means.is_empty() {
            return Err(Error::config("need at least one mixture component"));
        }
        Ok(Self {
            means,
            positions,
            final_time,
        })
    }

    pub fn predict(&self, params: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.positions.len()];
        self.fill(params, &mut out)?;
        Ok(out)
    }

    fn fill(&self, params: &[f64], out: &mut [f64]) -> Result<()> {
        let n = self.means.len();
        let (w, v) = params.split_at(n);
        out.iter_mut().for_each(|o| *o = 0.0);
        for c in 0..n {
            for (o, &x) in out.iter_mut().zip(&self.positions) {
                *o += w[c] * component(x, self.means[c], v[c].abs(), self.final_time)?;
            }
        }
        Ok(())
    }
}

impl ForwardMap for WeightsVariancesForward {
    fn input_dim(&self) -> usize {
        2 * self.means.len()
    }

    fn output_dim(&self) -> usize {
        self.positions.len()
    }

    fn evaluate(&self, x: &[f64], out: &mut [f64]) -> std::result::Result<(), String> {
        self.fill(x, out).map_err(|e| e.to_string())
    }
}

/// `sum_k |y_k - rho_e(x_k, T; w)|^2 / gamma^2` with fixed means and variances.
pub fn misfit_weights(obs: &ObservationSet, means: &[f64], variances: &[f64], weights: &[f64]) -> Result<f64> {
    let forward = WeightsForward::new(means, variances, &obs.positions, obs.final_time)?;
    let pred = forward.predict(weights);
    Ok(sum_sq(obs, &pred))
}

/// As [`misfit_weights`] with the variances `|v|` also free.
pub fn misfit_weights_variances(obs: &ObservationSet, means: &[f64], weights: &[f64], variances: &[f64]) -> Result<f64> {
    let forward = WeightsVariancesForward::new(means.to_vec(), obs.positions.clone(), obs.final_time)?;
    let params: Vec<f64> = weights.iter().chain(variances).copied().collect();
    Ok(sum_sq(obs, &forward.predict(&params)?))
}

/// Analytic gradient of [`misfit_weights_variances`] with respect to `(w, v)`.
/// Not defined where some `v_n = 0`.
pub fn misfit_weights_variances_gradient(
    obs: &ObservationSet,
    means: &[f64],
    weights: &[f64],
    variances: &[f64],
) -> Result<Vec<f64>> {
    let n = means.len();
    let t = obs.final_time;
    let decay = (-2.0 * t).exp();
    let mut grad = vec![0.0; 2 * n];
    for (&x, &y) in obs.positions.iter().zip(&obs.values) {
        let mut rho = 0.0;
        let mut d_rho = vec![0.0; 2 * n];
        for c in 0..n {
            let var = evolved_variance(variances[c].abs(), t);
            if !(var > 0.0) {
                return Err(Error::config("evolved component variance is not positive"));
            }
            let mean = (-t).exp() * means[c];
            let g = gaussian(x, mean, var);
            rho += weights[c] * g;
            d_rho[c] = g;
            let dg_dvar = g * ((x - mean).powi(2) / (2.0 * var * var) - 0.5 / var);
            d_rho[n + c] = weights[c] * dg_dvar * decay * variances[c].signum();
        }
        let r = -2.0 * obs.weight() * (y - rho);
        for (gi, di) in grad.iter_mut().zip(&d_rho) {
            *gi += r * di;
        }
    }
    Ok(grad)
}

fn sum_sq(obs: &ObservationSet, pred: &[f64]) -> f64 {
    obs.weight() * obs.values.iter().zip(pred).map(|(y, p)| (y - p).powi(2)).sum::<f64>()
}

/// `sum w = 1` and `w_n >= 0` on `R^n`.
pub fn simplex_constraints(n: usize) -> ConstraintSet {
    simplex_in(n, n)
}

/// Simplex constraints on the weights of `(w, v) in R^{2n}` plus `v_n >= 0`.
pub fn simplex_variance_constraints(n: usize) -> ConstraintSet {
    let mut set = simplex_in(n, 2 * n);
    for c in 0..n {
        set = set.with_inequality(unit(2 * n, n + c));
    }
    set
}

fn simplex_in(n: usize, dim: usize) -> ConstraintSet {
    let mut sum = vec![0.0; dim];
    sum[..n].iter_mut().for_each(|v| *v = 1.0);
    let mut set = ConstraintSet::new().with_equality(AffineConstraint {
        coefficients: sum,
        offset: 1.0,
    });
    for c in 0..n {
        set = set.with_inequality(unit(dim, c));
    }
    set
}

fn unit(dim: usize, i: usize) -> AffineConstraint {
    let mut coefficients = vec![0.0; dim];
    coefficients[i] = 1.0;
    AffineConstraint {
        coefficients,
        offset: 0.0,
    }
}
