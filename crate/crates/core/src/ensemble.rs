//! Particle ensembles and their Gaussian initialization.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// `J` particles in `R^d`, stored column-wise as a `d x J` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    positions: DMatrix<f64>,
    generation: u64,
    time: f64,
}

impl Ensemble {
    pub fn new(positions: DMatrix<f64>) -> Result<Self> {
        if positions.nrows() == 0 || positions.ncols() == 0 {
            return Err(Error::config("ensemble needs at least one particle and one dimension"));
        }
        if positions.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("ensemble positions must be finite"));
        }
        Ok(Self {
            positions,
            generation: 0,
            time: 0.0,
        })
    }

    /// Builds an ensemble from a list of points of equal dimension.
    pub fn from_points(points: &[Vec<f64>]) -> Result<Self> {
        let d = points.first().map_or(0, Vec::len);
        if points.iter().any(|p| p.len() != d) {
            return Err(Error::config("all particles must share one dimension"));
        }
        let flat: Vec<f64> = points.iter().flatten().copied().collect();
        Self::new(DMatrix::from_column_slice(d, points.len(), &flat))
    }

    pub fn dim(&self) -> usize {
        self.positions.nrows()
    }

    pub fn len(&self) -> usize {
        self.positions.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.ncols() == 0
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn positions(&self) -> &DMatrix<f64> {
        &self.positions
    }

    pub fn particle(&self, j: usize) -> &[f64] {
        let d = self.dim();
        &self.positions.as_slice()[j * d..(j + 1) * d]
    }

    pub fn particles(&self) -> impl Iterator<Item = &[f64]> {
        self.positions.as_slice().chunks_exact(self.dim())
    }

    pub fn mean(&self) -> DVector<f64> {
        self.positions.column_mean()
    }

    /// Successor ensemble one generation later, `dt` further in pseudo-time.
    /// Finiteness is the caller's responsibility.
    pub fn advance(&self, positions: DMatrix<f64>, dt: f64) -> Self {
        debug_assert_eq!(positions.shape(), self.positions.shape());
        Self {
            positions,
            generation: self.generation + 1,
            time: self.time + dt,
        }
    }
}

/// Diagonal Gaussian `N(mean, diag(variance))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianInit {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

impl GaussianInit {
    pub fn isotropic(dim: usize, mean: f64, variance: f64) -> Self {
        Self {
            mean: vec![mean; dim],
            variance: vec![variance; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean.is_empty() || self.mean.len() != self.variance.len() {
            return Err(Error::config("initial distribution needs matching, nonempty mean and variance"));
        }
        if self.variance.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::config("initial variances must be positive and finite"));
        }
        if self.mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::config("initial mean must be finite"));
        }
        Ok(())
    }
}

/// Draws one particle from each stream. The ensemble size is `streams.len()`.
pub fn init_ensemble(dist: &GaussianInit, streams: &mut [RngStream]) -> Result<Ensemble> {
    dist.validate()?;
    if streams.is_empty() {
        return Err(Error::config("ensemble size must be at least 1"));
    }
    let d = dist.dim();
    let mut positions = DMatrix::zeros(d, streams.len());
    for (mut col, rng) in positions.column_iter_mut().zip(streams.iter_mut()) {
        for i in 0..d {
            col[i] = dist.mean[i] + dist.variance[i].sqrt() * rng.normal();
        }
    }
    Ensemble::new(positions)
}
