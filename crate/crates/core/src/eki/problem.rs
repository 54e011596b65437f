use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::constraints::ConstraintSet;
use crate::error::{Error, Result};

/// Forward model `G: R^d -> R^K`.
pub trait ForwardMap: Send + Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    /// Writes `G(x)` into `out` (length `output_dim`).
    fn evaluate(&self, x: &[f64], out: &mut [f64]) -> std::result::Result<(), String>;
}

/// `G(x) = B x` for a fixed `K x d` matrix `B`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearForward {
    pub matrix: DMatrix<f64>,
}

impl LinearForward {
    pub fn new(matrix: DMatrix<f64>) -> Self {
        Self { matrix }
    }
}

impl ForwardMap for LinearForward {
    fn input_dim(&self) -> usize {
        self.matrix.ncols()
    }

    fn output_dim(&self) -> usize {
        self.matrix.nrows()
    }

    fn evaluate(&self, x: &[f64], out: &mut [f64]) -> std::result::Result<(), String> {
        if x.len() != self.matrix.ncols() {
            return Err(format!("expected {} inputs, got {}", self.matrix.ncols(), x.len()));
        }
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.matrix.row(i).iter().zip(x).map(|(b, v)| b * v).sum();
        }
        Ok(())
    }
}

/// Gaussian regularization `(x - a)^T Sigma^{-1} (x - a) / 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Prior {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// `y = G(x) + eta`, `eta ~ N(0, Gamma)`, with optional prior and with
/// constraints observed as `A(x) = 0` under variance `nu / 2` per component.
#[derive(Clone)]
pub struct InverseProblem {
    forward: Arc<dyn ForwardMap>,
    data: DVector<f64>,
    noise_cov: DMatrix<f64>,
    noise_prec: DMatrix<f64>,
    prior: Option<(Prior, DMatrix<f64>)>,
    constraints: ConstraintSet,
    nu: f64,
}

impl std::fmt::Debug for InverseProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("InverseProblem")
            .field("dim", &self.dim())
            .field("data", &self.data)
            .field("noise_cov", &self.noise_cov)
            .field("prior", &self.prior.as_ref().map(|p| &p.0))
            .field("constraints", &self.constraints)
            .field("nu", &self.nu)
            .finish()
    }
}

fn spd_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    if !m.is_square() || (m - m.transpose()).abs().max() > 1e-12 * m.abs().max().max(1.0) {
        return Err(Error::config(format!("{what} must be a symmetric matrix")));
    }
    let chol = m
        .clone()
        .cholesky()
        .ok_or_else(|| Error::config(format!("{what} must be positive definite")))?;
    Ok(chol.inverse())
}

impl InverseProblem {
    pub fn new(
        forward: Arc<dyn ForwardMap>,
        data: DVector<f64>,
        noise_cov: DMatrix<f64>,
        prior: Option<Prior>,
        constraints: ConstraintSet,
        nu: f64,
    ) -> Result<Self> {
        let k = forward.output_dim();
        let d = forward.input_dim();
        if data.len() != k || noise_cov.nrows() != k {
            return Err(Error::config(format!(
                "forward map has {k} outputs but data has {} and noise covariance {}",
                data.len(),
                noise_cov.nrows()
            )));
        }
        if !(nu > 0.0) {
            return Err(Error::config(format!("nu must be positive or inf, got {nu}")));
        }
        let noise_prec = spd_inverse(&noise_cov, "noise covariance")?;
        let prior = match prior {
            Some(p) => {
                if p.mean.len() != d || p.cov.nrows() != d {
                    return Err(Error::config("prior dimensions differ from the parameter dimension"));
                }
                let prec = spd_inverse(&p.cov, "prior covariance")?;
                Some((p, prec))
            }
            None => None,
        };
        Ok(Self {
            forward,
            data,
            noise_cov,
            noise_prec,
            prior,
            constraints,
            nu,
        })
    }

    /// Problem with observation noise `gamma^2 I` (unit weights when `gamma = 0`).
    pub fn with_isotropic_noise(
        forward: Arc<dyn ForwardMap>,
        data: Vec<f64>,
        gamma: f64,
        constraints: ConstraintSet,
        nu: f64,
    ) -> Result<Self> {
        let k = data.len();
        let var = if gamma > 0.0 { gamma * gamma } else { 1.0 };
        Self::new(forward, DVector::from_vec(data), DMatrix::identity(k, k) * var, None, constraints, nu)
    }

    pub fn forward(&self) -> &Arc<dyn ForwardMap> {
        &self.forward
    }

    pub fn data(&self) -> &DVector<f64> {
        &self.data
    }

    pub fn noise_cov(&self) -> &DMatrix<f64> {
        &self.noise_cov
    }

    pub fn noise_precision(&self) -> &DMatrix<f64> {
        &self.noise_prec
    }

    pub fn prior(&self) -> Option<&Prior> {
        self.prior.as_ref().map(|p| &p.0)
    }

    pub fn prior_precision(&self) -> Option<&DMatrix<f64>> {
        self.prior.as_ref().map(|p| &p.1)
    }

    pub fn constraints(&self) -> &ConstraintSet {
        &self.constraints
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn dim(&self) -> usize {
        self.forward.input_dim()
    }

    pub fn data_dim(&self) -> usize {
        self.data.len()
    }

    /// Whether the constraint block takes part in the augmented map.
    pub fn constrained(&self) -> bool {
        self.nu.is_finite() && !self.constraints.is_empty()
    }

    /// Length of `(G(x), x, A(x))` with disabled blocks dropped.
    pub fn augmented_dim(&self) -> usize {
        let prior = if self.prior.is_some() { self.dim() } else { 0 };
        let constraint = if self.constrained() { self.constraints.len() } else { 0 };
        self.data_dim() + prior + constraint
    }

    /// `(y, a, 0)`.
    pub fn augmented_target(&self) -> DVector<f64> {
        let mut t = DVector::zeros(self.augmented_dim());
        let k = self.data_dim();
        t.rows_mut(0, k).copy_from(&self.data);
        if let Some((p, _)) = &self.prior {
            t.rows_mut(k, self.dim()).copy_from(&p.mean);
        }
        t
    }

    /// `(G(x), x, A(x))` for particle `particle`, which is only used for error context.
    pub fn augmented_forward(&self, x: &[f64], particle: usize) -> Result<DVector<f64>> {
        if x.len() != self.dim() {
            return Err(Error::Forward {
                particle,
                reason: format!("expected {} parameters, got {}", self.dim(), x.len()),
            });
        }
        let mut out = DVector::zeros(self.augmented_dim());
        let k = self.data_dim();
        self.forward
            .evaluate(x, &mut out.as_mut_slice()[..k])
            .map_err(|reason| Error::Forward { particle, reason })?;
        if let Some(bad) = out.as_slice()[..k].iter().position(|v| !v.is_finite()) {
            return Err(Error::Forward {
                particle,
                reason: format!("forward output {bad} is not finite"),
            });
        }
        let mut offset = k;
        if self.prior.is_some() {
            out.as_mut_slice()[offset..offset + x.len()].copy_from_slice(x);
            offset += x.len();
        }
        if self.constrained() {
            self.constraints.residual_into(x, &mut out.as_mut_slice()[offset..])?;
        }
        Ok(out)
    }

    /// Applies the block-diagonal weight `diag(Gamma, Sigma, (nu/2) I)^{-1}` to `v`.
    pub fn apply_weight(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(v.len());
        let k = self.data_dim();
        out.rows_mut(0, k).copy_from(&(&self.noise_prec * v.rows(0, k)));
        let mut offset = k;
        if let Some((_, prec)) = &self.prior {
            let d = self.dim();
            out.rows_mut(offset, d).copy_from(&(prec * v.rows(offset, d)));
            offset += d;
        }
        if self.constrained() {
            let w = 2.0 / self.nu;
            for i in offset..v.len() {
                out[i] = w * v[i];
            }
        }
        out
    }

    /// `Phi_R(x) + |A(x)|^2 / nu` with `Phi_R` the half-weighted least-squares
    /// misfit plus prior term.
    pub fn penalized_misfit(&self, x: &[f64]) -> Result<f64> {
        let g = self.augmented_forward(x, 0)?;
        let r = g - self.augmented_target();
        Ok(0.5 * r.dot(&self.apply_weight(&r)))
    }
}
