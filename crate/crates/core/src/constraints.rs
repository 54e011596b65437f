//! Objectives, constraint sets and the penalized objective `g = f + |A|^2 / nu`.
//!
//! Equality components enter the residual map `A` unchanged; inequality
//! components `I(x) >= 0` enter as `min(I(x), 0)`, so `A` vanishes exactly on
//! the feasible set and `|A|^2` stays continuously differentiable.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub trait Objective: Send + Sync {
    fn value(&self, x: &[f64]) -> f64;
}

impl<F> Objective for F
where
    F: Fn(&[f64]) -> f64 + Send + Sync,
{
    fn value(&self, x: &[f64]) -> f64 {
        self(x)
    }
}

/// A scalar constraint component with an analytic gradient.
pub trait ConstraintFn: Send + Sync {
    fn value(&self, x: &[f64]) -> f64;
    /// Writes the gradient into `out` (length `d`).
    fn gradient(&self, x: &[f64], out: &mut [f64]);
}

/// Constraint component assembled from a value closure and a gradient closure.
pub struct FnConstraint<V, G> {
    value: V,
    gradient: G,
}

impl<V, G> FnConstraint<V, G>
where
    V: Fn(&[f64]) -> f64 + Send + Sync,
    G: Fn(&[f64], &mut [f64]) + Send + Sync,
{
    pub fn new(value: V, gradient: G) -> Self {
        Self { value, gradient }
    }
}

impl<V, G> ConstraintFn for FnConstraint<V, G>
where
    V: Fn(&[f64]) -> f64 + Send + Sync,
    G: Fn(&[f64], &mut [f64]) + Send + Sync,
{
    fn value(&self, x: &[f64]) -> f64 {
        (self.value)(x)
    }

    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        (self.gradient)(x, out)
    }
}

/// Affine component `a . x - b`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineConstraint {
    pub coefficients: Vec<f64>,
    pub offset: f64,
}

impl ConstraintFn for AffineConstraint {
    fn value(&self, x: &[f64]) -> f64 {
        self.coefficients.iter().zip(x).map(|(a, x)| a * x).sum::<f64>() - self.offset
    }

    fn gradient(&self, _x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.coefficients);
    }
}

#[derive(Clone, Default)]
pub struct ConstraintSet {
    equalities: Vec<Arc<dyn ConstraintFn>>,
    inequalities: Vec<Arc<dyn ConstraintFn>>,
}

impl fmt::Debug for ConstraintSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ConstraintSet")
            .field("equalities", &self.equalities.len())
            .field("inequalities", &self.inequalities.len())
            .finish()
    }
}

impl ConstraintSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_equality(mut self, c: impl ConstraintFn + 'static) -> Self {
        self.equalities.push(Arc::new(c));
        self
    }

    pub fn with_inequality(mut self, c: impl ConstraintFn + 'static) -> Self {
        self.inequalities.push(Arc::new(c));
        self
    }

    pub fn extend(mut self, other: &ConstraintSet) -> Self {
        self.equalities.extend(other.equalities.iter().cloned());
        self.inequalities.extend(other.inequalities.iter().cloned());
        self
    }

    pub fn num_equalities(&self) -> usize {
        self.equalities.len()
    }

    pub fn num_inequalities(&self) -> usize {
        self.inequalities.len()
    }

    /// `N_e + N_i`.
    pub fn len(&self) -> usize {
        self.equalities.len() + self.inequalities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn components(&self) -> impl Iterator<Item = (bool, &Arc<dyn ConstraintFn>)> {
        self.equalities
            .iter()
            .map(|c| (true, c))
            .chain(self.inequalities.iter().map(|c| (false, c)))
    }

    /// Clamped residual `A(x)`, written into `out` (length `N_e + N_i`).
    pub fn residual_into(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        debug_assert_eq!(out.len(), self.len());
        for (i, ((equality, c), slot)) in self.components().zip(out.iter_mut()).enumerate() {
            let v = c.value(x);
            if !v.is_finite() {
                return Err(Error::NonFiniteConstraint { component: i });
            }
            *slot = if equality { v } else { v.min(0.0) };
        }
        Ok(())
    }

    pub fn residual(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.len()];
        self.residual_into(x, &mut out)?;
        Ok(out)
    }

    /// `|A(x)|^2`.
    pub fn residual_norm_sq(&self, x: &[f64]) -> Result<f64> {
        let mut sum = 0.0;
        for (i, (equality, c)) in self.components().enumerate() {
            let v = c.value(x);
            if !v.is_finite() {
                return Err(Error::NonFiniteConstraint { component: i });
            }
            let a = if equality { v } else { v.min(0.0) };
            sum += a * a;
        }
        Ok(sum)
    }

    /// `grad |A|^2 (x) = sum_i 2 A_i(x) grad C_i(x)`, where inactive
    /// inequalities (`I_i(x) >= 0`) contribute nothing.
    pub fn grad_norm_sq_into(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        out.iter_mut().for_each(|v| *v = 0.0);
        let mut scratch = vec![0.0; x.len()];
        for (i, (equality, c)) in self.components().enumerate() {
            let v = c.value(x);
            if !v.is_finite() {
                return Err(Error::NonFiniteConstraint { component: i });
            }
            let a = if equality { v } else { v.min(0.0) };
            if a == 0.0 {
                continue;
            }
            c.gradient(x, &mut scratch);
            if scratch.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteConstraint { component: i });
            }
            for (o, g) in out.iter_mut().zip(&scratch) {
                *o += 2.0 * a * g;
            }
        }
        Ok(())
    }

    pub fn grad_norm_sq(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; x.len()];
        self.grad_norm_sq_into(x, &mut out)?;
        Ok(out)
    }
}

/// `g(x) = f(x) + |A(x)|^2 / nu`; `nu = inf` disables the penalty.
#[derive(Clone)]
pub struct PenalizedObjective {
    pub objective: Arc<dyn Objective>,
    pub constraints: ConstraintSet,
    pub nu: f64,
}

impl fmt::Debug for PenalizedObjective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PenalizedObjective")
            .field("constraints", &self.constraints)
            .field("nu", &self.nu)
            .finish()
    }
}

impl PenalizedObjective {
    pub fn new(objective: Arc<dyn Objective>, constraints: ConstraintSet, nu: f64) -> Result<Self> {
        if !(nu > 0.0) {
            return Err(Error::config(format!("penalty parameter nu must be positive, got {nu}")));
        }
        Ok(Self {
            objective,
            constraints,
            nu,
        })
    }

    pub fn unconstrained(objective: Arc<dyn Objective>) -> Self {
        Self {
            objective,
            constraints: ConstraintSet::new(),
            nu: f64::INFINITY,
        }
    }

    pub fn objective_value(&self, x: &[f64]) -> Result<f64> {
        let f = self.objective.value(x);
        if f.is_finite() {
            Ok(f)
        } else {
            Err(Error::NonFiniteObjective)
        }
    }

    pub fn evaluate(&self, x: &[f64]) -> Result<f64> {
        let f = self.objective_value(x)?;
        if self.nu.is_infinite() || self.constraints.is_empty() {
            return Ok(f);
        }
        let g = f + self.constraints.residual_norm_sq(x)? / self.nu;
        if g.is_finite() {
            Ok(g)
        } else {
            Err(Error::NonFiniteObjective)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConstraintKind {
    /// `x^T A x - c = 0`.
    Equality,
    /// `x^T A x - c >= 0` (feasible set outside the ellipsoid).
    InequalityOutside,
}

/// `x^T A x - c` with `A` symmetric positive definite and `c > 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticConstraint {
    matrix: DMatrix<f64>,
    level: f64,
    kind: ConstraintKind,
}

impl QuadraticConstraint {
    pub fn new(kind: ConstraintKind, matrix: DMatrix<f64>, level: f64) -> Result<Self> {
        if !matrix.is_square() || matrix.nrows() == 0 {
            return Err(Error::config("constraint matrix must be square and nonempty"));
        }
        if matrix != matrix.transpose() {
            return Err(Error::config("constraint matrix must be symmetric"));
        }
        if matrix.clone().cholesky().is_none() {
            return Err(Error::config("constraint matrix must be positive definite"));
        }
        if !(level > 0.0) || !level.is_finite() {
            return Err(Error::config(format!("constraint level must be positive, got {level}")));
        }
        Ok(Self {
            matrix,
            level,
            kind,
        })
    }

    /// `|x|^2 = r^2` or `|x|^2 >= r^2`.
    pub fn sphere(kind: ConstraintKind, dim: usize, radius: f64) -> Result<Self> {
        Self::new(kind, DMatrix::identity(dim, dim), radius * radius)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn level(&self) -> f64 {
        self.level
    }

    pub fn kind(&self) -> ConstraintKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// Whether the matrix is the identity, i.e. the constraint is a sphere.
    pub fn is_sphere(&self) -> bool {
        self.matrix == DMatrix::identity(self.dim(), self.dim())
    }

    /// Unclamped `x^T A x - c`.
    pub fn value(&self, x: &[f64]) -> f64 {
        let v = DVector::from_column_slice(x);
        v.dot(&(&self.matrix * &v)) - self.level
    }

    /// Clamped scalar residual used by the implicit solve.
    pub fn residual(&self, x: &[f64]) -> f64 {
        let v = self.value(x);
        match self.kind {
            ConstraintKind::Equality => v,
            ConstraintKind::InequalityOutside => v.min(0.0),
        }
    }

    pub fn to_constraint_set(&self) -> ConstraintSet {
        let component = QuadraticComponent {
            matrix: self.matrix.clone(),
            level: self.level,
        };
        match self.kind {
            ConstraintKind::Equality => ConstraintSet::new().with_equality(component),
            ConstraintKind::InequalityOutside => ConstraintSet::new().with_inequality(component),
        }
    }
}

struct QuadraticComponent {
    matrix: DMatrix<f64>,
    level: f64,
}

impl ConstraintFn for QuadraticComponent {
    fn value(&self, x: &[f64]) -> f64 {
        let v = DVector::from_column_slice(x);
        v.dot(&(&self.matrix * &v)) - self.level
    }

    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        let v = DVector::from_column_slice(x);
        let g = (&self.matrix * v) * 2.0;
        out.copy_from_slice(g.as_slice());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn circle(c: f64, kind: ConstraintKind) -> ConstraintSet {
        QuadraticConstraint::new(kind, DMatrix::identity(2, 2), c).unwrap().to_constraint_set()
    }

    #[test]
    fn residual_examples() {
        let eq = circle(9.0, ConstraintKind::Equality);
        assert_eq!(eq.residual(&[3.0, 0.0]).unwrap(), vec![0.0]);
        let ineq = circle(18.0, ConstraintKind::InequalityOutside);
        assert_eq!(ineq.residual(&[5.0, 0.0]).unwrap(), vec![0.0]);
        assert_eq!(ineq.residual(&[3.0, 3.0]).unwrap(), vec![0.0]);
        assert_eq!(ineq.residual(&[2.0, 2.0]).unwrap(), vec![-10.0]);
    }

    #[test]
    fn grad_examples() {
        let eq = circle(9.0, ConstraintKind::Equality);
        assert_eq!(eq.grad_norm_sq(&[3.0, 0.0]).unwrap(), vec![0.0, 0.0]);
        let ineq = circle(18.0, ConstraintKind::InequalityOutside);
        assert_eq!(ineq.grad_norm_sq(&[1.0, 0.0]).unwrap(), vec![-68.0, 0.0]);
        assert_eq!(ineq.grad_norm_sq(&[5.0, 0.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn non_finite_component_is_named() {
        let set = ConstraintSet::new()
            .with_equality(AffineConstraint { coefficients: vec![1.0], offset: 0.0 })
            .with_inequality(FnConstraint::new(|_: &[f64]| f64::NAN, |_: &[f64], _: &mut [f64]| {}));
        match set.residual(&[1.0]) {
            Err(Error::NonFiniteConstraint { component }) => assert_eq!(component, 1),
            other => panic!("unexpected {other:?}"),
        }
        assert!(set.grad_norm_sq(&[1.0]).is_err());
    }

    #[test]
    fn penalized_examples() {
        let zero: Arc<dyn Objective> = Arc::new(|_: &[f64]| 0.0);
        let set = ConstraintSet::new().with_equality(AffineConstraint {
            coefficients: vec![1.0, 0.0],
            offset: 1.0,
        });
        let g = PenalizedObjective::new(zero.clone(), set.clone(), 0.5).unwrap();
        assert_eq!(g.evaluate(&[3.0, 7.0]).unwrap(), 8.0);

        let quad: Arc<dyn Objective> = Arc::new(|x: &[f64]| x[0] * x[0] + x[1]);
        let off = PenalizedObjective::new(quad, set, f64::INFINITY).unwrap();
        assert_eq!(off.evaluate(&[3.0, 7.0]).unwrap(), 16.0);

        assert!(PenalizedObjective::new(zero, ConstraintSet::new(), 0.0).is_err());
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let bad: Arc<dyn Objective> = Arc::new(|_: &[f64]| f64::INFINITY);
        let g = PenalizedObjective::unconstrained(bad);
        assert!(matches!(g.evaluate(&[0.0]), Err(Error::NonFiniteObjective)));
    }

    #[test]
    fn quadratic_validation() {
        let not_sym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(QuadraticConstraint::new(ConstraintKind::Equality, not_sym, 1.0).is_err());
        let indefinite = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(QuadraticConstraint::new(ConstraintKind::Equality, indefinite, 1.0).is_err());
        let id = DMatrix::identity(2, 2);
        assert!(QuadraticConstraint::new(ConstraintKind::Equality, id.clone(), 0.0).is_err());
        let ok = QuadraticConstraint::new(ConstraintKind::InequalityOutside, id, 18.0).unwrap();
        assert!(ok.is_sphere());
        assert_eq!(ok.residual(&[2.0, 2.0]), -10.0);
    }

    fn mixed_set() -> ConstraintSet {
        let ellipse = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let q = QuadraticConstraint::new(ConstraintKind::InequalityOutside, ellipse, 4.0).unwrap();
        q.to_constraint_set()
            .extend(&circle(9.0, ConstraintKind::Equality))
            .with_inequality(AffineConstraint { coefficients: vec![1.0, -2.0], offset: 0.5 })
    }

    fn fd_check(set: &ConstraintSet, x: [f64; 2]) {
        let h = 1e-6;
        let g = set.grad_norm_sq(&x).unwrap();
        let scale = g.iter().map(|v| v.abs()).fold(1.0, f64::max);
        for i in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[i] += h;
            xm[i] -= h;
            let fd = (set.residual_norm_sq(&xp).unwrap() - set.residual_norm_sq(&xm).unwrap()) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-5 * scale, "x={x:?} i={i} fd={fd} g={}", g[i]);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn grad_norm_sq_matches_finite_differences(x in -4.0..4.0f64, y in -4.0..4.0f64) {
            fd_check(&mixed_set(), [x, y]);
        }

        #[test]
        fn grad_continuous_across_inequality_boundary(theta in 0.0..std::f64::consts::TAU, side in -1.0..1.0f64) {
            // Points at distance |side| * 1e-3 from the circle |x|^2 = 18, on both sides.
            let set = circle(18.0, ConstraintKind::InequalityOutside);
            let r = 18f64.sqrt() + side * 1e-3;
            fd_check(&set, [r * theta.cos(), r * theta.sin()]);
            let on = [18f64.sqrt() * theta.cos(), 18f64.sqrt() * theta.sin()];
            let g = set.grad_norm_sq(&on).unwrap();
            prop_assert!(g.iter().all(|v| v.abs() < 1e-12));
        }

        #[test]
        fn penalty_composition_is_exact(x in -5.0..5.0f64, y in -5.0..5.0f64, nu in 1e-3..10.0f64) {
            let f: Arc<dyn Objective> = Arc::new(|p: &[f64]| (p[0] - 1.0).powi(2) + p[1].sin());
            let set = mixed_set();
            let g = PenalizedObjective::new(f.clone(), set.clone(), nu).unwrap();
            let p = [x, y];
            let a = set.residual(&p).unwrap();
            let sq: f64 = a.iter().map(|v| v * v).sum();
            prop_assert_eq!(g.evaluate(&p).unwrap(), f.value(&p) + sq / nu);
            prop_assert!(g.evaluate(&p).unwrap() >= f.value(&p));
        }
    }
}
