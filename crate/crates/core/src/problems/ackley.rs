use std::f64::consts::{E, TAU};

use crate::constraints::Objective;

/// Ackley function shifted so that its global minimum sits at `shift`.
#[derive(Debug, Clone, PartialEq)]
pub struct Ackley {
    pub shift: Vec<f64>,
}

impl Ackley {
    pub fn new(shift: Vec<f64>) -> Self {
        Self { shift }
    }

    pub fn centered(dim: usize) -> Self {
        Self { shift: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.shift.len()
    }
}

impl Objective for Ackley {
    fn value(&self, x: &[f64]) -> f64 {
        ackley(&self.shift, x)
    }
}

/// `f_A(x - shift)`.
///
/// Written as `20 (1 - exp(-r/5)) + (e - exp(mean cos))` so the minimum is
/// exactly zero and the value never goes negative through cancellation.
pub fn ackley(shift: &[f64], x: &[f64]) -> f64 {
    debug_assert_eq!(shift.len(), x.len());
    let inv_d = 1.0 / x.len() as f64;
    let (sq, cos) = x.iter().zip(shift).fold((0.0, 0.0), |(sq, cos), (xi, si)| {
        let z = xi - si;
        (sq + z * z, cos + (TAU * z).cos())
    });
    let radial = 20.0 * (1.0 - (-0.2 * (inv_d * sq).sqrt()).exp());
    let oscillating = E - (inv_d * cos).exp();
    radial + oscillating
}
