use nalgebra::DVector;

use crate::constraints::PenalizedObjective;
use crate::ensemble::Ensemble;
use crate::error::Result;

/// Normalized Gibbs weights `exp(-alpha g_j) / sum_k exp(-alpha g_k)`.
///
/// Exponents are shifted by `min_j g_j`, so the best particle has unnormalized
/// weight exactly one and nothing overflows for any `alpha` or range of `g`.
pub fn gibbs_weights(values: &[f64], alpha: f64) -> Vec<f64> {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let raw: Vec<f64> = values.iter().map(|g| (-alpha * (g - min)).exp()).collect();
    let total: f64 = raw.iter().sum();
    assert!(total >= 1.0, "Gibbs normalization below one: {total}");
    raw.into_iter().map(|w| w / total).collect()
}

/// Weighted mean from precomputed objective values, one per particle.
pub fn weighted_mean_of_values(ens: &Ensemble, values: &[f64], alpha: f64) -> DVector<f64> {
    debug_assert_eq!(values.len(), ens.len());
    let weights = gibbs_weights(values, alpha);
    // Lowest index wins ties.
    let best = values
        .iter()
        .enumerate()
        .fold(0, |best, (j, g)| if *g < values[best] { j } else { best });
    // Accumulate offsets from the best particle: exact when the ensemble has
    // collapsed and exact in the alpha -> inf limit.
    let anchor = ens.particle(best);
    let mut mean = DVector::from_column_slice(anchor);
    for (p, w) in ens.particles().zip(&weights) {
        for ((m, x), a) in mean.iter_mut().zip(p).zip(anchor) {
            *m += w * (x - a);
        }
    }
    mean
}

/// `m_g = sum_j x_j exp(-alpha g(x_j)) / sum_j exp(-alpha g(x_j))`.
pub fn weighted_mean(ens: &Ensemble, obj: &PenalizedObjective, alpha: f64) -> Result<DVector<f64>> {
    let values = ens.particles().map(|p| obj.evaluate(p)).collect::<Result<Vec<_>>>()?;
    Ok(weighted_mean_of_values(ens, &values, alpha))
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::constraints::Objective;
    use crate::problems::Ackley;
    use proptest::prelude::*;

    fn quadratic() -> PenalizedObjective {
        let f: Arc<dyn Objective> = Arc::new(|x: &[f64]| x.iter().map(|v| v * v).sum());
        PenalizedObjective::unconstrained(f)
    }

    #[test]
    fn alpha_zero_is_arithmetic_mean() {
        let ens = Ensemble::from_points(&[vec![0.0, 1.0], vec![2.0, 5.0], vec![4.0, -3.0]]).unwrap();
        let m = weighted_mean(&ens, &quadratic(), 0.0).unwrap();
        assert!((m - ens.mean()).norm() < 1e-14);
    }

    #[test]
    fn large_alpha_locks_on_best_particle() {
        let ens = Ensemble::from_points(&[vec![0.5], vec![-0.7]]).unwrap();
        let m = weighted_mean(&ens, &quadratic(), 1e6).unwrap();
        assert!((m[0] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn ties_give_midpoint() {
        let ens = Ensemble::from_points(&[vec![-1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        for alpha in [0.0, 1.0, 30.0, 1e8] {
            let m = weighted_mean(&ens, &quadratic(), alpha).unwrap();
            assert!((m[0]).abs() < 1e-15 && (m[1] - 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn huge_penalized_values_do_not_overflow() {
        let ens = Ensemble::from_points(&[vec![1e3], vec![2e3], vec![3e3]]).unwrap();
        let m = weighted_mean(&ens, &quadratic(), 30.0).unwrap();
        assert_eq!(m[0], 1e3);
    }

    #[test]
    fn collapsed_ensemble_mean_is_exact() {
        let p = vec![0.1234567, -7.654321];
        let ens = Ensemble::from_points(&[p.clone(), p.clone(), p.clone()]).unwrap();
        let obj = PenalizedObjective::unconstrained(Arc::new(Ackley::new(vec![3.0, 0.0])));
        let m = weighted_mean(&ens, &obj, 30.0).unwrap();
        assert_eq!(m.as_slice(), p.as_slice());
    }

    fn points() -> impl Strategy<Value = Vec<Vec<f64>>> {
        proptest::collection::vec(proptest::collection::vec(-5.0..5.0f64, 2), 2..12)
    }

    proptest! {
        #[test]
        fn weights_sum_to_one(values in proptest::collection::vec(-100.0..100.0f64, 1..20), alpha in 0.0..1e4f64) {
            let w = gibbs_weights(&values, alpha);
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn convex_hull(pts in points(), alpha in 0.0..1e3f64) {
            let ens = Ensemble::from_points(&pts).unwrap();
            let obj = PenalizedObjective::unconstrained(Arc::new(Ackley::new(vec![1.0, 0.5])));
            let m = weighted_mean(&ens, &obj, alpha).unwrap();
            for i in 0..2 {
                let lo = pts.iter().map(|p| p[i]).fold(f64::INFINITY, f64::min);
                let hi = pts.iter().map(|p| p[i]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(m[i] >= lo - 1e-12 && m[i] <= hi + 1e-12);
            }
        }

        #[test]
        fn best_weight_nondecreasing_in_alpha(values in proptest::collection::btree_set(-1000i32..1000, 2..15)) {
            let values: Vec<f64> = values.into_iter().map(|v| v as f64 * 0.01).rev().collect();
            let best = values.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
            let mut prev = 0.0;
            for alpha in [0.0, 1.0, 10.0, 100.0, 1000.0] {
                let w = gibbs_weights(&values, alpha)[best];
                prop_assert!(w >= prev);
                prev = w;
            }
        }
    }
}
