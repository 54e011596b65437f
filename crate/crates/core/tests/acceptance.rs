//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the process exits non-zero if any criterion fails.

use std::f64::consts::PI;
use std::sync::Arc;
use std::time::{Duration, Instant};

use cpe::cbo::{
    cbo_step_explicit_with_noise, cbo_step_semi_implicit_with_noise, CboParams, ImplicitFactor, Scheme,
};
use cpe::config::{ExperimentConfig, Method, ProblemConfig, SweepAxis};
use cpe::constraints::{AffineConstraint, ConstraintKind, ConstraintSet, PenalizedObjective, QuadraticConstraint};
use cpe::diagnostics::{
    detect_collapse, ensemble_variance, first_below, pooled_variance_from_moments, w2_empirical, w2_to_dirac, RunTrace,
};
use cpe::eki::{
    eki_drift_separate, eki_drift_unified, interaction_matrix, EkiParams, InverseProblem, LinearForward, Prior,
};
use cpe::ensemble::Ensemble;
use cpe::harness::{compare_run, run_experiment, ExperimentReport, RunOptions};
use cpe::problems::{ackley, fp_exact_solution, Ackley, GaussianMixture, WeightsVariancesForward};
use cpe::rng::{RngStream, StreamId};
use nalgebra::{DMatrix, DVector};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn rng(tag: u32) -> RngStream {
    RngStream::new(20_240_601, StreamId::new(tag, 0))
}

fn random_ensemble(rng: &mut RngStream, dim: usize, count: usize, scale: f64, offset: f64) -> Ensemble {
    let points: Vec<Vec<f64>> = (0..count)
        .map(|_| (0..dim).map(|_| offset + scale * rng.normal()).collect())
        .collect();
    Ensemble::from_points(&points).unwrap()
}

fn cbo_config(problem: ProblemConfig, particles: usize, runs: usize, max_time: f64, seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        method: Method::Cbo,
        problem,
        cbo: CboParams {
            alpha: 30.0,
            sigma: 0.7,
            nu: 1.0,
            epsilon: 0.1,
            dt: 5e-4,
            max_time,
            scheme: Scheme::SemiImplicit,
        },
        eki: EkiParams::default(),
        runs,
        particles,
        base_seed: seed,
        record_every: 10,
        collapse_tol: 1e-8,
        output: "acceptance".into(),
        sweep: Vec::new(),
    }
}

fn run(config: &ExperimentConfig) -> ExperimentReport {
    run_experiment(config, &RunOptions { workers: None, dry_run: true }).expect("experiment runs")
}

fn final_points(report: &ExperimentReport) -> Vec<Vec<f64>> {
    report.points[0]
        .traces()
        .map(|t| t.last().unwrap().reported_point.clone())
        .collect()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn fraction_within(points: &[Vec<f64>], target: &[f64], radius: f64) -> f64 {
    points.iter().filter(|p| dist(p, target) <= radius).count() as f64 / points.len() as f64
}

fn circle_minimizer_by_grid(shift: &[f64], radius: f64, step: f64) -> Vec<f64> {
    let n = (2.0 * PI / step).ceil() as usize;
    let mut best = (f64::INFINITY, vec![0.0, 0.0]);
    for k in 0..n {
        let theta = k as f64 * step;
        let p = vec![radius * theta.cos(), radius * theta.sin()];
        let v = ackley(shift, &p);
        if v < best.0 {
            best = (v, p);
        }
    }
    best.1
}

fn criterion_1() -> Outcome {
    let cfg = cbo_config(ProblemConfig::ackley_circle(), 50, 20, 15.0, 1000);
    let start = Instant::now();
    let report = run(&cfg);
    let elapsed = start.elapsed();
    let points = final_points(&report);
    let frac = fraction_within(&points, &[3.0, 0.0], 0.25);
    let failures = report.failures();
    outcome(
        frac >= 0.9 && failures == 0 && elapsed < Duration::from_secs(120),
        format!("{:.0}% of 20 runs within 0.25 of (3,0), {failures} failed runs, {:.1}s", frac * 100.0, elapsed.as_secs_f64()),
    )
}

fn criterion_2() -> Outcome {
    let shift = vec![2.0, 2.0];
    let radius = 18f64.sqrt();
    let target = circle_minimizer_by_grid(&shift, radius, 1e-4);
    let problem = ProblemConfig::AckleyQuadratic {
        shift,
        matrix: None,
        level: 18.0,
        constraint: ConstraintKind::InequalityOutside,
        init_mean: vec![0.0, 0.0],
        init_variance: vec![3.0, 3.0],
        reference: Some(target.clone()),
    };
    let cfg = cbo_config(problem, 50, 20, 15.0, 2000);
    let start = Instant::now();
    let report = run(&cfg);
    let elapsed = start.elapsed();
    let points = final_points(&report);
    let frac = fraction_within(&points, &target, 0.25);
    let failures = report.failures();
    outcome(
        frac >= 0.9 && failures == 0 && elapsed < Duration::from_secs(120),
        format!(
            "constrained minimizer ({:.4}, {:.4}); {:.0}% of 20 runs within 0.25, {failures} failed runs, {:.1}s",
            target[0],
            target[1],
            frac * 100.0,
            elapsed.as_secs_f64()
        ),
    )
}

fn mean_energy_at(report: &ExperimentReport, generation: u64) -> f64 {
    let traces: Vec<&RunTrace> = report.points[0].traces().collect();
    traces
        .iter()
        .map(|t| t.at_generation(generation).unwrap().constraint_energy)
        .sum::<f64>()
        / traces.len() as f64
}

fn criterion_3() -> Outcome {
    let base = cbo_config(ProblemConfig::ackley_circle(), 1000, 20, 1.0, 3000);
    let steps = cpe::cbo::steps_for(1.0, base.cbo.dt);
    let mut energies = Vec::new();
    for epsilon in [0.1, 10.0] {
        let mut cfg = base.clone();
        cfg.cbo.epsilon = epsilon;
        let report = run(&cfg);
        energies.push(mean_energy_at(&report, steps));
    }
    outcome(
        energies[0] < energies[1],
        format!("mean CE at t=1: {:.3e} (eps=0.1) vs {:.3e} (eps=10)", energies[0], energies[1]),
    )
}

/// Variance of the pooled particles of all runs at every recorded generation;
/// runs that stopped early keep their last state.
fn pooled_series(report: &ExperimentReport) -> Vec<(u64, f64)> {
    let traces: Vec<&RunTrace> = report.points[0].traces().collect();
    let mut generations: Vec<u64> = traces.iter().flat_map(|t| t.records.iter().map(|r| r.generation)).collect();
    generations.sort_unstable();
    generations.dedup();
    generations
        .into_iter()
        .map(|g| {
            let moments: Vec<(f64, &[f64])> = traces
                .iter()
                .map(|t| {
                    let r = t.at_generation(g).unwrap();
                    (r.variance, r.ensemble_mean.as_slice())
                })
                .collect();
            (g, pooled_variance_from_moments(&moments))
        })
        .collect()
}

fn criterion_4() -> Outcome {
    let mut details = Vec::new();
    let mut collapse = Vec::new();
    for particles in [50, 1000] {
        let cfg = cbo_config(ProblemConfig::ackley_circle(), particles, 20, 15.0, 4000);
        let report = run(&cfg);
        let series = pooled_series(&report);
        let generation = first_below(series.iter().copied(), 1e-6);
        let floor = series.iter().map(|s| s.1).fold(f64::INFINITY, f64::min);
        let individual: Vec<u64> = report.points[0].traces().filter_map(|t| detect_collapse(t, 1e-6)).collect();
        let mean_individual = individual.iter().sum::<u64>() as f64 / individual.len().max(1) as f64;
        details.push(format!(
            "J={particles}: pooled {} (minimum {floor:.2e}), {}/20 runs collapse individually at mean generation {mean_individual:.0}",
            generation.map_or("never".to_string(), |g| format!("generation {g}")),
            individual.len()
        ));
        collapse.push(generation);
    }
    let pass = match (collapse[0], collapse[1]) {
        (Some(a), Some(b)) => a <= b,
        (Some(_), None) => true,
        _ => false,
    };
    outcome(pass, format!("pooled variance below 1e-6: {}", details.join("; ")))
}

fn eki_config(problem: ProblemConfig, seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        method: Method::Eki,
        problem,
        cbo: CboParams::default(),
        eki: EkiParams {
            dt_base: 1.0,
            dt_max: f64::INFINITY,
            scheme: cpe::eki::EkiScheme::Explicit,
            max_iters: 200,
            collapse_tol: 1e-14,
        },
        runs: 1,
        particles: 100,
        base_seed: seed,
        record_every: 1,
        collapse_tol: 1e-8,
        output: "acceptance".into(),
        sweep: Vec::new(),
    }
}

fn criterion_5() -> Outcome {
    let mut cfg = eki_config(ProblemConfig::fp_two_weights(), 5);
    let nus = [1.0, 1e-2, 1e-4, 1e-6, 1e-8];
    cfg.sweep = vec![SweepAxis {
        path: "problem.nu".into(),
        values: nus.iter().map(|v| toml::Value::Float(*v)).collect(),
    }];
    let start = Instant::now();
    let report = run(&cfg);
    let elapsed = start.elapsed();
    let mut deficits = Vec::new();
    let mut errors = Vec::new();
    for p in &report.points {
        let last = p.traces().next().unwrap().last().unwrap();
        deficits.push((1.0 - last.reported_point.iter().sum::<f64>()).abs());
        errors.push(last.error.unwrap());
    }
    let monotone = deficits.windows(2).all(|w| w[1] <= w[0]);
    let emin = errors.iter().cloned().fold(f64::INFINITY, f64::min);
    let emax = errors.iter().cloned().fold(0.0, f64::max);
    let spread = (emax - emin) / emin;
    let truth = report.points[0].truth.clone().unwrap();
    outcome(
        monotone && deficits[4] <= 1e-5 && spread < 0.1 && report.failures() == 0 && elapsed < Duration::from_secs(30),
        format!(
            "truth ({:.4}, {:.4}); |1-sum w| = {}; L1 errors = {}; error spread {:.2}%; {:.1}s",
            truth[0],
            truth[1],
            deficits.iter().map(|d| format!("{d:.2e}")).collect::<Vec<_>>().join(", "),
            errors.iter().map(|e| format!("{e:.4}")).collect::<Vec<_>>().join(", "),
            spread * 100.0,
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_6() -> Outcome {
    let cfg = eki_config(ProblemConfig::fp_three_components(), 6);
    let problem = cfg.eki_problem().unwrap();
    let start = Instant::now();
    let c = compare_run(&problem, &cfg.eki, 100, cfg.base_seed, 0).unwrap();
    let elapsed = start.elapsed();
    let reach = |t: &RunTrace| first_below(t.records.iter().map(|r| (r.generation, r.cov_norm.unwrap())), 1e-12);
    let (e, s) = (reach(&c.explicit), reach(&c.semi_implicit));
    let ok = |r: Option<u64>| r.is_some_and(|g| g <= 200);
    let show = |r: Option<u64>| r.map_or("not reached".to_string(), |g| format!("iteration {g}"));
    outcome(
        ok(e) && ok(s) && !c.explicit.failed() && !c.semi_implicit.failed() && elapsed < Duration::from_secs(60),
        format!(
            "covariance norm < 1e-12: explicit {}, semi-implicit {}; {:.1}s",
            show(e),
            show(s),
            elapsed.as_secs_f64()
        ),
    )
}

fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / a.norm().max(b.norm()).max(f64::MIN_POSITIVE)
}

fn random_matrix(rng: &mut RngStream, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.normal())
}

fn random_spd(rng: &mut RngStream, n: usize) -> DMatrix<f64> {
    let b = random_matrix(rng, n, n);
    &b * b.transpose() / n as f64 + DMatrix::identity(n, n) * 0.5
}

fn criterion_7() -> Outcome {
    let mut r = rng(7);
    // Nonlinear mixture forward map with prior and simplex-plus-positivity constraints.
    let positions: Vec<f64> = (0..30).map(|k| -8.0 + 16.0 * k as f64 / 29.0).collect();
    let forward = Arc::new(WeightsVariancesForward::new(vec![-5.0, 0.0, 5.0], positions.clone(), 0.5).unwrap());
    let mut worst_a: f64 = 0.0;
    let mut worst_b: f64 = 0.0;
    for _ in 0..100 {
        let data: Vec<f64> = (0..positions.len()).map(|_| 0.1 * r.normal().abs()).collect();
        let prior = Prior {
            mean: DVector::from_fn(6, |_, _| r.normal()),
            cov: random_spd(&mut r, 6),
        };
        let nu = 10f64.powf(-4.0 * r.uniform());
        let problem = InverseProblem::new(
            forward.clone(),
            DVector::from_vec(data),
            random_spd(&mut r, positions.len()) * 0.01,
            Some(prior),
            cpe::problems::simplex_variance_constraints(3),
            nu,
        )
        .unwrap();
        let ens = random_ensemble(&mut r, 6, 20, 0.5, 0.3);
        let unified = eki_drift_unified(&ens, &problem).unwrap();
        let separate = eki_drift_separate(&ens, &problem, false).unwrap();
        worst_a = worst_a.max(rel(&unified, &separate));
        let m = interaction_matrix(&ens, &problem).unwrap();
        let scale = m.abs().max();
        let col_sum = m.row_sum().abs().max();
        worst_b = worst_b.max(col_sum / scale);
    }

    // Linear forward map and affine equality constraints.
    let mut worst_c: f64 = 0.0;
    for _ in 0..100 {
        let (d, k) = (4, 6);
        let g = random_matrix(&mut r, k, d);
        let gamma = random_spd(&mut r, k);
        let y = DVector::from_fn(k, |_, _| r.normal());
        let prior = Prior {
            mean: DVector::from_fn(d, |_, _| r.normal()),
            cov: random_spd(&mut r, d),
        };
        let rows: Vec<(Vec<f64>, f64)> = (0..2).map(|_| ((0..d).map(|_| r.normal()).collect(), r.normal())).collect();
        let mut constraints = ConstraintSet::new();
        for (coefficients, offset) in &rows {
            constraints = constraints.with_equality(AffineConstraint {
                coefficients: coefficients.clone(),
                offset: *offset,
            });
        }
        let nu = 10f64.powf(-2.0 * r.uniform());
        let problem = InverseProblem::new(
            Arc::new(LinearForward::new(g.clone())),
            y.clone(),
            gamma.clone(),
            Some(prior.clone()),
            constraints.clone(),
            nu,
        )
        .unwrap();
        let ens = random_ensemble(&mut r, d, 12, 1.0, 0.0);
        let drift = eki_drift_unified(&ens, &problem).unwrap();
        let gamma_inv = gamma.clone().cholesky().unwrap().inverse();
        let sigma_inv = prior.cov.clone().cholesky().unwrap().inverse();
        let mean = ens.mean();
        let mut cov = DMatrix::zeros(d, d);
        for p in ens.particles() {
            let dev = DVector::from_column_slice(p) - &mean;
            cov += &dev * dev.transpose();
        }
        cov /= ens.len() as f64;
        let mut expected = DMatrix::zeros(d, ens.len());
        for (j, p) in ens.particles().enumerate() {
            let x = DVector::from_column_slice(p);
            let mut grad = g.transpose() * (&gamma_inv * (&g * &x - &y)) + &sigma_inv * (&x - &prior.mean);
            for (coefficients, offset) in &rows {
                let a = DVector::from_column_slice(coefficients);
                let residual = a.dot(&x) - offset;
                grad += a * (2.0 * residual / nu);
            }
            expected.set_column(j, &(-(&cov * grad)));
        }
        worst_c = worst_c.max(rel(&drift, &expected));
    }
    outcome(
        worst_a <= 1e-10 && worst_b <= 1e-12 && worst_c <= 1e-8,
        format!(
            "(a) unified vs separate drift {worst_a:.1e}; (b) column sums {worst_b:.1e}; (c) preconditioned gradient {worst_c:.1e}"
        ),
    )
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..n {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

fn criterion_8() -> Outcome {
    let mut r = rng(8);
    let mut worst_w2: f64 = 0.0;
    for instance in 0..100 {
        let j = 1 + instance % 6;
        let a = random_ensemble(&mut r, 2, j, 1.0, 0.0);
        let b = random_ensemble(&mut r, 2, j, 1.5, 0.5);
        let brute = permutations(j)
            .iter()
            .map(|perm| perm.iter().enumerate().map(|(i, &k)| dist(a.particle(i), b.particle(k)).powi(2)).sum::<f64>())
            .fold(f64::INFINITY, f64::min);
        let brute = (brute / j as f64).sqrt();
        worst_w2 = worst_w2.max((w2_empirical(&a, &b).unwrap() - brute).abs());
    }

    let mut worst_bv: f64 = 0.0;
    for _ in 0..100 {
        let ens = random_ensemble(&mut r, 3, 25, 2.0, 1.0);
        let target: Vec<f64> = (0..3).map(|_| 3.0 * r.normal()).collect();
        let lhs = w2_to_dirac(&ens, &target).powi(2);
        let mean = ens.mean();
        let rhs = ensemble_variance(&[&ens]) + dist(mean.as_slice(), &target).powi(2);
        worst_bv = worst_bv.max((lhs - rhs).abs() / rhs.max(1e-300));
    }

    let mix = GaussianMixture::new(vec![0.333, 0.476, 0.191], vec![-5.0, 0.0, 5.0], vec![0.4, 0.1, 0.5]).unwrap();
    let (hx, ht) = (1e-3, 1e-4);
    let mut worst_pde: f64 = 0.0;
    for _ in 0..50 {
        let x = -8.0 + 16.0 * r.uniform();
        let t = 0.05 + 1.95 * r.uniform();
        let rho = |x: f64, t: f64| fp_exact_solution(&mix, x, t).unwrap();
        let rho_t = (rho(x, t + ht) - rho(x, t - ht)) / (2.0 * ht);
        let rho_x = (rho(x + hx, t) - rho(x - hx, t)) / (2.0 * hx);
        let rho_xx = (rho(x + hx, t) - 2.0 * rho(x, t) + rho(x - hx, t)) / (hx * hx);
        let residual = rho_t - (rho(x, t) + x * rho_x + rho_xx);
        worst_pde = worst_pde.max(residual.abs());
    }
    outcome(
        worst_w2 <= 1e-12 && worst_bv <= 1e-12 && worst_pde <= 1e-4,
        format!("W2 vs brute force {worst_w2:.1e}; bias-variance {worst_bv:.1e}; PDE residual {worst_pde:.1e}"),
    )
}

fn criterion_9() -> Outcome {
    let mut r = rng(9);
    let qc = QuadraticConstraint::sphere(ConstraintKind::Equality, 2, 3.0).unwrap();
    let factor = ImplicitFactor::new(&qc);
    let obj = PenalizedObjective::new(Arc::new(Ackley::new(vec![3.0, 0.0])), qc.to_constraint_set(), 1.0).unwrap();
    let params = |dt: f64, scheme: Scheme| CboParams {
        dt,
        max_time: 1.0,
        scheme,
        ..CboParams::default()
    };
    let gap = |ens: &Ensemble, noise: &DMatrix<f64>, dt: f64| {
        let e = cbo_step_explicit_with_noise(ens, &obj, &params(dt, Scheme::Explicit), noise).unwrap();
        let s = cbo_step_semi_implicit_with_noise(ens, &obj, &factor, &params(dt, Scheme::SemiImplicit), noise).unwrap();
        (e.positions() - s.positions()).norm() / (ens.len() as f64).sqrt()
    };
    let dt = 1e-4;
    let (mut coarse, mut fine) = (0.0, 0.0);
    for _ in 0..100 {
        let ens = random_ensemble(&mut r, 2, 50, 3f64.sqrt(), 0.0);
        let noise = DMatrix::from_fn(2, 50, |_, _| r.normal());
        coarse += gap(&ens, &noise, dt);
        fine += gap(&ens, &noise, dt / 2.0);
    }
    let ratio = coarse / fine;
    outcome(
        (2.6..=5.4).contains(&ratio),
        format!("mean single-step gap ratio for dt={dt:e} vs dt/2: {ratio:.3}"),
    )
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 9] = [
        ("1 constrained CBO on the circle", criterion_1),
        ("2 constrained CBO outside the disc", criterion_2),
        ("3 relaxation speed ordering", criterion_3),
        ("4 collapse ordering", criterion_4),
        ("5 EKI nu sweep", criterion_5),
        ("6 EKI scheme comparison", criterion_6),
        ("7 algebraic identities", criterion_7),
        ("8 diagnostics oracles", criterion_8),
        ("9 CBO scheme consistency", criterion_9),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.starts_with(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let o = check();
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        println!("criterion {name}: {verdict} ({}) [{:.1}s]", o.detail, start.elapsed().as_secs_f64());
        if !o.pass {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
