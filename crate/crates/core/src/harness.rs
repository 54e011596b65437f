//! Multi-run experiment execution and tabular output.
//!
//! Layout of an output directory:
//!
//! ```text
//! manifest.json            resolved configuration, sweep points, run failures
//! sweep_summary.csv        one row per sweep point, aggregated over runs
//! timings.csv              wall time per run (not reproducible by nature)
//! point_000/summary.csv    one row per run with its final diagnostics
//! point_000/run_000.csv    trace of each run
//! ```
//!
//! Everything except `timings.csv` is a pure function of the configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde_json::json;

use crate::cbo::{run_cbo, CboProblem};
use crate::config::{ExperimentConfig, Method, ProblemConfig, SweepPoint};
use crate::diagnostics::{format_float, Record, RunTrace};
use crate::eki::{run_eki, run_from_ensemble, EkiParams, EkiProblem, EkiScheme, EkiSolver};
use crate::error::{Error, Result};

/// Environment variable that relocates relative output directories.
pub const OUTPUT_ROOT_ENV: &str = "CPE_OUTPUT_ROOT";

/// Execution settings that do not influence results.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Worker threads for independent runs; all logical cores when `None`.
    pub workers: Option<usize>,
    /// Skip writing files (traces are still returned).
    pub dry_run: bool,
}

/// Result of one run at one sweep point.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub run: u32,
    pub seed: u64,
    /// The trace, or the reason the run could not start.
    pub trace: std::result::Result<RunTrace, String>,
    pub wall_seconds: f64,
}

impl RunOutcome {
    pub fn failure(&self) -> Option<&str> {
        match &self.trace {
            Ok(t) => t.failure.as_deref(),
            Err(e) => Some(e),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PointReport {
    pub point: SweepPoint,
    pub runs: Vec<RunOutcome>,
    /// The generating parameters, for problems that have them.
    pub truth: Option<Vec<f64>>,
}

impl PointReport {
    pub fn traces(&self) -> impl Iterator<Item = &RunTrace> {
        self.runs.iter().filter_map(|r| r.trace.as_ref().ok())
    }

    pub fn failures(&self) -> usize {
        self.runs.iter().filter(|r| r.failure().is_some()).count()
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub output: PathBuf,
    pub points: Vec<PointReport>,
}

impl ExperimentReport {
    pub fn failures(&self) -> usize {
        self.points.iter().map(|p| p.failures()).sum()
    }
}

/// `path` below the directory named by [`OUTPUT_ROOT_ENV`] when it is set
/// and `path` is relative.
pub fn resolve_output(path: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if path.is_relative() && !root.is_empty() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

fn prepare_output(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let probe = dir.join(".write-probe");
    fs::write(&probe, b"").map_err(|e| Error::io(&probe, e))?;
    fs::remove_file(&probe).map_err(|e| Error::io(&probe, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn pool(options: &RunOptions) -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = options.workers {
        if n == 0 {
            return Err(Error::config("workers must be at least 1"));
        }
        builder = builder.num_threads(n);
    }
    builder.build().map_err(|e| Error::config(e.to_string()))
}

enum Prepared {
    Cbo(CboProblem),
    Eki(EkiProblem),
}

impl Prepared {
    fn new(config: &ExperimentConfig) -> Result<Self> {
        Ok(match config.method {
            Method::Cbo => Self::Cbo(config.cbo_problem()?),
            Method::Eki => Self::Eki(config.eki_problem()?),
        })
    }

    fn truth(&self) -> Option<Vec<f64>> {
        match self {
            Self::Cbo(p) => p.reference.clone(),
            Self::Eki(p) => p.truth.clone(),
        }
    }

    fn run(&self, config: &ExperimentConfig, run: u32, seed: u64) -> Result<RunTrace> {
        match self {
            Self::Cbo(p) => run_cbo(p, &config.cbo, &config.stopping(), config.particles, seed, run),
            Self::Eki(p) => run_eki(p, &config.eki, config.particles, seed, run),
        }
    }
}

fn run_seed(config: &ExperimentConfig, run: u32) -> u64 {
    config.base_seed.wrapping_add(u64::from(run))
}

/// Executes every run of every sweep point and writes the output directory.
///
/// Runs that fail are recorded in the manifest and summaries; only invalid
/// configurations and I/O problems are returned as errors.
pub fn run_experiment(config: &ExperimentConfig, options: &RunOptions) -> Result<ExperimentReport> {
    config.validate()?;
    let output = resolve_output(&config.output);
    if !options.dry_run {
        prepare_output(&output)?;
    }
    let points = config.sweep_points()?;
    let pool = pool(options)?;
    let mut reports = Vec::with_capacity(points.len());
    for point in points {
        let cfg = &point.config;
        let prepared = Prepared::new(cfg)?;
        let runs: Vec<RunOutcome> = pool.install(|| {
            (0..cfg.runs as u32)
                .into_par_iter()
                .map(|run| {
                    let seed = run_seed(cfg, run);
                    let start = Instant::now();
                    let trace = prepared.run(cfg, run, seed).map_err(|e| e.to_string());
                    RunOutcome {
                        run,
                        seed,
                        trace,
                        wall_seconds: start.elapsed().as_secs_f64(),
                    }
                })
                .collect()
        });
        reports.push(PointReport {
            truth: prepared.truth(),
            point,
            runs,
        });
    }
    let report = ExperimentReport {
        output: output.clone(),
        points: reports,
    };
    if !options.dry_run {
        write_report(config, &report)?;
    }
    Ok(report)
}

fn point_dir(output: &Path, index: usize) -> PathBuf {
    output.join(format!("point_{index:03}"))
}

fn fmt(v: f64) -> String {
    format_float(v)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt).unwrap_or_default()
}

fn csv_bytes(rows: Vec<Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.write_record(&row).map_err(|e| Error::io("<csv>", std::io::Error::other(e.to_string())))?;
    }
    w.into_inner().map_err(|e| Error::io("<csv>", std::io::Error::other(e.to_string())))
}

fn trace_bytes(trace: &RunTrace) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    trace.write_csv(&mut buf)?;
    Ok(buf)
}

fn status(outcome: &RunOutcome) -> &'static str {
    match &outcome.trace {
        Err(_) => "error",
        Ok(t) if t.failed() => "failed",
        Ok(t) if t.stopped_early => "stopped",
        Ok(_) => "completed",
    }
}

fn mean_var(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (Some(mean), Some(var))
}

fn dimension(report: &PointReport) -> usize {
    report
        .traces()
        .find_map(|t| t.last().map(|r| r.reported_point.len()))
        .unwrap_or(0)
}

fn write_report(config: &ExperimentConfig, report: &ExperimentReport) -> Result<()> {
    let out = &report.output;
    let mut timings = vec![vec!["point".to_string(), "run".into(), "wall_seconds".into()]];
    let mut sweep_rows = Vec::new();
    let max_dim = report.points.iter().map(dimension).max().unwrap_or(0);
    let mut sweep_header = vec!["point".to_string(), "assignment".into(), "runs".into(), "failures".into()];
    for i in 0..max_dim {
        sweep_header.push(format!("reported_point_{i}_mean"));
        sweep_header.push(format!("reported_point_{i}_var"));
    }
    for name in ["final_variance", "constraint_energy", "sum_deficit", "error"] {
        sweep_header.push(format!("{name}_mean"));
        sweep_header.push(format!("{name}_var"));
    }
    sweep_rows.push(sweep_header);

    for p in &report.points {
        let dir = point_dir(out, p.point.index);
        let dim = dimension(p);
        let mut rows = vec![{
            let mut h: Vec<String> = ["run", "seed", "status", "generations", "time", "final_variance"]
                .iter()
                .map(|s| s.to_string())
                .collect();
            h.extend(["constraint_energy", "w2_dirac", "cov_norm", "error", "sum_deficit"].map(String::from));
            h.extend((0..dim).map(|i| format!("reported_point_{i}")));
            h.push("failure".into());
            h
        }];
        let mut finals: Vec<&Record> = Vec::new();
        let weights = weight_count(&p.point.config.problem);
        for outcome in &p.runs {
            timings.push(vec![p.point.index.to_string(), outcome.run.to_string(), format!("{:.6}", outcome.wall_seconds)]);
            let mut row = vec![outcome.run.to_string(), outcome.seed.to_string(), status(outcome).to_string()];
            match &outcome.trace {
                Ok(trace) => {
                    write_file(&dir.join(format!("run_{:03}.csv", outcome.run)), &trace_bytes(trace)?)?;
                    let last = trace.last().expect("traces start with a record");
                    finals.push(last);
                    row.extend([
                        last.generation.to_string(),
                        fmt(last.time),
                        fmt(last.variance),
                        fmt(last.constraint_energy),
                        fmt_opt(last.w2_dirac),
                        fmt_opt(last.cov_norm),
                        fmt_opt(last.error),
                        fmt_opt(sum_deficit(&last.reported_point, weights)),
                    ]);
                    row.extend(last.reported_point.iter().map(|v| fmt(*v)));
                }
                Err(_) => row.extend(std::iter::repeat_n(String::new(), 8 + dim)),
            }
            row.push(outcome.failure().unwrap_or_default().to_string());
            rows.push(row);
        }
        write_file(&dir.join("summary.csv"), &csv_bytes(rows)?)?;

        let assignment = p
            .point
            .assignment
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(";");
        let mut row = vec![p.point.index.to_string(), assignment, p.runs.len().to_string(), p.failures().to_string()];
        for i in 0..max_dim {
            let vals: Vec<f64> = finals.iter().filter_map(|r| r.reported_point.get(i).copied()).collect();
            let (m, v) = mean_var(&vals);
            row.extend([fmt_opt(m), fmt_opt(v)]);
        }
        let columns: [Vec<f64>; 4] = [
            finals.iter().map(|r| r.variance).collect(),
            finals.iter().map(|r| r.constraint_energy).collect(),
            finals.iter().filter_map(|r| sum_deficit(&r.reported_point, weights)).collect(),
            finals.iter().filter_map(|r| r.error).collect(),
        ];
        for vals in columns {
            let (m, v) = mean_var(&vals);
            row.extend([fmt_opt(m), fmt_opt(v)]);
        }
        sweep_rows.push(row);
    }
    write_file(&out.join("sweep_summary.csv"), &csv_bytes(sweep_rows)?)?;
    write_file(&out.join("timings.csv"), &csv_bytes(timings)?)?;
    write_file(&out.join("manifest.json"), &manifest(config, report)?)?;
    Ok(())
}

/// Number of leading mixture weights in the parameter vector, if any.
fn weight_count(problem: &ProblemConfig) -> Option<usize> {
    match problem {
        ProblemConfig::AckleyQuadratic { .. } => None,
        ProblemConfig::FpWeights { means, .. } | ProblemConfig::FpWeightsVariances { means, .. } => Some(means.len()),
    }
}

/// `|1 - sum of the mixture weights|` of a reported point.
fn sum_deficit(point: &[f64], weights: Option<usize>) -> Option<f64> {
    let n = weights?;
    Some((1.0 - point.iter().take(n).sum::<f64>()).abs())
}

/// Serialized configuration without the output directory, so that reruns
/// into different directories produce identical manifests.
fn config_json(config: &ExperimentConfig) -> Result<serde_json::Value> {
    let mut value = serde_json::to_value(config).map_err(|e| Error::config(e.to_string()))?;
    if let Some(map) = value.as_object_mut() {
        map.remove("output");
    }
    Ok(value)
}

fn manifest(config: &ExperimentConfig, report: &ExperimentReport) -> Result<Vec<u8>> {
    let points = report
        .points
        .iter()
        .map(|p| {
            let failures: Vec<_> = p
                .runs
                .iter()
                .filter_map(|r| r.failure().map(|f| json!({ "run": r.run, "seed": r.seed, "message": f })))
                .collect();
            Ok(json!({
                "index": p.point.index,
                "directory": format!("point_{:03}", p.point.index),
                "assignment": p.point.assignment.iter().map(|(k, v)| json!({ "path": k, "value": v })).collect::<Vec<_>>(),
                "config": config_json(&p.point.config)?,
                "seeds": p.runs.iter().map(|r| r.seed).collect::<Vec<_>>(),
                "truth": p.truth,
                "failures": failures,
            }))
        })
        .collect::<Result<Vec<_>>>()?;
    let value = json!({
        "generator": concat!("cpe ", env!("CARGO_PKG_VERSION")),
        "config": config_json(config)?,
        "points": points,
    });
    let mut bytes = serde_json::to_vec_pretty(&value).map_err(|e| Error::config(e.to_string()))?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// Per-iteration error and covariance norm of both EKI schemes started from
/// the same initial ensemble.
#[derive(Debug, Clone)]
pub struct SchemeComparison {
    pub run: u32,
    pub seed: u64,
    pub explicit: RunTrace,
    pub semi_implicit: RunTrace,
}

/// Runs the explicit and semi-implicit EKI schemes from shared initial
/// ensembles and writes `point_XXX/compare_run_XXX.csv`.
pub fn compare_discretizations(config: &ExperimentConfig, options: &RunOptions) -> Result<Vec<Vec<SchemeComparison>>> {
    if config.method != Method::Eki {
        return Err(Error::config("scheme comparison needs method = \"eki\""));
    }
    config.validate()?;
    let output = resolve_output(&config.output);
    if !options.dry_run {
        prepare_output(&output)?;
    }
    let pool = pool(options)?;
    let mut all = Vec::new();
    for point in config.sweep_points()? {
        let cfg = &point.config;
        let problem = cfg.eki_problem()?;
        let results: Vec<Result<SchemeComparison>> = pool.install(|| {
            (0..cfg.runs as u32)
                .into_par_iter()
                .map(|run| compare_run(&problem, &cfg.eki, cfg.particles, run_seed(cfg, run), run))
                .collect()
        });
        let comparisons = results.into_iter().collect::<Result<Vec<_>>>()?;
        if !options.dry_run {
            let dir = point_dir(&output, point.index);
            for c in &comparisons {
                write_file(&dir.join(format!("compare_run_{:03}.csv", c.run)), &comparison_csv(c)?)?;
            }
        }
        all.push(comparisons);
    }
    if !options.dry_run {
        let failures: Vec<_> = all
            .iter()
            .flatten()
            .flat_map(|c| {
                [("explicit", &c.explicit), ("semi-implicit", &c.semi_implicit)]
                    .into_iter()
                    .filter_map(move |(s, t)| {
                        t.failure.as_ref().map(|f| json!({ "run": c.run, "seed": c.seed, "scheme": s, "message": f }))
                    })
            })
            .collect();
        let value = json!({
            "generator": concat!("cpe ", env!("CARGO_PKG_VERSION")),
            "config": config_json(config)?,
            "failures": failures,
        });
        let mut bytes = serde_json::to_vec_pretty(&value).map_err(|e| Error::config(e.to_string()))?;
        bytes.push(b'\n');
        write_file(&output.join("manifest.json"), &bytes)?;
    }
    Ok(all)
}

/// Both schemes from the initial ensemble of `(seed, run)`.
pub fn compare_run(problem: &EkiProblem, params: &EkiParams, particles: usize, seed: u64, run: u32) -> Result<SchemeComparison> {
    let init = EkiSolver::new(problem.clone(), *params, particles, seed, run)?.ensemble().clone();
    let explicit = EkiParams { scheme: EkiScheme::Explicit, ..*params };
    let semi = EkiParams { scheme: EkiScheme::SemiImplicit, ..*params };
    Ok(SchemeComparison {
        run,
        seed,
        explicit: run_from_ensemble(problem, &explicit, init.clone(), seed, run)?,
        semi_implicit: run_from_ensemble(problem, &semi, init, seed, run)?,
    })
}

fn comparison_csv(c: &SchemeComparison) -> Result<Vec<u8>> {
    let mut rows = vec![[
        "iteration",
        "explicit_error",
        "explicit_cov_norm",
        "explicit_constraint_energy",
        "semi_implicit_error",
        "semi_implicit_cov_norm",
        "semi_implicit_constraint_energy",
    ]
    .map(String::from)
    .to_vec()];
    let n = c.explicit.records.len().max(c.semi_implicit.records.len());
    for i in 0..n {
        let mut row = vec![i.to_string()];
        for trace in [&c.explicit, &c.semi_implicit] {
            match trace.records.get(i) {
                Some(r) => row.extend([fmt_opt(r.error), fmt_opt(r.cov_norm), fmt(r.constraint_energy)]),
                None => row.extend([String::new(), String::new(), String::new()]),
            }
        }
        rows.push(row);
    }
    csv_bytes(rows)
}
