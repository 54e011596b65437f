//! Declarative experiment description read from TOML.
//!
//! A configuration fixes the method, the problem instance, the solver
//! parameters and the run layout. Optional sweep axes expand it into a grid of
//! resolved configurations, one per sweep point.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::cbo::{CboParams, CboProblem, StoppingRule};
use crate::constraints::{ConstraintKind, QuadraticConstraint};
use crate::eki::{EkiParams, EkiProblem, ForwardMap, InverseProblem};
use crate::ensemble::GaussianInit;
use crate::error::{Error, Result};
use crate::problems::{
    generate_observations, sample_simplex, simplex_constraints, simplex_variance_constraints, Ackley,
    GaussianMixture, WeightsForward, WeightsVariancesForward,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Cbo,
    Eki,
}

/// Problem instance, selected by `kind`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ProblemConfig {
    /// Shifted Ackley objective under one quadratic constraint `x^T A x - c`.
    AckleyQuadratic {
        shift: Vec<f64>,
        /// Rows of `A`; the identity when omitted.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        matrix: Option<Vec<Vec<f64>>>,
        level: f64,
        constraint: ConstraintKind,
        init_mean: Vec<f64>,
        init_variance: Vec<f64>,
        /// Known constrained minimizer for distance diagnostics.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        reference: Option<Vec<f64>>,
    },
    /// Mixture weights from noisy Fokker-Planck observations.
    FpWeights {
        means: Vec<f64>,
        variances: Vec<f64>,
        /// Generating weights; drawn uniformly from the simplex when omitted.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        truth: Option<Vec<f64>>,
        #[serde(default = "default_half_width")]
        half_width: f64,
        #[serde(default = "default_points")]
        points: usize,
        #[serde(default = "default_noise")]
        noise_std: f64,
        #[serde(default = "default_final_time")]
        final_time: f64,
        /// Seed of the observation noise; `base_seed` when omitted.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        data_seed: Option<u64>,
        /// Variance assigned to each constraint observation.
        #[serde(default = "default_nu", with = "crate::serde_inf")]
        nu: f64,
        /// Variance of the isotropic Gaussian initial ensemble around the origin.
        #[serde(default = "default_init_variance")]
        init_variance: f64,
    },
    /// Mixture weights and variances, with the variances entering through `|v|`.
    FpWeightsVariances {
        means: Vec<f64>,
        truth_weights: Vec<f64>,
        truth_variances: Vec<f64>,
        #[serde(default = "default_half_width")]
        half_width: f64,
        #[serde(default = "default_points")]
        points: usize,
        #[serde(default = "default_noise")]
        noise_std: f64,
        #[serde(default = "default_final_time")]
        final_time: f64,
        /// Seed of the observation noise; `base_seed` when omitted.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        data_seed: Option<u64>,
        /// Variance assigned to each constraint observation.
        #[serde(default = "default_nu", with = "crate::serde_inf")]
        nu: f64,
        /// Variance of the isotropic Gaussian initial ensemble around the origin.
        #[serde(default = "default_init_variance")]
        init_variance: f64,
    },
}

/// Observation grid, noise and EKI-side settings shared by the mixture problems.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationConfig {
    pub half_width: f64,
    pub points: usize,
    pub noise_std: f64,
    pub final_time: f64,
    pub data_seed: Option<u64>,
    pub nu: f64,
    pub init_variance: f64,
}

enum WeightsOrJoint {
    Weights(Vec<f64>),
    Joint,
}

fn default_half_width() -> f64 {
    10.0
}
fn default_points() -> usize {
    100
}
fn default_noise() -> f64 {
    0.01
}
fn default_final_time() -> f64 {
    0.5
}
fn default_nu() -> f64 {
    1e-8
}
fn default_init_variance() -> f64 {
    1.0
}
fn default_runs() -> usize {
    1
}
fn default_record_every() -> u64 {
    10
}
fn default_collapse_tol() -> f64 {
    1e-8
}
fn default_output() -> PathBuf {
    PathBuf::from("output")
}

/// One swept parameter: a dotted path into the configuration and its values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepAxis {
    pub path: String,
    pub values: Vec<toml::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: Method,
    pub problem: ProblemConfig,
    #[serde(default)]
    pub cbo: CboParams,
    #[serde(default)]
    pub eki: EkiParams,
    #[serde(default = "default_runs")]
    pub runs: usize,
    pub particles: usize,
    #[serde(default)]
    pub base_seed: u64,
    /// CBO recording cadence in steps; EKI records every iteration.
    #[serde(default = "default_record_every")]
    pub record_every: u64,
    /// CBO runs stop once the ensemble variance drops below this value.
    #[serde(default = "default_collapse_tol")]
    pub collapse_tol: f64,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sweep: Vec<SweepAxis>,
}

/// Command-line overrides, applied on top of the file before sweeps.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub alpha: Option<f64>,
    pub nu: Option<f64>,
    pub epsilon: Option<f64>,
    pub sigma: Option<f64>,
    pub dt: Option<f64>,
    pub particles: Option<usize>,
    pub runs: Option<usize>,
    pub seed: Option<u64>,
    pub output: Option<PathBuf>,
}

/// A configuration with every sweep axis fixed to one value.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub index: usize,
    /// `(path, value)` of each axis at this point.
    pub assignment: Vec<(String, toml::Value)>,
    pub config: ExperimentConfig,
}

fn float_value(v: f64) -> toml::Value {
    if v.is_infinite() && v > 0.0 {
        toml::Value::String("inf".into())
    } else {
        toml::Value::Float(v)
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Applies flag overrides; `--nu` targets the CBO penalty or the EKI
    /// constraint variance depending on the method.
    pub fn with_overrides(&self, o: &Overrides) -> Result<Self> {
        let mut value = self.to_value()?;
        let mut set = |path: &str, v: toml::Value| set_path(&mut value, path, v);
        if let Some(v) = o.alpha {
            set("cbo.alpha", float_value(v))?;
        }
        if let Some(v) = o.sigma {
            set("cbo.sigma", float_value(v))?;
        }
        if let Some(v) = o.epsilon {
            set("cbo.epsilon", float_value(v))?;
        }
        if let Some(v) = o.nu {
            match self.method {
                Method::Cbo => set("cbo.nu", float_value(v))?,
                Method::Eki => set("problem.nu", float_value(v))?,
            }
        }
        if let Some(v) = o.dt {
            match self.method {
                Method::Cbo => set("cbo.dt", float_value(v))?,
                Method::Eki => set("eki.dt_base", float_value(v))?,
            }
        }
        if let Some(v) = o.particles {
            set("particles", toml::Value::Integer(v as i64))?;
        }
        if let Some(v) = o.runs {
            set("runs", toml::Value::Integer(v as i64))?;
        }
        if let Some(v) = o.seed {
            let v = i64::try_from(v).map_err(|_| Error::config("seed does not fit a TOML integer"))?;
            set("base_seed", toml::Value::Integer(v))?;
        }
        if let Some(p) = &o.output {
            set("output", toml::Value::String(p.to_string_lossy().into_owned()))?;
        }
        let cfg = Self::from_value(value)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn to_value(&self) -> Result<toml::Value> {
        toml::Value::try_from(self).map_err(|e| Error::config(e.to_string()))
    }

    fn from_value(value: toml::Value) -> Result<Self> {
        value.try_into().map_err(|e: toml::de::Error| Error::config(e.to_string()))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 {
            return Err(Error::config("runs must be at least 1"));
        }
        if self.particles == 0 {
            return Err(Error::config("particles must be at least 1"));
        }
        if u32::try_from(self.runs).is_err() {
            return Err(Error::config("too many runs"));
        }
        if self.record_every == 0 {
            return Err(Error::config("record_every must be at least 1"));
        }
        if !(self.collapse_tol >= 0.0) || !self.collapse_tol.is_finite() {
            return Err(Error::config("collapse_tol must be nonnegative"));
        }
        if self.output.as_os_str().is_empty() {
            return Err(Error::config("output directory must not be empty"));
        }
        match (&self.method, &self.problem) {
            (Method::Cbo, ProblemConfig::AckleyQuadratic { .. }) => self.cbo.validate()?,
            (Method::Eki, ProblemConfig::FpWeights { .. } | ProblemConfig::FpWeightsVariances { .. }) => {
                self.eki.validate()?
            }
            (m, p) => {
                return Err(Error::config(format!(
                    "problem {} is not available for method {m:?}",
                    p.id()
                )))
            }
        }
        let base = self.to_value()?;
        for axis in &self.sweep {
            if axis.path.starts_with("sweep") {
                return Err(Error::config("sweep axes cannot modify the sweep"));
            }
            if lookup(&base, &axis.path).is_none() {
                return Err(Error::config(format!("sweep path {:?} does not name a config field", axis.path)));
            }
            if axis.values.is_empty() {
                return Err(Error::config(format!("sweep path {:?} has no values", axis.path)));
            }
        }
        match &self.method {
            Method::Cbo => {
                self.cbo_problem()?;
            }
            Method::Eki => {
                self.eki_problem()?;
            }
        }
        Ok(())
    }

    /// All sweep points in row-major order over the axes (the last axis
    /// varies fastest). Without axes there is a single point.
    pub fn sweep_points(&self) -> Result<Vec<SweepPoint>> {
        let mut base = self.to_value()?;
        if let toml::Value::Table(t) = &mut base {
            t.remove("sweep");
        }
        let counts: Vec<usize> = self.sweep.iter().map(|a| a.values.len()).collect();
        let total: usize = counts.iter().product();
        let mut points = Vec::with_capacity(total);
        for index in 0..total {
            let mut rem = index;
            let mut picks = vec![0; counts.len()];
            for (a, &c) in counts.iter().enumerate().rev() {
                picks[a] = rem % c;
                rem /= c;
            }
            let mut value = base.clone();
            let mut assignment = Vec::new();
            for (axis, &pick) in self.sweep.iter().zip(&picks) {
                let v = axis.values[pick].clone();
                set_path(&mut value, &axis.path, v.clone())?;
                assignment.push((axis.path.clone(), v));
            }
            let config = Self::from_value(value).map_err(|e| {
                Error::config(format!("sweep point {index} is not a valid configuration: {e}"))
            })?;
            config.validate()?;
            points.push(SweepPoint {
                index,
                assignment,
                config,
            });
        }
        Ok(points)
    }

    pub fn stopping(&self) -> StoppingRule {
        StoppingRule {
            collapse_tol: self.collapse_tol,
            record_every: self.record_every,
        }
    }

    /// The CBO problem described by an `ackley-quadratic` section.
    pub fn cbo_problem(&self) -> Result<CboProblem> {
        let ProblemConfig::AckleyQuadratic {
            shift,
            matrix,
            level,
            constraint,
            init_mean,
            init_variance,
            reference,
        } = &self.problem
        else {
            return Err(Error::config("CBO runs need an ackley-quadratic problem"));
        };
        let d = shift.len();
        if d == 0 {
            return Err(Error::config("shift must be nonempty"));
        }
        let a = match matrix {
            Some(rows) => {
                if rows.len() != d || rows.iter().any(|r| r.len() != d) {
                    return Err(Error::config(format!("constraint matrix must be {d} x {d}")));
                }
                DMatrix::from_fn(d, d, |i, j| rows[i][j])
            }
            None => DMatrix::identity(d, d),
        };
        let qc = QuadraticConstraint::new(*constraint, a, *level)?;
        let init = GaussianInit {
            mean: init_mean.clone(),
            variance: init_variance.clone(),
        };
        init.validate()?;
        if init.dim() != d {
            return Err(Error::config("initial distribution and shift have different dimensions"));
        }
        if reference.as_ref().is_some_and(|r| r.len() != d) {
            return Err(Error::config("reference has the wrong dimension"));
        }
        let mut problem = CboProblem::with_quadratic(self.problem.id(), Arc::new(Ackley::new(shift.clone())), qc, init);
        problem.reference = reference.clone();
        Ok(problem)
    }

    /// The inverse problem described by an `fp-*` section, with its data
    /// generated from the configured truth.
    pub fn eki_problem(&self) -> Result<EkiProblem> {
        let (kind, means, truth_mix, truth, data) = match &self.problem {
            ProblemConfig::FpWeights {
                means, variances, truth, ..
            } => {
                let data = self.problem.observations().expect("mixture problem");
                let seed = data.data_seed.unwrap_or(self.base_seed);
                let weights = match truth {
                    Some(w) => w.clone(),
                    None => sample_simplex(means.len(), seed),
                };
                let mix = GaussianMixture::new(weights.clone(), means.clone(), variances.clone())?;
                (WeightsOrJoint::Weights(variances.clone()), means, mix, weights, data)
            }
            ProblemConfig::FpWeightsVariances {
                means,
                truth_weights,
                truth_variances,
                ..
            } => {
                let data = self.problem.observations().expect("mixture problem");
                let mix = GaussianMixture::new(truth_weights.clone(), means.clone(), truth_variances.clone())?;
                let truth = truth_weights.iter().chain(truth_variances).copied().collect();
                (WeightsOrJoint::Joint, means, mix, truth, data)
            }
            ProblemConfig::AckleyQuadratic { .. } => return Err(Error::config("EKI runs need an fp-* problem")),
        };
        if data.points < 2 {
            return Err(Error::config("at least two observation points are required"));
        }
        if !(data.half_width > 0.0) || !(data.noise_std >= 0.0) || !(data.final_time >= 0.0) {
            return Err(Error::config("observation settings must be positive"));
        }
        let seed = data.data_seed.unwrap_or(self.base_seed);
        let obs = generate_observations(&truth_mix, data.half_width, data.points, data.final_time, data.noise_std, seed)?;
        let n = means.len();
        let (forward, constraints): (Arc<dyn ForwardMap>, _) = match kind {
            WeightsOrJoint::Weights(variances) => (
                Arc::new(WeightsForward::new(means, &variances, &obs.positions, obs.final_time)?),
                simplex_constraints(n),
            ),
            WeightsOrJoint::Joint => (
                Arc::new(WeightsVariancesForward::new(means.clone(), obs.positions.clone(), obs.final_time)?),
                simplex_variance_constraints(n),
            ),
        };
        let inverse = InverseProblem::with_isotropic_noise(forward, obs.values.clone(), obs.noise_std, constraints, data.nu)?;
        let dim = inverse.dim();
        Ok(EkiProblem {
            id: self.problem.id().to_string(),
            inverse,
            init: GaussianInit::isotropic(dim, 0.0, data.init_variance),
            truth: Some(truth),
        })
    }
}

impl ProblemConfig {
    pub fn id(&self) -> &'static str {
        match self {
            Self::AckleyQuadratic { .. } => "ackley-quadratic",
            Self::FpWeights { .. } => "fp-weights",
            Self::FpWeightsVariances { .. } => "fp-weights-variances",
        }
    }

    /// Observation and inversion settings of the mixture problems.
    pub fn observations(&self) -> Option<ObservationConfig> {
        match self {
            Self::AckleyQuadratic { .. } => None,
            Self::FpWeights {
                half_width,
                points,
                noise_std,
                final_time,
                data_seed,
                nu,
                init_variance,
                ..
            }
            | Self::FpWeightsVariances {
                half_width,
                points,
                noise_std,
                final_time,
                data_seed,
                nu,
                init_variance,
                ..
            } => Some(ObservationConfig {
                half_width: *half_width,
                points: *points,
                noise_std: *noise_std,
                final_time: *final_time,
                data_seed: *data_seed,
                nu: *nu,
                init_variance: *init_variance,
            }),
        }
    }

    /// Shifted Ackley on the circle `|x|^2 = 9` from `N(0, 3 I)`.
    pub fn ackley_circle() -> Self {
        Self::AckleyQuadratic {
            shift: vec![3.0, 0.0],
            matrix: None,
            level: 9.0,
            constraint: ConstraintKind::Equality,
            init_mean: vec![0.0, 0.0],
            init_variance: vec![3.0, 3.0],
            reference: Some(vec![3.0, 0.0]),
        }
    }

    /// Two narrow components at `+-4` with unknown weights.
    pub fn fp_two_weights() -> Self {
        Self::FpWeights {
            means: vec![4.0, -4.0],
            variances: vec![0.01, 0.01],
            truth: None,
            half_width: default_half_width(),
            points: default_points(),
            noise_std: default_noise(),
            final_time: default_final_time(),
            data_seed: None,
            nu: default_nu(),
            init_variance: default_init_variance(),
        }
    }

    /// Three components at `-5, 0, 5` with unknown weights and variances.
    pub fn fp_three_components() -> Self {
        Self::FpWeightsVariances {
            means: vec![-5.0, 0.0, 5.0],
            truth_weights: vec![0.333, 0.476, 0.191],
            truth_variances: vec![0.4, 0.1, 0.5],
            half_width: default_half_width(),
            points: default_points(),
            noise_std: default_noise(),
            final_time: default_final_time(),
            data_seed: None,
            nu: default_nu(),
            init_variance: default_init_variance(),
        }
    }
}

fn lookup<'a>(value: &'a toml::Value, path: &str) -> Option<&'a toml::Value> {
    path.split('.').try_fold(value, |v, key| v.as_table()?.get(key))
}

fn set_path(value: &mut toml::Value, path: &str, new: toml::Value) -> Result<()> {
    let keys: Vec<&str> = path.split('.').collect();
    let (last, parents) = keys.split_last().ok_or_else(|| Error::config("empty parameter path"))?;
    let mut cur = value;
    for key in parents {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("parameter path {path:?} does not resolve")))?;
        cur = table.entry(key.to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
    }
    let table = cur
        .as_table_mut()
        .ok_or_else(|| Error::config(format!("parameter path {path:?} does not resolve")))?;
    table.insert(last.to_string(), new);
    Ok(())
}
