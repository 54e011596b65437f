//! C interface to the `cpe` particle optimizers.
//!
//! Every function returns a [`CpeStatus`]. On failure a message describing
//! the error is stored per thread and can be read with
//! [`cpe_last_error_message`]. Objects are exposed as opaque handles that
//! must be released with their matching `*_free` function.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use libc::{c_char, size_t};

use cpe::cbo::CboSolver;
use cpe::config::ExperimentConfig;
use cpe::diagnostics::w2_empirical;
use cpe::eki::EkiSolver;
use cpe::ensemble::Ensemble;
use cpe::harness::{run_experiment, RunOptions};
use cpe::problems::ackley;
use nalgebra::DMatrix;

/// Result code of every C entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CpeStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// A size, index or string argument was out of range or malformed.
    InvalidArgument = 2,
    /// The configuration could not be parsed or is inconsistent.
    Config = 3,
    /// Reading or writing files failed.
    Io = 4,
    /// A numerical step failed (divergence, non-finite values, singular systems).
    Numerical = 5,
    /// The experiment finished but some runs failed; see the manifest.
    RunFailures = 6,
    /// An unexpected internal error was caught at the boundary.
    Panic = 7,
}

/// A parsed and validated experiment configuration.
pub struct CpeExperiment {
    config: ExperimentConfig,
}

/// A consensus-based optimization run that is advanced step by step.
pub struct CpeCbo {
    solver: CboSolver,
}

/// An ensemble Kalman inversion run that is advanced step by step.
pub struct CpeEki {
    solver: EkiSolver,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

struct Failure(CpeStatus, String);

impl From<cpe::Error> for Failure {
    fn from(e: cpe::Error) -> Self {
        let status = match e {
            cpe::Error::Config(_) => CpeStatus::Config,
            cpe::Error::Io { .. } => CpeStatus::Io,
            _ => CpeStatus::Numerical,
        };
        Failure(status, e.to_string())
    }
}

fn null(name: &str) -> Failure {
    Failure(CpeStatus::NullPointer, format!("{name} must not be null"))
}

fn invalid(message: impl Into<String>) -> Failure {
    Failure(CpeStatus::InvalidArgument, message.into())
}

/// Runs `body`, converting errors and panics into a status code.
fn guard(body: impl FnOnce() -> Result<(), Failure>) -> CpeStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            clear_error();
            CpeStatus::Ok
        }
        Ok(Err(Failure(status, message))) => {
            set_error(&message);
            status
        }
        Err(payload) => {
            let message = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(&format!("internal error: {message}"));
            CpeStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{name} is not valid UTF-8")))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, name: &str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_slice<'a>(p: *mut f64, len: usize, needed: usize, name: &str) -> Result<&'a mut [f64], Failure> {
    if len < needed {
        return Err(invalid(format!("{name} holds {len} values, {needed} needed")));
    }
    if p.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts_mut(p, needed))
}

unsafe fn handle<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(name))
}

unsafe fn handle_mut<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(name))
}

unsafe fn write_out<T>(out: *mut T, value: T, name: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null(name));
    }
    out.write(value);
    Ok(())
}

/// Message of the last failed call on this thread, or null after a success.
///
/// The string stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn cpe_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cpe_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

fn experiment(config: ExperimentConfig) -> Result<*mut CpeExperiment, Failure> {
    config.validate()?;
    Ok(Box::into_raw(Box::new(CpeExperiment { config })))
}

/// Parses an experiment configuration from TOML text.
///
/// # Safety
/// `toml` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cpe_experiment_from_toml(toml: *const c_char, out: *mut *mut CpeExperiment) -> CpeStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let text = str_arg(toml, "toml")?;
        let handle = experiment(ExperimentConfig::from_toml_str(text)?)?;
        out.write(handle);
        Ok(())
    })
}

/// Reads an experiment configuration from a TOML file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cpe_experiment_from_file(path: *const c_char, out: *mut *mut CpeExperiment) -> CpeStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = str_arg(path, "path")?;
        let handle = experiment(ExperimentConfig::from_path(Path::new(path))?)?;
        out.write(handle);
        Ok(())
    })
}

/// Replaces the output directory of an experiment.
///
/// # Safety
/// `experiment` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn cpe_experiment_set_output(experiment: *mut CpeExperiment, path: *const c_char) -> CpeStatus {
    guard(|| {
        let e = handle_mut(experiment, "experiment")?;
        let path = str_arg(path, "path")?;
        if path.is_empty() {
            return Err(invalid("output directory must not be empty"));
        }
        e.config.output = path.into();
        Ok(())
    })
}

/// Runs every sweep point and writes the trace, summary and manifest files.
///
/// `workers = 0` uses all logical cores. `failed_runs` (optional) receives
/// the number of failed runs; the status is `RunFailures` when it is nonzero.
///
/// # Safety
/// `experiment` must be a live handle; `failed_runs` may be null.
#[no_mangle]
pub unsafe extern "C" fn cpe_experiment_run(
    experiment: *const CpeExperiment,
    workers: size_t,
    failed_runs: *mut size_t,
) -> CpeStatus {
    guard(|| {
        let e = handle(experiment, "experiment")?;
        let options = RunOptions {
            workers: (workers > 0).then_some(workers),
            dry_run: false,
        };
        let report = run_experiment(&e.config, &options)?;
        let failures = report.failures();
        if !failed_runs.is_null() {
            failed_runs.write(failures);
        }
        if failures > 0 {
            return Err(Failure(
                CpeStatus::RunFailures,
                format!("{failures} run(s) failed; see manifest.json"),
            ));
        }
        Ok(())
    })
}

/// Releases an experiment handle. Null is ignored.
///
/// # Safety
/// `experiment` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cpe_experiment_free(experiment: *mut CpeExperiment) {
    if !experiment.is_null() {
        drop(Box::from_raw(experiment));
    }
}

/// Starts run `run` of a CBO experiment, drawing the initial ensemble from
/// seed `base_seed + run`. Sweep axes are ignored; the base values are used.
///
/// # Safety
/// `experiment` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cpe_cbo_new(experiment: *const CpeExperiment, run: u32, out: *mut *mut CpeCbo) -> CpeStatus {
    guard(|| {
        let e = handle(experiment, "experiment")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let c = &e.config;
        let seed = c.base_seed.wrapping_add(u64::from(run));
        let solver = CboSolver::new(c.cbo_problem()?, c.cbo, c.particles, seed, run)?;
        out.write(Box::into_raw(Box::new(CpeCbo { solver })));
        Ok(())
    })
}

/// Advances a CBO run by `steps` time steps.
///
/// # Safety
/// `cbo` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn cpe_cbo_step(cbo: *mut CpeCbo, steps: u64) -> CpeStatus {
    guard(|| {
        let s = handle_mut(cbo, "cbo")?;
        for _ in 0..steps {
            s.solver.step()?;
        }
        Ok(())
    })
}

/// Dimension, ensemble size, generation and time of a CBO run; any output may be null.
///
/// # Safety
/// `cbo` must be a live handle; non-null outputs must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn cpe_cbo_state(
    cbo: *const CpeCbo,
    dim: *mut size_t,
    particles: *mut size_t,
    generation: *mut u64,
    time: *mut f64,
) -> CpeStatus {
    guard(|| {
        let ens = handle(cbo, "cbo")?.solver.ensemble();
        ensemble_state(ens, dim, particles, generation, time);
        Ok(())
    })
}

unsafe fn ensemble_state(ens: &Ensemble, dim: *mut size_t, particles: *mut size_t, generation: *mut u64, time: *mut f64) {
    if !dim.is_null() {
        dim.write(ens.dim());
    }
    if !particles.is_null() {
        particles.write(ens.len());
    }
    if !generation.is_null() {
        generation.write(ens.generation());
    }
    if !time.is_null() {
        time.write(ens.time());
    }
}

/// Writes the Gibbs-weighted mean (`dim` values) into `out`.
///
/// # Safety
/// `cbo` must be a live handle and `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn cpe_cbo_weighted_mean(cbo: *const CpeCbo, out: *mut f64, len: size_t) -> CpeStatus {
    guard(|| {
        let s = handle(cbo, "cbo")?;
        let out = out_slice(out, len, s.solver.ensemble().dim(), "out")?;
        out.copy_from_slice(&s.solver.weighted_mean()?);
        Ok(())
    })
}

/// Writes all particle positions, particle-major (`particles * dim` values).
///
/// # Safety
/// `cbo` must be a live handle and `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn cpe_cbo_positions(cbo: *const CpeCbo, out: *mut f64, len: size_t) -> CpeStatus {
    guard(|| copy_positions(handle(cbo, "cbo")?.solver.ensemble(), out, len))
}

unsafe fn copy_positions(ens: &Ensemble, out: *mut f64, len: usize) -> Result<(), Failure> {
    let data = ens.positions().as_slice();
    out_slice(out, len, data.len(), "out")?.copy_from_slice(data);
    Ok(())
}

/// Releases a CBO handle. Null is ignored.
///
/// # Safety
/// `cbo` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cpe_cbo_free(cbo: *mut CpeCbo) {
    if !cbo.is_null() {
        drop(Box::from_raw(cbo));
    }
}

/// Starts run `run` of an EKI experiment from seed `base_seed + run`.
/// Sweep axes are ignored; the base values are used.
///
/// # Safety
/// `experiment` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cpe_eki_new(experiment: *const CpeExperiment, run: u32, out: *mut *mut CpeEki) -> CpeStatus {
    guard(|| {
        let e = handle(experiment, "experiment")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let c = &e.config;
        let seed = c.base_seed.wrapping_add(u64::from(run));
        let solver = EkiSolver::new(c.eki_problem()?, c.eki, c.particles, seed, run)?;
        out.write(Box::into_raw(Box::new(CpeEki { solver })));
        Ok(())
    })
}

/// Performs one adaptive EKI iteration.
///
/// `dt` and `stagnated` (both optional) receive the step size taken and
/// whether the interaction matrix vanished, leaving the ensemble unchanged.
///
/// # Safety
/// `eki` must be a live handle; non-null outputs must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn cpe_eki_step(eki: *mut CpeEki, dt: *mut f64, stagnated: *mut bool) -> CpeStatus {
    guard(|| {
        let s = handle_mut(eki, "eki")?;
        let step = s.solver.step()?;
        if !dt.is_null() {
            dt.write(step.dt);
        }
        if !stagnated.is_null() {
            stagnated.write(step.stagnated);
        }
        Ok(())
    })
}

/// Dimension, ensemble size, iteration and pseudo-time of an EKI run; any output may be null.
///
/// # Safety
/// `eki` must be a live handle; non-null outputs must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn cpe_eki_state(
    eki: *const CpeEki,
    dim: *mut size_t,
    particles: *mut size_t,
    generation: *mut u64,
    time: *mut f64,
) -> CpeStatus {
    guard(|| {
        let ens = handle(eki, "eki")?.solver.ensemble();
        ensemble_state(ens, dim, particles, generation, time);
        Ok(())
    })
}

/// Writes the ensemble mean (`dim` values) into `out`.
///
/// # Safety
/// `eki` must be a live handle and `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn cpe_eki_mean(eki: *const CpeEki, out: *mut f64, len: size_t) -> CpeStatus {
    guard(|| {
        let ens = handle(eki, "eki")?.solver.ensemble();
        out_slice(out, len, ens.dim(), "out")?.copy_from_slice(ens.mean().as_slice());
        Ok(())
    })
}

/// Writes all particle positions, particle-major (`particles * dim` values).
///
/// # Safety
/// `eki` must be a live handle and `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn cpe_eki_positions(eki: *const CpeEki, out: *mut f64, len: size_t) -> CpeStatus {
    guard(|| copy_positions(handle(eki, "eki")?.solver.ensemble(), out, len))
}

/// Spectral norm of the sample covariance of the current ensemble.
///
/// # Safety
/// `eki` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cpe_eki_covariance_norm(eki: *const CpeEki, out: *mut f64) -> CpeStatus {
    guard(|| {
        let record = handle(eki, "eki")?.solver.record()?;
        let norm = record.cov_norm.ok_or_else(|| invalid("covariance norm unavailable"))?;
        write_out(out, norm, "out")
    })
}

/// Releases an EKI handle. Null is ignored.
///
/// # Safety
/// `eki` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cpe_eki_free(eki: *mut CpeEki) {
    if !eki.is_null() {
        drop(Box::from_raw(eki));
    }
}

/// Shifted Ackley function `f(x - shift)` in `dim` dimensions.
///
/// # Safety
/// `shift` and `x` must hold `dim` doubles; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cpe_ackley(shift: *const f64, x: *const f64, dim: size_t, out: *mut f64) -> CpeStatus {
    guard(|| {
        if dim == 0 {
            return Err(invalid("dim must be positive"));
        }
        let shift = slice_arg(shift, dim, "shift")?;
        let x = slice_arg(x, dim, "x")?;
        write_out(out, ackley(shift, x), "out")
    })
}

/// 2-Wasserstein distance between two equal-size empirical measures with
/// uniform weights. Both point sets are particle-major (`count * dim` values).
///
/// # Safety
/// `a` and `b` must hold `count * dim` doubles; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cpe_w2_empirical(
    a: *const f64,
    b: *const f64,
    count: size_t,
    dim: size_t,
    out: *mut f64,
) -> CpeStatus {
    guard(|| {
        if count == 0 || dim == 0 {
            return Err(invalid("count and dim must be positive"));
        }
        let len = count.checked_mul(dim).ok_or_else(|| invalid("count * dim overflows"))?;
        let to_ensemble = |p: &[f64]| Ensemble::new(DMatrix::from_column_slice(dim, count, p));
        let a = to_ensemble(slice_arg(a, len, "a")?)?;
        let b = to_ensemble(slice_arg(b, len, "b")?)?;
        write_out(out, w2_empirical(&a, &b)?, "out")
    })
}
