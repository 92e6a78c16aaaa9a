//! C ABI over the robust off-policy evaluation library.
//!
//! Objects cross the boundary as opaque handles returned through out
//! pointers and released by the matching `ro_*_free`. Every fallible call
//! returns an [`RoStatus`]; on failure [`ro_last_error`] holds a message for
//! the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use robust_ope::bellman::{robust_expectation_closed_form, DiscreteDistribution, Sign};
use robust_ope::error::Error;
use robust_ope::estimators::{EstimatorKind, RobustEstimate};
use robust_ope::experiment::{estimate, fit, generate, load_dataset, ExperimentConfig};
use robust_ope::mdp::Dataset;
use robust_ope::oracle::{benchmark_ground_truth, horizon_for};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RoStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Domain = 3,
    InsufficientData = 4,
    Singular = 5,
    Numerical = 6,
    Coverage = 7,
    Fold = 8,
    Format = 9,
    HashMismatch = 10,
    Io = 11,
    Json = 12,
    Utf8 = 13,
    IndexOutOfRange = 14,
    Panic = 15,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RoSign {
    Minus = 0,
    Plus = 1,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RoEstimator {
    Q = 0,
    W = 1,
    Orth = 2,
}

/// One estimate. Interval fields are NaN when the estimator has none.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct RoEstimate {
    pub estimator: RoEstimator,
    pub sign: RoSign,
    pub lambda: f64,
    pub n: usize,
    pub value: f64,
    pub std_error: f64,
    pub ci_lower_1sided_95: f64,
    pub ci_upper_1sided_95: f64,
}

/// Experiment configuration.
pub struct RoConfig(ExperimentConfig);

/// Logged transition tuples.
pub struct RoDataset(Dataset);

/// Q, W and Orth estimates for every configured sign and lambda.
pub struct RoEstimates(Vec<RobustEstimate>);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> RoStatus {
    match e {
        Error::Domain(_) => RoStatus::Domain,
        Error::InvalidArgument(_) => RoStatus::InvalidArgument,
        Error::InsufficientData(_) => RoStatus::InsufficientData,
        Error::Singular(_) => RoStatus::Singular,
        Error::Numerical(_) => RoStatus::Numerical,
        Error::Coverage(_) => RoStatus::Coverage,
        Error::Fold { .. } => RoStatus::Fold,
        Error::Format { .. } => RoStatus::Format,
        Error::HashMismatch { .. } => RoStatus::HashMismatch,
        Error::Io { .. } => RoStatus::Io,
        Error::Json { .. } => RoStatus::Json,
    }
}

struct Fail(RoStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> RoStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            RoStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("panic inside robust-ope");
            RoStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(RoStatus::NullPointer, format!("{what} is null"))
}

unsafe fn borrow<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| Fail(RoStatus::Utf8, format!("{what}: {e}")))
}

fn sign_of(s: RoSign) -> Sign {
    match s {
        RoSign::Minus => Sign::Minus,
        RoSign::Plus => Sign::Plus,
    }
}

/// Message for the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next `ro_*` call on the same thread.
#[no_mangle]
pub extern "C" fn ro_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// The benchmark configuration with default settings.
///
/// # Safety
/// `out` must be a valid pointer to writable storage.
#[no_mangle]
pub unsafe extern "C" fn ro_config_default(out: *mut *mut RoConfig) -> RoStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = Box::into_raw(Box::new(RoConfig(ExperimentConfig::default())));
        Ok(())
    })
}

/// Parse and validate a JSON configuration document.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ro_config_from_json(json: *const c_char, out: *mut *mut RoConfig) -> RoStatus {
    guard(|| {
        let text = c_str(json, "json")?;
        let out = out_ptr(out, "out")?;
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Fail(RoStatus::Json, format!("config json: {e}")))?;
        cfg.validate()?;
        *out = Box::into_raw(Box::new(RoConfig(cfg)));
        Ok(())
    })
}

/// Serialize a configuration. Release the string with [`ro_string_free`].
///
/// # Safety
/// `cfg` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ro_config_to_json(cfg: *const RoConfig, out: *mut *mut c_char) -> RoStatus {
    guard(|| {
        let cfg = borrow(cfg, "cfg")?;
        let out = out_ptr(out, "out")?;
        let text = serde_json::to_string(&cfg.0).map_err(|e| Fail(RoStatus::Json, e.to_string()))?;
        *out = CString::new(text).map_err(|e| Fail(RoStatus::Utf8, e.to_string()))?.into_raw();
        Ok(())
    })
}

/// Set the base seed; replication `i` uses `seed + i`.
///
/// # Safety
/// `cfg` must come from this library.
#[no_mangle]
pub unsafe extern "C" fn ro_config_set_seed(cfg: *mut RoConfig, seed: u64) -> RoStatus {
    guard(|| {
        out_ptr(cfg, "cfg")?.0.seed = seed;
        Ok(())
    })
}

/// # Safety
/// `cfg` must be null or come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ro_config_free(cfg: *mut RoConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// # Safety
/// `s` must be null or come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ro_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Roll out the logging policy for replication `replication`.
///
/// # Safety
/// `cfg` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ro_dataset_generate(
    cfg: *const RoConfig,
    replication: usize,
    out: *mut *mut RoDataset,
) -> RoStatus {
    guard(|| {
        let cfg = &borrow(cfg, "cfg")?.0;
        let out = out_ptr(out, "out")?;
        let data = generate(cfg, cfg.replication_seed(replication))?;
        *out = Box::into_raw(Box::new(RoDataset(data)));
        Ok(())
    })
}

/// Load a dataset CSV, checking its sidecar against `cfg` when present.
///
/// # Safety
/// `cfg` must come from this library; `path` must be NUL-terminated; `out`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn ro_dataset_load(
    cfg: *const RoConfig,
    path: *const c_char,
    out: *mut *mut RoDataset,
) -> RoStatus {
    guard(|| {
        let cfg = &borrow(cfg, "cfg")?.0;
        let path = c_str(path, "path")?;
        let out = out_ptr(out, "out")?;
        let data = load_dataset(cfg, Path::new(path))?;
        *out = Box::into_raw(Box::new(RoDataset(data)));
        Ok(())
    })
}

/// # Safety
/// `data` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ro_dataset_len(data: *const RoDataset, out: *mut usize) -> RoStatus {
    guard(|| {
        *out_ptr(out, "out")? = borrow(data, "data")?.0.len();
        Ok(())
    })
}

/// # Safety
/// `data` must be null or come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ro_dataset_free(data: *mut RoDataset) {
    if !data.is_null() {
        drop(Box::from_raw(data));
    }
}

/// Fit nuisances and compute Q, W and Orth estimates for every configured
/// sign and lambda.
///
/// # Safety
/// `cfg` and `data` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ro_estimate(
    cfg: *const RoConfig,
    data: *const RoDataset,
    out: *mut *mut RoEstimates,
) -> RoStatus {
    guard(|| {
        let cfg = &borrow(cfg, "cfg")?.0;
        let data = &borrow(data, "data")?.0;
        let out = out_ptr(out, "out")?;
        let nuisances = fit(cfg, data)?;
        let est = estimate(cfg, data, &nuisances)?;
        *out = Box::into_raw(Box::new(RoEstimates(est.estimates)));
        Ok(())
    })
}

/// # Safety
/// `est` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ro_estimates_len(est: *const RoEstimates, out: *mut usize) -> RoStatus {
    guard(|| {
        *out_ptr(out, "out")? = borrow(est, "est")?.0.len();
        Ok(())
    })
}

/// # Safety
/// `est` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ro_estimates_get(est: *const RoEstimates, index: usize, out: *mut RoEstimate) -> RoStatus {
    guard(|| {
        let list = &borrow(est, "est")?.0;
        let out = out_ptr(out, "out")?;
        let e = list.get(index).ok_or_else(|| {
            Fail(
                RoStatus::IndexOutOfRange,
                format!("index {index} outside {} estimates", list.len()),
            )
        })?;
        *out = RoEstimate {
            estimator: match e.estimator {
                EstimatorKind::Q => RoEstimator::Q,
                EstimatorKind::W => RoEstimator::W,
                EstimatorKind::Orth => RoEstimator::Orth,
            },
            sign: match e.sign {
                Sign::Minus => RoSign::Minus,
                Sign::Plus => RoSign::Plus,
            },
            lambda: e.lambda.unwrap_or(f64::NAN),
            n: e.n,
            value: e.value,
            std_error: e.std_error,
            ci_lower_1sided_95: e.ci_lower_1sided_95.unwrap_or(f64::NAN),
            ci_upper_1sided_95: e.ci_upper_1sided_95.unwrap_or(f64::NAN),
        };
        Ok(())
    })
}

/// # Safety
/// `est` must be null or come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ro_estimates_free(est: *mut RoEstimates) {
    if !est.is_null() {
        drop(Box::from_raw(est));
    }
}

/// `Λ⁻¹E[v] + (1-Λ⁻¹)CVaR_τ[v]` of a discrete law with `len` atoms.
///
/// # Safety
/// `values` and `probs` must point to `len` readable doubles; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn ro_robust_expectation(
    values: *const f64,
    probs: *const f64,
    len: usize,
    lambda: f64,
    sign: RoSign,
    out: *mut f64,
) -> RoStatus {
    guard(|| {
        if values.is_null() || probs.is_null() {
            return Err(null("values/probs"));
        }
        let out = out_ptr(out, "out")?;
        let v = std::slice::from_raw_parts(values, len);
        let p = std::slice::from_raw_parts(probs, len);
        let dist = DiscreteDistribution::new(v.iter().copied().zip(p.iter().copied()).collect())?;
        *out = robust_expectation_closed_form(&dist, lambda, sign_of(sign))?;
        Ok(())
    })
}

/// Monte Carlo robust value of the configured target policy.
///
/// # Safety
/// `cfg` must come from this library; `value` and `std_error` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn ro_ground_truth(
    cfg: *const RoConfig,
    lambda: f64,
    sign: RoSign,
    value: *mut f64,
    std_error: *mut f64,
) -> RoStatus {
    guard(|| {
        let cfg = &borrow(cfg, "cfg")?.0;
        let value = out_ptr(value, "value")?;
        let std_error = out_ptr(std_error, "std_error")?;
        let env = cfg.env()?;
        let horizon = horizon_for(cfg.env.gamma, cfg.oracle.horizon_tol);
        let t = benchmark_ground_truth(
            &env,
            &cfg.target,
            lambda,
            sign_of(sign),
            cfg.oracle.n_traj,
            horizon,
            cfg.seed,
        )?;
        *value = t.value;
        *std_error = t.mc_std_error;
        Ok(())
    })
}
