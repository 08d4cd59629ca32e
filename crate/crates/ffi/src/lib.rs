//! C ABI for `trh-core`.
//!
//! Networks and datasets cross the boundary as opaque handles owned by the
//! caller and released with the matching `*_free` function. Every function
//! returns a [`TrhStatus`]; on failure, [`trh_last_error_message`] describes
//! the most recent error on the calling thread. Output arguments hold no
//! meaningful value after a failure.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use trh::attacks::{accuracy, eval_robust_accuracy, AttackConfig, Norm};
use trh::data::{load_csv, two_moons, Dataset};
use trh::losses::RobustLossKind;
use trh::pacbayes::{gaussian_kl, GaussianPosterior};
use trh::trh::{ce_layer_trace, trh_for_kind, TradesCase};
use trh::{Error, MlpNetwork, Rng};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrhStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    Io = 4,
    Parse = 5,
    OutOfRegime = 6,
    NonSmooth = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrhLossKind {
    At = 0,
    Trades = 1,
    Alp = 2,
    Mart = 3,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrhNorm {
    Linf = 0,
    L2 = 1,
}

/// Opaque network handle.
pub struct TrhNetwork {
    inner: MlpNetwork,
}

/// Opaque dataset handle.
pub struct TrhDataset {
    inner: Dataset,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let text = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(text));
}

struct Failure(TrhStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Dimension { .. } => TrhStatus::DimensionMismatch,
            Error::Io { .. } => TrhStatus::Io,
            Error::Parse { .. } | Error::Config { .. } => TrhStatus::Parse,
            Error::OutOfRegime { .. } => TrhStatus::OutOfRegime,
            Error::NonSmooth { .. } => TrhStatus::NonSmooth,
            _ => TrhStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(TrhStatus::NullPointer, format!("{what} is null"))
}

fn invalid(message: impl Into<String>) -> Failure {
    Failure(TrhStatus::InvalidArgument, message.into())
}

/// Runs `body`, converting errors and panics into a status code.
fn guard(body: impl FnOnce() -> Result<(), Failure>) -> TrhStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            TrhStatus::Ok
        }
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(payload) => {
            let message = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {message}"));
            TrhStatus::Panic
        }
    }
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| invalid("path is not valid UTF-8"))?;
    Ok(PathBuf::from(s))
}

unsafe fn network<'a>(p: *const TrhNetwork) -> Result<&'a MlpNetwork, Failure> {
    p.as_ref().map(|n| &n.inner).ok_or_else(|| null("network"))
}

unsafe fn dataset<'a>(p: *const TrhDataset) -> Result<&'a Dataset, Failure> {
    p.as_ref().map(|d| &d.inner).ok_or_else(|| null("dataset"))
}

unsafe fn write<T>(out: *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    out.write(value);
    Ok(())
}

fn check_dim(expected: usize, actual: usize, context: &'static str) -> Result<(), Failure> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::Dimension { expected, actual, context }.into())
    }
}

/// Message for the last failed call on this thread, or null after a
/// successful call. The pointer stays valid until the next call.
#[no_mangle]
pub extern "C" fn trh_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Randomly initialized network with layer widths `sizes[0..n_sizes]` (input
/// first, classes last).
///
/// # Safety
/// `sizes` must point to `n_sizes` values and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn trh_network_init(
    sizes: *const usize,
    n_sizes: usize,
    hidden_bias: bool,
    seed: u64,
    out: *mut *mut TrhNetwork,
) -> TrhStatus {
    guard(|| {
        if sizes.is_null() {
            return Err(null("sizes"));
        }
        let sizes = std::slice::from_raw_parts(sizes, n_sizes);
        let inner = MlpNetwork::init(sizes, hidden_bias, &mut Rng::new(seed))?;
        write(out, Box::into_raw(Box::new(TrhNetwork { inner })))
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn trh_network_load(path: *const c_char, out: *mut *mut TrhNetwork) -> TrhStatus {
    guard(|| {
        let inner = MlpNetwork::load(&path_arg(path)?)?;
        write(out, Box::into_raw(Box::new(TrhNetwork { inner })))
    })
}

/// # Safety
/// `net` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn trh_network_save(net: *const TrhNetwork, path: *const c_char) -> TrhStatus {
    guard(|| Ok(network(net)?.save(&path_arg(path)?)?))
}

/// Releases a network. Null is ignored.
///
/// # Safety
/// `net` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn trh_network_free(net: *mut TrhNetwork) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

/// # Safety
/// `net` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn trh_network_param_count(net: *const TrhNetwork, out: *mut usize) -> TrhStatus {
    guard(|| write(out, network(net)?.param_count()))
}

/// # Safety
/// `net` must be a live handle and the outputs writable.
#[no_mangle]
pub unsafe extern "C" fn trh_network_shape(net: *const TrhNetwork, input_dim: *mut usize, num_classes: *mut usize) -> TrhStatus {
    guard(|| {
        let n = network(net)?;
        write(input_dim, n.input_dim())?;
        write(num_classes, n.num_classes())
    })
}

/// Logits for one input.
///
/// # Safety
/// `x` must hold `dim` values and `logits` room for `logits_len`.
#[no_mangle]
pub unsafe extern "C" fn trh_network_forward(
    net: *const TrhNetwork,
    x: *const f64,
    dim: usize,
    logits: *mut f64,
    logits_len: usize,
) -> TrhStatus {
    guard(|| {
        let n = network(net)?;
        check_dim(n.input_dim(), dim, "input")?;
        check_dim(n.num_classes(), logits_len, "logits buffer")?;
        if logits.is_null() {
            return Err(null("logits"));
        }
        let trace = n.forward(slice(x, dim, "x")?)?;
        std::slice::from_raw_parts_mut(logits, logits_len).copy_from_slice(trace.logits());
        Ok(())
    })
}

/// Closed-form top-layer trace of the per-example robust loss. `penalty` is
/// the TRADES, ALP or MART weight and is ignored for AT; `full_case` selects
/// the fully differentiated TRADES objective.
///
/// # Safety
/// `x` and `x_adv` must hold `dim` values and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn trh_top_layer_trace(
    net: *const TrhNetwork,
    x: *const f64,
    x_adv: *const f64,
    dim: usize,
    label: usize,
    kind: TrhLossKind,
    penalty: f64,
    full_case: bool,
    out: *mut f64,
) -> TrhStatus {
    guard(|| {
        let n = network(net)?;
        check_dim(n.input_dim(), dim, "input")?;
        if label >= n.num_classes() {
            return Err(invalid(format!("label {label} out of range")));
        }
        if !(penalty >= 0.0) {
            return Err(invalid("penalty must be >= 0"));
        }
        let kind = match kind {
            TrhLossKind::At => RobustLossKind::At,
            TrhLossKind::Trades => RobustLossKind::Trades { lambda_t: penalty },
            TrhLossKind::Alp => RobustLossKind::Alp { lambda_a: penalty },
            TrhLossKind::Mart => RobustLossKind::Mart { lambda_m: penalty },
        };
        let case = if full_case { TradesCase::Full } else { TradesCase::StopGradient };
        let clean = n.forward(slice(x, dim, "x")?)?;
        let adv = n.forward(slice(x_adv, dim, "x_adv")?)?;
        write(out, trh_for_kind(kind, &clean, &adv, label, case))
    })
}

/// Exact trace of the cross-entropy Hessian over weight matrix `layer`
/// (0-based, input side first) at one input.
///
/// # Safety
/// `x` must hold `dim` values and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn trh_ce_layer_trace(
    net: *const TrhNetwork,
    x: *const f64,
    dim: usize,
    layer: usize,
    out: *mut f64,
) -> TrhStatus {
    guard(|| {
        let n = network(net)?;
        check_dim(n.input_dim(), dim, "input")?;
        if layer >= n.depth() {
            return Err(invalid(format!("layer {layer} out of range (depth {})", n.depth())));
        }
        let trace = n.forward(slice(x, dim, "x")?)?;
        write(out, ce_layer_trace(n, &trace, layer))
    })
}

/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn trh_dataset_two_moons(n: usize, noise: f64, seed: u64, out: *mut *mut TrhDataset) -> TrhStatus {
    guard(|| {
        let inner = two_moons(n, noise, seed)?;
        write(out, Box::into_raw(Box::new(TrhDataset { inner })))
    })
}

/// Loads a headered CSV whose last column is the integer label.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn trh_dataset_load_csv(path: *const c_char, out: *mut *mut TrhDataset) -> TrhStatus {
    guard(|| {
        let inner = load_csv(&path_arg(path)?)?;
        write(out, Box::into_raw(Box::new(TrhDataset { inner })))
    })
}

/// # Safety
/// `ds` must be a live handle and the outputs writable.
#[no_mangle]
pub unsafe extern "C" fn trh_dataset_shape(ds: *const TrhDataset, len: *mut usize, dim: *mut usize, num_classes: *mut usize) -> TrhStatus {
    guard(|| {
        let d = dataset(ds)?;
        write(len, d.len())?;
        write(dim, d.dim())?;
        write(num_classes, d.num_classes)
    })
}

/// Releases a dataset. Null is ignored.
///
/// # Safety
/// `ds` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn trh_dataset_free(ds: *mut TrhDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Clean accuracy and the accuracy under a multi-restart PGD attack with
/// random starts and step size `2.5·delta/steps`.
///
/// # Safety
/// Handles must be live and the outputs writable.
#[no_mangle]
pub unsafe extern "C" fn trh_eval_robust_accuracy(
    net: *const TrhNetwork,
    ds: *const TrhDataset,
    norm: TrhNorm,
    delta: f64,
    steps: usize,
    restarts: usize,
    seed: u64,
    clean_acc: *mut f64,
    robust_acc: *mut f64,
) -> TrhStatus {
    guard(|| {
        let n = network(net)?;
        let d = dataset(ds)?;
        check_dim(n.input_dim(), d.dim(), "dataset features")?;
        if d.num_classes > n.num_classes() {
            return Err(Error::Dimension { expected: n.num_classes(), actual: d.num_classes, context: "dataset classes" }.into());
        }
        let norm = match norm {
            TrhNorm::Linf => Norm::Linf,
            TrhNorm::L2 => Norm::L2,
        };
        let cfg = AttackConfig { restarts, ..AttackConfig::new(norm, delta, steps) };
        let robust = eval_robust_accuracy(n, d, &cfg, seed)?;
        write(clean_acc, accuracy(n, &d.inputs, &d.labels))?;
        write(robust_acc, robust)
    })
}

/// `KL(N(mean, diag(variance)) ‖ N(0, sigma0_sq·I))`.
///
/// # Safety
/// `mean` and `variance` must hold `n` values and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn trh_gaussian_kl(mean: *const f64, variance: *const f64, n: usize, sigma0_sq: f64, out: *mut f64) -> TrhStatus {
    guard(|| {
        if !(sigma0_sq > 0.0) {
            return Err(invalid("prior variance must be > 0"));
        }
        let post = GaussianPosterior::diagonal(slice(mean, n, "mean")?.to_vec(), slice(variance, n, "variance")?.to_vec())?;
        write(out, gaussian_kl(&post, sigma0_sq))
    })
}
