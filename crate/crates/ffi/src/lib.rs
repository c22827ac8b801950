//! C ABI for kldiff.
//!
//! Every fallible call returns a [`KldiffStatus`] and writes results through
//! out-pointers. On failure the message is available from
//! [`kldiff_last_error`] on the same thread. Handles are opaque and must be
//! released with their `_free` function. Functions taking pointers are
//! `unsafe`: each pointer must be NULL or valid for the stated size.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use kldiff::checkpoint::Checkpoint;
use kldiff::eval::{energy_distance, sliced_wasserstein_with_se};
use kldiff::sampler::{PredictorKind, SamplerConfig};
use kldiff::{Error, KlBasis, NoiseSchedule};
use ndarray::ArrayView2;

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KldiffStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    Numeric = 5,
    Format = 6,
    Panic = 7,
}

/// Truncated KL basis on a fixed time grid.
pub struct KldiffBasis(KlBasis);

/// A loaded checkpoint.
pub struct KldiffModel(Checkpoint);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> KldiffStatus {
    match e {
        Error::Domain(_) | Error::Shape(_) | Error::Validation(_) => KldiffStatus::InvalidArgument,
        Error::Config(_) => KldiffStatus::Config,
        Error::Io { .. } => KldiffStatus::Io,
        Error::Numeric(_) => KldiffStatus::Numeric,
        Error::Format(_) => KldiffStatus::Format,
    }
}

enum Failure {
    Null(&'static str),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn guard<F: FnOnce() -> Result<(), Failure>>(f: F) -> KldiffStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => KldiffStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_last_error(format!("null pointer passed as `{what}`"));
            KldiffStatus::NullPointer
        }
        Ok(Err(Failure::Core(e))) => {
            set_last_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_last_error("internal panic".into());
            KldiffStatus::Panic
        }
    }
}

fn non_null<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    // SAFETY: callers pass either NULL or a pointer obtained from this library
    unsafe { p.as_ref() }.ok_or(Failure::Null(what))
}

fn write<T>(out: *mut T, value: T, what: &'static str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::Null(what));
    }
    // SAFETY: non-null and, per the API contract, valid for writes
    unsafe { out.write(value) };
    Ok(())
}

/// Borrow `rows × cols` row-major doubles.
fn matrix<'a>(
    data: *const f64,
    rows: usize,
    cols: usize,
    what: &'static str,
) -> Result<ArrayView2<'a, f64>, Failure> {
    if data.is_null() {
        return Err(Failure::Null(what));
    }
    let len = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::Shape(format!("{what}: {rows}×{cols} overflows")))?;
    // SAFETY: the caller guarantees `data` holds `rows * cols` doubles
    let slice = unsafe { std::slice::from_raw_parts(data, len) };
    Ok(ArrayView2::from_shape((rows, cols), slice).expect("length matches shape"))
}

/// Message for the most recent failure on this thread, or NULL. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn kldiff_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn kldiff_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// `φ_m(t)` for `m ≥ 1`, `t ∈ [0, 1]`.
///
/// # Safety
/// Pointer arguments must be NULL or valid for the documented sizes;
/// handles must be live.
#[no_mangle]
pub unsafe extern "C" fn kldiff_phi(m: usize, t: f64, out: *mut f64) -> KldiffStatus {
    guard(|| write(out, kldiff::kl_basis::phi(m, t)?, "out"))
}

/// Build a basis with `m_terms` terms on an `n_steps` grid of the linear
/// schedule `β(t) = beta0 + (beta1 - beta0) t`.
///
/// # Safety
/// Pointer arguments must be NULL or valid for the documented sizes;
/// handles must be live.
#[no_mangle]
pub unsafe extern "C" fn kldiff_basis_new(
    beta0: f64,
    beta1: f64,
    n_steps: usize,
    m_terms: usize,
    out: *mut *mut KldiffBasis,
) -> KldiffStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let basis = KlBasis::new(NoiseSchedule::new(beta0, beta1, n_steps)?, m_terms)?;
        write(out, Box::into_raw(Box::new(KldiffBasis(basis))), "out")
    })
}

/// Release a basis. NULL is ignored.
///
/// # Safety
/// `basis` must come from [`kldiff_basis_new`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn kldiff_basis_free(basis: *mut KldiffBasis) {
    if !basis.is_null() {
        // SAFETY: per the contract above
        drop(unsafe { Box::from_raw(basis) });
    }
}

/// # Safety
/// Pointer arguments must be NULL or valid for the documented sizes;
/// handles must be live.
#[no_mangle]
pub unsafe extern "C" fn kldiff_basis_m_terms(
    basis: *const KldiffBasis,
    out: *mut usize,
) -> KldiffStatus {
    guard(|| {
        let b = non_null(basis, "basis")?;
        write(out, kldiff::Basis::m_terms(&b.0), "out")
    })
}

/// Cached response `h_m(t_k)` on the grid.
///
/// # Safety
/// Pointer arguments must be NULL or valid for the documented sizes;
/// handles must be live.
#[no_mangle]
pub unsafe extern "C" fn kldiff_basis_h(
    basis: *const KldiffBasis,
    m: usize,
    k: usize,
    out: *mut f64,
) -> KldiffStatus {
    guard(|| {
        let b = non_null(basis, "basis")?;
        write(out, b.0.h_at(m, k)?, "out")
    })
}

/// `h_m(t)` at an arbitrary time, for any `m ≥ 1`.
///
/// # Safety
/// Pointer arguments must be NULL or valid for the documented sizes;
/// handles must be live.
#[no_mangle]
pub unsafe extern "C" fn kldiff_basis_h_at_time(
    basis: *const KldiffBasis,
    m: usize,
    t: f64,
    out: *mut f64,
) -> KldiffStatus {
    guard(|| {
        let b = non_null(basis, "basis")?;
        write(out, b.0.h(m, t)?, "out")
    })
}

/// Load a checkpoint from a NUL-terminated UTF-8 path.
///
/// # Safety
/// `path` must be NULL or a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn kldiff_model_load(
    path: *const c_char,
    out: *mut *mut KldiffModel,
) -> KldiffStatus {
    guard(|| {
        if path.is_null() {
            return Err(Failure::Null("path"));
        }
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        // SAFETY: per the contract above
        let path = unsafe { CStr::from_ptr(path) }
            .to_str()
            .map_err(|_| Error::Validation("path is not valid UTF-8".into()))?;
        let ckpt = Checkpoint::load(Path::new(path))?;
        write(out, Box::into_raw(Box::new(KldiffModel(ckpt))), "out")
    })
}

/// Release a model. NULL is ignored.
///
/// # Safety
/// `model` must come from [`kldiff_model_load`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn kldiff_model_free(model: *mut KldiffModel) {
    if !model.is_null() {
        // SAFETY: per the contract above
        drop(unsafe { Box::from_raw(model) });
    }
}

/// # Safety
/// Pointer arguments must be NULL or valid for the documented sizes;
/// handles must be live.
#[no_mangle]
pub unsafe extern "C" fn kldiff_model_data_dim(
    model: *const KldiffModel,
    out: *mut usize,
) -> KldiffStatus {
    guard(|| {
        let m = non_null(model, "model")?;
        write(out, m.0.header.model.data_dim, "out")
    })
}

/// Draw `n` samples with DDIM over `steps` grid points into `out`, which
/// must hold `n * data_dim` doubles (row-major). The predictor follows the
/// checkpoint's training loss.
///
/// # Safety
/// Pointer arguments must be NULL or valid for the documented sizes;
/// handles must be live.
#[no_mangle]
pub unsafe extern "C" fn kldiff_model_sample(
    model: *const KldiffModel,
    n: usize,
    steps: usize,
    eta: f64,
    seed: u64,
    out: *mut f64,
    out_len: usize,
) -> KldiffStatus {
    guard(|| {
        let m = non_null(model, "model")?;
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let need = n * m.0.header.model.data_dim;
        if out_len < need {
            return Err(Error::Shape(format!(
                "output buffer holds {out_len} doubles, need {need}"
            ))
            .into());
        }
        let cfg = SamplerConfig {
            subset_size: steps,
            eta,
            predictor: m.0.default_predictor()?,
            seed,
        };
        let samples = m.0.sample(n, &cfg)?;
        // SAFETY: `out` is non-null and holds at least `need` doubles
        let dst = unsafe { std::slice::from_raw_parts_mut(out, need) };
        for (d, s) in dst.iter_mut().zip(samples.iter()) {
            *d = *s;
        }
        Ok(())
    })
}

/// Sample from the analytic predictor for standard-normal data.
///
/// # Safety
/// Pointer arguments must be NULL or valid for the documented sizes;
/// handles must be live.
#[no_mangle]
pub unsafe extern "C" fn kldiff_oracle_sample(
    n_steps: usize,
    n: usize,
    dim: usize,
    steps: usize,
    eta: f64,
    seed: u64,
    out: *mut f64,
    out_len: usize,
) -> KldiffStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        if out_len < n * dim {
            return Err(Error::Shape(format!(
                "output buffer holds {out_len} doubles, need {}",
                n * dim
            ))
            .into());
        }
        let sched = NoiseSchedule::linear(n_steps)?;
        let cfg = SamplerConfig {
            subset_size: steps,
            eta,
            predictor: PredictorKind::OracleGauss,
            seed,
        };
        let samples =
            kldiff::sampler::sample(n, dim, &sched, &cfg, &kldiff::sampler::GaussOracle(sched))?;
        // SAFETY: `out` is non-null and holds at least `n * dim` doubles
        let dst = unsafe { std::slice::from_raw_parts_mut(out, n * dim) };
        for (d, s) in dst.iter_mut().zip(samples.iter()) {
            *d = *s;
        }
        Ok(())
    })
}

/// Energy distance between two row-major sample sets of width `dim`.
///
/// # Safety
/// Pointer arguments must be NULL or valid for the documented sizes;
/// handles must be live.
#[no_mangle]
pub unsafe extern "C" fn kldiff_energy_distance(
    a: *const f64,
    a_rows: usize,
    b: *const f64,
    b_rows: usize,
    dim: usize,
    out: *mut f64,
) -> KldiffStatus {
    guard(|| {
        let a = matrix(a, a_rows, dim, "a")?;
        let b = matrix(b, b_rows, dim, "b")?;
        write(out, energy_distance(a, b)?, "out")
    })
}

/// Sliced Wasserstein-1 distance and its standard error over projections.
/// `out_se` may be NULL.
///
/// # Safety
/// Pointer arguments must be NULL or valid for the documented sizes;
/// handles must be live.
#[no_mangle]
pub unsafe extern "C" fn kldiff_sliced_wasserstein(
    a: *const f64,
    a_rows: usize,
    b: *const f64,
    b_rows: usize,
    dim: usize,
    n_projections: usize,
    seed: u64,
    out: *mut f64,
    out_se: *mut f64,
) -> KldiffStatus {
    guard(|| {
        let a = matrix(a, a_rows, dim, "a")?;
        let b = matrix(b, b_rows, dim, "b")?;
        let sw = sliced_wasserstein_with_se(a, b, n_projections, seed)?;
        write(out, sw.value, "out")?;
        if !out_se.is_null() {
            write(out_se, sw.se, "out_se")?;
        }
        Ok(())
    })
}
