//! C interface to the `camrl` library.
//!
//! Every function returns a [`CamrlStatus`]. On failure the message is
//! available from [`camrl_last_error`] on the same thread. Handles are
//! opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use camrl::cli::RunConfig;
use camrl::ranking::{smooth_rank, RankInstance};
use camrl::scheduler::Experiment;
use camrl::solver::{fw_gap, project_box_l1};
use camrl::transfer::TransferMatrix;
use camrl::CamrlError;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CamrlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    Infeasible = 4,
    Config = 5,
    Numerical = 6,
    Io = 7,
    Panic = 8,
}

/// A transfer matrix.
pub struct CamrlTransfer {
    inner: TransferMatrix,
}

/// A training run.
pub struct CamrlExperiment {
    inner: Experiment,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(err: &CamrlError) -> CamrlStatus {
    match err {
        CamrlError::DimensionMismatch { .. } => CamrlStatus::DimensionMismatch,
        CamrlError::Infeasible(_) => CamrlStatus::Infeasible,
        CamrlError::InvalidArgument(_) => CamrlStatus::InvalidArgument,
        CamrlError::Config(_) | CamrlError::Json(_) => CamrlStatus::Config,
        CamrlError::Numerical(_) => CamrlStatus::Numerical,
        CamrlError::Io(_) => CamrlStatus::Io,
    }
}

enum Failure {
    Null(&'static str),
    Lib(CamrlError),
}

impl From<CamrlError> for Failure {
    fn from(e: CamrlError) -> Self {
        Failure::Lib(e)
    }
}

fn guard<F>(f: F) -> CamrlStatus
where
    F: FnOnce() -> Result<(), Failure>,
{
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CamrlStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            CamrlStatus::NullPointer
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            CamrlStatus::Panic
        }
    }
}

unsafe fn input<'a, T>(p: *const T, n: usize, what: &'static str) -> Result<&'a [T], Failure> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(slice::from_raw_parts(p, n))
}

unsafe fn output<'a, T>(p: *mut T, n: usize, what: &'static str) -> Result<&'a mut [T], Failure> {
    if n == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(slice::from_raw_parts_mut(p, n))
}

unsafe fn handle<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(what))
}

unsafe fn handle_mut<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or(Failure::Null(what))
}

fn check_len(expected: usize, got: usize) -> Result<(), Failure> {
    if expected == got {
        Ok(())
    } else {
        Err(CamrlError::DimensionMismatch { expected, got }.into())
    }
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `cap`). Returns the full message length without the NUL.
///
/// # Safety
/// `buf` must be null or point to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn camrl_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && cap > 0 {
            let n = msg.len().min(cap - 1);
            ptr::copy_nonoverlapping(msg.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Smooth descending ranks of `values` with sharpness `d`.
///
/// # Safety
/// `values` and `out` must each hold `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn camrl_smooth_rank(values: *const f64, n: usize, d: f64, out: *mut f64) -> CamrlStatus {
    guard(|| {
        let v = input(values, n, "values")?;
        let o = output(out, n, "out")?;
        o.copy_from_slice(&smooth_rank(v, d));
        Ok(())
    })
}

/// Ranking loss of `values` against 1-based `targets`, and its gradient.
/// `grad` may be null.
///
/// # Safety
/// `values`, `targets` and a non-null `grad` must each hold `n` elements.
#[no_mangle]
pub unsafe extern "C" fn camrl_rank_loss(
    values: *const f64,
    targets: *const usize,
    n: usize,
    d: f64,
    loss: *mut f64,
    grad: *mut f64,
) -> CamrlStatus {
    guard(|| {
        let v = input(values, n, "values")?;
        let t = input(targets, n, "targets")?;
        let loss = handle_mut(loss, "loss")?;
        let inst = RankInstance::new(v.to_vec(), t.to_vec(), d)?;
        *loss = inst.loss();
        if !grad.is_null() {
            output(grad, n, "grad")?.copy_from_slice(&inst.grad());
        }
        Ok(())
    })
}

/// Euclidean projection of `x` onto `{y >= 0, |y|_1 <= radius}`.
///
/// # Safety
/// `x` and `out` must each hold `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn camrl_project_box_l1(x: *const f64, n: usize, radius: f64, out: *mut f64) -> CamrlStatus {
    guard(|| {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(CamrlError::InvalidArgument(format!("radius must be positive, got {radius}")).into());
        }
        let x = input(x, n, "x")?;
        let o = output(out, n, "out")?;
        o.copy_from_slice(&project_box_l1(x, radius));
        Ok(())
    })
}

/// Frank-Wolfe gap at feasible `x` for gradient `grad`.
///
/// # Safety
/// `grad` and `x` must each hold `n` doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn camrl_fw_gap(
    grad: *const f64,
    x: *const f64,
    n: usize,
    radius: f64,
    out: *mut f64,
) -> CamrlStatus {
    guard(|| {
        let g = input(grad, n, "grad")?;
        let x = input(x, n, "x")?;
        *handle_mut(out, "out")? = fw_gap(g, x, radius)?;
        Ok(())
    })
}

/// Identity transfer matrix over `n` tasks.
///
/// # Safety
/// `out` must be a valid pointer; the handle written there is owned by the caller.
#[no_mangle]
pub unsafe extern "C" fn camrl_transfer_new(n: usize, out: *mut *mut CamrlTransfer) -> CamrlStatus {
    guard(|| {
        let out = handle_mut(out, "out")?;
        let inner = TransferMatrix::identity(n)?;
        *out = Box::into_raw(Box::new(CamrlTransfer { inner }));
        Ok(())
    })
}

/// Transfer matrix from `n * n` row-major entries. The invariants are not
/// checked here; see [`camrl_transfer_validate`].
///
/// # Safety
/// `data` must hold `n * n` doubles and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn camrl_transfer_from_rows(
    n: usize,
    data: *const f64,
    out: *mut *mut CamrlTransfer,
) -> CamrlStatus {
    guard(|| {
        let out = handle_mut(out, "out")?;
        let len = n
            .checked_mul(n)
            .ok_or_else(|| CamrlError::InvalidArgument("size overflow".into()))?;
        let d = input(data, len, "data")?;
        let inner = TransferMatrix::from_rows(n, d.to_vec())?;
        *out = Box::into_raw(Box::new(CamrlTransfer { inner }));
        Ok(())
    })
}

/// # Safety
/// `m` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn camrl_transfer_free(m: *mut CamrlTransfer) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// # Safety
/// `m` must be a live handle and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn camrl_transfer_size(m: *const CamrlTransfer, out: *mut usize) -> CamrlStatus {
    guard(|| {
        *handle_mut(out, "out")? = handle(m, "matrix")?.inner.size();
        Ok(())
    })
}

/// Copies all `n * n` entries, row-major.
///
/// # Safety
/// `m` must be a live handle and `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn camrl_transfer_data(m: *const CamrlTransfer, out: *mut f64, len: usize) -> CamrlStatus {
    guard(|| {
        let m = handle(m, "matrix")?;
        check_len(m.inner.as_slice().len(), len)?;
        output(out, len, "out")?.copy_from_slice(m.inner.as_slice());
        Ok(())
    })
}

/// Copies the off-diagonal entries of row `t` (`n - 1` values).
///
/// # Safety
/// `m` must be a live handle and `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn camrl_transfer_outgoing_row(
    m: *const CamrlTransfer,
    t: usize,
    out: *mut f64,
    len: usize,
) -> CamrlStatus {
    guard(|| {
        let m = handle(m, "matrix")?;
        let n = m.inner.size();
        if t >= n {
            return Err(CamrlError::InvalidArgument(format!("task {t} out of range for {n} tasks")).into());
        }
        check_len(n - 1, len)?;
        output(out, len, "out")?.copy_from_slice(&m.inner.outgoing_row(t));
        Ok(())
    })
}

/// Replaces the off-diagonal entries of row `t`.
///
/// # Safety
/// `m` must be a live handle and `row` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn camrl_transfer_set_outgoing_row(
    m: *mut CamrlTransfer,
    t: usize,
    row: *const f64,
    len: usize,
) -> CamrlStatus {
    guard(|| {
        let m = handle_mut(m, "matrix")?;
        let n = m.inner.size();
        if t >= n {
            return Err(CamrlError::InvalidArgument(format!("task {t} out of range for {n} tasks")).into());
        }
        let r = input(row, len, "row")?;
        m.inner.set_outgoing_row(t, r)?;
        Ok(())
    })
}

/// Checks unit diagonal, nonnegative entries and row budgets.
///
/// # Safety
/// `m` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn camrl_transfer_validate(m: *const CamrlTransfer, radius: f64) -> CamrlStatus {
    guard(|| {
        handle(m, "matrix")?.inner.validate(radius)?;
        Ok(())
    })
}

/// New matrix with one more task: the old block is kept and the new row
/// and column are zero apart from the diagonal.
///
/// # Safety
/// `m` must be a live handle and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn camrl_transfer_extend(m: *const CamrlTransfer, out: *mut *mut CamrlTransfer) -> CamrlStatus {
    guard(|| {
        let inner = handle(m, "matrix")?.inner.extend_for_new_task();
        *handle_mut(out, "out")? = Box::into_raw(Box::new(CamrlTransfer { inner }));
        Ok(())
    })
}

/// Builds an untrained experiment from a JSON run config. A null `json`
/// uses the defaults.
///
/// # Safety
/// `json` must be null or a NUL-terminated string; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn camrl_experiment_new(json: *const c_char, out: *mut *mut CamrlExperiment) -> CamrlStatus {
    guard(|| {
        let out = handle_mut(out, "out")?;
        let cfg = if json.is_null() {
            RunConfig::default()
        } else {
            let text = CStr::from_ptr(json)
                .to_str()
                .map_err(|e| CamrlError::Config(format!("config is not UTF-8: {e}")))?;
            RunConfig::from_json(text)?
        };
        let inner = cfg.experiment()?;
        *out = Box::into_raw(Box::new(CamrlExperiment { inner }));
        Ok(())
    })
}

/// # Safety
/// `e` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn camrl_experiment_free(e: *mut CamrlExperiment) {
    if !e.is_null() {
        drop(Box::from_raw(e));
    }
}

/// Runs `epochs` epochs, preceded by the warmup on the first call.
///
/// # Safety
/// `e` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn camrl_experiment_run(e: *mut CamrlExperiment, epochs: usize) -> CamrlStatus {
    guard(|| {
        handle_mut(e, "experiment")?.inner.run(epochs, |_| Ok(()))?;
        Ok(())
    })
}

/// # Safety
/// `e` must be a live handle and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn camrl_experiment_num_tasks(e: *const CamrlExperiment, out: *mut usize) -> CamrlStatus {
    guard(|| {
        *handle_mut(out, "out")? = handle(e, "experiment")?.inner.n_tasks();
        Ok(())
    })
}

/// Number of epochs run so far, warmup included.
///
/// # Safety
/// `e` must be a live handle and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn camrl_experiment_epochs_run(e: *const CamrlExperiment, out: *mut usize) -> CamrlStatus {
    guard(|| {
        *handle_mut(out, "out")? = handle(e, "experiment")?.inner.state.mode_log.len();
        Ok(())
    })
}

/// Snapshot of the experiment's current transfer matrix as a new handle.
///
/// # Safety
/// `e` must be a live handle and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn camrl_experiment_transfer(
    e: *const CamrlExperiment,
    out: *mut *mut CamrlTransfer,
) -> CamrlStatus {
    guard(|| {
        let inner = handle(e, "experiment")?.inner.b.clone();
        *handle_mut(out, "out")? = Box::into_raw(Box::new(CamrlTransfer { inner }));
        Ok(())
    })
}

/// Latest evaluation reward of every task (`len` = number of tasks). Fails
/// before the first epoch.
///
/// # Safety
/// `e` must be a live handle and `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn camrl_experiment_eval_rewards(
    e: *const CamrlExperiment,
    out: *mut f64,
    len: usize,
) -> CamrlStatus {
    guard(|| {
        let e = handle(e, "experiment")?;
        let hist = &e.inner.state.reward_history;
        check_len(hist.len(), len)?;
        let o = output(out, len, "out")?;
        for (slot, h) in o.iter_mut().zip(hist) {
            *slot = *h
                .last()
                .ok_or_else(|| CamrlError::InvalidArgument("no epoch has run yet".into()))?;
        }
        Ok(())
    })
}
