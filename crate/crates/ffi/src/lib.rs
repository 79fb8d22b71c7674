//! C interface to `pcvecchia`.
//!
//! Every fallible function returns a [`PcvStatus`]. On failure the message is
//! available from [`pcv_last_error_message`] on the same thread. Objects are
//! opaque handles released with the matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use pcvecchia::kaporin::kappa_from_factor;
use pcvecchia::kernels::{Dataset, KernelOracle, KernelSpec};
use pcvecchia::oracle::{dense_matvec, EntryOracle};
use pcvecchia::partial_cholesky::{choose_pivots, PivotChooser};
use pcvecchia::solvers::{pcg, PcgOptions, Termination};
use pcvecchia::sparsity::{choose_pattern, SparsityChooser, SparsityRule};
use pcvecchia::vecchia::build_hybrid_from_partial;
use pcvecchia::{DenseSym, Error, Preconditioner, VecchiaFactor};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PcvStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    /// The factor has a zero diagonal entry where an inverse is needed.
    NotPositiveDefinite = 3,
    Breakdown = 4,
    Io = 5,
    Format = 6,
    Panic = 7,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn fail(status: PcvStatus, msg: impl Into<String>) -> PcvStatus {
    set_error(msg);
    status
}

fn status_of(e: &Error) -> PcvStatus {
    match e {
        Error::NonSpdFactor { .. } => PcvStatus::NotPositiveDefinite,
        Error::Breakdown { .. } => PcvStatus::Breakdown,
        Error::Io(_) => PcvStatus::Io,
        Error::Format { .. } | Error::Parse { .. } | Error::Csv(_) | Error::Json(_) => {
            PcvStatus::Format
        }
        _ => PcvStatus::InvalidArgument,
    }
}

/// Runs `f`, converting errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), PcvStatus>) -> PcvStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PcvStatus::Ok,
        Ok(Err(s)) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "unknown panic".into());
            fail(PcvStatus::Panic, format!("internal panic: {msg}"))
        }
    }
}

trait OrStatus<T> {
    fn or_status(self) -> Result<T, PcvStatus>;
}

impl<T> OrStatus<T> for pcvecchia::Result<T> {
    fn or_status(self) -> Result<T, PcvStatus> {
        self.map_err(|e| fail(status_of(&e), e.to_string()))
    }
}

fn non_null<T>(p: *const T, name: &str) -> Result<(), PcvStatus> {
    if p.is_null() {
        Err(fail(PcvStatus::NullPointer, format!("`{name}` is null")))
    } else {
        Ok(())
    }
}

/// Borrow `len` values, allowing a null pointer when `len` is 0.
unsafe fn slice<'a>(p: *const f64, len: usize, name: &str) -> Result<&'a [f64], PcvStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    non_null(p, name)?;
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a>(p: *mut f64, len: usize, name: &str) -> Result<&'a mut [f64], PcvStatus> {
    if len == 0 {
        return Ok(&mut []);
    }
    non_null(p, name)?;
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn path_arg(p: *const c_char) -> Result<String, PcvStatus> {
    non_null(p, "path")?;
    CStr::from_ptr(p)
        .to_str()
        .map(str::to_owned)
        .map_err(|_| fail(PcvStatus::InvalidArgument, "path is not valid UTF-8"))
}

fn check_len(got: usize, want: usize, name: &str) -> Result<(), PcvStatus> {
    if got == want {
        Ok(())
    } else {
        Err(fail(
            PcvStatus::InvalidArgument,
            format!("`{name}` has length {got}, expected {want}"),
        ))
    }
}

/// Message for the last failed call on this thread, or null. The pointer is
/// valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn pcv_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pcv_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

// ------------------------------------------------------------------ oracles

enum OracleKind {
    Dense(DenseSym),
    Kernel(KernelOracle),
}

/// Symmetric PSD matrix, stored or evaluated entrywise.
pub struct PcvOracle {
    kind: OracleKind,
}

impl PcvOracle {
    fn oracle(&self) -> &dyn EntryOracle {
        match &self.kind {
            OracleKind::Dense(a) => a,
            OracleKind::Kernel(k) => k,
        }
    }

    fn matvec(&self, v: &[f64]) -> Vec<f64> {
        match &self.kind {
            OracleKind::Dense(a) => a.matvec(v),
            OracleKind::Kernel(k) => dense_matvec(k, v),
        }
    }
}

/// Wraps a row-major `n x n` matrix, which must be exactly symmetric. The
/// values are copied.
///
/// # Safety
/// `values` must point to `n * n` readable doubles and `out` to writable
/// storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn pcv_oracle_dense(
    n: usize,
    values: *const f64,
    out: *mut *mut PcvOracle,
) -> PcvStatus {
    guard(|| {
        non_null(out, "out")?;
        let v = slice(values, n * n, "values")?.to_vec();
        let a = DenseSym::new(n, v).or_status()?;
        *out = Box::into_raw(Box::new(PcvOracle {
            kind: OracleKind::Dense(a),
        }));
        Ok(())
    })
}

/// Gaussian kernel `exp(-|x - y|^2 / (2 d)) + mu * [i == j]` on `n` points
/// of dimension `d`, given row-major. The points are copied; entries are
/// computed on demand.
///
/// # Safety
/// `points` must point to `n * d` readable doubles and `out` to writable
/// storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn pcv_oracle_rbf(
    points: *const f64,
    n: usize,
    d: usize,
    mu: f64,
    out: *mut *mut PcvOracle,
) -> PcvStatus {
    guard(|| {
        non_null(out, "out")?;
        let p = slice(points, n * d, "points")?.to_vec();
        let data = Dataset::new(p, n, d, None).or_status()?;
        let spec = KernelSpec::rbf(mu).or_status()?;
        *out = Box::into_raw(Box::new(PcvOracle {
            kind: OracleKind::Kernel(KernelOracle::new(&data, spec)),
        }));
        Ok(())
    })
}

/// Dimension of the matrix, or 0 for a null handle.
///
/// # Safety
/// `oracle` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pcv_oracle_dim(oracle: *const PcvOracle) -> usize {
    oracle.as_ref().map_or(0, |o| o.oracle().dim())
}

/// Writes `A v` to `out`.
///
/// # Safety
/// `v` and `out` must each hold `n` doubles, `n` the oracle dimension.
#[no_mangle]
pub unsafe extern "C" fn pcv_oracle_matvec(
    oracle: *const PcvOracle,
    v: *const f64,
    out: *mut f64,
    n: usize,
) -> PcvStatus {
    guard(|| {
        non_null(oracle, "oracle")?;
        let o = &*oracle;
        check_len(n, o.oracle().dim(), "n")?;
        let y = o.matvec(slice(v, n, "v")?);
        slice_mut(out, n, "out")?.copy_from_slice(&y);
        Ok(())
    })
}

/// # Safety
/// `oracle` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pcv_oracle_free(oracle: *mut PcvOracle) {
    if !oracle.is_null() {
        drop(Box::from_raw(oracle));
    }
}

// ------------------------------------------------------------------ factors

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PcvPivotRule {
    /// Randomly pivoted Cholesky.
    Rpc = 0,
    /// Squared-distance sampling.
    Sds = 1,
    /// Greedy largest residual diagonal.
    Cpc = 2,
    /// Farthest point sampling.
    Fps = 3,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PcvSparsityRule {
    NearestNeighbors = 0,
    /// Orthogonal matching pursuit.
    Omp = 1,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PcvBuildOptions {
    pub pivot_rule: PcvPivotRule,
    /// Partial Cholesky rank.
    pub rank: usize,
    pub sparsity_rule: PcvSparsityRule,
    /// Residual entries kept per row.
    pub q: usize,
    /// Candidate pool per row; 0 means `10 q`.
    pub candidates: usize,
    pub seed: u64,
}

/// RPC pivots of rank `floor(sqrt(n))`, OMP with `q = floor(n^(1/4))`.
#[no_mangle]
pub extern "C" fn pcv_build_options_default(n: usize) -> PcvBuildOptions {
    let root = |k: u32| {
        let mut r = (n as f64).powf(1.0 / k as f64).round() as usize;
        while r.pow(k) > n {
            r -= 1;
        }
        while (r + 1).pow(k) <= n {
            r += 1;
        }
        r
    };
    PcvBuildOptions {
        pivot_rule: PcvPivotRule::Rpc,
        rank: root(2),
        sparsity_rule: PcvSparsityRule::Omp,
        q: root(4),
        candidates: 0,
        seed: 0,
    }
}

/// Sparse inverse-Cholesky approximation of a matrix.
pub struct PcvFactor {
    inner: VecchiaFactor,
}

/// Builds the hybrid approximation: partial Cholesky of rank
/// `options->rank` followed by a sparse residual factor with `options->q`
/// entries per row.
///
/// # Safety
/// `oracle` must be a live handle, `options` readable and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pcv_factor_build(
    oracle: *const PcvOracle,
    options: *const PcvBuildOptions,
    out: *mut *mut PcvFactor,
) -> PcvStatus {
    guard(|| {
        non_null(oracle, "oracle")?;
        non_null(options, "options")?;
        non_null(out, "out")?;
        let o = (*oracle).oracle();
        let opt = *options;
        let n = o.dim();
        if opt.rank > n {
            return Err(fail(
                PcvStatus::InvalidArgument,
                format!("rank {} exceeds dimension {n}", opt.rank),
            ));
        }
        let chooser = match opt.pivot_rule {
            PcvPivotRule::Rpc => PivotChooser::rpc(opt.seed),
            PcvPivotRule::Sds => PivotChooser::sds(opt.seed),
            PcvPivotRule::Cpc => PivotChooser::cpc(opt.seed),
            PcvPivotRule::Fps => PivotChooser::fps(opt.seed),
        };
        let (_, partial) = choose_pivots(o, &chooser, opt.rank);
        let sparsity = SparsityChooser {
            rule: match opt.sparsity_rule {
                PcvSparsityRule::NearestNeighbors => SparsityRule::Nn,
                PcvSparsityRule::Omp => SparsityRule::Omp,
            },
            q: opt.q,
            c: if opt.candidates == 0 {
                10 * opt.q
            } else {
                opt.candidates
            },
        };
        if sparsity.c < sparsity.q {
            return Err(fail(
                PcvStatus::InvalidArgument,
                "candidates must be 0 or at least q",
            ));
        }
        let pattern = choose_pattern(o, &partial, &sparsity);
        let f = build_hybrid_from_partial(o, &partial, &pattern);
        *out = Box::into_raw(Box::new(PcvFactor { inner: f }));
        Ok(())
    })
}

/// # Safety
/// `factor` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pcv_factor_dim(factor: *const PcvFactor) -> usize {
    factor.as_ref().map_or(0, |f| f.inner.n())
}

/// `log det` of the approximation.
///
/// # Safety
/// `factor` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pcv_factor_logdet(factor: *const PcvFactor, out: *mut f64) -> PcvStatus {
    guard(|| {
        non_null(factor, "factor")?;
        non_null(out, "out")?;
        *out = (*factor).inner.logdet().or_status()?;
        Ok(())
    })
}

/// Writes `Ahat v` to `out`.
///
/// # Safety
/// `v` and `out` must each hold `n` doubles, `n` the factor dimension.
#[no_mangle]
pub unsafe extern "C" fn pcv_factor_matvec(
    factor: *const PcvFactor,
    v: *const f64,
    out: *mut f64,
    n: usize,
) -> PcvStatus {
    guard(|| {
        non_null(factor, "factor")?;
        let f = &(*factor).inner;
        check_len(n, f.n(), "n")?;
        let y = Preconditioner::apply(f, slice(v, n, "v")?);
        slice_mut(out, n, "out")?.copy_from_slice(&y);
        Ok(())
    })
}

/// Writes `Ahat^+ b` to `out`.
///
/// # Safety
/// `b` and `out` must each hold `n` doubles, `n` the factor dimension.
#[no_mangle]
pub unsafe extern "C" fn pcv_factor_solve(
    factor: *const PcvFactor,
    b: *const f64,
    out: *mut f64,
    n: usize,
) -> PcvStatus {
    guard(|| {
        non_null(factor, "factor")?;
        let f = &(*factor).inner;
        check_len(n, f.n(), "n")?;
        let x = Preconditioner::solve(f, slice(b, n, "b")?);
        slice_mut(out, n, "out")?.copy_from_slice(&x);
        Ok(())
    })
}

/// Kaporin condition number `log kappa` of the factor against the matrix.
/// Writes infinity when the ranges differ.
///
/// # Safety
/// Both handles must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pcv_factor_log_kappa(
    oracle: *const PcvOracle,
    factor: *const PcvFactor,
    out: *mut f64,
) -> PcvStatus {
    guard(|| {
        non_null(oracle, "oracle")?;
        non_null(factor, "factor")?;
        non_null(out, "out")?;
        let (o, f) = ((*oracle).oracle(), &(*factor).inner);
        check_len(f.n(), o.dim(), "factor dimension")?;
        let rep = kappa_from_factor(o, f);
        *out = if rep.infinite {
            f64::INFINITY
        } else {
            rep.log_kappa
        };
        Ok(())
    })
}

/// # Safety
/// `factor` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn pcv_factor_save(
    factor: *const PcvFactor,
    path: *const c_char,
) -> PcvStatus {
    guard(|| {
        non_null(factor, "factor")?;
        let path = path_arg(path)?;
        pcvecchia::format::save_factor(path, &(*factor).inner).or_status()
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pcv_factor_load(
    path: *const c_char,
    out: *mut *mut PcvFactor,
) -> PcvStatus {
    guard(|| {
        non_null(out, "out")?;
        let path = path_arg(path)?;
        let f = pcvecchia::format::load_factor(path).or_status()?;
        *out = Box::into_raw(Box::new(PcvFactor { inner: f }));
        Ok(())
    })
}

/// # Safety
/// `factor` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pcv_factor_free(factor: *mut PcvFactor) {
    if !factor.is_null() {
        drop(Box::from_raw(factor));
    }
}

// ------------------------------------------------------------------ solves

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PcvSolveReport {
    pub iterations: usize,
    pub converged: bool,
    /// `|b - A x| / |b|` from the recurrence; 0 when `b` is zero.
    pub relative_residual: f64,
}

/// Preconditioned conjugate gradient for `A x = b`, starting from the
/// contents of `x`. Stops when the relative residual drops below `tol` or
/// after `max_iter` iterations; the latter is not an error.
///
/// # Safety
/// Handles must be live, `b` and `x` must hold `n` doubles, `report` must be
/// null or writable.
#[no_mangle]
pub unsafe extern "C" fn pcv_pcg(
    oracle: *const PcvOracle,
    factor: *const PcvFactor,
    b: *const f64,
    x: *mut f64,
    n: usize,
    tol: f64,
    max_iter: usize,
    report: *mut PcvSolveReport,
) -> PcvStatus {
    guard(|| {
        non_null(oracle, "oracle")?;
        non_null(factor, "factor")?;
        let (o, f) = (&*oracle, &(*factor).inner);
        check_len(n, o.oracle().dim(), "n")?;
        check_len(n, f.n(), "n")?;
        if tol.is_nan() || tol <= 0.0 {
            return Err(fail(PcvStatus::InvalidArgument, "tol must be positive"));
        }
        let b = slice(b, n, "b")?;
        let x = slice_mut(x, n, "x")?;
        let opts = PcgOptions {
            tol,
            max_iter,
            x0: Some(x.to_vec()),
            ..PcgOptions::default()
        };
        let trace = pcg(|v: &[f64]| o.matvec(v), f, b, &opts).or_status()?;
        x.copy_from_slice(&trace.x);
        if let Some(r) = report.as_mut() {
            *r = PcvSolveReport {
                iterations: trace.iterations,
                converged: trace.termination != Termination::MaxIterations,
                relative_residual: trace.relative_residuals().last().copied().unwrap_or(0.0),
            };
        }
        Ok(())
    })
}
