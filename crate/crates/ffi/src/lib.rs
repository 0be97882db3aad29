//! C ABI for the permnm engine.
//!
//! Every fallible function returns a [`PnmStatus`]. On failure the message
//! is kept per thread and can be read with [`pnm_last_error_message`].
//! Objects cross the boundary as opaque handles that the caller releases
//! with the matching `*_free` function. Panics are caught and reported as
//! [`PnmStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use permnm::pipeline::{cli_compare, cli_prune, RunConfig};
use permnm::reference::{count_partitions, heuristic_cp};
use permnm::sparsity::{compress_nm, decompress_nm};
use permnm::permlearn::BlockLayout;
use permnm::{
    magnitude_scores, nm_mask, solve_lsa, soft_permutation, wanda_scores, CompressedNm, Error, ImportanceScores,
    Matrix, NmConfig,
};

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PnmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Dimension = 3,
    InvalidPermutation = 4,
    NonFinite = 5,
    NmViolation = 6,
    TooLarge = 7,
    Format = 8,
    Io = 9,
    Diverged = 10,
    Internal = 11,
    Panic = 12,
    BufferTooSmall = 13,
}

impl From<&Error> for PnmStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Config(_) | Error::Empty(_) => PnmStatus::InvalidArgument,
            Error::Dimension { .. } => PnmStatus::Dimension,
            Error::InvalidPermutation(_) => PnmStatus::InvalidPermutation,
            Error::NonFinite(_) | Error::ExpOverflow | Error::Underflow(_) => PnmStatus::NonFinite,
            Error::NmViolation { .. } => PnmStatus::NmViolation,
            Error::TooLarge(_) => PnmStatus::TooLarge,
            Error::Manifest(_)
            | Error::BlobTruncated { .. }
            | Error::OffsetOverflow(_)
            | Error::OverlappingTensors(..)
            | Error::Codec(_)
            | Error::Json(_) => PnmStatus::Format,
            Error::Io(_) => PnmStatus::Io,
            Error::Diverged { .. } => PnmStatus::Diverged,
            _ => PnmStatus::Internal,
        }
    }
}

/// Dense row-major `f64` matrix.
pub struct PnmMatrix(Matrix<f64>);

/// Compressed N:M weight matrix.
pub struct PnmCompressed(CompressedNm);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(PnmStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(PnmStatus::from(&e), format!("{}: {e}", e.code()))
    }
}

type FfiResult<T> = std::result::Result<T, Failure>;

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> FfiResult<()>) -> PnmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PnmStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {msg}"));
            PnmStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(PnmStatus::NullPointer, format!("`{what}` is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(PnmStatus::InvalidArgument, msg.into())
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> FfiResult<&'a T> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn write_out<T>(out: *mut T, value: T, what: &str) -> FfiResult<()> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(value);
    Ok(())
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> FfiResult<&'a [T]> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> FfiResult<&'a mut [T]> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> FfiResult<&'a str> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("`{what}` is not valid UTF-8")))
}

fn boxed<T>(value: T) -> *mut T {
    Box::into_raw(Box::new(value))
}

fn nm(n_zero: usize, group: usize) -> FfiResult<NmConfig> {
    Ok(NmConfig::new(n_zero, group)?)
}

/// Copies `len` bytes of `msg` plus a terminator into `buf` when it fits.
/// Returns the buffer size needed, terminator included.
unsafe fn copy_cstr(msg: &CStr, buf: *mut c_char, len: usize) -> usize {
    let bytes = msg.to_bytes_with_nul();
    if !buf.is_null() && len >= bytes.len() {
        ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, bytes.len());
    }
    bytes.len()
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pnm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Static name of a status code, e.g. `"nm_violation"`.
#[no_mangle]
pub extern "C" fn pnm_status_name(status: PnmStatus) -> *const c_char {
    let s: &'static str = match status {
        PnmStatus::Ok => "ok\0",
        PnmStatus::NullPointer => "null_pointer\0",
        PnmStatus::InvalidArgument => "invalid_argument\0",
        PnmStatus::Dimension => "dimension\0",
        PnmStatus::InvalidPermutation => "invalid_permutation\0",
        PnmStatus::NonFinite => "non_finite\0",
        PnmStatus::NmViolation => "nm_violation\0",
        PnmStatus::TooLarge => "too_large\0",
        PnmStatus::Format => "format\0",
        PnmStatus::Io => "io\0",
        PnmStatus::Diverged => "diverged\0",
        PnmStatus::Internal => "internal\0",
        PnmStatus::Panic => "panic\0",
        PnmStatus::BufferTooSmall => "buffer_too_small\0",
    };
    s.as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf`.
///
/// Returns the size needed including the terminator, or 0 if no error has
/// been recorded. Nothing is written when `len` is too small.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn pnm_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| match e.borrow().as_ref() {
        Some(msg) => copy_cstr(msg, buf, len),
        None => 0,
    })
}

/// Creates a `rows × cols` matrix from row-major `data`.
///
/// # Safety
/// `data` must be valid for `rows * cols` reads; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pnm_matrix_new(
    rows: usize,
    cols: usize,
    data: *const f64,
    out: *mut *mut PnmMatrix,
) -> PnmStatus {
    guard(|| {
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| invalid("rows * cols overflows"))?;
        let values = slice(data, n, "data")?.to_vec();
        let m = Matrix::new(rows, cols, values)?;
        write_out(out, boxed(PnmMatrix(m)), "out")
    })
}

/// Releases a matrix. Null is ignored.
///
/// # Safety
/// `m` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pnm_matrix_free(m: *mut PnmMatrix) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Writes the shape of `m`.
///
/// # Safety
/// `m` must be a live handle; `rows` and `cols` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pnm_matrix_shape(m: *const PnmMatrix, rows: *mut usize, cols: *mut usize) -> PnmStatus {
    guard(|| {
        let m = deref(m, "m")?;
        write_out(rows, m.0.rows(), "rows")?;
        write_out(cols, m.0.cols(), "cols")
    })
}

/// Copies the row-major contents of `m` into `out`, which holds `len` values.
///
/// # Safety
/// `m` must be a live handle; `out` must be valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn pnm_matrix_copy(m: *const PnmMatrix, out: *mut f64, len: usize) -> PnmStatus {
    guard(|| {
        let m = deref(m, "m")?;
        let src = m.0.as_slice();
        if len < src.len() {
            return Err(Failure(
                PnmStatus::BufferTooSmall,
                format!("need {} values, have {len}", src.len()),
            ));
        }
        slice_mut(out, src.len(), "out")?.copy_from_slice(src);
        Ok(())
    })
}

/// Soft permutation of square `logits` at temperature `tau` after
/// `iterations` row/column normalization rounds.
///
/// # Safety
/// `logits` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pnm_soft_permutation(
    logits: *const PnmMatrix,
    tau: f64,
    iterations: usize,
    out: *mut *mut PnmMatrix,
) -> PnmStatus {
    guard(|| {
        let logits = deref(logits, "logits")?;
        let p = soft_permutation(&logits.0, tau, iterations)?;
        write_out(out, boxed(PnmMatrix(p.into_matrix())), "out")
    })
}

/// Permutation maximizing `Σⱼ m[perm[j], j]`. `perm` receives `n` indices.
///
/// # Safety
/// `m` must be a live square handle; `perm` must be valid for `len` writes;
/// `objective` may be null.
#[no_mangle]
pub unsafe extern "C" fn pnm_solve_lsa(
    m: *const PnmMatrix,
    perm: *mut usize,
    len: usize,
    objective: *mut f64,
) -> PnmStatus {
    guard(|| {
        let m = deref(m, "m")?;
        let a = solve_lsa(&m.0)?;
        let p = a.perm.as_slice();
        if len < p.len() {
            return Err(Failure(
                PnmStatus::BufferTooSmall,
                format!("need {} indices, have {len}", p.len()),
            ));
        }
        slice_mut(perm, p.len(), "perm")?.copy_from_slice(p);
        if !objective.is_null() {
            objective.write(a.objective);
        }
        Ok(())
    })
}

/// Importance scores of `weight`: magnitude when `calibration` is null,
/// Wanda (`|W|` times input column norms) otherwise.
///
/// # Safety
/// `weight` must be a live handle; `calibration` null or live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pnm_importance_scores(
    weight: *const PnmMatrix,
    calibration: *const PnmMatrix,
    out: *mut *mut PnmMatrix,
) -> PnmStatus {
    guard(|| {
        let w = deref(weight, "weight")?;
        let s = match calibration.as_ref() {
            Some(x) => wanda_scores(&w.0, &x.0)?,
            None => magnitude_scores(&w.0)?,
        };
        write_out(out, boxed(PnmMatrix(s.into_matrix())), "out")
    })
}

/// 0/1 mask pruning `n_zero` of every `group` columns of `scores`, keeping
/// the largest (lower index on ties).
///
/// # Safety
/// `scores` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pnm_nm_mask(
    scores: *const PnmMatrix,
    n_zero: usize,
    group: usize,
    out: *mut *mut PnmMatrix,
) -> PnmStatus {
    guard(|| {
        let s = deref(scores, "scores")?;
        let mask = nm_mask(&ImportanceScores::new(s.0.clone())?, nm(n_zero, group)?)?;
        write_out(out, boxed(PnmMatrix(mask.matrix().clone())), "out")
    })
}

/// Block-confined channel permutation from the score-maximizing heuristic.
/// `perm` receives one index per column of `scores`.
///
/// # Safety
/// `scores` must be a live handle; `perm` must be valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn pnm_heuristic_permutation(
    scores: *const PnmMatrix,
    n_zero: usize,
    group: usize,
    block_size: usize,
    perm: *mut usize,
    len: usize,
) -> PnmStatus {
    guard(|| {
        let s = deref(scores, "scores")?;
        let cols = s.0.cols();
        if len < cols {
            return Err(Failure(
                PnmStatus::BufferTooSmall,
                format!("need {cols} indices, have {len}"),
            ));
        }
        let layout = BlockLayout::uniform(cols, block_size)?;
        let p = heuristic_cp(&ImportanceScores::new(s.0.clone())?, nm(n_zero, group)?, &layout)?;
        slice_mut(perm, cols, "perm")?.copy_from_slice(p.as_slice());
        Ok(())
    })
}

/// Number of ways to split `channels` into unordered groups of `group`,
/// as a decimal string. Release with [`pnm_string_free`].
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pnm_count_partitions(channels: usize, group: usize, out: *mut *mut c_char) -> PnmStatus {
    guard(|| {
        let n = count_partitions(channels, group)?;
        write_out(out, into_c_string(n.to_string())?, "out")
    })
}

/// Packs an N:M-valid weight matrix (values cast to `f32`).
///
/// # Safety
/// `weight` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pnm_compress(
    weight: *const PnmMatrix,
    n_zero: usize,
    group: usize,
    out: *mut *mut PnmCompressed,
) -> PnmStatus {
    guard(|| {
        let w = deref(weight, "weight")?;
        let c = compress_nm(&w.0.cast::<f32>(), nm(n_zero, group)?)?;
        write_out(out, boxed(PnmCompressed(c)), "out")
    })
}

/// Parses a serialized compressed stream.
///
/// # Safety
/// `bytes` must be valid for `len` reads; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pnm_compressed_from_bytes(
    bytes: *const u8,
    len: usize,
    out: *mut *mut PnmCompressed,
) -> PnmStatus {
    guard(|| {
        let c = CompressedNm::from_bytes(slice(bytes, len, "bytes")?)?;
        write_out(out, boxed(PnmCompressed(c)), "out")
    })
}

/// Serializes `c` into `buf`. `written` always receives the size needed;
/// the status is `BufferTooSmall` if `len` is short.
///
/// # Safety
/// `c` must be a live handle; `buf` valid for `len` writes; `written` writable.
#[no_mangle]
pub unsafe extern "C" fn pnm_compressed_to_bytes(
    c: *const PnmCompressed,
    buf: *mut u8,
    len: usize,
    written: *mut usize,
) -> PnmStatus {
    guard(|| {
        let bytes = deref(c, "c")?.0.to_bytes();
        write_out(written, bytes.len(), "written")?;
        if len < bytes.len() {
            return Err(Failure(
                PnmStatus::BufferTooSmall,
                format!("need {} bytes, have {len}", bytes.len()),
            ));
        }
        slice_mut(buf, bytes.len(), "buf")?.copy_from_slice(&bytes);
        Ok(())
    })
}

/// Expands `c` back to a dense matrix.
///
/// # Safety
/// `c` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pnm_decompress(c: *const PnmCompressed, out: *mut *mut PnmMatrix) -> PnmStatus {
    guard(|| {
        let d = decompress_nm(&deref(c, "c")?.0)?;
        write_out(out, boxed(PnmMatrix(d.cast::<f64>())), "out")
    })
}

/// Releases a compressed matrix. Null is ignored.
///
/// # Safety
/// `c` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pnm_compressed_free(c: *mut PnmCompressed) {
    if !c.is_null() {
        drop(Box::from_raw(c));
    }
}

/// Runs the comparison command. `config_json` is a JSON object with at
/// least `model` and `calib` paths; other fields override the defaults.
/// `out` receives the report as JSON; release it with [`pnm_string_free`].
///
/// # Safety
/// `config_json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pnm_compare(config_json: *const c_char, out: *mut *mut c_char) -> PnmStatus {
    guard(|| {
        let cfg = run_config(str_arg(config_json, "config_json")?)?;
        let report = cli_compare(&cfg)?;
        write_out(out, into_c_string(report.to_json()?)?, "out")
    })
}

/// Runs the prune command, writing artifacts under `out_dir`. `out`
/// receives the report as JSON; release it with [`pnm_string_free`].
///
/// # Safety
/// Both strings must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pnm_prune(
    config_json: *const c_char,
    out_dir: *const c_char,
    out: *mut *mut c_char,
) -> PnmStatus {
    guard(|| {
        let cfg = run_config(str_arg(config_json, "config_json")?)?;
        let dir = PathBuf::from(str_arg(out_dir, "out_dir")?);
        let art = cli_prune(&cfg, &dir)?;
        write_out(out, into_c_string(art.report.to_json()?)?, "out")
    })
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pnm_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

fn into_c_string(s: String) -> FfiResult<*mut c_char> {
    Ok(CString::new(s)
        .map_err(|_| Failure(PnmStatus::Internal, "string contains NUL".into()))?
        .into_raw())
}

fn run_config(json: &str) -> FfiResult<RunConfig> {
    let overrides: serde_json::Value = serde_json::from_str(json).map_err(Error::from)?;
    let obj = overrides
        .as_object()
        .ok_or_else(|| invalid("config must be a JSON object"))?;
    let path = |k: &str| {
        obj.get(k)
            .and_then(|v| v.as_str())
            .ok_or_else(|| invalid(format!("config needs a string `{k}`")))
    };
    let base = RunConfig::new(path("model")?, path("calib")?);
    let mut merged = serde_json::to_value(base).map_err(Error::from)?;
    let fields = merged.as_object_mut().expect("RunConfig serializes to an object");
    for (k, v) in obj {
        if !fields.contains_key(k) {
            return Err(invalid(format!("unknown config field `{k}`")));
        }
        fields.insert(k.clone(), v.clone());
    }
    Ok(serde_json::from_value(merged).map_err(Error::from)?)
}
