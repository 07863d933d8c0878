//! C interface to the `insp` library.
//!
//! Networks and operators cross the boundary as opaque handles owned by the
//! caller and released with the matching `*_free` function. Every fallible
//! call returns an [`InspStatus`]; on failure a description of the most
//! recent error on the calling thread is available through
//! [`insp_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use insp::deriv::{stack_len, JetEngine};
use insp::fitting::{fit_inr, Architecture, ConstraintSet, TrainConfig};
use insp::inr::{load_inr, save_inr, SirenNetwork};
use insp::insp_op::{load_operator, process, EdgeMode, InspOperator};
use insp::numerics::AdamWConfig;
use insp::Error;

/// Result codes shared by every fallible function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InspStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Numerical = 3,
    Format = 4,
    Capability = 5,
    Io = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

/// Opaque fitted network.
pub struct InspInr {
    net: SirenNetwork,
}

/// Opaque derivative-stack operator.
pub struct InspOp {
    op: InspOperator,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> InspStatus {
    match e {
        Error::Contract(_) | Error::Config(_) | Error::EmptyDataset => InspStatus::InvalidArgument,
        Error::NonFiniteGradient { .. } | Error::Divergence { .. } | Error::Conditioning { .. } => InspStatus::Numerical,
        Error::Capability(_) => InspStatus::Capability,
        Error::Io { .. } => InspStatus::Io,
        _ => InspStatus::Format,
    }
}

enum Failure {
    Status(InspStatus, String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn null() -> Failure {
    Failure::Status(InspStatus::NullPointer, "null pointer argument".into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> InspStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => InspStatus::Ok,
        Ok(Err(Failure::Status(s, msg))) => {
            set_error(msg);
            s
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            InspStatus::Panic
        }
    }
}

/// # Safety
/// `p` must be null or valid for reads of `len` elements.
unsafe fn input<'a, T>(p: *const T, len: usize) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null());
    }
    Ok(slice::from_raw_parts(p, len))
}

/// # Safety
/// `p` must be null or valid for writes of `len` elements.
unsafe fn output<'a, T>(p: *mut T, len: usize) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null());
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

fn fill(dst: &mut [f64], src: &[f64]) -> Result<(), Failure> {
    if dst.len() < src.len() {
        return Err(Failure::Status(
            InspStatus::BufferTooSmall,
            format!("output buffer holds {} values, {} needed", dst.len(), src.len()),
        ));
    }
    dst[..src.len()].copy_from_slice(src);
    Ok(())
}

/// Copies the calling thread's last error message, NUL-terminated and
/// truncated to `len` bytes, into `buf`. Returns the full message length
/// excluding the terminator.
///
/// # Safety
/// `buf` must be null or valid for writes of `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn insp_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Number of partial derivatives of order at most `order` in `m` variables.
#[no_mangle]
pub extern "C" fn insp_stack_len(m: usize, order: usize) -> usize {
    stack_len(m, order)
}

/// Parses a network file held in memory.
///
/// # Safety
/// `bytes` must be valid for reads of `len` bytes and `out` valid for a
/// pointer write.
#[no_mangle]
pub unsafe extern "C" fn insp_inr_load(bytes: *const u8, len: usize, out: *mut *mut InspInr) -> InspStatus {
    guard(|| {
        if out.is_null() {
            return Err(null());
        }
        let net = load_inr(input(bytes, len)?)?;
        *out = Box::into_raw(Box::new(InspInr { net }));
        Ok(())
    })
}

/// Reads a network file from disk.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn insp_inr_load_file(path: *const c_char, out: *mut *mut InspInr) -> InspStatus {
    guard(|| {
        if path.is_null() || out.is_null() {
            return Err(null());
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Failure::Status(InspStatus::InvalidArgument, "path is not UTF-8".into()))?;
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let net = load_inr(&bytes)?;
        *out = Box::into_raw(Box::new(InspInr { net }));
        Ok(())
    })
}

/// Fits a network to `n` samples with `m` coordinates (row-major `n x m`,
/// in `[-1, 1]`) and `c` target channels (row-major `n x c`, in `[0, 1]`).
///
/// # Safety
/// Pointers must be valid for the sizes implied by `n`, `m`, `c` and
/// `n_hidden`; `out` must be valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn insp_inr_fit(
    coords: *const f64,
    targets: *const f64,
    n: usize,
    m: usize,
    c: usize,
    hidden: *const usize,
    n_hidden: usize,
    steps: usize,
    lr: f64,
    seed: u64,
    out: *mut *mut InspInr,
) -> InspStatus {
    guard(|| {
        if out.is_null() {
            return Err(null());
        }
        let coords = input(coords, n * m)?.to_vec();
        let targets = input(targets, n * c)?.iter().map(|v| 2.0 * v - 1.0).collect();
        let data = ConstraintSet::new(m, c, coords, targets)?;
        let arch = Architecture {
            hidden: input(hidden, n_hidden)?.to_vec(),
            ..Default::default()
        };
        let cfg = TrainConfig {
            steps,
            adam: AdamWConfig {
                lr,
                ..Default::default()
            },
            seed,
            ..Default::default()
        };
        let fit = fit_inr(&data, &arch, &cfg)?;
        *out = Box::into_raw(Box::new(InspInr { net: fit.net }));
        Ok(())
    })
}

/// Releases a network handle; null is ignored.
///
/// # Safety
/// `inr` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn insp_inr_free(inr: *mut InspInr) {
    if !inr.is_null() {
        drop(Box::from_raw(inr));
    }
}

/// Coordinate dimension, or 0 for a null handle.
///
/// # Safety
/// `inr` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn insp_inr_input_dim(inr: *const InspInr) -> usize {
    inr.as_ref().map_or(0, |h| h.net.input_dim())
}

/// Output channels, or 0 for a null handle.
///
/// # Safety
/// `inr` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn insp_inr_output_dim(inr: *const InspInr) -> usize {
    inr.as_ref().map_or(0, |h| h.net.output_dim())
}

/// Raw outputs at `n_points` coordinates into `out` (`n_points x c`).
///
/// # Safety
/// `points` must hold `n_points * m` values and `out` `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn insp_inr_forward(
    inr: *const InspInr,
    points: *const f64,
    n_points: usize,
    out: *mut f64,
    out_len: usize,
) -> InspStatus {
    guard(|| {
        let h = inr.as_ref().ok_or_else(null)?;
        let x = input(points, n_points * h.net.input_dim())?;
        let y = h.net.forward_batch(x)?;
        fill(output(out, out_len)?, &y)
    })
}

/// Every partial derivative up to `order` at one point, channel-major
/// (`c x insp_stack_len(m, order)`), in graded multi-index order.
///
/// # Safety
/// `x` must hold `m` values and `out` `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn insp_inr_derivatives(
    inr: *const InspInr,
    x: *const f64,
    order: usize,
    out: *mut f64,
    out_len: usize,
) -> InspStatus {
    guard(|| {
        let h = inr.as_ref().ok_or_else(null)?;
        let x = input(x, h.net.input_dim())?;
        let st = JetEngine::default().eval(&h.net, x, order)?;
        fill(output(out, out_len)?, st.as_slice())
    })
}

/// Serializes a network; the buffer is released with [`insp_bytes_free`].
///
/// # Safety
/// `out` and `len` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn insp_inr_save(inr: *const InspInr, out: *mut *mut u8, len: *mut usize) -> InspStatus {
    guard(|| {
        let h = inr.as_ref().ok_or_else(null)?;
        if out.is_null() || len.is_null() {
            return Err(null());
        }
        let bytes = save_inr(&h.net)?.into_boxed_slice();
        *len = bytes.len();
        *out = Box::into_raw(bytes) as *mut u8;
        Ok(())
    })
}

/// Releases a buffer returned by this library.
///
/// # Safety
/// `bytes`/`len` must come from one earlier call, or `bytes` be null.
#[no_mangle]
pub unsafe extern "C" fn insp_bytes_free(bytes: *mut u8, len: usize) {
    if !bytes.is_null() {
        drop(Box::from_raw(ptr::slice_from_raw_parts_mut(bytes, len)));
    }
}

/// Parses an operator file held in memory.
///
/// # Safety
/// `bytes` must be valid for reads of `len` bytes and `out` for a pointer
/// write.
#[no_mangle]
pub unsafe extern "C" fn insp_operator_load(bytes: *const u8, len: usize, out: *mut *mut InspOp) -> InspStatus {
    guard(|| {
        if out.is_null() {
            return Err(null());
        }
        let op = load_operator(input(bytes, len)?)?;
        *out = Box::into_raw(Box::new(InspOp { op }));
        Ok(())
    })
}

/// Built-in operator: `identity`, `edge` or `laplacian` on `m` coordinates.
///
/// # Safety
/// `name` must be a NUL-terminated string and `out` valid for a pointer
/// write.
#[no_mangle]
pub unsafe extern "C" fn insp_operator_preset(name: *const c_char, m: usize, out: *mut *mut InspOp) -> InspStatus {
    guard(|| {
        if name.is_null() || out.is_null() {
            return Err(null());
        }
        if m == 0 {
            return Err(Failure::Status(InspStatus::InvalidArgument, "m must be positive".into()));
        }
        let op = match CStr::from_ptr(name).to_bytes() {
            b"identity" => InspOperator::identity(m),
            b"edge" => InspOperator::edge_detector(m, EdgeMode::Magnitude),
            b"laplacian" => InspOperator::laplacian(m),
            other => {
                return Err(Failure::Status(
                    InspStatus::InvalidArgument,
                    format!("unknown preset `{}`", String::from_utf8_lossy(other)),
                ))
            }
        };
        *out = Box::into_raw(Box::new(InspOp { op }));
        Ok(())
    })
}

/// Releases an operator handle; null is ignored.
///
/// # Safety
/// `op` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn insp_operator_free(op: *mut InspOp) {
    if !op.is_null() {
        drop(Box::from_raw(op));
    }
}

/// Evaluates `op` applied to `inr` at `n_points` coordinates, writing
/// `n_points x channels` values.
///
/// # Safety
/// `points` must hold `n_points * m` values and `out` `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn insp_operator_apply(
    op: *const InspOp,
    inr: *const InspInr,
    points: *const f64,
    n_points: usize,
    out: *mut f64,
    out_len: usize,
) -> InspStatus {
    guard(|| {
        let o = op.as_ref().ok_or_else(null)?;
        let h = inr.as_ref().ok_or_else(null)?;
        let x = input(points, n_points * h.net.input_dim())?;
        let y = process(&h.net, &o.op)?.eval_batch(x)?;
        fill(output(out, out_len)?, &y)
    })
}
