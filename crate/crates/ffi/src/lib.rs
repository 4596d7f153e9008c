//! C ABI for the tracker.
//!
//! Every fallible call returns an [`MtStatus`]; on failure a message is kept
//! per thread and read back with [`mt_last_error_message`]. Handles are
//! opaque and owned by the caller until passed to their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::{ptr, slice};

use mambatrack::events::{voxelize, BBox, Event, EventStream};
use mambatrack::harness::{Checkpoint, Trained, Tracker};
use mambatrack::head::{evaluate, SrMode};
use mambatrack::numerics::Tensor;
use mambatrack::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MtStatus {
    Ok = 0,
    /// Bad shape, value or config.
    InvalidArgument = 1,
    /// Non-finite value or failed numerical check.
    Numeric = 2,
    /// File missing, unreadable or malformed.
    Io = 3,
    NullPointer = 4,
    /// A Rust panic was caught at the boundary.
    Panic = 5,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MtEvent {
    pub x: u16,
    pub y: u16,
    /// Microseconds, non-decreasing across the array.
    pub t: i64,
    /// +1 or -1.
    pub p: i8,
}

/// Center, width and height in pixels.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MtBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// Percentages in `[0, 100]`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MtMetrics {
    pub sr: f64,
    pub pr: f64,
    pub npr: f64,
}

/// A restored checkpoint plus, once initialised, a running track.
pub struct MtTracker {
    trained: Trained,
    track: Option<Tracker>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> MtStatus {
    match e.exit_code() {
        1 => MtStatus::InvalidArgument,
        2 => MtStatus::Numeric,
        _ => MtStatus::Io,
    }
}

/// Runs `f`, turning errors and panics into a status plus stored message.
fn guard(f: impl FnOnce() -> Result<(), (MtStatus, String)>) -> MtStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MtStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            MtStatus::Panic
        }
    }
}

fn core(e: Error) -> (MtStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (MtStatus, String) {
    (MtStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> (MtStatus, String) {
    (MtStatus::InvalidArgument, msg.into())
}

/// # Safety
/// `p` must be null or valid for `n` reads.
unsafe fn view<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], (MtStatus, String)> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, n))
}

fn to_box(b: &MtBox) -> BBox {
    BBox::new(b.cx, b.cy, b.w, b.h)
}

fn from_box(b: &BBox) -> MtBox {
    MtBox {
        cx: b.cx,
        cy: b.cy,
        w: b.w,
        h: b.h,
    }
}

/// Message of the last failed call on this thread, or null. The pointer stays
/// valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn mt_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mt_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Accumulates a time surface of `height × width` cells into `out_grid`
/// (row-major, `height·width` doubles) and writes the event density.
///
/// # Safety
/// `events` must hold `n_events` items; `out_grid` must hold `height·width`
/// doubles; `out_density` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mt_voxelize(
    events: *const MtEvent,
    n_events: usize,
    height: u32,
    width: u32,
    t_ref: i64,
    delta_t: i64,
    out_grid: *mut f64,
    out_density: *mut f64,
) -> MtStatus {
    guard(|| {
        let evs = view(events, n_events, "events")?;
        if out_grid.is_null() {
            return Err(null("out_grid"));
        }
        if out_density.is_null() {
            return Err(null("out_density"));
        }
        let (h, w) = (height as usize, width as usize);
        let evs: Vec<Event> = evs
            .iter()
            .map(|e| Event {
                x: e.x,
                y: e.y,
                t: e.t,
                p: e.p,
            })
            .collect();
        let stream = EventStream::new(evs, h, w).map_err(core)?;
        let s = voxelize(&stream, t_ref, delta_t, h, w).map_err(core)?;
        slice::from_raw_parts_mut(out_grid, h * w).copy_from_slice(s.grid.data());
        *out_density = s.density;
        Ok(())
    })
}

/// SR, PR and NPR of `n` predicted boxes against ground truth. SR is the
/// area under the success curve, or the fraction at IoU 0.5 when `sr_t50`.
///
/// # Safety
/// `preds` and `gts` must hold `n` boxes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mt_evaluate(
    preds: *const MtBox,
    gts: *const MtBox,
    n: usize,
    sr_t50: bool,
    out: *mut MtMetrics,
) -> MtStatus {
    guard(|| {
        let p: Vec<BBox> = view(preds, n, "preds")?.iter().map(to_box).collect();
        let g: Vec<BBox> = view(gts, n, "gts")?.iter().map(to_box).collect();
        if out.is_null() {
            return Err(null("out"));
        }
        let mode = if sr_t50 { SrMode::T50 } else { SrMode::Auc };
        let m = evaluate(&p, &g, mode).map_err(core)?;
        *out = MtMetrics {
            sr: m.sr,
            pr: m.pr,
            npr: m.npr,
        };
        Ok(())
    })
}

/// Loads an `MTCK` checkpoint into a new tracker handle.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mt_tracker_load(path: *const c_char, out: *mut *mut MtTracker) -> MtStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| invalid("path is not UTF-8"))?;
        let trained = Checkpoint::load(Path::new(path))
            .and_then(|c| c.restore())
            .map_err(core)?;
        *out = Box::into_raw(Box::new(MtTracker {
            trained,
            track: None,
        }));
        Ok(())
    })
}

/// Releases a tracker. Null is ignored.
///
/// # Safety
/// `tracker` must come from [`mt_tracker_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mt_tracker_free(tracker: *mut MtTracker) {
    if !tracker.is_null() {
        drop(Box::from_raw(tracker));
    }
}

/// # Safety
/// `rgb` must hold `h·w·3` doubles and `surface` `h·w`.
unsafe fn frame(rgb: *const f64, surface: *const f64, height: u32, width: u32) -> Result<(Tensor, Tensor), (MtStatus, String)> {
    let (h, w) = (height as usize, width as usize);
    if h == 0 || w == 0 {
        return Err(invalid("frame must be non-empty"));
    }
    let rgb = view(rgb, h * w * 3, "rgb")?.to_vec();
    let surface = view(surface, h * w, "surface")?.to_vec();
    Ok((
        Tensor::new(&[h, w, 3], rgb).map_err(core)?,
        Tensor::new(&[h, w, 1], surface).map_err(core)?,
    ))
}

/// Starts a track on the first frame. `rgb` is interleaved `[h][w][3]`,
/// `surface` is `[h][w]` (see [`mt_voxelize`]). Restarts any running track.
///
/// # Safety
/// `tracker` must be a live handle; buffers as in the frame layout above.
#[no_mangle]
pub unsafe extern "C" fn mt_tracker_init(
    tracker: *mut MtTracker,
    rgb: *const f64,
    surface: *const f64,
    height: u32,
    width: u32,
    init: MtBox,
) -> MtStatus {
    guard(|| {
        let t = tracker.as_mut().ok_or_else(|| null("tracker"))?;
        let (rgb, surface) = frame(rgb, surface, height, width)?;
        let tr = Tracker::new(&t.trained.model, &rgb, &surface, to_box(&init)).map_err(core)?;
        t.track = Some(tr);
        Ok(())
    })
}

/// Tracks one more frame and writes the predicted box.
///
/// # Safety
/// As for [`mt_tracker_init`]; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mt_tracker_step(
    tracker: *mut MtTracker,
    rgb: *const f64,
    surface: *const f64,
    height: u32,
    width: u32,
    density: f64,
    out: *mut MtBox,
) -> MtStatus {
    guard(|| {
        let t = tracker.as_mut().ok_or_else(|| null("tracker"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let (rgb, surface) = frame(rgb, surface, height, width)?;
        let track = t
            .track
            .as_mut()
            .ok_or_else(|| invalid("tracker was not initialised"))?;
        let b = track
            .step(&t.trained.model, &t.trained.store, &rgb, &surface, density)
            .map_err(core)?;
        *out = from_box(&b);
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn core_errors_map_to_statuses() {
        assert_eq!(status_of(&Error::Param("x".into())), MtStatus::InvalidArgument);
        assert_eq!(status_of(&Error::Format { what: "x", msg: "y".into() }), MtStatus::Io);
        assert_eq!(status_of(&Error::NanLoss(3)), MtStatus::Numeric);
    }

    #[test]
    fn panics_are_caught_and_cleared_on_success() {
        assert_eq!(guard(|| panic!("boom")), MtStatus::Panic);
        assert!(!mt_last_error_message().is_null());
        assert_eq!(guard(|| Ok(())), MtStatus::Ok);
        assert!(mt_last_error_message().is_null());
    }
}
