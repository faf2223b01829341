//! C ABI over the depthwork core: depth maps, metrics, rigid fitting, TSDF
//! fusion and model inference.
//!
//! Every function returns a [`DwStatus`]. On failure a description is kept
//! per thread and can be copied out with [`dw_last_error`]. Objects are
//! opaque handles created by `*_new` / `*_load` and released by `*_free`;
//! passing NULL to a `*_free` function is a no-op.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use depthwork::camera::{fit_rigid, rms_residual, CameraModel, Intrinsics, Pose, Vec3};
use depthwork::grid::{pnm, DepthMap, RgbImage, ValidityMask};
use depthwork::losses::{evaluate, LossError};
use depthwork::model::Model;
use depthwork::tsdf::TsdfVolume;

/// Result of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DwStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    NoValidPixels = 4,
    Degenerate = 5,
    Internal = 6,
}

/// Pinhole intrinsics; `u` runs along columns, `v` along rows.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct DwIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

/// Errors over valid ground-truth pixels, meters.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct DwMetrics {
    pub rmse: f64,
    pub mae: f64,
    pub rel: f64,
    pub n_valid: u64,
}

/// Depth map in meters, 0 marks an invalid pixel.
pub struct DwDepth(DepthMap);

/// TSDF volume.
pub struct DwTsdf(TsdfVolume);

/// Trained depth-completion model.
pub struct DwModel(Model);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn fail(status: DwStatus, msg: impl std::fmt::Display) -> DwStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.to_string());
    status
}

/// Runs `f`, turning panics into `Internal`.
fn guard(f: impl FnOnce() -> DwStatus) -> DwStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(DwStatus::Internal, "internal panic"),
    }
}

macro_rules! non_null {
    ($($p:expr),+) => {
        $(if $p.is_null() {
            return fail(DwStatus::NullPointer, concat!(stringify!($p), " is NULL"));
        })+
    };
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, DwStatus> {
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| fail(DwStatus::InvalidArgument, "path is not UTF-8"))
}

fn intrinsics(k: &DwIntrinsics) -> Result<Intrinsics, DwStatus> {
    Intrinsics::new(k.fx, k.fy, k.cx, k.cy, k.width as usize, k.height as usize).map_err(|e| fail(DwStatus::InvalidArgument, e))
}

unsafe fn camera(k: *const DwIntrinsics, pose: *const f64) -> Result<CameraModel, DwStatus> {
    let intrinsics = intrinsics(&*k)?;
    let m = std::slice::from_raw_parts(pose, 16);
    let pose = Pose::from_matrix4(m).map_err(|e| fail(DwStatus::InvalidArgument, e))?;
    Ok(CameraModel { intrinsics, pose })
}

unsafe fn put<T>(out: *mut *mut T, v: T) {
    *out = Box::into_raw(Box::new(v));
}

/// Copies the calling thread's last error message into `buf` (NUL
/// terminated, truncated to `len`). Returns the full message length.
///
/// # Safety
/// `buf` must point to `len` writable bytes, or be NULL with `len` 0.
#[no_mangle]
pub unsafe extern "C" fn dw_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = e.len().min(len - 1);
            ptr::copy_nonoverlapping(e.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        e.len()
    })
}

/// Depth map from `width * height` row-major values in meters.
///
/// # Safety
/// `data` must point to `width * height` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dw_depth_new(width: u32, height: u32, data: *const f64, out: *mut *mut DwDepth) -> DwStatus {
    guard(|| {
        non_null!(data, out);
        let n = width as usize * height as usize;
        let v = std::slice::from_raw_parts(data, n).to_vec();
        match DepthMap::new(width as usize, height as usize, v) {
            Ok(d) => {
                put(out, DwDepth(d));
                DwStatus::Ok
            }
            Err(e) => fail(DwStatus::InvalidArgument, e),
        }
    })
}

/// Reads a 16-bit millimeter PGM.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dw_depth_load_pgm(path: *const c_char, out: *mut *mut DwDepth) -> DwStatus {
    guard(|| {
        non_null!(path, out);
        let p = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match pnm::read_depth(&p) {
            Ok(d) => {
                put(out, DwDepth(d));
                DwStatus::Ok
            }
            Err(e) => fail(DwStatus::Io, e),
        }
    })
}

/// # Safety
/// `d` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dw_depth_free(d: *mut DwDepth) {
    if !d.is_null() {
        drop(Box::from_raw(d));
    }
}

/// Width and height of `d`.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn dw_depth_size(d: *const DwDepth, width: *mut u32, height: *mut u32) -> DwStatus {
    guard(|| {
        non_null!(d, width, height);
        *width = (*d).0.width() as u32;
        *height = (*d).0.height() as u32;
        DwStatus::Ok
    })
}

/// Copies the row-major values of `d` into `out`, which holds `len` doubles.
///
/// # Safety
/// `out` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn dw_depth_copy(d: *const DwDepth, out: *mut f64, len: usize) -> DwStatus {
    guard(|| {
        non_null!(d, out);
        let src = (*d).0.data();
        if len < src.len() {
            return fail(DwStatus::InvalidArgument, format!("buffer holds {len} values, map has {}", src.len()));
        }
        ptr::copy_nonoverlapping(src.as_ptr(), out, src.len());
        DwStatus::Ok
    })
}

/// RMSE, MAE and relative error of `pred` over the valid pixels of `gt`.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn dw_evaluate(gt: *const DwDepth, pred: *const DwDepth, out: *mut DwMetrics) -> DwStatus {
    guard(|| {
        non_null!(gt, pred, out);
        match evaluate(&(*gt).0, &(*pred).0) {
            Ok(m) => {
                *out = DwMetrics { rmse: m.rmse, mae: m.mae, rel: m.rel, n_valid: m.n_valid as u64 };
                DwStatus::Ok
            }
            Err(LossError::NoValidPixels) => fail(DwStatus::NoValidPixels, "ground truth has no valid pixel"),
            Err(e) => fail(DwStatus::InvalidArgument, e),
        }
    })
}

/// Rigid transform taking `model` points onto `measured` points (`n` xyz
/// triples each). Writes a row-major 4x4 matrix and the RMS residual.
///
/// # Safety
/// `measured` and `model` must hold `3 n` doubles, `pose_out` 16,
/// `rms_out` one.
#[no_mangle]
pub unsafe extern "C" fn dw_fit_rigid(
    measured: *const f64,
    model: *const f64,
    n: usize,
    pose_out: *mut f64,
    rms_out: *mut f64,
) -> DwStatus {
    guard(|| {
        non_null!(measured, model, pose_out, rms_out);
        let pts = |p: *const f64| -> Vec<Vec3> {
            std::slice::from_raw_parts(p, 3 * n).chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect()
        };
        let (a, b) = (pts(measured), pts(model));
        match fit_rigid(&a, &b) {
            Ok(pose) => {
                ptr::copy_nonoverlapping(pose.to_matrix4().as_ptr(), pose_out, 16);
                *rms_out = rms_residual(&pose, &a, &b);
                DwStatus::Ok
            }
            Err(e) => fail(DwStatus::Degenerate, e),
        }
    })
}

/// Empty volume with its minimum corner at `origin`. A `truncation` of 0
/// or less selects four voxels.
///
/// # Safety
/// `origin` and `dims` must hold three values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dw_tsdf_new(
    origin: *const f64,
    dims: *const u32,
    voxel_size: f64,
    truncation: f64,
    out: *mut *mut DwTsdf,
) -> DwStatus {
    guard(|| {
        non_null!(origin, dims, out);
        let o = std::slice::from_raw_parts(origin, 3);
        let d = std::slice::from_raw_parts(dims, 3);
        let trunc = if truncation > 0.0 { truncation } else { 4.0 * voxel_size };
        match TsdfVolume::new(Vec3::new(o[0], o[1], o[2]), [d[0] as usize, d[1] as usize, d[2] as usize], voxel_size, trunc) {
            Ok(v) => {
                put(out, DwTsdf(v));
                DwStatus::Ok
            }
            Err(e) => fail(DwStatus::InvalidArgument, e),
        }
    })
}

/// Fuses one depth frame seen by a camera with the given intrinsics and
/// row-major 4x4 camera-from-world `pose`.
///
/// # Safety
/// All pointers must be valid; `pose` must hold 16 doubles.
#[no_mangle]
pub unsafe extern "C" fn dw_tsdf_integrate(v: *mut DwTsdf, depth: *const DwDepth, k: *const DwIntrinsics, pose: *const f64) -> DwStatus {
    guard(|| {
        non_null!(v, depth, k, pose);
        let cam = match camera(k, pose) {
            Ok(c) => c,
            Err(s) => return s,
        };
        match (*v).0.integrate(&(*depth).0, &cam) {
            Ok(()) => DwStatus::Ok,
            Err(e) => fail(DwStatus::InvalidArgument, e),
        }
    })
}

/// Depth of the fused surface as seen by the camera; unseen pixels are 0.
///
/// # Safety
/// All pointers must be valid; `pose` must hold 16 doubles.
#[no_mangle]
pub unsafe extern "C" fn dw_tsdf_raycast(v: *const DwTsdf, k: *const DwIntrinsics, pose: *const f64, out: *mut *mut DwDepth) -> DwStatus {
    guard(|| {
        non_null!(v, k, pose, out);
        let cam = match camera(k, pose) {
            Ok(c) => c,
            Err(s) => return s,
        };
        put(out, DwDepth((*v).0.raycast_depth(&cam)));
        DwStatus::Ok
    })
}

/// # Safety
/// `v` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dw_tsdf_free(v: *mut DwTsdf) {
    if !v.is_null() {
        drop(Box::from_raw(v));
    }
}

/// Loads a weight file; the architecture comes from the file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dw_model_load(path: *const c_char, out: *mut *mut DwModel) -> DwStatus {
    guard(|| {
        non_null!(path, out);
        let p = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match Model::load(&p) {
            Ok(m) => {
                put(out, DwModel(m));
                DwStatus::Ok
            }
            Err(e) => fail(DwStatus::Io, e),
        }
    })
}

/// Completes `raw` given the color image `rgb` (interleaved, row-major,
/// values in [0, 1], same size as `raw`). Pixels of `raw` that are 0 are
/// treated as holes.
///
/// # Safety
/// `rgb` must hold `3 * width * height` doubles; other pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn dw_model_predict(m: *const DwModel, rgb: *const f64, raw: *const DwDepth, out: *mut *mut DwDepth) -> DwStatus {
    guard(|| {
        non_null!(m, rgb, raw, out);
        let raw = &(*raw).0;
        let (w, h) = (raw.width(), raw.height());
        let px: Vec<[f64; 3]> = std::slice::from_raw_parts(rgb, 3 * w * h).chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        let img = match RgbImage::new(w, h, px) {
            Ok(i) => i,
            Err(e) => return fail(DwStatus::InvalidArgument, e),
        };
        let mask: ValidityMask = raw.validity();
        match (*m).0.predict_depth(&img, raw, &mask) {
            Ok(d) => {
                put(out, DwDepth(d));
                DwStatus::Ok
            }
            Err(e) => fail(DwStatus::InvalidArgument, e),
        }
    })
}

/// # Safety
/// `m` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dw_model_free(m: *mut DwModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}
