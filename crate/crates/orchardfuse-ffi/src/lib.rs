//! C ABI over the reconstruction and measurement pipeline.
//!
//! Conventions, shared by every function here:
//!
//! - Point clouds cross the boundary as opaque `OfCloud` handles. Handles
//!   come from `of_cloud_load_ply` / `of_cloud_from_arrays` and must be
//!   released with `of_cloud_free` exactly once.
//! - Every fallible call returns an [`OfStatus`]; anything but `OF_STATUS_OK`
//!   (or `OF_STATUS_NO_OVERLAP`, a real fitness outcome) leaves a
//!   human-readable message readable through `of_last_error`. The message
//!   pointer stays valid until the next failing call on the same thread.
//! - Rigid transforms are 16 doubles, row-major homogeneous, both in and out.
//! - Configuration travels as JSON text matching the library's config
//!   types; null means defaults. Unknown keys are rejected.
//! - Strings returned by the library (`of_measure_json`) are released with
//!   `of_string_free`, nothing else.
//! - Panics never unwind across the boundary; they become
//!   `OF_STATUS_COMPUTATION_FAILED` with the panic text as the message.

use orchardfuse::evaluation::{fitness_score, FitnessOutcome, DEFAULT_FITNESS_MAX_DIST_M};
use orchardfuse::geometry::{LabeledPointCloud, PointLabel, RigidTransform, Vec3};
use orchardfuse::ingest::{load_ply, save_ply, IngestError, PlyFormat};
use orchardfuse::measurement::{measure_tree, MeasurementConfig, MeasurementError};
use orchardfuse::registration::{register, RegistrationConfig, RegistrationError};
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

/// Result of every fallible call in this ABI.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OfStatus {
    /// The call succeeded.
    Ok = 0,
    /// A pointer, count, or configuration value was unusable.
    InvalidArgument = 1,
    /// Reading or writing a file failed.
    IoError = 2,
    /// The computation itself failed (degenerate geometry, divergence).
    ComputationFailed = 3,
    /// Fitness only: no point pair fell within the pairing cutoff.
    NoOverlap = 4,
    /// An output buffer is smaller than the data it must receive.
    BufferTooSmall = 5,
}

/// Opaque labeled point cloud handle.
pub struct OfCloud {
    inner: LabeledPointCloud,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: String) {
    let sanitized = msg.replace('\0', " ");
    let cstring = CString::new(sanitized).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = cstring);
}

fn fail(status: OfStatus, msg: String) -> OfStatus {
    set_last_error(msg);
    status
}

/// Message of the most recent failure on this thread, empty if none yet.
/// The pointer stays valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn of_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

fn guard(f: impl FnOnce() -> OfStatus) -> OfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".to_string());
            fail(OfStatus::ComputationFailed, format!("internal panic: {msg}"))
        }
    }
}

unsafe fn cloud_arg<'a>(p: *const OfCloud, name: &str) -> Result<&'a LabeledPointCloud, OfStatus> {
    if p.is_null() {
        return Err(fail(OfStatus::InvalidArgument, format!("{name} is null")));
    }
    Ok(&(*p).inner)
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, OfStatus> {
    if p.is_null() {
        return Err(fail(OfStatus::InvalidArgument, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| fail(OfStatus::InvalidArgument, format!("{name} is not UTF-8: {e}")))
}

/// Null means identity; otherwise 16 row-major values forming a rigid motion.
unsafe fn transform_arg(p: *const f64, name: &str) -> Result<RigidTransform, OfStatus> {
    if p.is_null() {
        return Ok(RigidTransform::identity());
    }
    let values: &[f64] = std::slice::from_raw_parts(p, 16);
    let array: [f64; 16] = values.try_into().expect("slice of length 16");
    RigidTransform::from_row_major(&array)
        .map_err(|e| fail(OfStatus::InvalidArgument, format!("{name}: {e}")))
}

fn config_from_json<T: serde::de::DeserializeOwned + Default>(
    json: Option<&str>,
    name: &str,
) -> Result<T, OfStatus> {
    match json {
        None => Ok(T::default()),
        Some(text) => serde_json::from_str(text)
            .map_err(|e| fail(OfStatus::InvalidArgument, format!("{name}: {e}"))),
    }
}

fn ingest_status(e: &IngestError) -> OfStatus {
    match e {
        IngestError::Io { .. } => OfStatus::IoError,
        _ => OfStatus::InvalidArgument,
    }
}

unsafe fn write_out<T>(slot: *mut T, value: T) {
    if !slot.is_null() {
        *slot = value;
    }
}

/// Build a cloud from `count` interleaved xyz points (3*count doubles) and
/// optional per-point label codes (0 background, 1 trunk, 2 branch,
/// 3 clutter). A null `labels` marks every point as trunk.
///
/// # Safety
/// `xyz` must point to 3*count readable doubles (unless count is 0),
/// `labels` to `count` readable bytes or null, and `out_cloud` to a
/// writable pointer slot.
#[no_mangle]
pub unsafe extern "C" fn of_cloud_from_arrays(
    xyz: *const f64,
    labels: *const u8,
    count: usize,
    out_cloud: *mut *mut OfCloud,
) -> OfStatus {
    guard(|| {
        if out_cloud.is_null() {
            return fail(OfStatus::InvalidArgument, "out_cloud is null".into());
        }
        if count > 0 && xyz.is_null() {
            return fail(OfStatus::InvalidArgument, "xyz is null".into());
        }
        let mut points = Vec::with_capacity(count);
        for i in 0..count {
            let base = xyz.add(3 * i);
            points.push(Vec3::new(*base, *base.add(1), *base.add(2)));
        }
        let label_values = if labels.is_null() {
            vec![PointLabel::Trunk; count]
        } else {
            let codes = std::slice::from_raw_parts(labels, count);
            let mut out = Vec::with_capacity(count);
            for (i, &code) in codes.iter().enumerate() {
                match PointLabel::from_code(code) {
                    Ok(label) => out.push(label),
                    Err(e) => {
                        return fail(OfStatus::InvalidArgument, format!("labels[{i}]: {e}"));
                    }
                }
            }
            out
        };
        match LabeledPointCloud::new(points, label_values) {
            Ok(cloud) => {
                *out_cloud = Box::into_raw(Box::new(OfCloud { inner: cloud }));
                OfStatus::Ok
            }
            Err(e) => fail(OfStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Load a labeled cloud from a PLY file.
///
/// # Safety
/// `path` must be a readable NUL-terminated string and `out_cloud` a
/// writable pointer slot.
#[no_mangle]
pub unsafe extern "C" fn of_cloud_load_ply(
    path: *const c_char,
    out_cloud: *mut *mut OfCloud,
) -> OfStatus {
    guard(|| {
        if out_cloud.is_null() {
            return fail(OfStatus::InvalidArgument, "out_cloud is null".into());
        }
        let path = match str_arg(path, "path") {
            Ok(p) => p,
            Err(status) => return status,
        };
        match load_ply(Path::new(path)) {
            Ok(cloud) => {
                *out_cloud = Box::into_raw(Box::new(OfCloud { inner: cloud }));
                OfStatus::Ok
            }
            Err(e) => fail(ingest_status(&e), e.to_string()),
        }
    })
}

/// Save a cloud as PLY; nonzero `binary` selects binary little-endian,
/// zero selects ASCII.
///
/// # Safety
/// `cloud` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn of_cloud_save_ply(
    cloud: *const OfCloud,
    path: *const c_char,
    binary: i32,
) -> OfStatus {
    guard(|| {
        let cloud = match cloud_arg(cloud, "cloud") {
            Ok(c) => c,
            Err(status) => return status,
        };
        let path = match str_arg(path, "path") {
            Ok(p) => p,
            Err(status) => return status,
        };
        let format = if binary != 0 {
            PlyFormat::BinaryLittleEndian
        } else {
            PlyFormat::Ascii
        };
        match save_ply(cloud, Path::new(path), format) {
            Ok(()) => OfStatus::Ok,
            Err(e) => fail(ingest_status(&e), e.to_string()),
        }
    })
}

/// Number of points in the cloud; 0 for a null handle.
///
/// # Safety
/// `cloud` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn of_cloud_len(cloud: *const OfCloud) -> usize {
    if cloud.is_null() {
        0
    } else {
        (*cloud).inner.len()
    }
}

/// Copy the points into `out_xyz` as interleaved xyz (3 doubles per point).
/// `capacity_points` is the number of points the buffer can hold.
///
/// # Safety
/// `out_xyz` must point to 3*capacity_points writable doubles.
#[no_mangle]
pub unsafe extern "C" fn of_cloud_points(
    cloud: *const OfCloud,
    out_xyz: *mut f64,
    capacity_points: usize,
) -> OfStatus {
    guard(|| {
        let cloud = match cloud_arg(cloud, "cloud") {
            Ok(c) => c,
            Err(status) => return status,
        };
        if capacity_points < cloud.len() {
            return fail(
                OfStatus::BufferTooSmall,
                format!("buffer holds {capacity_points} points, cloud has {}", cloud.len()),
            );
        }
        if cloud.is_empty() {
            return OfStatus::Ok;
        }
        if out_xyz.is_null() {
            return fail(OfStatus::InvalidArgument, "out_xyz is null".into());
        }
        for (i, p) in cloud.points().iter().enumerate() {
            let base = out_xyz.add(3 * i);
            *base = p.x;
            *base.add(1) = p.y;
            *base.add(2) = p.z;
        }
        OfStatus::Ok
    })
}

/// Copy the per-point label codes into `out_labels`.
///
/// # Safety
/// `out_labels` must point to `capacity_points` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn of_cloud_labels(
    cloud: *const OfCloud,
    out_labels: *mut u8,
    capacity_points: usize,
) -> OfStatus {
    guard(|| {
        let cloud = match cloud_arg(cloud, "cloud") {
            Ok(c) => c,
            Err(status) => return status,
        };
        if capacity_points < cloud.len() {
            return fail(
                OfStatus::BufferTooSmall,
                format!("buffer holds {capacity_points} labels, cloud has {}", cloud.len()),
            );
        }
        if cloud.is_empty() {
            return OfStatus::Ok;
        }
        if out_labels.is_null() {
            return fail(OfStatus::InvalidArgument, "out_labels is null".into());
        }
        for (i, &label) in cloud.labels().iter().enumerate() {
            *out_labels.add(i) = label.code();
        }
        OfStatus::Ok
    })
}

/// Release a cloud handle. Null is a no-op.
///
/// # Safety
/// `cloud` must be a handle from this library that has not been freed yet,
/// or null.
#[no_mangle]
pub unsafe extern "C" fn of_cloud_free(cloud: *mut OfCloud) {
    if !cloud.is_null() {
        drop(Box::from_raw(cloud));
    }
}

/// Align `source` onto `target`.
///
/// `init_transform` (16 row-major doubles or null for identity) seeds the
/// solve; `config_json` configures it (null for defaults, same schema as
/// the library's registration config, e.g. `{"method":"fast_gicp"}`).
/// `out_transform` receives the solved source-to-target motion. The
/// optional outputs receive the final fitness (m), accepted iteration
/// count, and a 0/1 convergence flag; reaching the iteration cap is
/// reported through the flag, not as an error.
///
/// # Safety
/// Cloud handles must be live; `out_transform` must point to 16 writable
/// doubles; optional outputs must be writable or null.
#[no_mangle]
pub unsafe extern "C" fn of_register(
    source: *const OfCloud,
    target: *const OfCloud,
    init_transform: *const f64,
    config_json: *const c_char,
    out_transform: *mut f64,
    out_fitness_m: *mut f64,
    out_iterations: *mut u64,
    out_converged: *mut i32,
) -> OfStatus {
    guard(|| {
        let source = match cloud_arg(source, "source") {
            Ok(c) => c,
            Err(status) => return status,
        };
        let target = match cloud_arg(target, "target") {
            Ok(c) => c,
            Err(status) => return status,
        };
        if out_transform.is_null() {
            return fail(OfStatus::InvalidArgument, "out_transform is null".into());
        }
        let init = match transform_arg(init_transform, "init_transform") {
            Ok(t) => t,
            Err(status) => return status,
        };
        let json = if config_json.is_null() {
            None
        } else {
            match str_arg(config_json, "config_json") {
                Ok(s) => Some(s),
                Err(status) => return status,
            }
        };
        let cfg: RegistrationConfig = match config_from_json(json, "config_json") {
            Ok(c) => c,
            Err(status) => return status,
        };
        match register(source, target, &init, &cfg) {
            Ok(result) => {
                let matrix = result.transform.to_row_major();
                std::ptr::copy_nonoverlapping(matrix.as_ptr(), out_transform, 16);
                write_out(out_fitness_m, result.fitness_m);
                write_out(out_iterations, result.iterations as u64);
                write_out(out_converged, i32::from(result.converged));
                OfStatus::Ok
            }
            Err(e @ RegistrationError::BadConfig { .. }) => {
                fail(OfStatus::InvalidArgument, e.to_string())
            }
            Err(e) => fail(OfStatus::ComputationFailed, e.to_string()),
        }
    })
}

/// Alignment fitness of `transform(source)` against `target`: mean
/// nearest-neighbor displacement over the pairs within `max_dist_m`
/// (non-positive selects the default cutoff). Returns
/// `OF_STATUS_NO_OVERLAP` when nothing pairs; the outputs are written
/// only on `OF_STATUS_OK`.
///
/// # Safety
/// Cloud handles must be live; `transform` must be null or 16 readable
/// doubles; optional outputs must be writable or null.
#[no_mangle]
pub unsafe extern "C" fn of_fitness(
    source: *const OfCloud,
    target: *const OfCloud,
    transform: *const f64,
    max_dist_m: f64,
    out_fitness_m: *mut f64,
    out_mse_m2: *mut f64,
    out_pair_count: *mut u64,
) -> OfStatus {
    guard(|| {
        let source = match cloud_arg(source, "source") {
            Ok(c) => c,
            Err(status) => return status,
        };
        let target = match cloud_arg(target, "target") {
            Ok(c) => c,
            Err(status) => return status,
        };
        let transform = match transform_arg(transform, "transform") {
            Ok(t) => t,
            Err(status) => return status,
        };
        let cutoff = if max_dist_m > 0.0 {
            max_dist_m
        } else {
            DEFAULT_FITNESS_MAX_DIST_M
        };
        match fitness_score(source, target, &transform, cutoff) {
            Ok(FitnessOutcome::Overlap(report)) => {
                write_out(out_fitness_m, report.fitness_m);
                write_out(out_mse_m2, report.mse_m2);
                write_out(out_pair_count, report.pair_count as u64);
                OfStatus::Ok
            }
            Ok(FitnessOutcome::NoOverlap { .. }) => fail(
                OfStatus::NoOverlap,
                format!("no point pair within {cutoff} m"),
            ),
            Err(e) => fail(OfStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Measure trunk and branch structure of a labeled cloud and return the
/// report as a JSON string (released with `of_string_free`). `config_json`
/// matches the library's measurement config; null means defaults.
///
/// # Safety
/// `cloud` must be a live handle; `out_json` must be a writable pointer
/// slot; `config_json` must be null or NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn of_measure_json(
    cloud: *const OfCloud,
    config_json: *const c_char,
    out_json: *mut *mut c_char,
) -> OfStatus {
    guard(|| {
        let cloud = match cloud_arg(cloud, "cloud") {
            Ok(c) => c,
            Err(status) => return status,
        };
        if out_json.is_null() {
            return fail(OfStatus::InvalidArgument, "out_json is null".into());
        }
        let json = if config_json.is_null() {
            None
        } else {
            match str_arg(config_json, "config_json") {
                Ok(s) => Some(s),
                Err(status) => return status,
            }
        };
        let cfg: MeasurementConfig = match config_from_json(json, "config_json") {
            Ok(c) => c,
            Err(status) => return status,
        };
        match measure_tree(cloud, &cfg) {
            Ok(report) => {
                let text = serde_json::to_string_pretty(&report)
                    .expect("measurement reports serialize");
                let cstring = CString::new(text).expect("JSON has no NUL bytes");
                *out_json = cstring.into_raw();
                OfStatus::Ok
            }
            Err(e @ MeasurementError::BadConfig { .. }) => {
                fail(OfStatus::InvalidArgument, e.to_string())
            }
            Err(e) => fail(OfStatus::ComputationFailed, e.to_string()),
        }
    })
}

/// Release a string returned by this library. Null is a no-op.
///
/// # Safety
/// `s` must have come from this library and not been freed yet, or null.
#[no_mangle]
pub unsafe extern "C" fn of_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
