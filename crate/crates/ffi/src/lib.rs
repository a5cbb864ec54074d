//! C ABI over `kgs-core`.
//!
//! Every function returns a [`KgsStatus`]; on failure the message is kept
//! per thread and can be read with [`kgs_last_error_message`]. Objects are
//! handed out as opaque pointers and must be released with the matching
//! `*_free` function. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use kgs_core::checkpoint::Checkpoint;
use kgs_core::network::{predict_sequence, Model};
use kgs_core::skeleton::{load_sequence, parse_sequence, prepare, NormalizationParams, SkeletonSequence};
use kgs_core::splat::{build_primitives, render_sequence, HeatmapStack, RenderConfig, Sym2};
use kgs_core::topology::{bhattacharyya_distance, build_prior_adjacency};
use kgs_core::KgsError;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KgsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Parse = 3,
    Field = 4,
    Dimension = 5,
    Data = 6,
    Shape = 7,
    Config = 8,
    Matrix = 9,
    Contract = 10,
    Io = 11,
    BufferTooSmall = 12,
    Panic = 13,
}

impl From<&KgsError> for KgsStatus {
    fn from(err: &KgsError) -> Self {
        match err {
            KgsError::Parse { .. } => KgsStatus::Parse,
            KgsError::Field { .. } => KgsStatus::Field,
            KgsError::Dimension(_) => KgsStatus::Dimension,
            KgsError::Data(_) => KgsStatus::Data,
            KgsError::Shape(_) => KgsStatus::Shape,
            KgsError::Config(_) => KgsStatus::Config,
            KgsError::Matrix(_) => KgsStatus::Matrix,
            KgsError::Contract(_) => KgsStatus::Contract,
            KgsError::Io { .. } => KgsStatus::Io,
        }
    }
}

/// A skeleton sequence.
pub struct KgsSequence(SkeletonSequence);

/// Rendered heatmaps laid out as `[view][frame][row][column]`.
pub struct KgsHeatmaps(HeatmapStack);

/// A trained classifier restored from a checkpoint.
pub struct KgsModel(Model);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("NUL bytes removed");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn fail(status: KgsStatus, message: impl Into<String>) -> KgsStatus {
    set_error(message.into());
    status
}

fn guard(f: impl FnOnce() -> Result<(), KgsStatus>) -> KgsStatus {
    LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => KgsStatus::Ok,
        Ok(Err(status)) => status,
        Err(_) => fail(KgsStatus::Panic, "internal panic"),
    }
}

fn core<T>(result: kgs_core::Result<T>) -> Result<T, KgsStatus> {
    result.map_err(|e| fail(KgsStatus::from(&e), e.to_string()))
}

unsafe fn non_null<'a, T>(p: *const T, what: &str) -> Result<&'a T, KgsStatus> {
    p.as_ref().ok_or_else(|| fail(KgsStatus::NullPointer, format!("{what} is null")))
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, KgsStatus> {
    if p.is_null() {
        return Err(fail(KgsStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(KgsStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn write_out<T>(out: *mut T, value: T, what: &str) -> Result<(), KgsStatus> {
    if out.is_null() {
        return Err(fail(KgsStatus::NullPointer, format!("{what} is null")));
    }
    out.write(value);
    Ok(())
}

unsafe fn copy_out(values: &[f64], out: *mut f64, capacity: usize) -> Result<(), KgsStatus> {
    if out.is_null() {
        return Err(fail(KgsStatus::NullPointer, "output buffer is null"));
    }
    if capacity < values.len() {
        return Err(fail(
            KgsStatus::BufferTooSmall,
            format!("buffer holds {capacity} values, {} needed", values.len()),
        ));
    }
    ptr::copy_nonoverlapping(values.as_ptr(), out, values.len());
    Ok(())
}

/// Message of the last failed call on this thread, or null. Valid until the next call.
#[no_mangle]
pub extern "C" fn kgs_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn kgs_sequence_load(path: *const c_char, out: *mut *mut KgsSequence) -> KgsStatus {
    guard(|| {
        let path = c_str(path, "path")?;
        let seq = core(load_sequence(PathBuf::from(path)))?;
        write_out(out, Box::into_raw(Box::new(KgsSequence(seq))), "out")
    })
}

/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn kgs_sequence_parse(json: *const c_char, out: *mut *mut KgsSequence) -> KgsStatus {
    guard(|| {
        let text = c_str(json, "json")?;
        let seq = core(parse_sequence(text))?;
        write_out(out, Box::into_raw(Box::new(KgsSequence(seq))), "out")
    })
}

/// Builds a sequence from `frames·joints·channels` row-major coordinates.
/// A negative `label` means unlabeled.
///
/// # Safety
/// `data` must point to `frames·joints·channels` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn kgs_sequence_from_array(
    frames: usize,
    joints: usize,
    channels: usize,
    data: *const f64,
    label: i64,
    out: *mut *mut KgsSequence,
) -> KgsStatus {
    guard(|| {
        let n = frames
            .checked_mul(joints)
            .and_then(|x| x.checked_mul(channels))
            .ok_or_else(|| fail(KgsStatus::Dimension, "sequence size overflows"))?;
        if data.is_null() {
            return Err(fail(KgsStatus::NullPointer, "data is null"));
        }
        let values = std::slice::from_raw_parts(data, n).to_vec();
        let label = usize::try_from(label).ok();
        let seq = core(SkeletonSequence::new(frames, joints, channels, values, label))?;
        write_out(out, Box::into_raw(Box::new(KgsSequence(seq))), "out")
    })
}

/// # Safety
/// `seq` must be null or a pointer from a `kgs_sequence_*` constructor.
#[no_mangle]
pub unsafe extern "C" fn kgs_sequence_free(seq: *mut KgsSequence) {
    if !seq.is_null() {
        drop(Box::from_raw(seq));
    }
}

/// # Safety
/// `seq` must be a live sequence handle; the out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn kgs_sequence_dims(
    seq: *const KgsSequence,
    frames: *mut usize,
    joints: *mut usize,
    channels: *mut usize,
) -> KgsStatus {
    guard(|| {
        let seq = &non_null(seq, "seq")?.0;
        write_out(frames, seq.frames(), "frames")?;
        write_out(joints, seq.joints(), "joints")?;
        write_out(channels, seq.channels(), "channels")
    })
}

/// Bhattacharyya distance between two 2-D Gaussians. Covariances are passed
/// as `{xx, xy, yy}`.
///
/// # Safety
/// `mu_*` must point to 2 doubles, `sigma_*` to 3, and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn kgs_bhattacharyya(
    mu_i: *const f64,
    sigma_i: *const f64,
    mu_j: *const f64,
    sigma_j: *const f64,
    out: *mut f64,
) -> KgsStatus {
    guard(|| {
        let read = |p: *const f64, n: usize, what: &str| -> Result<Vec<f64>, KgsStatus> {
            if p.is_null() {
                return Err(fail(KgsStatus::NullPointer, format!("{what} is null")));
            }
            Ok(std::slice::from_raw_parts(p, n).to_vec())
        };
        let (mi, si, mj, sj) = (read(mu_i, 2, "mu_i")?, read(sigma_i, 3, "sigma_i")?, read(mu_j, 2, "mu_j")?, read(sigma_j, 3, "sigma_j")?);
        let d = core(bhattacharyya_distance(
            [mi[0], mi[1]],
            &Sym2::new(si[0], si[1], si[2]),
            [mj[0], mj[1]],
            &Sym2::new(sj[0], sj[1], sj[2]),
        ))?;
        write_out(out, d, "out")
    })
}

/// Normalizes and renders `seq` at `size × size` with the default settings.
///
/// # Safety
/// `seq` must be a live sequence handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn kgs_render(
    seq: *const KgsSequence,
    size: usize,
    isotropic: bool,
    out: *mut *mut KgsHeatmaps,
) -> KgsStatus {
    guard(|| {
        let seq = &non_null(seq, "seq")?.0;
        let mut config = RenderConfig::for_channels(seq.channels());
        config.height = size;
        config.width = size;
        config.isotropic = isotropic;
        core(config.validate())?;
        let kin = core(prepare(seq, &NormalizationParams::default()))?;
        let (stack, _) = core(render_sequence(&kin, &config))?;
        write_out(out, Box::into_raw(Box::new(KgsHeatmaps(stack))), "out")
    })
}

/// # Safety
/// `maps` must be a live heatmap handle; the out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn kgs_heatmaps_dims(
    maps: *const KgsHeatmaps,
    views: *mut usize,
    frames: *mut usize,
    height: *mut usize,
    width: *mut usize,
) -> KgsStatus {
    guard(|| {
        let stack = &non_null(maps, "maps")?.0;
        write_out(views, stack.views, "views")?;
        write_out(frames, stack.frames, "frames")?;
        write_out(height, stack.height, "height")?;
        write_out(width, stack.width, "width")
    })
}

/// Copies all heatmap values into `out`, which must hold `views·frames·height·width` doubles.
///
/// # Safety
/// `maps` must be a live heatmap handle; `out` must have room for `capacity` doubles.
#[no_mangle]
pub unsafe extern "C" fn kgs_heatmaps_copy(maps: *const KgsHeatmaps, out: *mut f64, capacity: usize) -> KgsStatus {
    guard(|| copy_out(&non_null(maps, "maps")?.0.values, out, capacity))
}

/// # Safety
/// `maps` must be null or a pointer from [`kgs_render`].
#[no_mangle]
pub unsafe extern "C" fn kgs_heatmaps_free(maps: *mut KgsHeatmaps) {
    if !maps.is_null() {
        drop(Box::from_raw(maps));
    }
}

/// Writes the `joints × joints` prior adjacency of `seq`, row-major.
///
/// # Safety
/// `seq` must be a live sequence handle; `out` must have room for `capacity` doubles.
#[no_mangle]
pub unsafe extern "C" fn kgs_prior_adjacency(seq: *const KgsSequence, out: *mut f64, capacity: usize) -> KgsStatus {
    guard(|| {
        let seq = &non_null(seq, "seq")?.0;
        let kin = core(prepare(seq, &NormalizationParams::default()))?;
        let grids = core(build_primitives(&kin, &RenderConfig::for_channels(seq.channels())))?;
        let prior = core(build_prior_adjacency(&grids))?;
        copy_out(&prior.matrix, out, capacity)
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn kgs_model_load(path: *const c_char, out: *mut *mut KgsModel) -> KgsStatus {
    guard(|| {
        let path = c_str(path, "path")?;
        let model = core(Checkpoint::load(PathBuf::from(path)).and_then(|c| c.restore()))?;
        write_out(out, Box::into_raw(Box::new(KgsModel(model))), "out")
    })
}

/// # Safety
/// `model` must be a live model handle and `out_class` writable.
#[no_mangle]
pub unsafe extern "C" fn kgs_model_num_classes(model: *const KgsModel, out_class: *mut usize) -> KgsStatus {
    guard(|| write_out(out_class, non_null(model, "model")?.0.config.num_classes, "out_class"))
}

/// # Safety
/// `model` and `seq` must be live handles; `out_class` must be writable.
#[no_mangle]
pub unsafe extern "C" fn kgs_model_predict(
    model: *const KgsModel,
    seq: *const KgsSequence,
    out_class: *mut usize,
) -> KgsStatus {
    guard(|| {
        let model = &non_null(model, "model")?.0;
        let seq = &non_null(seq, "seq")?.0;
        let class = core(predict_sequence(model, seq))?;
        write_out(out_class, class, "out_class")
    })
}

/// # Safety
/// `model` must be null or a pointer from [`kgs_model_load`].
#[no_mangle]
pub unsafe extern "C" fn kgs_model_free(model: *mut KgsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
