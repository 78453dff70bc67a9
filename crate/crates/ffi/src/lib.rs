//! C ABI over `lamm-core`: load a checkpoint, encode meshes and decode
//! latent codes with control displacements.
//!
//! Every fallible call returns a [`LammStatus`]; the message of the last
//! failure on the calling thread is available from [`lamm_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use lamm_core::error::Error;

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LammStatus {
    Ok = 0,
    NullPointer = 1,
    Io = 2,
    Checkpoint = 3,
    TemplateMismatch = 4,
    ShapeMismatch = 5,
    InvalidArgument = 6,
    Panic = 7,
}

/// Opaque model handle.
pub struct LammModel {
    inner: lamm_core::model::LammModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(e: &Error) -> LammStatus {
    match e {
        Error::Io(_) => LammStatus::Io,
        Error::Checkpoint(_) | Error::Json(_) | Error::Parse { .. } => LammStatus::Checkpoint,
        Error::TemplateMismatch { .. } => LammStatus::TemplateMismatch,
        Error::ShapeMismatch { .. } | Error::PartitionMismatch(_) => LammStatus::ShapeMismatch,
        _ => LammStatus::InvalidArgument,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (LammStatus, String)>) -> LammStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => LammStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            LammStatus::Panic
        }
    }
}

fn core_err(e: Error) -> (LammStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (LammStatus, String) {
    (LammStatus::NullPointer, format!("{what} is null"))
}

fn size(what: &str, want: usize, got: usize) -> (LammStatus, String) {
    (LammStatus::ShapeMismatch, format!("{what} holds {got} floats, expected {want}"))
}

/// # Safety
/// `ptr` must be null or valid for `len` reads.
unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], (LammStatus, String)> {
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(unsafe { std::slice::from_raw_parts(ptr, len) })
}

/// # Safety
/// `ptr` must be null or valid for `len` writes.
unsafe fn slice_mut<'a, T>(ptr: *mut T, len: usize, what: &str) -> Result<&'a mut [T], (LammStatus, String)> {
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(unsafe { std::slice::from_raw_parts_mut(ptr, len) })
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn lamm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Load a checkpoint. On success `*out` owns a handle to release with
/// [`lamm_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lamm_model_load(path: *const c_char, out: *mut *mut LammModel) -> LammStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = unsafe { CStr::from_ptr(path) }
            .to_str()
            .map_err(|_| (LammStatus::InvalidArgument, "path is not UTF-8".to_string()))?;
        let inner = lamm_core::model::LammModel::load(path).map_err(core_err)?;
        unsafe { *out = Box::into_raw(Box::new(LammModel { inner })) };
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from [`lamm_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lamm_model_free(model: *mut LammModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// # Safety
/// `model` must be null or a live handle.
unsafe fn model_ref<'a>(model: *const LammModel) -> Option<&'a lamm_core::model::LammModel> {
    unsafe { model.as_ref() }.map(|m| &m.inner)
}

/// Template vertex count, 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lamm_model_num_vertices(model: *const LammModel) -> usize {
    unsafe { model_ref(model) }.map_or(0, |m| m.template().num_vertices())
}

/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lamm_model_latent_size(model: *const LammModel) -> usize {
    unsafe { model_ref(model) }.map_or(0, |m| m.config().latent)
}

/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lamm_model_num_regions(model: *const LammModel) -> usize {
    unsafe { model_ref(model) }.map_or(0, |m| m.template().num_regions())
}

/// Control points of all regions, region by region.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lamm_model_num_controls(model: *const LammModel) -> usize {
    unsafe { model_ref(model) }.map_or(0, |m| m.template().all_controls().len())
}

/// Write the control vertex indices (region by region) into `out`.
///
/// # Safety
/// `model` must be a live handle and `out` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn lamm_model_control_indices(model: *const LammModel, out: *mut u32, len: usize) -> LammStatus {
    guard(|| {
        let m = unsafe { model_ref(model) }.ok_or_else(|| null("model"))?;
        let c = m.template().all_controls();
        if len != c.len() {
            return Err((LammStatus::ShapeMismatch, format!("buffer holds {len} indices, expected {}", c.len())));
        }
        unsafe { slice_mut(out, len, "out")? }.copy_from_slice(&c);
        Ok(())
    })
}

/// Encode one mesh given as `3N` vertex coordinates into `latent_size` floats.
///
/// # Safety
/// Pointers must be valid for the given lengths.
#[no_mangle]
pub unsafe extern "C" fn lamm_encode(
    model: *const LammModel,
    vertices: *const f32,
    vertices_len: usize,
    z_out: *mut f32,
    z_len: usize,
) -> LammStatus {
    guard(|| {
        let m = unsafe { model_ref(model) }.ok_or_else(|| null("model"))?;
        let t = m.template();
        let nf = 3 * t.num_vertices();
        if vertices_len != nf {
            return Err(size("vertices", nf, vertices_len));
        }
        if z_len != m.config().latent {
            return Err(size("z_out", m.config().latent, z_len));
        }
        let v = unsafe { slice(vertices, vertices_len, "vertices")? };
        let mesh = lamm_core::mesh::Mesh::from_flat(v, t.faces().clone());
        let z = m.encode_latent(&t.center(&mesh).map_err(core_err)?).map_err(core_err)?;
        unsafe { slice_mut(z_out, z_len, "z_out")? }.copy_from_slice(&z);
        Ok(())
    })
}

/// Decode a latent code with control displacements into `3N` coordinates.
/// `deltas` lists `[dx, dy, dz]` for every control point in the order of
/// [`lamm_model_control_indices`]; null means no displacement.
///
/// # Safety
/// Pointers must be valid for the given lengths; `deltas` may be null.
#[no_mangle]
pub unsafe extern "C" fn lamm_decode(
    model: *const LammModel,
    z: *const f32,
    z_len: usize,
    deltas: *const f32,
    deltas_len: usize,
    out: *mut f32,
    out_len: usize,
) -> LammStatus {
    guard(|| {
        let m = unsafe { model_ref(model) }.ok_or_else(|| null("model"))?;
        let t = m.template();
        if z_len != m.config().latent {
            return Err(size("z", m.config().latent, z_len));
        }
        let nf = 3 * t.num_vertices();
        if out_len != nf {
            return Err(size("out", nf, out_len));
        }
        let z = unsafe { slice(z, z_len, "z")? };
        let per_region = if deltas.is_null() {
            None
        } else {
            let total = 3 * t.all_controls().len();
            if deltas_len != total {
                return Err(size("deltas", total, deltas_len));
            }
            let flat = unsafe { slice(deltas, deltas_len, "deltas")? };
            let mut at = 0;
            Some(
                t.control_sets()
                    .iter()
                    .map(|c| {
                        let d = flat[at..at + 3 * c.len()].to_vec();
                        at += 3 * c.len();
                        d
                    })
                    .collect::<Vec<_>>(),
            )
        };
        let centered = m.decode(z, per_region.as_deref()).map_err(core_err)?;
        let mesh = t.uncenter(&centered);
        let dst = unsafe { slice_mut(out, out_len, "out")? };
        for (d, s) in dst.chunks_exact_mut(3).zip(&mesh.vertices) {
            d.copy_from_slice(s);
        }
        Ok(())
    })
}
