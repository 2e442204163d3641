//! C ABI over the `egal` core: a classifier handle, prediction, Grad-CAM,
//! misalignment and the acquisition formulas.
//!
//! Every fallible function returns an [`EgalStatus`] and writes its result
//! through out-pointers. On failure a message is kept per thread and can be
//! read with [`egal_last_error`]. Images are row-major `height × width`
//! grayscale arrays of `double`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use egal::acquisition::{composite_score, entropy, normalized_entropy};
use egal::explain::{dice, grad_cam, misalignment, ExpertMask};
use egal::model::{load_checkpoint, Architecture, Classifier, Head, PrototypeSet, SmallCnn};
use egal::numeric::Tensor;
use egal::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EgalStatus {
    Ok = 0,
    NullPointer = 1,
    Config = 2,
    Data = 3,
    Contract = 4,
    Panic = 5,
}

/// Opaque classifier handle.
pub struct EgalClassifier {
    inner: Classifier,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(e: Error) -> EgalStatus {
    let status = match e.exit_code() {
        2 => EgalStatus::Config,
        3 => EgalStatus::Data,
        _ => EgalStatus::Contract,
    };
    set_error(e.to_string());
    status
}

fn null(what: &str) -> EgalStatus {
    set_error(format!("null pointer: {what}"));
    EgalStatus::NullPointer
}

/// Run `body`, turning errors and panics into status codes.
fn guard(body: impl FnOnce() -> Result<(), EgalStatus>) -> EgalStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => EgalStatus::Ok,
        Ok(Err(status)) => status,
        Err(_) => {
            set_error("panic inside egal".into());
            EgalStatus::Panic
        }
    }
}

/// # Safety
/// `p` must be null or valid for `len` reads.
unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], EgalStatus> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// # Safety
/// `p` must be null or valid for `len` writes.
unsafe fn slice_mut<'a>(p: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], EgalStatus> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

/// # Safety
/// `h` must be null or a live handle from this library.
unsafe fn handle<'a>(h: *const EgalClassifier) -> Result<&'a Classifier, EgalStatus> {
    h.as_ref().map(|c| &c.inner).ok_or_else(|| null("classifier"))
}

fn image(data: &[f64], height: usize, width: usize) -> Result<Tensor, EgalStatus> {
    Tensor::new(&[1, height, width], data.to_vec()).map_err(fail)
}

fn write_out<T>(out: *mut T, value: T, what: &str) -> Result<(), EgalStatus> {
    if out.is_null() {
        return Err(null(what));
    }
    // SAFETY: non-null and, per the caller contract, valid for one write
    unsafe { out.write(value) };
    Ok(())
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn egal_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Freshly initialised linear-head classifier with the default architecture.
///
/// # Safety
/// `out` must be valid for one pointer write.
#[no_mangle]
pub unsafe extern "C" fn egal_classifier_new(num_classes: usize, seed: u64, out: *mut *mut EgalClassifier) -> EgalStatus {
    guard(|| {
        let net = SmallCnn::new(Architecture::with_classes(num_classes), seed).map_err(fail)?;
        let h = Box::new(EgalClassifier {
            inner: Classifier::new(net, Head::Linear),
        });
        write_out(out, Box::into_raw(h), "out")
    })
}

/// Load a checkpoint written by the `egal` CLI.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` valid for one pointer write.
#[no_mangle]
pub unsafe extern "C" fn egal_classifier_load(path: *const c_char, out: *mut *mut EgalClassifier) -> EgalStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| fail(Error::Config("checkpoint path is not UTF-8".into())))?;
        let inner = load_checkpoint(Path::new(path)).map_err(fail)?;
        write_out(out, Box::into_raw(Box::new(EgalClassifier { inner })), "out")
    })
}

/// Release a handle. Null is ignored.
///
/// # Safety
/// `h` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn egal_classifier_free(h: *mut EgalClassifier) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Number of classes, or 0 for a null handle.
///
/// # Safety
/// `h` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn egal_classifier_num_classes(h: *const EgalClassifier) -> usize {
    h.as_ref().map_or(0, |c| c.inner.num_classes())
}

/// Embedding dimension, or 0 for a null handle.
///
/// # Safety
/// `h` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn egal_classifier_embed_dim(h: *const EgalClassifier) -> usize {
    h.as_ref().map_or(0, |c| c.inner.net.architecture().embed_dim)
}

/// Set the centroid of `class`, switching a linear classifier to the
/// prototypical head. Predictions need a centroid for every class.
///
/// # Safety
/// `h` must be a live handle; `centroid` valid for `len` reads.
#[no_mangle]
pub unsafe extern "C" fn egal_classifier_set_prototype(
    h: *mut EgalClassifier,
    class: usize,
    centroid: *const f64,
    len: usize,
) -> EgalStatus {
    guard(|| {
        let c = &mut h.as_mut().ok_or_else(|| null("classifier"))?.inner;
        let centroid = slice(centroid, len, "centroid")?;
        let dim = c.net.architecture().embed_dim;
        if len != dim {
            return Err(fail(Error::Contract(format!("centroid has {len} values, embedding has {dim}"))));
        }
        if class >= c.num_classes() {
            return Err(fail(Error::Contract(format!("class {class} out of range"))));
        }
        if let Head::Linear = c.head {
            c.head = Head::Prototypical(PrototypeSet::new());
        }
        if let Head::Prototypical(p) = &mut c.head {
            p.insert(class, centroid.to_vec());
        }
        Ok(())
    })
}

/// Shannon entropy in nats of a probability vector.
///
/// # Safety
/// `probs` valid for `len` reads; `out` for one write.
#[no_mangle]
pub unsafe extern "C" fn egal_entropy(probs: *const f64, len: usize, out: *mut f64) -> EgalStatus {
    guard(|| {
        let v = entropy(slice(probs, len, "probs")?).map_err(fail)?;
        write_out(out, v, "out")
    })
}

/// Entropy divided by `ln(len)`, in `[0, 1]`.
///
/// # Safety
/// `probs` valid for `len` reads; `out` for one write.
#[no_mangle]
pub unsafe extern "C" fn egal_normalized_entropy(probs: *const f64, len: usize, out: *mut f64) -> EgalStatus {
    guard(|| {
        let v = normalized_entropy(slice(probs, len, "probs")?).map_err(fail)?;
        write_out(out, v, "out")
    })
}

/// Soft Dice `2Σab / (Σa + Σb)` of two equally long maps.
///
/// # Safety
/// `a` and `b` valid for `len` reads; `out` for one write.
#[no_mangle]
pub unsafe extern "C" fn egal_dice(a: *const f64, b: *const f64, len: usize, out: *mut f64) -> EgalStatus {
    guard(|| {
        let a = Tensor::vector(slice(a, len, "a")?.to_vec());
        let b = Tensor::vector(slice(b, len, "b")?.to_vec());
        write_out(out, dice(&a, &b).map_err(fail)?, "out")
    })
}

/// `λ·h_norm + (1 − λ)·d_exp`; `λ` must lie in `[0, 1]`.
///
/// # Safety
/// `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn egal_composite_score(h_norm: f64, d_exp: f64, lambda: f64, out: *mut f64) -> EgalStatus {
    guard(|| {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(fail(Error::Contract(format!("lambda {lambda} outside [0, 1]"))));
        }
        write_out(out, composite_score(h_norm, d_exp, lambda), "out")
    })
}

/// Class probabilities of one image into `out_probs[0..num_classes]`.
///
/// # Safety
/// `h` live; `pixels` valid for `height·width` reads; `out_probs` for
/// `capacity` writes.
#[no_mangle]
pub unsafe extern "C" fn egal_predict_proba(
    h: *const EgalClassifier,
    pixels: *const f64,
    height: usize,
    width: usize,
    out_probs: *mut f64,
    capacity: usize,
) -> EgalStatus {
    guard(|| {
        let c = handle(h)?;
        let img = image(slice(pixels, height * width, "pixels")?, height, width)?;
        let probs = c.predict_proba(&img).map_err(fail)?;
        if capacity < probs.len() {
            return Err(fail(Error::Contract(format!("output holds {capacity} values, need {}", probs.len()))));
        }
        slice_mut(out_probs, probs.len(), "out_probs")?.copy_from_slice(&probs);
        Ok(())
    })
}

/// Unit-range Grad-CAM of `class` at image resolution into `out_map[0..height·width]`.
///
/// # Safety
/// `h` live; `pixels` valid for `height·width` reads; `out_map` for as many writes.
#[no_mangle]
pub unsafe extern "C" fn egal_grad_cam(
    h: *const EgalClassifier,
    pixels: *const f64,
    height: usize,
    width: usize,
    class: usize,
    out_map: *mut f64,
) -> EgalStatus {
    guard(|| {
        let c = handle(h)?;
        let img = image(slice(pixels, height * width, "pixels")?, height, width)?;
        let cam = grad_cam(c, &img, class).map_err(fail)?;
        slice_mut(out_map, height * width, "out_map")?.copy_from_slice(cam.grid().data());
        Ok(())
    })
}

/// `1 − Dice(CAM of the predicted class, mask)` and the predicted class.
///
/// # Safety
/// `h` live; `pixels` and `mask` valid for `height·width` reads; outputs for one write each.
#[no_mangle]
pub unsafe extern "C" fn egal_misalignment(
    h: *const EgalClassifier,
    pixels: *const f64,
    mask: *const f64,
    height: usize,
    width: usize,
    out_d_exp: *mut f64,
    out_predicted: *mut usize,
) -> EgalStatus {
    guard(|| {
        let c = handle(h)?;
        let img = image(slice(pixels, height * width, "pixels")?, height, width)?;
        let m = Tensor::new(&[height, width], slice(mask, height * width, "mask")?.to_vec()).map_err(fail)?;
        let esm = ExpertMask::new(m).map_err(fail)?;
        let (d, k) = misalignment(c, &img, &esm).map_err(fail)?;
        write_out(out_d_exp, d, "out_d_exp")?;
        write_out(out_predicted, k, "out_predicted")
    })
}
