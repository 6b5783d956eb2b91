//! C ABI for the restoration library.
//!
//! Images cross the boundary as planar RGB `float` buffers of length
//! `3 * height * width` with values in `[0, 1]`. Every function returns an
//! [`MdirStatus`]; on failure, [`mdir_last_error`] describes the cause.
//! Models are opaque handles created by [`mdir_model_load`] and released by
//! [`mdir_model_free`]. A loaded model may be used from several threads at
//! once.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use mdir::classifier::NUM_LABELS;
use mdir::metrics::{psnr, ssim};
use mdir::synth::dataset::{regenerate, sample_spec};
use mdir::synth::MaskConfig;
use mdir::train::{load_model, Checkpoint};
use mdir::{Category, Error, Graph, Image, Mode, Net, ParamStore};

/// Result of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MdirStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Numeric = 4,
    Panic = 5,
}

/// Degradation categories, in dataset generation order.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MdirCategory {
    Rain = 0,
    Snow = 1,
    Haze = 2,
    Noise = 3,
    RainHaze = 4,
    HazeNoise = 5,
    RainHazeNoise = 6,
}

/// A restoration network with its weights.
pub struct MdirModel {
    net: Net,
    store: ParamStore<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> MdirStatus {
    match e {
        Error::Io { .. } | Error::Image { .. } => MdirStatus::Io,
        Error::Numeric(_) => MdirStatus::Numeric,
        _ => MdirStatus::InvalidArgument,
    }
}

struct Failure(MdirStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(MdirStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(MdirStatus::InvalidArgument, msg.into())
}

/// Runs `f`, converting errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MdirStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            MdirStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            MdirStatus::Panic
        }
    }
}

/// Borrows an image buffer as an [`Image`].
///
/// # Safety
/// `data` must point to `3 * height * width` readable floats.
unsafe fn read_image(data: *const f32, height: usize, width: usize, what: &str) -> Result<Image, Failure> {
    if data.is_null() {
        return Err(null(what));
    }
    let n = height
        .checked_mul(width)
        .and_then(|v| v.checked_mul(3))
        .filter(|&n| n > 0)
        .ok_or_else(|| invalid(format!("{what}: bad size {height}x{width}")))?;
    let slice = std::slice::from_raw_parts(data, n);
    Ok(Image::new(height, width, slice.to_vec())?)
}

/// # Safety
/// `out` must point to `src.len()` writable floats.
unsafe fn write_floats(out: *mut f32, src: &[f32]) {
    ptr::copy_nonoverlapping(src.as_ptr(), out, src.len());
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mdir_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread, or null after a
/// success. Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn mdir_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Number of degradation labels reported by [`mdir_model_classify`].
#[no_mangle]
pub extern "C" fn mdir_num_labels() -> usize {
    NUM_LABELS
}

/// Loads a restoration checkpoint into a new handle stored in `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn mdir_model_load(path: *const c_char, out: *mut *mut MdirModel) -> MdirStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| invalid("path is not valid UTF-8"))?;
        let ck = Checkpoint::load(Path::new(path))?;
        let (net, store) = load_model(&ck)?;
        *out = Box::into_raw(Box::new(MdirModel { net, store }));
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must come from [`mdir_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mdir_model_free(model: *mut MdirModel) {
    if !model.is_null() {
        let _ = catch_unwind(AssertUnwindSafe(|| drop(Box::from_raw(model))));
    }
}

/// Restores one image. Both sides must be divisible by 4. `output` receives
/// `3 * height * width` floats clipped to `[0, 1]`.
///
/// # Safety
/// Buffers must hold `3 * height * width` floats; `model` must be live.
#[no_mangle]
pub unsafe extern "C" fn mdir_model_restore(
    model: *const MdirModel,
    input: *const f32,
    height: usize,
    width: usize,
    output: *mut f32,
) -> MdirStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if output.is_null() {
            return Err(null("output"));
        }
        let img = read_image(input, height, width, "input")?;
        let out = m.net.restore(&m.store, &img.to_tensor())?;
        let out = Image::from_tensor(&out, 0)?.clipped();
        write_floats(output, &out.data);
        Ok(())
    })
}

/// Degradation probabilities (rain, snow, haze, noise) from the model's
/// classifier. Fails for models trained without condition embedding.
///
/// # Safety
/// `input` must hold `3 * height * width` floats and `probs` 4 floats.
#[no_mangle]
pub unsafe extern "C" fn mdir_model_classify(
    model: *const MdirModel,
    input: *const f32,
    height: usize,
    width: usize,
    probs: *mut f32,
) -> MdirStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if probs.is_null() {
            return Err(null("probs"));
        }
        let cls = m
            .net
            .classifier
            .as_ref()
            .ok_or_else(|| invalid("this model has no classifier"))?;
        let img = read_image(input, height, width, "input")?;
        let mut g = Graph::new(&m.store, Mode::Eval);
        let x = g.tape.constant(img.to_tensor());
        let logits = cls.classify(&mut g, x)?.logits;
        let p: Vec<f32> = g.tape.value(logits).data().iter().map(|&z| 1.0 / (1.0 + (-z).exp())).collect();
        write_floats(probs, &p);
        Ok(())
    })
}

/// PSNR of `a` against `b` over a data range of 1. Identical images give
/// positive infinity.
///
/// # Safety
/// Both buffers must hold `3 * height * width` floats.
#[no_mangle]
pub unsafe extern "C" fn mdir_psnr(a: *const f32, b: *const f32, height: usize, width: usize, out: *mut f64) -> MdirStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let (a, b) = (read_image(a, height, width, "a")?, read_image(b, height, width, "b")?);
        *out = psnr(&a, &b, 1.0)?;
        Ok(())
    })
}

/// Mean SSIM of `a` against `b` on the luminance channel.
///
/// # Safety
/// Both buffers must hold `3 * height * width` floats.
#[no_mangle]
pub unsafe extern "C" fn mdir_ssim(a: *const f32, b: *const f32, height: usize, width: usize, out: *mut f64) -> MdirStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let (a, b) = (read_image(a, height, width, "a")?, read_image(b, height, width, "b")?);
        *out = ssim(&a, &b)?;
        Ok(())
    })
}

/// Applies a seeded degradation of `category` (an [`MdirCategory`] value)
/// to a clean image, exactly as the dataset generator does for that seed.
///
/// # Safety
/// `clean` and `out` must hold `3 * height * width` floats.
#[no_mangle]
pub unsafe extern "C" fn mdir_degrade(
    clean: *const f32,
    height: usize,
    width: usize,
    category: u32,
    seed: u64,
    out: *mut f32,
) -> MdirStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cat = *Category::ALL
            .get(category as usize)
            .ok_or_else(|| invalid(format!("unknown category {category}")))?;
        let img = read_image(clean, height, width, "clean")?;
        let spec = sample_spec(cat, seed);
        let degraded = regenerate(&img, &spec, &MaskConfig::default())?;
        write_floats(out, &degraded.data);
        Ok(())
    })
}
