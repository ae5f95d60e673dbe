//! C ABI over the moefield engine.
//!
//! Every fallible call returns an [`MfStatus`]; on failure the message is
//! available from [`mf_last_error`] on the same thread until the next failing
//! call. Models are opaque handles released with [`mf_model_free`]. Panics are
//! caught at the boundary and reported as [`MfStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use moefield::checkpoint;
use moefield::ensemble::{self, PairedPredictions};
use moefield::expert::encode_direction;
use moefield::image::Image;
use moefield::metrics;
use moefield::moe::{Moe, SampleMode};
use moefield::renderer::{render_image, Camera, PixelMode};
use moefield::scene::Scene;
use moefield::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Format = 4,
    NonFinite = 5,
    Config = 6,
    Io = 7,
    Panic = 8,
}

/// A trained mixture loaded from a checkpoint directory.
pub struct MfModel {
    moe: Moe<f32>,
    samples: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> MfStatus {
    match e {
        Error::Shape { .. } | Error::NonScalarRoot(_) => MfStatus::Shape,
        Error::InvalidArgument(_) => MfStatus::InvalidArgument,
        Error::Format(_) => MfStatus::Format,
        Error::NonFinite(_) => MfStatus::NonFinite,
        Error::Config(_) => MfStatus::Config,
        Error::Io(_) => MfStatus::Io,
    }
}

enum Fail {
    Null(&'static str),
    Core(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MfStatus::Ok,
        Ok(Err(Fail::Null(what))) => {
            set_error(&format!("{what} is null"));
            MfStatus::NullPointer
        }
        Ok(Err(Fail::Core(e))) => {
            set_error(&e.to_string());
            status_of(&e)
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(&format!("panic: {msg}"));
            MfStatus::Panic
        }
    }
}

fn nonnull<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    // SAFETY: the caller promises a valid pointer when non-null.
    unsafe { p.as_ref() }.ok_or(Fail::Null(what))
}

fn slice<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    // SAFETY: the caller promises `len` readable elements.
    Ok(unsafe { std::slice::from_raw_parts(p, len) })
}

fn slice_mut<'a, T>(p: *mut T, len: usize, what: &'static str) -> Result<&'a mut [T], Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    // SAFETY: the caller promises `len` writable elements.
    Ok(unsafe { std::slice::from_raw_parts_mut(p, len) })
}

fn string(p: *const c_char, what: &'static str) -> Result<String, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    // SAFETY: the caller promises a nul-terminated string.
    let s = unsafe { CStr::from_ptr(p) };
    s.to_str().map(str::to_string).map_err(|_| Fail::Core(Error::InvalidArgument(format!("{what} is not UTF-8"))))
}

fn pose_of(pose: &[f64]) -> [[f64; 4]; 4] {
    let mut m = [[0.0; 4]; 4];
    for (i, v) in pose.iter().enumerate() {
        m[i / 4][i % 4] = *v;
    }
    m
}

fn write_image(img: &Image, out: &mut [f32]) {
    for (dst, px) in out.chunks_exact_mut(3).zip(&img.pixels) {
        for c in 0..3 {
            dst[c] = px[c] as f32;
        }
    }
}

fn read_image(width: usize, height: usize, rgb: &[f32]) -> Result<Image, Fail> {
    let px = rgb.chunks_exact(3).map(|c| [c[0] as f64, c[1] as f64, c[2] as f64]).collect();
    Ok(Image::from_pixels(width, height, px)?)
}

/// Message of the last failure on this thread; empty when none. The pointer
/// stays valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn mf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn mf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads the checkpoint directory at `path` into `*out`.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mf_model_load(path: *const c_char, out: *mut *mut MfModel) -> MfStatus {
    guard(|| {
        let path = PathBuf::from(string(path, "path")?);
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let ck = checkpoint::load::<f32>(&path)?;
        let model = MfModel { moe: ck.moe, samples: ck.config.train.samples };
        // SAFETY: checked non-null above.
        unsafe { *out = Box::into_raw(Box::new(model)) };
        Ok(())
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `model` must come from [`mf_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mf_model_free(model: *mut MfModel) {
    if !model.is_null() {
        // SAFETY: ownership returns from the caller.
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Writes the expert count M and top-k of the mixture.
///
/// # Safety
/// `model` must be a live handle; `experts` and `k` writable.
#[no_mangle]
pub unsafe extern "C" fn mf_model_info(model: *const MfModel, experts: *mut usize, k: *mut usize) -> MfStatus {
    guard(|| {
        let m = nonnull(model, "model")?;
        let e = slice_mut(experts, 1, "experts")?;
        let kk = slice_mut(k, 1, "k")?;
        e[0] = m.moe.experts();
        kk[0] = m.moe.k;
        Ok(())
    })
}

/// Mixture density and color at point `x[3]` seen from unit direction `d[3]`.
/// Points rejected by the density filter report zero density and black.
/// `probs` receives M gate probabilities when non-null.
///
/// # Safety
/// `model` must be a live handle; `x`, `d`, `rgb` hold 3 values, `sigma` one,
/// and `probs`, when non-null, M.
#[no_mangle]
pub unsafe extern "C" fn mf_model_query(
    model: *const MfModel,
    x: *const f64,
    d: *const f64,
    sigma: *mut f32,
    rgb: *mut f32,
    probs: *mut f32,
) -> MfStatus {
    guard(|| {
        let m = nonnull(model, "model")?;
        let x = slice(x, 3, "x")?;
        let d = slice(d, 3, "d")?;
        let sigma = slice_mut(sigma, 1, "sigma")?;
        let rgb = slice_mut(rgb, 3, "rgb")?;
        let x = [x[0], x[1], x[2]];
        let d = [d[0], d[1], d[2]];
        moefield::expert::check_unit(d)?;
        let experts = m.moe.experts();
        match m.moe.sample(x, &encode_direction(d), SampleMode::Mixture) {
            Some((c, p)) => {
                sigma[0] = c.sigma;
                rgb.copy_from_slice(&c.rgb);
                if !probs.is_null() {
                    slice_mut(probs, experts, "probs")?.copy_from_slice(&p);
                }
            }
            None => {
                sigma[0] = 0.0;
                rgb.fill(0.0);
                if !probs.is_null() {
                    let out = slice_mut(probs, experts, "probs")?;
                    out.copy_from_slice(&m.moe.gate.probs(x));
                }
            }
        }
        Ok(())
    })
}

/// Renders a `width x height` image from the camera-to-world `pose[16]`
/// (row-major, looking down local -z) into `rgb`, row-major RGB triples.
/// `samples` = 0 uses the checkpoint's sample count.
///
/// # Safety
/// `model` must be a live handle, `pose` hold 16 values and `rgb`
/// `3 * width * height`.
#[no_mangle]
pub unsafe extern "C" fn mf_model_render(
    model: *const MfModel,
    pose: *const f64,
    focal: f64,
    width: usize,
    height: usize,
    samples: usize,
    rgb: *mut f32,
) -> MfStatus {
    guard(|| {
        let m = nonnull(model, "model")?;
        let pose = pose_of(slice(pose, 16, "pose")?);
        let out = slice_mut(rgb, 3 * width * height, "rgb")?;
        let camera = Camera::from_pose(pose, focal, width, height)?;
        let n = if samples == 0 { m.samples } else { samples };
        write_image(&render_image(&m.moe, &camera, n, PixelMode::Mixture, 1)?, out);
        Ok(())
    })
}

/// Ground-truth render of a built-in scene, same layout as [`mf_model_render`].
///
/// # Safety
/// `scene` must be a nul-terminated string, `pose` hold 16 values and `rgb`
/// `3 * width * height`.
#[no_mangle]
pub unsafe extern "C" fn mf_scene_render(
    scene: *const c_char,
    pose: *const f64,
    focal: f64,
    width: usize,
    height: usize,
    rgb: *mut f32,
) -> MfStatus {
    guard(|| {
        let scene = Scene::builtin(&string(scene, "scene")?)?;
        let pose = pose_of(slice(pose, 16, "pose")?);
        let out = slice_mut(rgb, 3 * width * height, "rgb")?;
        let camera = Camera::from_pose(pose, focal, width, height)?;
        write_image(&scene.render_truth(&camera, 512)?, out);
        Ok(())
    })
}

/// PSNR and SSIM of two `width x height` RGB images with values in [0, 1].
///
/// # Safety
/// `a` and `b` hold `3 * width * height` values; `psnr` and `ssim` writable.
#[no_mangle]
pub unsafe extern "C" fn mf_image_metrics(
    a: *const f32,
    b: *const f32,
    width: usize,
    height: usize,
    psnr: *mut f64,
    ssim: *mut f64,
) -> MfStatus {
    guard(|| {
        let n = 3 * width * height;
        let a = read_image(width, height, slice(a, n, "a")?)?;
        let b = read_image(width, height, slice(b, n, "b")?)?;
        let p = slice_mut(psnr, 1, "psnr")?;
        let s = slice_mut(ssim, 1, "ssim")?;
        p[0] = metrics::psnr(&a, &b)?;
        s[0] = metrics::ssim(&a, &b)?;
        Ok(())
    })
}

/// Weight `alpha` in `alpha y1 + (1 - alpha) y2`, within [0, 1], that
/// minimizes the mean squared error against `target`.
///
/// # Safety
/// `y1`, `y2` and `target` hold `len` values; `alpha` writable.
#[no_mangle]
pub unsafe extern "C" fn mf_ensemble_optimal_alpha(
    y1: *const f64,
    y2: *const f64,
    target: *const f64,
    len: usize,
    alpha: *mut f64,
) -> MfStatus {
    guard(|| {
        let p = PairedPredictions::new(
            slice(y1, len, "y1")?.to_vec(),
            slice(y2, len, "y2")?.to_vec(),
            slice(target, len, "target")?.to_vec(),
        )?;
        slice_mut(alpha, 1, "alpha")?[0] = ensemble::optimal_alpha_exact(&p);
        Ok(())
    })
}
