use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use moefield::checkpoint;
use moefield::config::RunConfig;
use moefield::expert::ExpertBank;
use moefield::renderer::Camera;
use moefield::trainer::{assemble_moe, TrainConfig};
use moefield_ffi::*;
use tempfile::TempDir;

fn last_error() -> String {
    unsafe { CStr::from_ptr(mf_last_error()) }.to_string_lossy().into_owned()
}

fn write_checkpoint(dir: &Path) -> RunConfig {
    let train = TrainConfig { k: 2, base_resolution: 12, gate_resolution: 4, samples: 16, ..Default::default() };
    let cfg = RunConfig { train, ..Default::default() };
    let moe = assemble_moe(ExpertBank::<f32>::build(12, 3, 1).unwrap(), &cfg.train).unwrap();
    checkpoint::save(dir, &cfg, &moe, None).unwrap();
    cfg
}

fn load(dir: &Path) -> *mut MfModel {
    let path = CString::new(dir.to_str().unwrap()).unwrap();
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { mf_model_load(path.as_ptr(), &mut model) }, MfStatus::Ok, "{}", last_error());
    assert!(!model.is_null());
    model
}

fn pose() -> [f64; 16] {
    let cam = Camera::look_at([0.5, 0.5, 3.0], [0.5, 0.5, 0.5], 12.0, 8, 8);
    let mut p = [0.0; 16];
    for (i, v) in cam.pose.iter().flatten().enumerate() {
        p[i] = *v;
    }
    p
}

#[test]
fn model_round_trip_through_handles() {
    let tmp = TempDir::new().unwrap();
    write_checkpoint(tmp.path());
    let model = load(tmp.path());
    let (mut m, mut k) = (0usize, 0usize);
    assert_eq!(unsafe { mf_model_info(model, &mut m, &mut k) }, MfStatus::Ok);
    assert_eq!((m, k), (3, 2));

    let (x, d) = ([0.5, 0.5, 0.5], [0.0, 0.0, 1.0]);
    let (mut sigma, mut rgb, mut probs) = (0f32, [0f32; 3], [0f32; 3]);
    let st = unsafe { mf_model_query(model, x.as_ptr(), d.as_ptr(), &mut sigma, rgb.as_mut_ptr(), probs.as_mut_ptr()) };
    assert_eq!(st, MfStatus::Ok);
    assert!(sigma >= 0.0 && rgb.iter().all(|c| (0.0..=1.0).contains(c)));
    assert!((probs.iter().sum::<f32>() - 1.0).abs() < 1e-5);

    let mut img = vec![-1f32; 3 * 8 * 8];
    let st = unsafe { mf_model_render(model, pose().as_ptr(), 12.0, 8, 8, 0, img.as_mut_ptr()) };
    assert_eq!(st, MfStatus::Ok, "{}", last_error());
    assert!(img.iter().all(|v| (0.0..=1.0).contains(v)));
    unsafe { mf_model_free(model) };
    unsafe { mf_model_free(ptr::null_mut()) };
}

#[test]
fn errors_carry_codes_and_messages() {
    let mut model = ptr::null_mut();
    let missing = CString::new("/nonexistent/checkpoint").unwrap();
    assert_eq!(unsafe { mf_model_load(missing.as_ptr(), &mut model) }, MfStatus::Format);
    assert!(last_error().contains("not found"));
    assert!(model.is_null());

    assert_eq!(unsafe { mf_model_load(ptr::null(), &mut model) }, MfStatus::NullPointer);
    assert_eq!(last_error(), "path is null");

    let tmp = TempDir::new().unwrap();
    write_checkpoint(tmp.path());
    let model = load(tmp.path());
    let (x, bad) = ([0.5; 3], [1.0, 1.0, 0.0]);
    let (mut sigma, mut rgb) = (0f32, [0f32; 3]);
    let st = unsafe { mf_model_query(model, x.as_ptr(), bad.as_ptr(), &mut sigma, rgb.as_mut_ptr(), ptr::null_mut()) };
    assert_eq!(st, MfStatus::InvalidArgument);
    assert!(!last_error().is_empty());
    let mut img = vec![0f32; 3];
    assert_eq!(
        unsafe { mf_model_render(model, pose().as_ptr(), 12.0, 1, 1, 1, img.as_mut_ptr()) },
        MfStatus::InvalidArgument
    );
    unsafe { mf_model_free(model) };

    let scene = CString::new("teapot").unwrap();
    let st = unsafe { mf_scene_render(scene.as_ptr(), pose().as_ptr(), 12.0, 1, 1, img.as_mut_ptr()) };
    assert_ne!(st, MfStatus::Ok);
}

#[test]
fn scene_render_and_metrics() {
    let scene = CString::new("one-sphere").unwrap();
    let mut img = vec![0f32; 3 * 16 * 16];
    let st = unsafe { mf_scene_render(scene.as_ptr(), pose().as_ptr(), 24.0, 16, 16, img.as_mut_ptr()) };
    assert_eq!(st, MfStatus::Ok, "{}", last_error());
    assert!(img.iter().any(|&v| v > 0.05));
    let (mut psnr, mut ssim) = (0.0, 0.0);
    assert_eq!(unsafe { mf_image_metrics(img.as_ptr(), img.as_ptr(), 16, 16, &mut psnr, &mut ssim) }, MfStatus::Ok);
    assert_eq!(psnr, moefield::metrics::PSNR_CAP);
    assert!((ssim - 1.0).abs() < 1e-9);
}

#[test]
fn optimal_alpha_matches_core() {
    let (y1, y2, t) = ([0.0, 1.0, 2.0], [1.0, 1.0, 0.0], [0.5, 1.0, 1.5]);
    let mut alpha = -1.0;
    assert_eq!(unsafe { mf_ensemble_optimal_alpha(y1.as_ptr(), y2.as_ptr(), t.as_ptr(), 3, &mut alpha) }, MfStatus::Ok);
    let p = moefield::ensemble::PairedPredictions::new(y1.to_vec(), y2.to_vec(), t.to_vec()).unwrap();
    assert_eq!(alpha, moefield::ensemble::optimal_alpha_exact(&p));
    assert_eq!(
        unsafe { mf_ensemble_optimal_alpha(y1.as_ptr(), ptr::null(), t.as_ptr(), 3, &mut alpha) },
        MfStatus::NullPointer
    );
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(mf_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include").join("moefield.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for f in ["mf_model_load", "mf_model_free", "mf_last_error", "MF_STATUS_PANIC"] {
        assert!(text.contains(f), "header lacks {f}");
    }
    let Ok(out) = std::process::Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-x", "c"])
        .arg(&header)
        .output()
    else {
        eprintln!("no C compiler; skipping syntax check");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
