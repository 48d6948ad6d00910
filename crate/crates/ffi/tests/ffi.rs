use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use msth_ffi::*;

fn cstr(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(msth_last_error()) }.to_string_lossy().into_owned()
}

const TINY: &str = "steps=3; batch_rays=16; n_samples=8; proposal_bins=8; levels=2; log2_table_3d=10; \
                    log2_table_4d=10; n_max=16; time_max=4; mask_resolution=8; uncertainty_resolution=8; \
                    density_hidden=8; color_hidden=8; mine_pairs=32";

/// Writes a small dataset and trains a tiny model on it through the C ABI.
fn trained(dir: &Path) -> (*mut MsthModel, *mut MsthDataset) {
    let data = dir.join("data");
    unsafe {
        assert_eq!(msth_synth(cstr(&data).as_ptr(), MsthPreset::Orbit, 16, 12, 3, 64, 1), MsthStatus::Ok);
        let mut ds = ptr::null_mut();
        assert_eq!(msth_dataset_load(cstr(&data).as_ptr(), &mut ds), MsthStatus::Ok);
        let mut model = ptr::null_mut();
        let ov = CString::new(TINY).unwrap();
        let st = msth_train(cstr(&data).as_ptr(), cstr(&dir.join("run")).as_ptr(), ov.as_ptr(), &mut model);
        assert_eq!(st, MsthStatus::Ok, "{}", last_error());
        (model, ds)
    }
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(msth_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn null_and_missing_arguments_are_reported() {
    unsafe {
        let mut m = ptr::null_mut();
        assert_eq!(msth_model_load(ptr::null(), &mut m), MsthStatus::NullArgument);
        assert!(last_error().contains("path"));
        let p = CString::new("/nonexistent/ckpt.msth").unwrap();
        assert_eq!(msth_model_load(p.as_ptr(), &mut m), MsthStatus::MissingFile);
        assert!(last_error().contains("/nonexistent/ckpt.msth"));
        assert!(m.is_null());
        let mut info = MsthModelInfo::default();
        assert_eq!(msth_model_info(ptr::null(), &mut info), MsthStatus::NullArgument);
        msth_model_free(ptr::null_mut());
        msth_dataset_free(ptr::null_mut());
    }
}

#[test]
fn train_render_and_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let (model, ds) = trained(dir.path());
    unsafe {
        let (mut ncam, mut nframes) = (0usize, 0usize);
        assert_eq!(msth_dataset_info(ds, &mut ncam, &mut nframes), MsthStatus::Ok);
        assert_eq!((ncam, nframes), (5, 3));
        let mut cam = std::mem::zeroed::<MsthCamera>();
        assert_eq!(msth_dataset_camera(ds, 0, &mut cam), MsthStatus::Ok);
        assert_eq!((cam.width, cam.height), (16, 12));
        assert_eq!(msth_dataset_camera(ds, 99, &mut cam), MsthStatus::InvalidArgument);
        assert_eq!(msth_dataset_camera(ds, 4, &mut cam), MsthStatus::Ok);
        let mut t = 0.0;
        assert_eq!(msth_dataset_time(ds, 2, &mut t), MsthStatus::Ok);
        assert_eq!(t, 1.0);

        let mut info = MsthModelInfo::default();
        assert_eq!(msth_model_info(model, &mut info), MsthStatus::Ok);
        assert_eq!(info.step, 3);
        assert_eq!(info.mode, 0);
        assert_eq!(info.n_samples, 8);

        let n = (cam.width * cam.height * 3) as usize;
        let mut buf = vec![-1.0f32; n];
        assert_eq!(msth_render(model, &cam, 0.5, buf.as_mut_ptr(), n - 1), MsthStatus::BufferTooSmall);
        assert_eq!(msth_render(model, &cam, 0.5, buf.as_mut_ptr(), n), MsthStatus::Ok);
        assert!(buf.iter().all(|v| (0.0..=1.0).contains(v)));

        let times = [0.0, 0.5, 1.0];
        let mut video = vec![0.0f32; n * 3];
        let mut stats = MsthIncrementalStats::default();
        let st = msth_render_incremental(model, &cam, times.as_ptr(), 3, 0.1, video.as_mut_ptr(), video.len(), &mut stats);
        assert_eq!(st, MsthStatus::Ok, "{}", last_error());
        assert_eq!(stats.total_pixels, 3 * (n / 3) as u64);
        assert!(stats.speedup >= 1.0);

        let (mut sigma, mut rgb, mut mask) = (0.0, [0.0; 3], 0.0);
        let x = [0.0, 0.0, 0.8];
        let d = [0.0, 0.0, 1.0];
        assert_eq!(
            msth_model_query(model, x.as_ptr(), d.as_ptr(), 0.2, &mut sigma, rgb.as_mut_ptr(), &mut mask),
            MsthStatus::Ok
        );
        assert!(sigma > 0.0 && (0.0..=1.0).contains(&mask));
        let bad = [0.0, 0.0, 2.0];
        assert_eq!(
            msth_model_query(model, x.as_ptr(), bad.as_ptr(), 0.2, &mut sigma, rgb.as_mut_ptr(), &mut mask),
            MsthStatus::Config
        );

        let path = dir.path().join("copy.msth");
        assert_eq!(msth_model_save(model, cstr(&path).as_ptr()), MsthStatus::Ok);
        let mut again = ptr::null_mut();
        assert_eq!(msth_model_load(cstr(&path).as_ptr(), &mut again), MsthStatus::Ok);
        let mut buf2 = vec![0.0f32; n];
        assert_eq!(msth_render(again, &cam, 0.5, buf2.as_mut_ptr(), n), MsthStatus::Ok);
        assert_eq!(buf, buf2);

        msth_model_free(again);
        msth_model_free(model);
        msth_dataset_free(ds);
    }
    assert!(dir.path().join("run/checkpoint.msth").exists());
    assert!(dir.path().join("run/config.resolved.json").exists());
}

#[test]
fn bad_override_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    unsafe {
        assert_eq!(msth_synth(cstr(&data).as_ptr(), MsthPreset::Static, 8, 8, 2, 16, 0), MsthStatus::Ok);
        let mut m = ptr::null_mut();
        let ov = CString::new("steps=1; no_such_key=3").unwrap();
        assert_eq!(msth_train(cstr(&data).as_ptr(), ptr::null(), ov.as_ptr(), &mut m), MsthStatus::Config);
        assert!(last_error().contains("no_such_key"));
        let ov = CString::new("steps").unwrap();
        assert_eq!(msth_train(cstr(&data).as_ptr(), ptr::null(), ov.as_ptr(), &mut m), MsthStatus::InvalidArgument);
        assert!(m.is_null());
    }
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/msth.h")).unwrap();
    for f in [
        "msth_version",
        "msth_last_error",
        "msth_model_load",
        "msth_model_free",
        "msth_model_save",
        "msth_model_info",
        "msth_model_query",
        "msth_render",
        "msth_render_incremental",
        "msth_dataset_load",
        "msth_dataset_free",
        "msth_dataset_info",
        "msth_dataset_camera",
        "msth_dataset_time",
        "msth_synth",
        "msth_train",
    ] {
        assert!(header.contains(&format!("{f}(")), "{f} missing from header");
    }
    assert!(header.contains("typedef struct MsthModel MsthModel;"));
}

/// Compiles and runs a C program against the header and the static library
/// when a C compiler is on PATH.
#[test]
fn c_program_links_and_runs() {
    let cc = ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| std::process::Command::new(c).arg("--version").output().is_ok());
    let Some(cc) = cc else {
        eprintln!("no C compiler found; skipping");
        return;
    };
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    // the test binary lives in target/<profile>/deps
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().unwrap().parent().unwrap();
    let lib = profile_dir.join("libmsth_ffi.a");
    if !lib.exists() {
        eprintln!("{} not built; skipping", lib.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    std::fs::write(
        &src,
        r#"
#include <stdio.h>
#include <string.h>
#include "msth.h"
int main(void) {
    MsthModel *m = NULL;
    if (msth_model_load(NULL, &m) != MSTH_STATUS_NULL_ARGUMENT) return 1;
    if (strlen(msth_last_error()) == 0) return 2;
    if (msth_model_load("/definitely/missing.msth", &m) != MSTH_STATUS_MISSING_FILE) return 3;
    if (m != NULL) return 4;
    printf("%s\n", msth_version());
    return 0;
}
"#,
    )
    .unwrap();
    let bin = dir.path().join("prog");
    let out = std::process::Command::new(cc)
        .arg(&src)
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = std::process::Command::new(&bin).output().unwrap();
    assert!(run.status.success(), "exit {:?}", run.status.code());
    assert_eq!(String::from_utf8_lossy(&run.stdout).trim(), env!("CARGO_PKG_VERSION"));
}
