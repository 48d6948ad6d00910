//! C ABI over `msth`.
//!
//! Objects are opaque heap handles created by `*_load`/`*_train` functions
//! and released with the matching `*_free`. Every fallible call returns an
//! [`MsthStatus`]; on failure a message for the calling thread is available
//! from [`msth_last_error`]. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use msth::render::{render_frame, render_video_incremental, IncrementalOptions, PinholeCamera};
use msth::sampler::RayImportanceTable;
use msth::scene::{generate_synthetic, load_dataset, Preset, SceneDataset, SynthSpec};
use msth::train::{Checkpoint, ConfigPreset, Origin, ResolvedConfig, Trainer};
use msth::Error;

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MsthStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    MissingFile = 5,
    Format = 6,
    Dataset = 7,
    NonFinite = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MsthPreset {
    Orbit = 0,
    Static = 1,
    MovingBox = 2,
}

/// Pinhole camera; `pose` is camera-to-world, row-major 3×4, with +z
/// forward and +y down in camera space.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MsthCamera {
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub pose: [f64; 12],
    pub near: f64,
    pub far: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MsthModelInfo {
    /// 0 masked, 1 additive, 2 pure 4D.
    pub mode: u32,
    pub step: u64,
    pub n_samples: u32,
    pub bounds_min: [f64; 3],
    pub bounds_max: [f64; 3],
    /// Default incremental-rendering threshold from the training config.
    pub epsilon: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MsthIncrementalStats {
    pub dynamic_pixels: u64,
    pub rendered_pixels: u64,
    pub total_pixels: u64,
    pub speedup: f64,
}

/// A trained model (checkpoint).
pub struct MsthModel {
    ckpt: Checkpoint,
}

/// A loaded dataset.
pub struct MsthDataset {
    data: SceneDataset,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> MsthStatus {
    match e {
        Error::Config(_) | Error::Dimension { .. } => MsthStatus::Config,
        Error::NonFinite { .. } => MsthStatus::NonFinite,
        Error::Dataset(_) => MsthStatus::Dataset,
        Error::MissingFile(_) => MsthStatus::MissingFile,
        Error::Format(_) | Error::Json(_) | Error::Image { .. } => MsthStatus::Format,
        Error::Io { .. } => MsthStatus::Io,
    }
}

enum Fail {
    Core(Error),
    Status(MsthStatus, String),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MsthStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            MsthStatus::Ok
        }
        Ok(Err(Fail::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Ok(Err(Fail::Status(s, m))) => {
            set_error(m);
            s
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            MsthStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail::Status(MsthStatus::NullArgument, format!("`{what}` is null"))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Status(MsthStatus::InvalidArgument, format!("`{what}` is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn out_slice<'a>(ptr: *mut f32, len: usize, need: usize) -> Result<&'a mut [f32], Fail> {
    if ptr.is_null() {
        return Err(null("out"));
    }
    if len < need {
        return Err(Fail::Status(
            MsthStatus::BufferTooSmall,
            format!("buffer holds {len} floats, {need} required"),
        ));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, need))
}

impl From<MsthCamera> for PinholeCamera {
    fn from(c: MsthCamera) -> Self {
        let p = c.pose;
        PinholeCamera {
            width: c.width,
            height: c.height,
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            pose: [[p[0], p[1], p[2], p[3]], [p[4], p[5], p[6], p[7]], [p[8], p[9], p[10], p[11]]],
            near: c.near,
            far: c.far,
        }
    }
}

impl From<&PinholeCamera> for MsthCamera {
    fn from(c: &PinholeCamera) -> Self {
        let mut pose = [0.0; 12];
        for (i, v) in c.pose.iter().flatten().enumerate() {
            pose[i] = *v;
        }
        MsthCamera {
            width: c.width,
            height: c.height,
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            pose,
            near: c.near,
            far: c.far,
        }
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn msth_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message describing the calling thread's most recent failure (empty after
/// a success). Valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn msth_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a checkpoint written by `msth train`.
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn msth_model_load(path: *const c_char, out: *mut *mut MsthModel) -> MsthStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let p = path_arg(path, "path")?;
        let ckpt = Checkpoint::load(&p)?;
        *out = Box::into_raw(Box::new(MsthModel { ckpt }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn msth_model_free(model: *mut MsthModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle and `path` a valid string.
#[no_mangle]
pub unsafe extern "C" fn msth_model_save(model: *const MsthModel, path: *const c_char) -> MsthStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let p = path_arg(path, "path")?;
        m.ckpt.save(&p)?;
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn msth_model_info(model: *const MsthModel, out: *mut MsthModelInfo) -> MsthStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let model = &m.ckpt.model;
        *out = MsthModelInfo {
            mode: match model.mode() {
                msth::field::EncodingMode::Masked => 0,
                msth::field::EncodingMode::Additive => 1,
                msth::field::EncodingMode::Pure4d => 2,
            },
            step: m.ckpt.step,
            n_samples: model.n_samples as u32,
            bounds_min: model.bounds.min,
            bounds_max: model.bounds.max,
            epsilon: m.ckpt.config.epsilon,
        };
        Ok(())
    })
}

/// Field value at world point `x`, unit direction `dir` and normalized time
/// `t`. `mask` receives the static weight `m(x)` (0 for models without a mask).
///
/// # Safety
/// Pointers must be valid; `x`, `dir` and `rgb` point to 3 doubles.
#[no_mangle]
pub unsafe extern "C" fn msth_model_query(
    model: *const MsthModel,
    x: *const f64,
    dir: *const f64,
    t: f64,
    sigma: *mut f64,
    rgb: *mut f64,
    mask: *mut f64,
) -> MsthStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if x.is_null() || dir.is_null() || sigma.is_null() || rgb.is_null() || mask.is_null() {
            return Err(null("x/dir/sigma/rgb/mask"));
        }
        let x = std::slice::from_raw_parts(x, 3);
        let d = std::slice::from_raw_parts(dir, 3);
        let model = &m.ckpt.model;
        let u = model.bounds.normalize([x[0], x[1], x[2]]).map(|v| v.clamp(0.0, 1.0) as f32);
        let (s, c, _) = model
            .field
            .query_dynamic(u, [d[0] as f32, d[1] as f32, d[2] as f32], t as f32)?;
        *sigma = s as f64;
        let rgb = std::slice::from_raw_parts_mut(rgb, 3);
        for k in 0..3 {
            rgb[k] = c[k] as f64;
        }
        *mask = if model.field.config.has_mask() {
            model.field.mask_value(u) as f64
        } else {
            0.0
        };
        Ok(())
    })
}

/// Renders one RGB frame (row-major, 3 floats per pixel) into `out`, which
/// must hold at least `width·height·3` floats.
///
/// # Safety
/// `model` and `camera` must be valid; `out` must point to `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn msth_render(
    model: *const MsthModel,
    camera: *const MsthCamera,
    t: f64,
    out: *mut f32,
    out_len: usize,
) -> MsthStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let cam: PinholeCamera = (*camera.as_ref().ok_or_else(|| null("camera"))?).into();
        cam.validate()?;
        let need = cam.pixel_count() * 3;
        let dst = out_slice(out, out_len, need)?;
        let frame = render_frame(&m.ckpt.model, &cam, t)?;
        dst.copy_from_slice(&frame.rgb.data);
        Ok(())
    })
}

/// Renders `n_times` frames, reusing frame 0 for pixels classified static
/// at point threshold `epsilon`; the ray threshold is the checkpoint's
/// `ray_threshold`. `out` receives the frames back to back.
///
/// # Safety
/// Pointers must be valid; `times` points to `n_times` doubles, `out` to
/// `out_len` floats; `stats` may be null.
#[no_mangle]
pub unsafe extern "C" fn msth_render_incremental(
    model: *const MsthModel,
    camera: *const MsthCamera,
    times: *const f64,
    n_times: usize,
    epsilon: f64,
    out: *mut f32,
    out_len: usize,
    stats: *mut MsthIncrementalStats,
) -> MsthStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let cam: PinholeCamera = (*camera.as_ref().ok_or_else(|| null("camera"))?).into();
        cam.validate()?;
        if times.is_null() {
            return Err(null("times"));
        }
        let ts = std::slice::from_raw_parts(times, n_times);
        let per = cam.pixel_count() * 3;
        let dst = out_slice(out, out_len, per * n_times)?;
        let opts = IncrementalOptions {
            ray_threshold: Some(m.ckpt.config.ray_threshold),
            ..IncrementalOptions::new(epsilon)
        };
        let video = render_video_incremental(&m.ckpt.model, &cam, ts, &opts)?;
        for (chunk, f) in dst.chunks_exact_mut(per).zip(&video.frames) {
            chunk.copy_from_slice(&f.data);
        }
        if let Some(s) = stats.as_mut() {
            *s = MsthIncrementalStats {
                dynamic_pixels: video.dynamic_pixels as u64,
                rendered_pixels: video.rendered_pixels as u64,
                total_pixels: video.total_pixels as u64,
                speedup: video.speedup(),
            };
        }
        Ok(())
    })
}

/// Loads a dataset directory containing `scene.json`.
///
/// # Safety
/// `dir` must be a valid string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn msth_dataset_load(dir: *const c_char, out: *mut *mut MsthDataset) -> MsthStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let p = path_arg(dir, "dir")?;
        let data = load_dataset(&p)?;
        *out = Box::into_raw(Box::new(MsthDataset { data }));
        Ok(())
    })
}

/// # Safety
/// `data` must come from this library and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn msth_dataset_free(data: *mut MsthDataset) {
    if !data.is_null() {
        drop(Box::from_raw(data));
    }
}

/// Number of cameras and frames.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn msth_dataset_info(data: *const MsthDataset, cameras: *mut usize, frames: *mut usize) -> MsthStatus {
    guard(|| {
        let d = data.as_ref().ok_or_else(|| null("data"))?;
        *cameras.as_mut().ok_or_else(|| null("cameras"))? = d.data.cameras.len();
        *frames.as_mut().ok_or_else(|| null("frames"))? = d.data.frame_count;
        Ok(())
    })
}

/// Camera `index` of the dataset.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn msth_dataset_camera(data: *const MsthDataset, index: usize, out: *mut MsthCamera) -> MsthStatus {
    guard(|| {
        let d = data.as_ref().ok_or_else(|| null("data"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let cam = d.data.cameras.get(index).ok_or_else(|| {
            Fail::Status(
                MsthStatus::InvalidArgument,
                format!("camera {index} out of range ({} cameras)", d.data.cameras.len()),
            )
        })?;
        *out = (&cam.camera).into();
        Ok(())
    })
}

/// Normalized time of frame `frame`.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn msth_dataset_time(data: *const MsthDataset, frame: usize, t: *mut f64) -> MsthStatus {
    guard(|| {
        let d = data.as_ref().ok_or_else(|| null("data"))?;
        if frame >= d.data.frame_count {
            return Err(Fail::Status(MsthStatus::InvalidArgument, format!("frame {frame} out of range")));
        }
        *t.as_mut().ok_or_else(|| null("t"))? = d.data.time_of(frame);
        Ok(())
    })
}

/// Writes a procedural dataset to `out_dir`.
///
/// # Safety
/// `out_dir` must be a valid string.
#[no_mangle]
pub unsafe extern "C" fn msth_synth(
    out_dir: *const c_char,
    preset: MsthPreset,
    width: u32,
    height: u32,
    frames: u32,
    oracle_samples: u32,
    seed: u64,
) -> MsthStatus {
    guard(|| {
        let p = path_arg(out_dir, "out_dir")?;
        let spec = SynthSpec {
            preset: match preset {
                MsthPreset::Orbit => Preset::Orbit,
                MsthPreset::Static => Preset::Static,
                MsthPreset::MovingBox => Preset::MovingBox,
            },
            width,
            height,
            frames: frames as usize,
            oracle_samples: oracle_samples as usize,
            seed,
            ..SynthSpec::default()
        };
        generate_synthetic(&spec, &p)?;
        Ok(())
    })
}

/// Trains from scratch with the CPU-sized preset. `overrides` is null or a
/// `;`-separated list of `key=value` pairs. When `out_dir` is non-null the
/// training log and checkpoint are written there.
///
/// # Safety
/// String arguments must be valid or null where allowed; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn msth_train(
    data_dir: *const c_char,
    out_dir: *const c_char,
    overrides: *const c_char,
    out: *mut *mut MsthModel,
) -> MsthStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let data = load_dataset(&path_arg(data_dir, "data_dir")?)?;
        let mut cfg = ResolvedConfig::new(ConfigPreset::Toy);
        if !overrides.is_null() {
            let s = CStr::from_ptr(overrides)
                .to_str()
                .map_err(|_| Fail::Status(MsthStatus::InvalidArgument, "overrides are not UTF-8".into()))?;
            for kv in s.split(';').map(str::trim).filter(|kv| !kv.is_empty()) {
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| Fail::Status(MsthStatus::InvalidArgument, format!("expected key=value, got `{kv}`")))?;
                cfg.set(k.trim(), v.trim(), Origin::Flag)?;
            }
        }
        let out_path = if out_dir.is_null() { None } else { Some(path_arg(out_dir, "out_dir")?) };
        if let Some(p) = &out_path {
            std::fs::create_dir_all(p).map_err(|e| Error::Io {
                path: p.clone(),
                source: e,
            })?;
            cfg.write_dump(&p.join("config.resolved.json"))?;
        }
        let table = RayImportanceTable::build(&data, cfg.config.sampler())?;
        let mut trainer = Trainer::new(cfg.config.clone(), &data, &table)?;
        trainer.run(out_path.as_deref())?;
        let ckpt = trainer.checkpoint();
        *out = Box::into_raw(Box::new(MsthModel { ckpt }));
        Ok(())
    })
}
