//! Datasets: manifests, procedural scenes and image metrics.

pub mod analytic;
pub mod dataset;
pub mod metrics;
pub mod synth;

pub use analytic::{oracle_render, AnalyticScene, Motion, Primitive, Shape, Texture};
pub use dataset::{frame_time, load_dataset, CameraEntry, DatasetCamera, Manifest, SceneDataset, Split, MANIFEST_NAME};
pub use metrics::{d_ssim, mse, psnr, psnr_from_mse, ssim, PSNR_CAP};
pub use synth::{generate_synthetic, load_analytic_scene, synthetic_cameras, synthetic_scene, Preset, SynthSpec, SynthSummary};
