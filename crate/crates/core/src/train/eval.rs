//! Held-out rendering metrics and learned-mask diagnostics.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{Model, RayTape};
use crate::render::render_frame;
use crate::scene::{d_ssim, psnr, SceneDataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum EvalSplit {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub split: EvalSplit,
    pub frame_stride: usize,
    /// Compute mask statistics and mask IoU.
    pub mask_metrics: bool,
    /// A pixel is predicted dynamic when `max_t M(r, t)` exceeds this.
    pub iou_threshold: f64,
    /// Voxels per axis for voxel statistics.
    pub voxel_res: usize,
    /// Evenly spaced frames whose training views are traced for voxel statistics.
    pub voxel_times: usize,
    /// Pixel stride of the traced training rays.
    pub voxel_ray_stride: usize,
    /// A voxel is occupied when one traced sample inside it carries at least
    /// this rendering weight.
    pub occupancy_weight: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            split: EvalSplit::Test,
            frame_stride: 1,
            mask_metrics: true,
            iou_threshold: 0.5,
            voxel_res: 40,
            voxel_times: 6,
            voxel_ray_stride: 2,
            occupancy_weight: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMetric {
    pub camera: String,
    pub frame: usize,
    pub psnr: f64,
    pub dssim: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskMetrics {
    pub occupied_voxels: usize,
    /// Fraction of occupied voxels classified dynamic (`m < 0.5`).
    pub dynamic_fraction: f64,
    /// Mean of `1 − m` over occupied voxels.
    pub mean_dynamic_weight: f64,
    /// Fraction of occupied voxels with `m ∈ [0.1, 0.9]`.
    pub ambiguous_fraction: f64,
    /// Fraction of evaluated pixels predicted dynamic.
    pub dynamic_pixel_fraction: f64,
    /// Against ground-truth dynamic masks, when the dataset has them.
    pub iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: EvalSplit,
    pub frames: Vec<FrameMetric>,
    pub mean_psnr: f64,
    pub mean_dssim: f64,
    pub mask: Option<MaskMetrics>,
}

impl EvalReport {
    pub fn summary(&self, step: u64) -> serde_json::Value {
        serde_json::json!({
            "step": step,
            "split": self.split,
            "psnr": self.mean_psnr,
            "dssim": self.mean_dssim,
            "mask": self.mask,
        })
    }
}

/// Renders every `frame_stride`-th frame of the split's cameras.
pub fn evaluate(model: &Model<f32>, dataset: &SceneDataset, opts: &EvalOptions) -> Result<EvalReport> {
    let cams = match opts.split {
        EvalSplit::Train => &dataset.train,
        EvalSplit::Test => &dataset.test,
    };
    let has_mask = model.field.config.has_mask();
    let mut frames = Vec::new();
    let mut inter = 0usize;
    let mut union = 0usize;
    let mut any_gt = false;
    let mut predicted = 0usize;
    let mut pixels = 0usize;
    for &ci in cams {
        let cam = &dataset.cameras[ci];
        let mut max_dyn = vec![0.0f32; cam.camera.pixel_count()];
        for f in (0..dataset.frame_count).step_by(opts.frame_stride.max(1)) {
            let out = render_frame(model, &cam.camera, dataset.time_of(f))?;
            let gt = &cam.frames[f];
            frames.push(FrameMetric {
                camera: cam.id.clone(),
                frame: f,
                psnr: psnr(&out.rgb, gt)?,
                dssim: d_ssim(&out.rgb, gt)?,
            });
            for (m, &d) in max_dyn.iter_mut().zip(&out.dynamic_weight.data) {
                *m = m.max(d);
            }
        }
        let pred: Vec<bool> = max_dyn.iter().map(|&d| has_mask && d as f64 > opts.iou_threshold).collect();
        predicted += pred.iter().filter(|&&p| p).count();
        pixels += pred.len();
        if let Some(gt) = &cam.dynamic_mask {
            any_gt = true;
            for (&p, &g) in pred.iter().zip(gt) {
                inter += (p && g) as usize;
                union += (p || g) as usize;
            }
        }
    }
    let n = frames.len().max(1) as f64;
    let mean_psnr = frames.iter().map(|f| f.psnr).sum::<f64>() / n;
    let mean_dssim = frames.iter().map(|f| f.dssim).sum::<f64>() / n;
    let mask = if opts.mask_metrics && has_mask {
        let v = voxel_mask_stats(model, dataset, opts)?;
        Some(MaskMetrics {
            occupied_voxels: v.occupied,
            dynamic_fraction: v.dynamic_fraction,
            mean_dynamic_weight: v.mean_dynamic_weight,
            ambiguous_fraction: v.ambiguous_fraction,
            dynamic_pixel_fraction: predicted as f64 / pixels.max(1) as f64,
            iou: any_gt.then(|| if union == 0 { 1.0 } else { inter as f64 / union as f64 }),
        })
    } else {
        None
    };
    Ok(EvalReport {
        split: opts.split,
        frames,
        mean_psnr,
        mean_dssim,
        mask,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VoxelMaskStats {
    pub occupied: usize,
    pub dynamic_fraction: f64,
    pub mean_dynamic_weight: f64,
    pub ambiguous_fraction: f64,
}

/// Voxels that training views actually see: the voxel of every traced
/// sample whose rendering weight reaches `occupancy_weight`. Interior voxels
/// of solid objects never receive gradient and are left out.
pub fn occupied_voxels(model: &Model<f32>, dataset: &SceneDataset, opts: &EvalOptions) -> Result<Vec<bool>> {
    let r = opts.voxel_res.max(2);
    let stride = opts.voxel_ray_stride.max(1);
    let nt = opts.voxel_times.max(1).min(dataset.frame_count.max(1));
    let frames: Vec<usize> = (0..nt)
        .map(|k| if nt == 1 { 0 } else { k * (dataset.frame_count - 1) / (nt - 1) })
        .collect();
    let mut jobs = Vec::new();
    for &ci in &dataset.train {
        let cam = &dataset.cameras[ci].camera;
        for &f in &frames {
            for y in (0..cam.height).step_by(stride) {
                jobs.push((ci, f, y));
            }
        }
    }
    let hits: Vec<Result<Vec<usize>>> = jobs
        .par_iter()
        .map(|&(ci, f, y)| {
            let cam = &dataset.cameras[ci].camera;
            let t = dataset.time_of(f);
            let mut tape = RayTape::default();
            let mut out = Vec::new();
            for x in (0..cam.width).step_by(stride) {
                let ray = cam.generate_ray(x as f64, y as f64);
                model.ray_forward(&ray, t, None, false, &mut tape)?;
                if !tape.hit {
                    continue;
                }
                for (&s, &w) in tape.mid.iter().zip(&tape.weights.w) {
                    if (w as f64) < opts.occupancy_weight {
                        continue;
                    }
                    let p = std::array::from_fn(|k| ray.origin[k] + s * ray.direction[k]);
                    let c = model.bounds.normalize(p).map(|v| ((v * r as f64) as usize).min(r - 1));
                    out.push(c[0] + r * (c[1] + r * c[2]));
                }
            }
            Ok(out)
        })
        .collect();
    let mut occ = vec![false; r * r * r];
    for h in hits {
        for i in h? {
            occ[i] = true;
        }
    }
    Ok(occ)
}

/// Mask statistics at the centres of [`occupied_voxels`].
pub fn voxel_mask_stats(model: &Model<f32>, dataset: &SceneDataset, opts: &EvalOptions) -> Result<VoxelMaskStats> {
    let r = opts.voxel_res.max(2);
    let occ = occupied_voxels(model, dataset, opts)?;
    // occupied, classified dynamic, sum of 1 − m, ambiguous
    let mut acc = [0.0; 4];
    for (i, _) in occ.iter().enumerate().filter(|(_, &o)| o) {
        let c = [i % r, (i / r) % r, i / (r * r)];
        let x = c.map(|k| ((k as f64 + 0.5) / r as f64) as f32);
        let m = model.field.mask_value(x) as f64;
        acc[0] += 1.0;
        acc[1] += (m < 0.5) as u8 as f64;
        acc[2] += 1.0 - m;
        acc[3] += (0.1..=0.9).contains(&m) as u8 as f64;
    }
    if acc[0] == 0.0 {
        return Ok(VoxelMaskStats::default());
    }
    Ok(VoxelMaskStats {
        occupied: acc[0] as usize,
        dynamic_fraction: acc[1] / acc[0],
        mean_dynamic_weight: acc[2] / acc[0],
        ambiguous_fraction: acc[3] / acc[0],
    })
}

