//! Whole-frame rendering and the mask-gated incremental video renderer.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::camera::{PinholeCamera, Ray};
use super::image::Image;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RayOutput {
    pub rgb: [f64; 3],
    /// Expected termination distance `Σ w_i s_i`.
    pub depth: f64,
    /// `M(r) = Σ w_i (1 − m_i)`; zero for fields without a mask.
    pub dynamic_weight: f64,
    pub opacity: f64,
}

/// Anything that can shade a single ray at a normalized time.
pub trait RayField: Sync {
    fn render_ray(&self, ray: &Ray, t: f64) -> Result<RayOutput>;

    /// True if some point on the ray is confidently dynamic, i.e. its mask
    /// satisfies `1 − m(x) > 1 − ε`. Fields without a mask report nothing.
    fn ray_has_dynamic_point(&self, _ray: &Ray, _epsilon: f64) -> bool {
        false
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedFrame {
    pub rgb: Image,
    pub depth: Image,
    pub dynamic_weight: Image,
}

/// Renders every pixel; rows run in parallel and each pixel is independent,
/// so the output does not depend on thread count.
pub fn render_frame<F: RayField + ?Sized>(field: &F, camera: &PinholeCamera, t: f64) -> Result<RenderedFrame> {
    camera.validate()?;
    let w = camera.width as usize;
    let rows: Vec<Result<Vec<RayOutput>>> = (0..camera.height)
        .into_par_iter()
        .map(|y| {
            (0..camera.width)
                .map(|x| field.render_ray(&camera.generate_ray(x as f64, y as f64), t))
                .collect()
        })
        .collect();
    let mut rgb = Image::new(camera.width, camera.height, 3);
    let mut depth = Image::new(camera.width, camera.height, 1);
    let mut dynw = Image::new(camera.width, camera.height, 1);
    for (y, row) in rows.into_iter().enumerate() {
        for (x, o) in row?.into_iter().enumerate() {
            let i = y * w + x;
            for k in 0..3 {
                rgb.data[i * 3 + k] = o.rgb[k] as f32;
            }
            depth.data[i] = o.depth as f32;
            dynw.data[i] = o.dynamic_weight as f32;
        }
    }
    Ok(RenderedFrame {
        rgb,
        depth,
        dynamic_weight: dynw,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IncrementalOptions {
    /// Point threshold: a point is dynamic when `1 − m > 1 − ε`.
    pub epsilon: f64,
    /// Threshold on the frame-0 ray aggregate `M(r)`; defaults to `1 − ε`.
    pub ray_threshold: Option<f64>,
    /// Also flag rays that cross any confidently dynamic point.
    pub point_scan: bool,
}

impl IncrementalOptions {
    pub fn new(epsilon: f64) -> Self {
        IncrementalOptions {
            epsilon,
            ray_threshold: None,
            point_scan: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::Config(format!("epsilon must be in (0, 1), got {}", self.epsilon)));
        }
        if let Some(r) = self.ray_threshold {
            if !r.is_finite() {
                return Err(Error::Config("ray threshold must be finite".into()));
            }
        }
        Ok(())
    }

    pub fn ray_threshold(&self) -> f64 {
        self.ray_threshold.unwrap_or(1.0 - self.epsilon)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IncrementalVideo {
    pub frames: Vec<Image>,
    /// Row-major per-pixel dynamic classification.
    pub dynamic: Vec<bool>,
    pub dynamic_pixels: usize,
    /// Pixels shaded across all frames.
    pub rendered_pixels: usize,
    /// Pixels delivered across all frames.
    pub total_pixels: usize,
}

impl IncrementalVideo {
    /// Delivered pixels per shaded pixel.
    pub fn speedup(&self) -> f64 {
        self.total_pixels as f64 / self.rendered_pixels.max(1) as f64
    }

    pub fn dynamic_fraction(&self) -> f64 {
        self.dynamic_pixels as f64 / self.dynamic.len().max(1) as f64
    }
}

/// Renders `times[0]` fully, classifies pixels, then re-shades only dynamic
/// pixels for the remaining times and copies the rest from the first frame.
pub fn render_video_incremental<F: RayField + ?Sized>(
    field: &F,
    camera: &PinholeCamera,
    times: &[f64],
    opts: &IncrementalOptions,
) -> Result<IncrementalVideo> {
    opts.validate()?;
    if times.is_empty() {
        return Err(Error::Config("incremental rendering needs at least one time".into()));
    }
    let first = render_frame(field, camera, times[0])?;
    let thr = opts.ray_threshold();
    let w = camera.width;
    let dynamic: Vec<bool> = (0..camera.pixel_count())
        .into_par_iter()
        .map(|i| {
            if first.dynamic_weight.data[i] as f64 > thr {
                return true;
            }
            if !opts.point_scan {
                return false;
            }
            let ray = camera.generate_ray((i as u32 % w) as f64, (i as u32 / w) as f64);
            field.ray_has_dynamic_point(&ray, opts.epsilon)
        })
        .collect();
    let idx: Vec<usize> = (0..dynamic.len()).filter(|&i| dynamic[i]).collect();
    let mut frames = vec![first.rgb.clone()];
    for &t in &times[1..] {
        let shaded: Vec<Result<RayOutput>> = idx
            .par_iter()
            .map(|&i| field.render_ray(&camera.generate_ray((i as u32 % w) as f64, (i as u32 / w) as f64), t))
            .collect();
        let mut im = first.rgb.clone();
        for (&i, o) in idx.iter().zip(shaded) {
            let o = o?;
            for k in 0..3 {
                im.data[i * 3 + k] = o.rgb[k] as f32;
            }
        }
        frames.push(im);
    }
    let n = camera.pixel_count();
    Ok(IncrementalVideo {
        frames,
        dynamic_pixels: idx.len(),
        rendered_pixels: n + idx.len() * (times.len() - 1),
        total_pixels: n * times.len(),
        dynamic,
    })
}

/// Reference path: every frame rendered in full.
pub fn render_video_full<F: RayField + ?Sized>(field: &F, camera: &PinholeCamera, times: &[f64]) -> Result<Vec<Image>> {
    times.iter().map(|&t| render_frame(field, camera, t).map(|f| f.rgb)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// A blob whose brightness changes with time in the left half only.
    struct Toy;

    impl RayField for Toy {
        fn render_ray(&self, ray: &Ray, t: f64) -> Result<RayOutput> {
            let left = ray.direction[0] < 0.0;
            let v = if left { t } else { 0.5 };
            Ok(RayOutput {
                rgb: [v; 3],
                depth: 1.0,
                dynamic_weight: if left { 1.0 } else { 0.0 },
                opacity: 1.0,
            })
        }
    }

    fn cam() -> PinholeCamera {
        PinholeCamera::look_at(8, 6, 8.0, [0.0, 0.0, -3.0], [0.0; 3], [0.0, 1.0, 0.0], 0.5, 6.0)
    }

    #[test]
    fn frame_is_deterministic() {
        let a = render_frame(&Toy, &cam(), 0.3).unwrap();
        let b = render_frame(&Toy, &cam(), 0.3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn incremental_matches_full_when_classification_is_right() {
        let times = [0.0, 0.25, 0.5, 1.0];
        let inc = render_video_incremental(&Toy, &cam(), &times, &IncrementalOptions::new(0.1)).unwrap();
        let full = render_video_full(&Toy, &cam(), &times).unwrap();
        assert_eq!(inc.frames, full);
        assert_eq!(inc.dynamic_pixels, 24);
        assert!((inc.speedup() - 4.0 * 48.0 / (48.0 + 24.0 * 3.0)).abs() < 1e-12);
    }

    #[test]
    fn nothing_dynamic_copies_frame_zero() {
        let times = [0.0, 0.5, 1.0];
        let opts = IncrementalOptions {
            ray_threshold: Some(2.0),
            ..IncrementalOptions::new(0.1)
        };
        let inc = render_video_incremental(&Toy, &cam(), &times, &opts).unwrap();
        assert!(inc.frames.iter().all(|f| f == &inc.frames[0]));
        assert_eq!(inc.speedup(), 3.0);
    }

    #[test]
    fn everything_dynamic_equals_full() {
        let times = [0.0, 0.7];
        let opts = IncrementalOptions {
            ray_threshold: Some(-1.0),
            ..IncrementalOptions::new(0.5)
        };
        let inc = render_video_incremental(&Toy, &cam(), &times, &opts).unwrap();
        assert_eq!(inc.frames, render_video_full(&Toy, &cam(), &times).unwrap());
        assert_eq!(inc.speedup(), 1.0);
    }

    #[test]
    fn epsilon_is_validated() {
        for e in [0.0, 1.0, -0.2, f64::NAN] {
            assert!(render_video_incremental(&Toy, &cam(), &[0.0], &IncrementalOptions::new(e)).is_err());
        }
    }
}
