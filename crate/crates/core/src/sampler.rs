//! Importance distribution over training rays and frames.
//!
//! `P(r) ∝ exp(std_t(Y(r,t)) / τ₁)` and `P(t|r) ∝ exp(|Y(r,t) − median_t Y(r,·)| / τ₂)`
//! on luma `Y`, optionally block-averaged by `downsample` before the
//! statistics are taken. Conditionals are stored as 16-bit fixed point.

use std::path::Path;

use rand::distr::Distribution;
use rand::Rng;
use rand_distr::weighted::WeightedAliasIndex;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::{Container, Record};
use crate::error::{Error, Result};
use crate::render::Image;
use crate::scene::SceneDataset;

pub const IMPORTANCE_CACHE_NAME: &str = "importance.bin";
const CACHE_FORMAT: u64 = 1;
const Q_ONE: f64 = 65535.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub tau1: f64,
    pub tau2: f64,
    pub p_uniform: f64,
    pub downsample: u32,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            tau1: 0.1,
            tau2: 0.05,
            p_uniform: 0.2,
            downsample: 1,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau1 > 0.0 && self.tau1.is_finite() && self.tau2 > 0.0 && self.tau2.is_finite()) {
            return Err(Error::Config("sampler temperatures must be positive and finite".into()));
        }
        if !(0.0..=1.0).contains(&self.p_uniform) {
            return Err(Error::Config("p_uniform must lie in [0, 1]".into()));
        }
        if self.downsample == 0 {
            return Err(Error::Config("downsample must be >= 1".into()));
        }
        Ok(())
    }
}

/// One drawn training sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RaySample {
    pub ray: u32,
    pub frame: u32,
}

/// Where a flat ray id lives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelRef {
    /// Index into `SceneDataset::cameras`.
    pub camera: usize,
    pub x: u32,
    pub y: u32,
}

#[derive(Debug, Clone)]
pub struct RayImportanceTable {
    pub config: SamplerConfig,
    pub frames: usize,
    /// Dataset camera index, width, height and first ray id of each training camera.
    pub layout: Vec<(usize, u32, u32, usize)>,
    pub std: Vec<f32>,
    pub median: Vec<f32>,
    pub p_ray: Vec<f64>,
    /// `rays × frames` quantized conditionals; each row sums to ~65535.
    pub cond: Vec<u16>,
    pub warnings: Vec<String>,
    ray_alias: WeightedAliasIndex<f64>,
    time_alias: Vec<WeightedAliasIndex<u32>>,
}

pub fn luma(rgb: &[f32]) -> f32 {
    0.2126 * rgb[0] + 0.7152 * rgb[1] + 0.0722 * rgb[2]
}

fn luma_image(im: &Image, ds: u32) -> (u32, u32, Vec<f32>) {
    let w = im.width.div_ceil(ds);
    let h = im.height.div_ceil(ds);
    let mut out = vec![0.0f32; (w * h) as usize];
    let mut count = vec![0u32; (w * h) as usize];
    for y in 0..im.height {
        for x in 0..im.width {
            let i = ((y / ds) * w + x / ds) as usize;
            out[i] += luma(im.pixel(x, y));
            count[i] += 1;
        }
    }
    for (v, c) in out.iter_mut().zip(count) {
        *v /= c as f32;
    }
    (w, h, out)
}

fn median_of(v: &mut [f32]) -> f32 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Softmax of `logits / tau`, max-shifted.
pub fn softmax(logits: &[f64], tau: f64) -> Vec<f64> {
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| ((l - mx) / tau).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Quantizes a probability row to u16 with every entry at least 1.
pub fn quantize_row(p: &[f64]) -> Vec<u16> {
    p.iter().map(|&x| (x * Q_ONE).round().clamp(1.0, Q_ONE) as u16).collect()
}

impl RayImportanceTable {
    pub fn build(dataset: &SceneDataset, config: SamplerConfig) -> Result<Self> {
        config.validate()?;
        let frames = dataset.frame_count;
        let ds = config.downsample;
        let mut layout = Vec::new();
        let mut offset = 0usize;
        for &ci in &dataset.train {
            let c = &dataset.cameras[ci].camera;
            layout.push((ci, c.width, c.height, offset));
            offset += c.pixel_count();
        }
        let n_rays = offset;
        let mut warnings = Vec::new();
        if frames < 2 {
            warnings.push("single-frame dataset: temporal std undefined, using uniform ray probabilities".into());
        }

        let mut std = vec![0.0f32; n_rays];
        let mut median = vec![0.0f32; n_rays];
        let mut cond = vec![0u16; n_rays * frames];
        for &(ci, w, h, off) in &layout {
            let cam = &dataset.cameras[ci];
            let lumas: Vec<(u32, u32, Vec<f32>)> = cam.frames.par_iter().map(|im| luma_image(im, ds)).collect();
            let (lw, _, _) = lumas[0];
            let n = (w * h) as usize;
            let rows: Vec<(f32, f32, Vec<u16>)> = (0..n)
                .into_par_iter()
                .map(|p| {
                    let (x, y) = (p as u32 % w, p as u32 / w);
                    let bi = ((y / ds) * lw + x / ds) as usize;
                    let mut series: Vec<f32> = lumas.iter().map(|l| l.2[bi]).collect();
                    let mean = series.iter().map(|&v| v as f64).sum::<f64>() / frames as f64;
                    let var = series.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / frames as f64;
                    let resid: Vec<f64> = series.iter().map(|&v| v as f64).collect();
                    let med = median_of(&mut series);
                    let logits: Vec<f64> = resid.iter().map(|&v| (v - med as f64).abs()).collect();
                    (var.sqrt() as f32, med, quantize_row(&softmax(&logits, config.tau2)))
                })
                .collect();
            for (p, (s, m, row)) in rows.into_iter().enumerate() {
                std[off + p] = s;
                median[off + p] = m;
                cond[(off + p) * frames..(off + p + 1) * frames].copy_from_slice(&row);
            }
        }
        let logits: Vec<f64> = if frames < 2 {
            vec![0.0; n_rays]
        } else {
            std.iter().map(|&s| s as f64).collect()
        };
        let p_ray = softmax(&logits, config.tau1);
        Self::assemble(config, frames, layout, std, median, p_ray, cond, warnings)
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        config: SamplerConfig,
        frames: usize,
        layout: Vec<(usize, u32, u32, usize)>,
        std: Vec<f32>,
        median: Vec<f32>,
        p_ray: Vec<f64>,
        cond: Vec<u16>,
        warnings: Vec<String>,
    ) -> Result<Self> {
        if p_ray.is_empty() {
            return Err(Error::Dataset("no training rays".into()));
        }
        let ray_alias = WeightedAliasIndex::new(p_ray.clone())
            .map_err(|e| Error::Dataset(format!("ray distribution: {e}")))?;
        let time_alias = cond
            .par_chunks(frames)
            .map(|row| {
                WeightedAliasIndex::new(row.iter().map(|&q| q as u32).collect())
                    .map_err(|e| Error::Dataset(format!("frame distribution: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(RayImportanceTable {
            config,
            frames,
            layout,
            std,
            median,
            p_ray,
            cond,
            warnings,
            ray_alias,
            time_alias,
        })
    }

    pub fn n_rays(&self) -> usize {
        self.p_ray.len()
    }

    /// `P(t|r)` after renormalizing the quantized row.
    pub fn p_time(&self, ray: usize) -> Vec<f64> {
        let row = &self.cond[ray * self.frames..(ray + 1) * self.frames];
        let s: f64 = row.iter().map(|&q| q as f64).sum();
        row.iter().map(|&q| q as f64 / s).collect()
    }

    /// Joint importance probability of `(ray, frame)`.
    pub fn p_joint(&self, s: RaySample) -> f64 {
        self.p_ray[s.ray as usize] * self.p_time(s.ray as usize)[s.frame as usize]
    }

    pub fn pixel(&self, ray: u32) -> PixelRef {
        let r = ray as usize;
        let k = self.layout.partition_point(|&(_, _, _, off)| off <= r) - 1;
        let (ci, w, _, off) = self.layout[k];
        let p = (r - off) as u32;
        PixelRef {
            camera: ci,
            x: p % w,
            y: p / w,
        }
    }

    pub fn sample_importance<G: Rng + ?Sized>(&self, rng: &mut G) -> RaySample {
        let ray = self.ray_alias.sample(rng);
        let frame = self.time_alias[ray].sample(rng);
        RaySample {
            ray: ray as u32,
            frame: frame as u32,
        }
    }

    pub fn sample_uniform<G: Rng + ?Sized>(&self, rng: &mut G) -> RaySample {
        RaySample {
            ray: rng.random_range(0..self.n_rays()) as u32,
            frame: rng.random_range(0..self.frames) as u32,
        }
    }

    /// `n` draws from `p_uniform · U + (1 − p_uniform) · P(r)P(t|r)`.
    pub fn sample_batch<G: Rng + ?Sized>(&self, n: usize, p_uniform: f64, rng: &mut G) -> Vec<RaySample> {
        (0..n)
            .map(|_| {
                if p_uniform > 0.0 && (p_uniform >= 1.0 || rng.random::<f64>() < p_uniform) {
                    self.sample_uniform(rng)
                } else {
                    self.sample_importance(rng)
                }
            })
            .collect()
    }

    /// Loads `dir/importance.bin` if it matches `fingerprint` and `config`,
    /// otherwise builds the table and rewrites the cache.
    pub fn cached(dataset: &SceneDataset, config: SamplerConfig) -> Result<Self> {
        let path = dataset.root.join(IMPORTANCE_CACHE_NAME);
        let fp = fingerprint(dataset, &config);
        if path.exists() {
            if let Ok(t) = Self::load(&path, fp) {
                return Ok(t);
            }
        }
        let t = Self::build(dataset, config)?;
        // best effort: a read-only dataset directory just means no cache
        let _ = t.save(&path, fp);
        Ok(t)
    }

    pub fn save(&self, path: &Path, fingerprint: u64) -> Result<()> {
        let mut c = Container::new();
        c.insert("importance.format", Record::from_u64s(&[CACHE_FORMAT, fingerprint, self.frames as u64]));
        c.insert("importance.config", Record::from_bytes(&serde_json::to_vec(&self.config)?));
        let layout: Vec<u64> = self
            .layout
            .iter()
            .flat_map(|&(c, w, h, o)| [c as u64, w as u64, h as u64, o as u64])
            .collect();
        c.insert("importance.layout", Record::from_u64s(&layout));
        c.insert("importance.std", Record::from_reals(&self.std));
        c.insert("importance.median", Record::from_reals(&self.median));
        c.insert("importance.p_ray", Record::from_reals(&self.p_ray));
        let bytes: Vec<u8> = self.cond.iter().flat_map(|q| q.to_le_bytes()).collect();
        c.insert("importance.cond", Record::from_bytes(&bytes));
        c.save(path)
    }

    pub fn load(path: &Path, fingerprint: u64) -> Result<Self> {
        let c = Container::load(path)?;
        let head = c.get("importance.format")?.to_u64s()?;
        if head.len() != 3 || head[0] != CACHE_FORMAT || head[1] != fingerprint {
            return Err(Error::Format("stale importance cache".into()));
        }
        let frames = head[2] as usize;
        let config: SamplerConfig = serde_json::from_slice(&c.get("importance.config")?.payload)?;
        let layout = c
            .get("importance.layout")?
            .to_u64s()?
            .chunks_exact(4)
            .map(|v| (v[0] as usize, v[1] as u32, v[2] as u32, v[3] as usize))
            .collect();
        let cond: Vec<u16> = c
            .get("importance.cond")?
            .payload
            .chunks_exact(2)
            .map(|b| u16::from_le_bytes([b[0], b[1]]))
            .collect();
        let p_ray: Vec<f64> = c.reals("importance.p_ray")?;
        if frames == 0 || cond.len() != p_ray.len() * frames {
            return Err(Error::Format("importance cache has inconsistent sizes".into()));
        }
        Self::assemble(
            config,
            frames,
            layout,
            c.reals("importance.std")?,
            c.reals("importance.median")?,
            p_ray,
            cond,
            Vec::new(),
        )
    }
}

/// Hash of the manifest, the frame file sizes and the sampler settings.
pub fn fingerprint(dataset: &SceneDataset, config: &SamplerConfig) -> u64 {
    use std::hash::{Hash, Hasher};
    let mut h = std::collections::hash_map::DefaultHasher::new();
    serde_json::to_string(&dataset.manifest).unwrap_or_default().hash(&mut h);
    serde_json::to_string(config).unwrap_or_default().hash(&mut h);
    for c in &dataset.manifest.cameras {
        for f in &c.frames {
            std::fs::metadata(dataset.root.join(f)).map(|m| m.len()).unwrap_or(0).hash(&mut h);
        }
    }
    h.finish()
}
