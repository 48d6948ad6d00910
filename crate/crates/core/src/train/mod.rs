//! The optimization loop and everything that inspects its results.

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod stats;

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{LossParts, LossRecord, MineEstimator};
use crate::model::{batch_gradients, BatchInput, BatchOptions, BatchWorkspace, Model};
use crate::nn::{adam_step, AdamParams, ParamBuffer};
use crate::render::Ray;
use crate::sampler::{RayImportanceTable, RaySample};
use crate::scene::SceneDataset;

pub use checkpoint::Checkpoint;
pub use config::{ConfigPreset, Origin, ResolvedConfig, TrainConfig, Variant, PUBLISHED_KEYS};
pub use eval::{
    evaluate, occupied_voxels, voxel_mask_stats, EvalOptions, EvalReport, EvalSplit, FrameMetric, MaskMetrics, VoxelMaskStats,
};
pub use stats::{write_stats, LevelStats, WriteStats};

/// Groups optimized with the table/grid learning rate; the rest are MLPs.
const TABLE_GROUPS: &[&str] = &["table3d", "table4d", "mask", "uncertainty", "proposal3d", "proposal4d"];

pub const CHECKPOINT_NAME: &str = "checkpoint.msth";
pub const TRAIN_LOG_NAME: &str = "train_log.ndjson";
pub const EVAL_LOG_NAME: &str = "eval_log.ndjson";

/// A training batch materialized from sampler draws.
#[derive(Debug, Clone, Default)]
pub struct Batch {
    pub samples: Vec<RaySample>,
    pub rays: Vec<Ray>,
    pub times: Vec<f64>,
    pub targets: Vec<[f64; 3]>,
}

pub struct Trainer<'a> {
    pub config: TrainConfig,
    pub dataset: &'a SceneDataset,
    pub table: &'a RayImportanceTable,
    pub model: Model<f32>,
    pub mine: MineEstimator<f32>,
    /// Completed optimization steps.
    pub step: u64,
    ws: BatchWorkspace<f32>,
}

fn group_lr(cfg: &TrainConfig, name: &str, step: u64) -> f64 {
    let base = if name == "mask" {
        cfg.lr_mask
    } else if name == "uncertainty" {
        cfg.lr_uncertainty
    } else if TABLE_GROUPS.contains(&name) {
        cfg.lr_tables
    } else {
        cfg.lr_mlp
    };
    cfg.lr_at(base, step)
}

fn grads_finite(p: &ParamBuffer<f32>) -> bool {
    match p.grads.touched() {
        Some(list) => list.iter().all(|&i| p.grads.data[i as usize].is_finite()),
        None => p.grads.data.iter().all(|g| g.is_finite()),
    }
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, dataset: &'a SceneDataset, table: &'a RayImportanceTable) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = Model::new(&config.model_config(dataset.bounds), &mut rng)?;
        let mine = MineEstimator::new(config.mine_hidden, config.mine_ema, &mut rng)?;
        Ok(Trainer {
            config,
            dataset,
            table,
            model,
            mine,
            step: 0,
            ws: BatchWorkspace::default(),
        })
    }

    pub fn resume(ckpt: Checkpoint, dataset: &'a SceneDataset, table: &'a RayImportanceTable) -> Result<Self> {
        ckpt.config.validate()?;
        Ok(Trainer {
            config: ckpt.config,
            dataset,
            table,
            model: ckpt.model,
            mine: ckpt.mine,
            step: ckpt.step,
            ws: BatchWorkspace::default(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            step: self.step,
            model: self.model.clone(),
            mine: self.mine.clone(),
        }
    }

    /// Generator for step `step`: independent of the model and of every
    /// earlier step, so variants and resumed runs see the same batches.
    pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        r.set_stream(step + 1);
        r
    }

    fn jitter_seed(seed: u64, step: u64) -> u64 {
        seed ^ 0x9E37_79B9_7F4A_7C15u64.wrapping_mul(step + 1)
    }

    /// Draws a batch from `rng` and looks up its rays and target colors.
    pub fn batch(&self, rng: &mut ChaCha8Rng) -> Result<Batch> {
        let samples = self.table.sample_batch(self.config.batch_rays, self.config.p_uniform, rng);
        let mut b = Batch {
            rays: Vec::with_capacity(samples.len()),
            times: Vec::with_capacity(samples.len()),
            targets: Vec::with_capacity(samples.len()),
            samples: Vec::new(),
        };
        for s in &samples {
            let px = self.table.pixel(s.ray);
            let cam = &self.dataset.cameras[px.camera];
            b.rays.push(cam.camera.pixel_ray(px.x, px.y)?);
            b.times.push(self.dataset.time_of(s.frame as usize));
            let c = cam.frames[s.frame as usize].pixel(px.x, px.y);
            b.targets.push([c[0] as f64, c[1] as f64, c[2] as f64]);
        }
        b.samples = samples;
        Ok(b)
    }

    /// One optimization step. Parameters are only modified once every
    /// loss term and gradient is known to be finite.
    pub fn train_step(&mut self) -> Result<LossRecord> {
        let step = self.step;
        let cfg = &self.config;
        let mut rng = Self::step_rng(cfg.seed, step);
        let batch = self.batch(&mut rng)?;
        let w = cfg.loss_weights();
        let opts = BatchOptions {
            weights: w,
            jitter_seed: Some(Self::jitter_seed(cfg.seed, step)),
            mine_pairs: cfg.mine_pairs,
            workers: cfg.effective_workers(),
        };
        self.model.zero_grads();
        self.mine.critic.params.zero_grads();
        let input = BatchInput {
            rays: &batch.rays,
            times: &batch.times,
            targets: &batch.targets,
        };
        let parts: LossParts = batch_gradients(&mut self.model, Some(&mut self.mine), input, &opts, &mut rng, &mut self.ws)?;
        let record = LossRecord::new(step, parts, &w);
        if let Some(component) = parts.non_finite() {
            return Err(Error::NonFinite {
                component: component.to_string(),
                detail: format!("loss term at step {step}"),
            });
        }
        if !record.total.is_finite() {
            return Err(Error::NonFinite {
                component: "total".into(),
                detail: format!("loss at step {step}"),
            });
        }
        for (name, p) in self.model.groups() {
            if !grads_finite(p) {
                return Err(Error::NonFinite {
                    component: name.into(),
                    detail: format!("gradient at step {step}"),
                });
            }
        }
        let train_critic = w.gamma > 0.0;
        if train_critic && !grads_finite(&self.mine.critic.params) {
            return Err(Error::NonFinite {
                component: "critic".into(),
                detail: format!("gradient at step {step}"),
            });
        }

        let cfg = self.config.clone();
        for (name, p) in self.model.groups_mut() {
            adam_step(p, AdamParams::default().with_lr(group_lr(&cfg, name, step)));
        }
        if train_critic {
            adam_step(
                &mut self.mine.critic.params,
                AdamParams::default().with_lr(cfg.lr_at(cfg.lr_critic, step)),
            );
        }
        self.step += 1;
        Ok(record)
    }

    /// Trains until `config.steps`, writing logs and checkpoints into `out`
    /// when given. On a non-finite loss the last good state is checkpointed
    /// before the error is returned.
    pub fn run(&mut self, out: Option<&Path>) -> Result<TrainSummary> {
        let start = std::time::Instant::now();
        let mut log = match out {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let p = dir.join(TRAIN_LOG_NAME);
                Some((
                    std::io::BufWriter::new(std::fs::File::create(&p).map_err(|e| Error::io(&p, e))?),
                    p,
                ))
            }
            None => None,
        };
        let mut last = None;
        let mut evals = Vec::new();
        while self.step < self.config.steps {
            let rec = match self.train_step() {
                Ok(r) => r,
                Err(e) => {
                    if let Some(dir) = out {
                        self.checkpoint().save(&dir.join(CHECKPOINT_NAME))?;
                    }
                    return Err(e);
                }
            };
            if let Some((w, p)) = log.as_mut() {
                writeln!(w, "{}", rec.to_json_line()).map_err(|e| Error::io(p.as_path(), e))?;
            }
            last = Some(rec);
            if self.config.eval_every > 0 && self.step % self.config.eval_every == 0 && self.step < self.config.steps {
                let r = self.evaluate_now()?;
                if let Some(dir) = out {
                    append_line(&dir.join(EVAL_LOG_NAME), &serde_json::to_string(&r.summary(self.step))?)?;
                }
                evals.push(r.summary(self.step));
            }
            if let Some(dir) = out {
                if self.config.checkpoint_every > 0 && self.step % self.config.checkpoint_every == 0 {
                    self.checkpoint().save(&dir.join(CHECKPOINT_NAME))?;
                }
            }
        }
        if let Some((w, p)) = log.as_mut() {
            w.flush().map_err(|e| Error::io(p.as_path(), e))?;
        }
        let mut checkpoint = None;
        if let Some(dir) = out {
            let p = dir.join(CHECKPOINT_NAME);
            self.checkpoint().save(&p)?;
            checkpoint = Some(p);
        }
        Ok(TrainSummary {
            steps: self.step,
            seconds: start.elapsed().as_secs_f64(),
            last,
            evals,
            checkpoint,
        })
    }

    fn evaluate_now(&self) -> Result<EvalReport> {
        let opts = EvalOptions {
            frame_stride: self.config.eval_frame_stride,
            mask_metrics: false,
            ..EvalOptions::default()
        };
        evaluate(&self.model, self.dataset, &opts)
    }
}

fn append_line(path: &PathBuf, line: &str) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub seconds: f64,
    pub last: Option<LossRecord>,
    pub evals: Vec<serde_json::Value>,
    pub checkpoint: Option<PathBuf>,
}

/// One ablation row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub psnr: f64,
    pub dssim: f64,
    pub mask: Option<MaskMetrics>,
    pub train_seconds: f64,
}

/// Trains each variant from the same seed on the same batches and
/// evaluates it on the test split.
pub fn ablate(
    base: &TrainConfig,
    dataset: &SceneDataset,
    table: &RayImportanceTable,
    variants: &[Variant],
    eval: &EvalOptions,
    mut on_done: impl FnMut(&AblationRow, &Trainer<'_>) -> Result<()>,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for &v in variants {
        let mut t = Trainer::new(v.apply(base), dataset, table)?;
        let s = t.run(None)?;
        let r = evaluate(&t.model, dataset, eval)?;
        let row = AblationRow {
            variant: v,
            psnr: r.mean_psnr,
            dssim: r.mean_dssim,
            mask: r.mask,
            train_seconds: s.seconds,
        };
        on_done(&row, &t)?;
        rows.push(row);
    }
    Ok(rows)
}
