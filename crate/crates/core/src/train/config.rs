//! Flat training configuration, key=value overrides and provenance.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::field::{EncodingMode, FieldConfig};
use crate::hashgrid::HashGridConfig;
use crate::losses::LossWeights;
use crate::model::ModelConfig;
use crate::render::{Aabb, ProposalConfig};
use crate::sampler::SamplerConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_rays: usize,
    pub seed: u64,
    /// Fixed worker count and reduction order; bitwise-reproducible runs.
    pub deterministic: bool,
    pub workers: usize,

    pub lr_tables: f64,
    pub lr_mlp: f64,
    pub lr_critic: f64,
    /// Mask grid logits.
    pub lr_mask: f64,
    /// Uncertainty grid logits.
    pub lr_uncertainty: f64,
    /// Cosine decay ends at `lr · lr_final_ratio`.
    pub lr_final_ratio: f64,

    pub n_samples: usize,
    pub proposal_bins: usize,
    pub proposal_res3: u32,
    pub proposal_res4: u32,
    pub proposal_time_res: u32,

    pub mode: EncodingMode,
    pub levels: usize,
    pub features: usize,
    pub log2_table_3d: u32,
    pub log2_table_4d: u32,
    pub n_min: u32,
    pub n_max: u32,
    pub time_min: u32,
    pub time_max: u32,
    pub mask_resolution: u32,
    pub uncertainty_resolution: u32,
    pub u_m: f64,
    pub density_hidden: usize,
    pub density_layers: usize,
    pub geo_feat_dim: usize,
    pub color_hidden: usize,
    pub color_layers: usize,
    pub sh_degree: usize,

    pub lambda_u: f64,
    pub gamma: f64,
    pub lambda_mask: f64,
    pub lambda_dist: f64,
    pub lambda_prop: f64,
    pub mine_hidden: usize,
    pub mine_ema: f64,
    pub mine_pairs: usize,

    pub tau1: f64,
    pub tau2: f64,
    pub p_uniform: f64,
    pub downsample: u32,

    /// Held-out evaluation period in steps (0 disables).
    pub eval_every: u64,
    /// Evaluate every `eval_frame_stride`-th frame.
    pub eval_frame_stride: usize,
    pub checkpoint_every: u64,
    /// Incremental rendering: a point is dynamic when `m < epsilon`.
    pub epsilon: f64,
    /// Incremental rendering: a pixel is re-rendered when its frame-0 dynamic
    /// weight `M(r)` exceeds this.
    pub ray_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 20_000,
            batch_rays: 1024,
            seed: 0,
            deterministic: true,
            workers: 4,
            lr_tables: 1e-2,
            lr_mlp: 1e-3,
            lr_critic: 1e-3,
            lr_mask: 0.1,
            lr_uncertainty: 0.1,
            lr_final_ratio: 0.03,
            n_samples: 128,
            proposal_bins: 64,
            proposal_res3: 64,
            proposal_res4: 32,
            proposal_time_res: 16,
            mode: EncodingMode::Masked,
            levels: 16,
            features: 2,
            log2_table_3d: 19,
            log2_table_4d: 19,
            n_min: 16,
            n_max: 512,
            time_min: 2,
            time_max: 32,
            mask_resolution: 128,
            uncertainty_resolution: 64,
            u_m: 0.03,
            density_hidden: 64,
            density_layers: 1,
            geo_feat_dim: 15,
            color_hidden: 64,
            color_layers: 2,
            sh_degree: 4,
            lambda_u: 3e-5,
            gamma: 3e-4,
            lambda_mask: 1e-2,
            lambda_dist: 2e-2,
            lambda_prop: 1.0,
            mine_hidden: 32,
            mine_ema: 0.99,
            mine_pairs: 1024,
            tau1: 0.1,
            tau2: 0.05,
            p_uniform: 0.2,
            downsample: 1,
            eval_every: 0,
            eval_frame_stride: 1,
            checkpoint_every: 0,
            epsilon: 0.1,
            ray_threshold: 0.002,
        }
    }
}

/// Keys whose defaults are taken from the method's published setup; every
/// other key is an engineering choice.
pub const PUBLISHED_KEYS: &[&str] = &["n_samples", "mask_resolution", "lambda_u", "gamma", "lambda_dist"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Default,
    Preset,
    ConfigFile,
    Flag,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ConfigPreset {
    /// Full-size tables and networks.
    Full,
    /// Small tables and networks for CPU-scale experiments.
    Toy,
}

impl TrainConfig {
    pub fn preset(p: ConfigPreset) -> Self {
        match p {
            ConfigPreset::Full => Self::default(),
            ConfigPreset::Toy => Self::toy(),
        }
    }

    /// Sized for a 96×96 synthetic scene on a single CPU core.
    pub fn toy() -> Self {
        TrainConfig {
            steps: 10_000,
            batch_rays: 128,
            workers: 1,
            n_samples: 32,
            proposal_bins: 48,
            proposal_res3: 32,
            proposal_res4: 16,
            proposal_time_res: 8,
            levels: 8,
            features: 2,
            log2_table_3d: 15,
            log2_table_4d: 15,
            n_min: 8,
            n_max: 128,
            time_min: 2,
            time_max: 30,
            mask_resolution: 64,
            uncertainty_resolution: 32,
            density_hidden: 32,
            geo_feat_dim: 7,
            color_hidden: 32,
            color_layers: 1,
            sh_degree: 2,
            mine_pairs: 512,
            eval_frame_stride: 1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_rays == 0 {
            return Err(Error::Config("batch_rays must be >= 1".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be >= 1".into()));
        }
        for (k, v) in [
            ("lr_tables", self.lr_tables),
            ("lr_mlp", self.lr_mlp),
            ("lr_critic", self.lr_critic),
            ("lr_mask", self.lr_mask),
            ("lr_uncertainty", self.lr_uncertainty),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{k} must be finite and >= 0")));
            }
        }
        if !(0.0..=1.0).contains(&self.lr_final_ratio) {
            return Err(Error::Config("lr_final_ratio must lie in [0, 1]".into()));
        }
        if !(0.0 < self.epsilon && self.epsilon < 1.0) {
            return Err(Error::Config("epsilon must lie in (0, 1)".into()));
        }
        if !self.ray_threshold.is_finite() {
            return Err(Error::Config("ray_threshold must be finite".into()));
        }
        if !(0.0..1.0).contains(&self.mine_ema) {
            return Err(Error::Config("mine_ema must lie in [0, 1)".into()));
        }
        if self.eval_frame_stride == 0 {
            return Err(Error::Config("eval_frame_stride must be >= 1".into()));
        }
        self.loss_weights().validate()?;
        self.sampler().validate()?;
        self.model_config(Aabb::cube(1.0)).validate()
    }

    pub fn model_config(&self, bounds: Aabb) -> ModelConfig {
        ModelConfig {
            field: FieldConfig {
                grid3: HashGridConfig::new_3d(self.levels, self.features, self.log2_table_3d, self.n_min, self.n_max),
                grid4: HashGridConfig::new_4d(
                    self.levels,
                    self.features,
                    self.log2_table_4d,
                    (self.n_min, self.n_max),
                    (self.time_min, self.time_max),
                ),
                mask_resolution: self.mask_resolution,
                uncertainty_resolution: self.uncertainty_resolution,
                u_m: self.u_m,
                density_hidden: self.density_hidden,
                density_hidden_layers: self.density_layers,
                geo_feat_dim: self.geo_feat_dim,
                color_hidden: self.color_hidden,
                color_hidden_layers: self.color_layers,
                sh_degree: self.sh_degree,
                mode: self.mode,
            },
            proposal: ProposalConfig {
                bins: self.proposal_bins,
                res3: self.proposal_res3,
                res4: self.proposal_res4,
                time_res: self.proposal_time_res,
            },
            n_samples: self.n_samples,
            bounds,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_u: self.lambda_u,
            gamma: self.gamma,
            lambda_mask: self.lambda_mask,
            lambda_dist: self.lambda_dist,
            lambda_prop: self.lambda_prop,
        }
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            tau1: self.tau1,
            tau2: self.tau2,
            p_uniform: self.p_uniform,
            downsample: self.downsample,
        }
    }

    pub fn effective_workers(&self) -> usize {
        if self.deterministic {
            self.workers
        } else {
            rayon::current_num_threads().max(1)
        }
    }

    /// Learning rate of a group after cosine decay at `step`.
    pub fn lr_at(&self, base: f64, step: u64) -> f64 {
        if self.steps == 0 {
            return base;
        }
        let p = (step as f64 / self.steps as f64).min(1.0);
        let c = 0.5 * (1.0 + (std::f64::consts::PI * p).cos());
        base * (self.lr_final_ratio + (1.0 - self.lr_final_ratio) * c)
    }

    /// Sets `key` from its textual value. The value is parsed as TOML, so
    /// strings may be bare or quoted.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let mut obj = serde_json::to_value(&*self)?;
        let map = obj.as_object_mut().expect("struct serializes to an object");
        let old = map
            .get(key)
            .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
        let parsed = parse_value(raw, old)
            .ok_or_else(|| Error::Config(format!("cannot parse `{raw}` for key `{key}`")))?;
        map.insert(key.to_string(), parsed);
        *self = serde_json::from_value(obj).map_err(|e| Error::Config(format!("key `{key}`: {e}")))?;
        Ok(())
    }

    pub fn keys() -> Vec<String> {
        match serde_json::to_value(Self::default()) {
            Ok(Value::Object(m)) => m.keys().cloned().collect(),
            _ => Vec::new(),
        }
    }
}

fn parse_value(raw: &str, like: &Value) -> Option<Value> {
    let raw = raw.trim();
    match like {
        Value::String(_) => {
            let s = raw.trim_matches('"');
            Some(Value::String(s.to_string()))
        }
        Value::Bool(_) => raw.parse::<bool>().ok().map(Value::Bool),
        Value::Number(n) if n.is_f64() => raw.parse::<f64>().ok().and_then(|v| serde_json::Number::from_f64(v).map(Value::Number)),
        Value::Number(_) => raw
            .parse::<u64>()
            .ok()
            .map(|v| Value::Number(v.into()))
            .or_else(|| raw.parse::<f64>().ok().and_then(|v| serde_json::Number::from_f64(v).map(Value::Number))),
        _ => None,
    }
}

/// A config plus where each key's value came from.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedConfig {
    pub config: TrainConfig,
    pub origin: BTreeMap<String, Origin>,
}

impl ResolvedConfig {
    pub fn new(preset: ConfigPreset) -> Self {
        let config = TrainConfig::preset(preset);
        let base = TrainConfig::default();
        let a = serde_json::to_value(&config).unwrap_or_default();
        let b = serde_json::to_value(&base).unwrap_or_default();
        let origin = TrainConfig::keys()
            .into_iter()
            .map(|k| {
                let o = if a.get(&k) == b.get(&k) { Origin::Default } else { Origin::Preset };
                (k, o)
            })
            .collect();
        ResolvedConfig { config, origin }
    }

    pub fn set(&mut self, key: &str, raw: &str, origin: Origin) -> Result<()> {
        self.config.set(key, raw)?;
        self.origin.insert(key.to_string(), origin);
        Ok(())
    }

    /// Applies a `key = value` file (TOML subset: comments, blank lines and
    /// an optional leading `[train]` table header are accepted).
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let table: toml::Table = text
            .parse()
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let table = match table.get("train") {
            Some(toml::Value::Table(t)) if table.len() == 1 => t.clone(),
            _ => table,
        };
        for (k, v) in &table {
            let raw = match v {
                toml::Value::String(s) => s.clone(),
                other => other.to_string(),
            };
            self.set(k, &raw, Origin::ConfigFile)?;
        }
        Ok(())
    }

    /// JSON object `{key: {value, source, provenance}}`.
    pub fn dump(&self) -> Value {
        let values = serde_json::to_value(&self.config).unwrap_or_default();
        let mut out = serde_json::Map::new();
        if let Value::Object(m) = values {
            for (k, v) in m {
                let provenance = if PUBLISHED_KEYS.contains(&k.as_str()) {
                    "published"
                } else {
                    "invented"
                };
                let source = self.origin.get(&k).copied().unwrap_or(Origin::Default);
                out.insert(
                    k,
                    serde_json::json!({ "value": v, "source": source, "provenance": provenance }),
                );
            }
        }
        Value::Object(out)
    }

    pub fn write_dump(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.dump())?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Ablation variants; everything not listed is shared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Masked,
    Additive,
    Pure4d,
    MaskedNoUncertainty,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Masked,
        Variant::Additive,
        Variant::Pure4d,
        Variant::MaskedNoUncertainty,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Masked => "masked",
            Variant::Additive => "additive",
            Variant::Pure4d => "pure4d",
            Variant::MaskedNoUncertainty => "masked_no_uncertainty",
        }
    }

    pub fn apply(self, cfg: &TrainConfig) -> TrainConfig {
        let mut c = cfg.clone();
        match self {
            Variant::Masked => c.mode = EncodingMode::Masked,
            Variant::Additive => c.mode = EncodingMode::Additive,
            Variant::Pure4d => c.mode = EncodingMode::Pure4d,
            Variant::MaskedNoUncertainty => {
                c.mode = EncodingMode::Masked;
                c.lambda_u = 0.0;
                c.gamma = 0.0;
            }
        }
        c
    }
}
