//! Command-line front end. Every command prints one JSON document on
//! success; failures print `{"error": {...}}` to stderr and exit nonzero.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use msth::gradcheck::{check_model_config, full_pipeline_check, GradCheckConfig};
use msth::losses::{mine_sanity, MineSanityConfig};
use msth::render::{render_frame, render_video_full, render_video_incremental, IncrementalOptions};
use msth::sampler::RayImportanceTable;
use msth::scene::{generate_synthetic, load_dataset, psnr, Preset, SceneDataset, SynthSpec};
use msth::train::{
    ablate, evaluate, write_stats, Checkpoint, ConfigPreset, EvalOptions, EvalSplit, Origin, ResolvedConfig, Trainer,
    Variant,
};
use msth::Error;

const GRADCHECK_TOL: f64 = 1e-3;
const RESOLVED_CONFIG_NAME: &str = "config.resolved.json";

#[derive(Parser)]
#[command(name = "msth", version, about = "Masked space-time hash encoding for dynamic radiance fields")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a procedural dataset with ground-truth dynamic masks.
    Synth(SynthArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Render one frame, or a whole video incrementally.
    Render(RenderArgs),
    /// 4D-table write and collision statistics of a checkpoint.
    CollisionStats(CollisionArgs),
    /// Finite-difference check of every gradient in the training objective.
    GradCheck(GradCheckArgs),
    /// Train and compare encoding variants.
    Ablate(AblateArgs),
    /// Mutual-information estimator on correlated Gaussians.
    MineSanity(MineArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// `key = value` file applied on top of the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "toy")]
    preset: ConfigPreset,
    /// Override any config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_rays: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
}

impl ConfigArgs {
    fn resolve(&self) -> msth::Result<ResolvedConfig> {
        let mut r = ResolvedConfig::new(self.preset);
        if let Some(p) = &self.config {
            r.apply_file(p)?;
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            r.set(k.trim(), v.trim(), Origin::Flag)?;
        }
        let flags = [
            ("steps", self.steps.map(|v| v.to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
            ("batch_rays", self.batch_rays.map(|v| v.to_string())),
            ("workers", self.workers.map(|v| v.to_string())),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                r.set(k, &v, Origin::Flag)?;
            }
        }
        r.config.validate()?;
        Ok(r)
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "orbit")]
    preset: Preset,
    #[arg(long, default_value_t = 96)]
    width: u32,
    #[arg(long, default_value_t = 96)]
    height: u32,
    #[arg(long, default_value_t = 30)]
    frames: usize,
    #[arg(long, default_value_t = 4)]
    train_cameras: usize,
    #[arg(long, default_value_t = 1)]
    test_cameras: usize,
    #[arg(long, default_value_t = 4096)]
    oracle_samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Continue from a checkpoint (its config is used; `--steps` may extend it).
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Skip the final test-split evaluation.
    #[arg(long)]
    no_eval: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: EvalSplit,
    #[arg(long, default_value_t = 1)]
    frame_stride: usize,
    #[arg(long)]
    no_mask_metrics: bool,
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Camera id from the manifest; defaults to the first test camera.
    #[arg(long)]
    camera: Option<String>,
    /// Frame index for single-frame rendering.
    #[arg(long, default_value_t = 0)]
    frame: usize,
    /// Render every frame, reusing static pixels from frame 0.
    #[arg(long)]
    incremental: bool,
    /// Point threshold for incremental rendering (defaults to the checkpoint's).
    #[arg(long)]
    epsilon: Option<f64>,
    /// Threshold on a ray's frame-0 dynamic weight (defaults to the checkpoint's).
    #[arg(long)]
    ray_threshold: Option<f64>,
    /// Also render every frame in full and report the agreement.
    #[arg(long)]
    compare_full: bool,
    /// Write raw float dumps next to the PNGs.
    #[arg(long)]
    raw: bool,
    /// Output PNG (single frame) or directory (incremental).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CollisionArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// A second checkpoint (typically pure4d) to compare against.
    #[arg(long)]
    compare: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    rays: usize,
    #[arg(long, default_value_t = 1e-2)]
    gate_epsilon: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2)]
    rays: usize,
    #[arg(long, default_value_t = 4)]
    samples: usize,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long, value_enum, value_delimiter = ',')]
    variants: Option<Vec<Variant>>,
}

#[derive(Args)]
struct MineArgs {
    #[arg(long, default_value_t = 0.9)]
    rho: f64,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug)]
enum CliError {
    Core(Error),
    Usage(String),
    CheckFailed(String, Value),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::CheckFailed(..) => 3,
            CliError::Core(e) => match e {
                Error::Config(_) | Error::Dimension { .. } => 2,
                Error::NonFinite { .. } => 4,
                Error::Dataset(_) | Error::MissingFile(_) => 5,
                _ => 1,
            },
        }
    }

    fn to_json(&self) -> Value {
        let inner = match self {
            CliError::Usage(m) => json!({ "kind": "usage", "message": m }),
            CliError::CheckFailed(m, detail) => json!({ "kind": "check_failed", "message": m, "detail": detail }),
            CliError::Core(e) => {
                let mut v = json!({ "kind": e.kind(), "message": e.to_string() });
                match e {
                    Error::MissingFile(p) => v["path"] = json!(p),
                    Error::NonFinite { component, .. } => v["component"] = json!(component),
                    _ => {}
                }
                v
            }
        };
        json!({ "error": inner })
    }
}

type CliResult = Result<Value, CliError>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let err = CliError::Usage(e.to_string());
            eprintln!("{}", err.to_json());
            return ExitCode::from(err.exit_code());
        }
    };
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Render(a) => cmd_render(a),
        Command::CollisionStats(a) => cmd_collision(a),
        Command::GradCheck(a) => cmd_gradcheck(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::MineSanity(a) => cmd_mine(a),
    };
    match result {
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).unwrap_or_default());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code())
        }
    }
}

fn write_json(path: &Path, v: &Value) -> msth::Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::Io {
                path: dir.to_path_buf(),
                source: e,
            })?;
        }
    }
    std::fs::write(path, serde_json::to_string_pretty(v)?).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Config dump of a checkpoint: every key is reported as coming from the
/// checkpoint itself.
fn checkpoint_config_dump(ck: &Checkpoint) -> Value {
    let mut r = ResolvedConfig::new(ConfigPreset::Full);
    r.config = ck.config.clone();
    let mut d = r.dump();
    if let Value::Object(m) = &mut d {
        for v in m.values_mut() {
            v["source"] = json!("checkpoint");
        }
    }
    d
}

fn cmd_synth(a: SynthArgs) -> CliResult {
    let spec = SynthSpec {
        preset: a.preset,
        width: a.width,
        height: a.height,
        frames: a.frames,
        train_cameras: a.train_cameras,
        test_cameras: a.test_cameras,
        oracle_samples: a.oracle_samples,
        seed: a.seed,
    };
    let summary = generate_synthetic(&spec, &a.out)?;
    let spec_json = serde_json::to_value(&spec).map_err(Error::from)?;
    write_json(&a.out.join("synth.json"), &spec_json)?;
    Ok(json!({ "command": "synth", "out": a.out, "spec": spec_json, "summary": summary }))
}

fn load_data(dir: &Path) -> msth::Result<SceneDataset> {
    load_dataset(dir)
}

fn cmd_train(a: TrainArgs) -> CliResult {
    let data = load_data(&a.data)?;
    let mut resolved = a.cfg.resolve()?;
    let resumed = match &a.resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            let mut cfg = ck.config.clone();
            if let Some(s) = a.cfg.steps {
                cfg.steps = s;
            }
            resolved.config = cfg;
            Some(ck)
        }
        None => None,
    };
    std::fs::create_dir_all(&a.out).map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    resolved.write_dump(&a.out.join(RESOLVED_CONFIG_NAME))?;
    let table = RayImportanceTable::cached(&data, resolved.config.sampler())?;
    let mut trainer = match resumed {
        Some(mut ck) => {
            ck.config = resolved.config.clone();
            Trainer::resume(ck, &data, &table)?
        }
        None => Trainer::new(resolved.config.clone(), &data, &table)?,
    };
    let summary = trainer.run(Some(&a.out))?;
    let eval = if a.no_eval || data.test.is_empty() {
        Value::Null
    } else {
        let r = evaluate(&trainer.model, &data, &EvalOptions::default())?;
        let v = serde_json::to_value(&r).map_err(Error::from)?;
        write_json(&a.out.join("eval.json"), &v)?;
        json!({ "psnr": r.mean_psnr, "dssim": r.mean_dssim, "mask": r.mask })
    };
    Ok(json!({
        "command": "train",
        "summary": summary,
        "eval": eval,
        "sampler_warnings": table.warnings,
        "config": resolved.dump(),
    }))
}

fn cmd_eval(a: EvalArgs) -> CliResult {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let data = load_data(&a.data)?;
    let opts = EvalOptions {
        split: a.split,
        frame_stride: a.frame_stride,
        mask_metrics: !a.no_mask_metrics,
        ..EvalOptions::default()
    };
    let report = evaluate(&ck.model, &data, &opts)?;
    let v = json!({
        "command": "eval",
        "step": ck.step,
        "report": report,
        "config": checkpoint_config_dump(&ck),
    });
    if let Some(p) = &a.out {
        write_json(p, &v)?;
    }
    Ok(v)
}

fn cmd_render(a: RenderArgs) -> CliResult {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let data = load_data(&a.data)?;
    let ci = match &a.camera {
        Some(id) => data
            .camera_index(id)
            .ok_or_else(|| Error::Config(format!("unknown camera `{id}`")))?,
        None => *data.test.first().or(data.train.first()).expect("dataset has cameras"),
    };
    let cam = &data.cameras[ci];
    let config = checkpoint_config_dump(&ck);
    if !a.incremental {
        if a.frame >= data.frame_count {
            return Err(CliError::Usage(format!("frame {} out of range (T = {})", a.frame, data.frame_count)));
        }
        let out = render_frame(&ck.model, &cam.camera, data.time_of(a.frame))?;
        out.rgb.save_png(&a.out)?;
        if a.raw {
            out.rgb.save_raw(&a.out.with_extension("msti"))?;
            out.depth.save_raw(&a.out.with_extension("depth.msti"))?;
        }
        let p = psnr(&out.rgb, &cam.frames[a.frame])?;
        if let Some(dir) = a.out.parent() {
            write_json(&dir.join(RESOLVED_CONFIG_NAME), &config)?;
        }
        return Ok(json!({
            "command": "render",
            "camera": cam.id,
            "frame": a.frame,
            "out": a.out,
            "psnr_vs_ground_truth": p,
        }));
    }
    let eps = a.epsilon.unwrap_or(ck.config.epsilon);
    let times = data.times();
    let start = std::time::Instant::now();
    let opts = IncrementalOptions {
        ray_threshold: Some(a.ray_threshold.unwrap_or(ck.config.ray_threshold)),
        ..IncrementalOptions::new(eps)
    };
    let video = render_video_incremental(&ck.model, &cam.camera, &times, &opts)?;
    let seconds = start.elapsed().as_secs_f64();
    for (f, im) in video.frames.iter().enumerate() {
        im.save_png(&a.out.join(format!("{f:04}.png")))?;
        if a.raw {
            im.save_raw(&a.out.join(format!("{f:04}.msti")))?;
        }
    }
    let compare = if a.compare_full {
        let full = render_video_full(&ck.model, &cam.camera, &times)?;
        let ps: Vec<f64> = full
            .iter()
            .zip(&video.frames)
            .map(|(x, y)| psnr(x, y))
            .collect::<msth::Result<_>>()?;
        json!({ "min_psnr": ps.iter().cloned().fold(f64::INFINITY, f64::min), "per_frame": ps })
    } else {
        Value::Null
    };
    write_json(&a.out.join(RESOLVED_CONFIG_NAME), &config)?;
    Ok(json!({
        "command": "render",
        "camera": cam.id,
        "epsilon": eps,
        "ray_threshold": opts.ray_threshold(),
        "frames": video.frames.len(),
        "dynamic_pixels": video.dynamic_pixels,
        "dynamic_fraction": video.dynamic_fraction(),
        "speedup": video.speedup(),
        "seconds": seconds,
        "compare_full": compare,
    }))
}

fn cmd_collision(a: CollisionArgs) -> CliResult {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let data = load_data(&a.data)?;
    let main = write_stats(&ck.model, &data, a.rays, a.gate_epsilon, a.seed)?;
    let compare = match &a.compare {
        Some(p) => {
            let other = Checkpoint::load(p)?;
            Some(write_stats(&other.model, &data, a.rays, a.gate_epsilon, a.seed)?)
        }
        None => None,
    };
    Ok(json!({
        "command": "collision-stats",
        "gated_writes": main.writes_gated,
        "ungated_writes": main.writes_ungated,
        "compare_writes": compare.as_ref().map(|c| c.writes_gated),
        "stats": main,
        "compare": compare,
        "config": checkpoint_config_dump(&ck),
    }))
}

fn cmd_gradcheck(a: GradCheckArgs) -> CliResult {
    let cfg = GradCheckConfig {
        rays: a.rays,
        samples: a.samples,
        seed: a.seed,
        ..GradCheckConfig::default()
    };
    let mut model_cfg = check_model_config();
    model_cfg.n_samples = a.samples;
    let report = full_pipeline_check(&model_cfg, &cfg)?;
    let v = json!({
        "command": "grad-check",
        "tolerance": GRADCHECK_TOL,
        "report": report,
        "config": { "check": cfg, "model": model_cfg },
    });
    if report.passed(GRADCHECK_TOL) {
        Ok(v)
    } else {
        Err(CliError::CheckFailed(
            format!("max relative error {:.3e} exceeds {GRADCHECK_TOL:e}", report.max_rel_err),
            v,
        ))
    }
}

fn cmd_ablate(a: AblateArgs) -> CliResult {
    let data = load_data(&a.data)?;
    let resolved = a.cfg.resolve()?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    resolved.write_dump(&a.out.join(RESOLVED_CONFIG_NAME))?;
    let table = RayImportanceTable::cached(&data, resolved.config.sampler())?;
    let variants = a.variants.unwrap_or_else(|| Variant::ALL.to_vec());
    let out = a.out.clone();
    let rows = ablate(&resolved.config, &data, &table, &variants, &EvalOptions::default(), |row, t| {
        t.checkpoint()
            .save(&out.join(format!("{}.msth", row.variant.name())))
    })?;
    let v = json!({ "command": "ablate", "rows": rows, "config": resolved.dump() });
    write_json(&a.out.join("ablation.json"), &v)?;
    Ok(v)
}

fn cmd_mine(a: MineArgs) -> CliResult {
    let mut cfg = MineSanityConfig {
        rho: a.rho,
        seed: a.seed,
        ..MineSanityConfig::default()
    };
    if let Some(s) = a.samples {
        cfg.samples = s;
    }
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    let report = mine_sanity(&cfg)?;
    Ok(json!({ "command": "mine-sanity", "report": report, "config": cfg }))
}
