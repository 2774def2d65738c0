//! `partseg`: data generation, training, inference, appearance transfer,
//! evaluation and reports.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 numeric failure.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use partseg_core::archive::Archive;
use partseg_core::config::KeyValues;
use partseg_core::eval::{self, CalibrationMapping, Evaluation, QualitativeRow};
use partseg_core::imageio::{self, RgbImage};
use partseg_core::synth_data::{self, DataConfig};
use partseg_core::train::{self, FitOutputs, StepReport, TrainConfig, TrainState};
use partseg_core::{pipeline, Array, Error, Model};

const SEED_ENV: &str = "PARTSEG_SEED";

#[derive(Parser)]
#[command(name = "partseg", version, about = "Unsupervised part segmentation from shape/appearance disentanglement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic sprite dataset.
    GenData(GenDataArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Write argmax part masks for images.
    Infer(InferArgs),
    /// Move part appearances from one image onto another's shape.
    Transfer(TransferArgs),
    /// Calibrate on the val split and score the test split.
    Eval(EvalArgs),
    /// Render tables and plots from saved results.
    Report(ReportArgs),
}

/// Settings shared by commands that take a configuration.
#[derive(Args)]
struct Overrides {
    /// Key-value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed; beats the file, which beats the PARTSEG_SEED variable.
    #[arg(long)]
    seed: Option<u64>,
    /// Extra `key=value` settings applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Overrides {
    /// File keys, then `--set` keys, each as key-value pairs.
    fn layers(&self) -> Result<(KeyValues, KeyValues)> {
        let file = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                KeyValues::parse(&text)?
            }
            None => KeyValues::default(),
        };
        let mut flags = KeyValues::default();
        for item in &self.set {
            let (k, v) = item.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got `{item}`"))?;
            flags.push(k.trim(), v.trim());
        }
        Ok((file, flags))
    }

    /// Flag, else file, else environment; `None` keeps the default.
    fn seed(&self, file: &KeyValues) -> Result<Option<u64>> {
        if let Some(seed) = self.seed {
            return Ok(Some(seed));
        }
        if file.0.iter().any(|(k, _)| k == "seed") {
            return Ok(None);
        }
        match std::env::var(SEED_ENV) {
            Ok(v) => Ok(Some(v.trim().parse().with_context(|| format!("{SEED_ENV}=`{v}` is not an integer"))?)),
            Err(_) => Ok(None),
        }
    }
}

#[derive(Args)]
struct GenDataArgs {
    /// Output dataset root.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset root with a `train` split and optionally `val`.
    #[arg(long)]
    data: PathBuf,
    /// Run directory for the manifest, metrics and checkpoints.
    #[arg(long)]
    out: PathBuf,
    /// Base hyperparameters: desk, full or smoke.
    #[arg(long, default_value = "desk")]
    profile: String,
    /// Total optimizer steps.
    #[arg(long)]
    steps: Option<u64>,
    /// Continue from `<out>/checkpoints/latest.ckpt`.
    #[arg(long)]
    resume: bool,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Glob of input PNGs.
    #[arg(long)]
    input: String,
    #[arg(long)]
    out: PathBuf,
    /// Also dump per-part probabilities.
    #[arg(long)]
    probs: bool,
}

#[derive(Args)]
struct TransferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Image providing the shape.
    #[arg(long)]
    pose: PathBuf,
    /// Image providing the appearance of the chosen parts.
    #[arg(long)]
    appearance: PathBuf,
    /// Comma-separated part ids from 1, `all`, or empty for none.
    #[arg(long, default_value = "all")]
    parts: String,
    /// Generated PNG; a `.panel.png` sibling shows pose | appearance | result.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset root with `test` and, unless --mapping is given, `val`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Saved calibration mapping; skips calibration.
    #[arg(long)]
    mapping: Option<PathBuf>,
    /// Training metrics stream for the loss-curve plot.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Test images shown in the qualitative grid.
    #[arg(long, default_value_t = 8)]
    examples: usize,
}

#[derive(Args)]
struct ReportArgs {
    /// Training metrics stream.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// `evaluation.json` written by `eval`.
    #[arg(long)]
    evaluation: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

/// Everything needed to rerun a command; never rewritten once created.
#[derive(Serialize)]
struct RunManifest {
    command: String,
    args: Vec<String>,
    seed: Option<u64>,
    config: serde_json::Value,
    version: String,
    started_unix: u64,
    artifacts: Vec<PathBuf>,
}

impl RunManifest {
    fn new(command: &str, seed: Option<u64>, config: serde_json::Value, artifacts: Vec<PathBuf>) -> Self {
        RunManifest {
            command: command.to_owned(),
            args: std::env::args().skip(1).collect(),
            seed,
            config,
            version: env!("CARGO_PKG_VERSION").to_owned(),
            started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
            artifacts,
        }
    }

    /// Writes `manifest.json`, or the first free `manifest.N.json`.
    fn write(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        for n in 0.. {
            let name = if n == 0 { "manifest.json".to_owned() } else { format!("manifest.{n}.json") };
            let path = dir.join(name);
            match OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(file) => {
                    serde_json::to_writer_pretty(BufWriter::new(file), self)?;
                    return Ok(path);
                }
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
                Err(e) => return Err(e).with_context(|| format!("writing {}", path.display())),
            }
        }
        unreachable!("manifest names are unbounded")
    }
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    let (file, flags) = args.overrides.layers()?;
    let mut cfg = DataConfig::default();
    cfg.apply(&file)?;
    cfg.apply(&flags)?;
    if let Some(seed) = args.overrides.seed(&file)? {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let splits = synth_data::SPLITS.iter().map(|s| args.out.join(s)).collect();
    RunManifest::new("gen-data", Some(cfg.seed), serde_json::to_value(&cfg)?, splits).write(&args.out)?;
    for (split, count) in synth_data::write_dataset(&args.out, &cfg)? {
        println!("{split}: {count} images");
    }
    Ok(())
}

fn train_config(args: &TrainArgs) -> Result<TrainConfig> {
    let (file, flags) = args.overrides.layers()?;
    let mut cfg = TrainConfig::profile(&args.profile)?;
    cfg.apply(&file)?;
    cfg.apply(&flags)?;
    if let Some(seed) = args.overrides.seed(&file)? {
        cfg.seed = seed;
    }
    if let Some(steps) = args.steps {
        cfg.total_steps = steps;
    }
    Ok(cfg)
}

/// Drops metrics records past `step`, so a resumed run appends cleanly.
fn truncate_metrics(path: &Path, step: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let kept: Vec<String> = BufReader::new(File::open(path)?)
        .lines()
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|line| {
            serde_json::from_str::<serde_json::Value>(line)
                .ok()
                .and_then(|v| v.get("step").and_then(serde_json::Value::as_u64))
                .is_some_and(|s| s <= step)
        })
        .collect();
    let mut text = kept.join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    if !args.data.is_dir() {
        bail!("data directory {} does not exist", args.data.display());
    }
    let ckpt_dir = args.out.join("checkpoints");
    let metrics_path = args.out.join("metrics.jsonl");
    let (mut state, cfg) = if args.resume {
        if args.overrides.config.is_some() || !args.overrides.set.is_empty() || args.overrides.seed.is_some() {
            bail!("--resume takes its configuration from the checkpoint; only --steps may change");
        }
        let (state, mut cfg) = train::load_checkpoint(&ckpt_dir.join("latest.ckpt"), None)?;
        if let Some(steps) = args.steps {
            cfg.total_steps = steps;
        }
        truncate_metrics(&metrics_path, state.step)?;
        (state, cfg)
    } else {
        let cfg = train_config(&args)?;
        cfg.validate()?;
        (TrainState::new(&cfg)?, cfg)
    };
    cfg.validate()?;
    let data = synth_data::load_split(&args.data, "train")?;
    if data.image_size != cfg.net.image_size {
        bail!(Error::ConfigMismatch(format!(
            "dataset images are {} px, model expects {} (set image_size)",
            data.image_size, cfg.net.image_size
        )));
    }
    let validation = if args.data.join("val").is_dir() { synth_data::load_split(&args.data, "val")?.labeled().ok() } else { None };

    let artifacts = vec![metrics_path.clone(), ckpt_dir.clone()];
    RunManifest::new("train", Some(cfg.seed), serde_json::to_value(&cfg)?, artifacts).write(&args.out)?;
    std::fs::write(args.out.join("train.cfg"), cfg.to_key_values().render())?;

    let mut metrics = BufWriter::new(OpenOptions::new().create(true).append(true).open(&metrics_path)?);
    let total = cfg.total_steps;
    let mut progress = |r: &StepReport| {
        if r.step % 100 == 0 || r.step + 1 == total {
            eprintln!("step {:>7}  rec {:.4}  gate {:.3}", r.step + 1, r.losses.get("rec").copied().unwrap_or(f64::NAN), r.gate);
        }
    };
    let outcome = train::fit(
        &mut state,
        &cfg,
        &data,
        FitOutputs {
            metrics: Some(&mut metrics),
            checkpoint_dir: Some(ckpt_dir),
            validation: validation.as_ref(),
            on_step: Some(&mut progress),
        },
    );
    metrics.flush()?;
    if let Err(Error::NonFiniteLoss { step, components }) = &outcome {
        let dump = serde_json::json!({ "step": step, "losses": components });
        std::fs::write(args.out.join("nan_dump.json"), serde_json::to_string_pretty(&dump)?)?;
    }
    outcome?;
    println!("trained to step {}", state.step);
    Ok(())
}

fn load_model(path: &Path) -> Result<Model<f32>> {
    let (state, _) = train::load_checkpoint(path, None).with_context(|| format!("loading {}", path.display()))?;
    Ok(state.model)
}

fn read_image(model: &Model<f32>, path: &Path) -> Result<Array<f32>> {
    let img = imageio::read_rgb(path)?;
    let s = model.config.image_size;
    if (img.width, img.height) != (s, s) {
        bail!(Error::ConfigMismatch(format!("{} is {}x{}, model expects {s}x{s}", path.display(), img.width, img.height)));
    }
    Ok(imageio::rgb_to_array(&img))
}

fn infer(args: InferArgs) -> Result<()> {
    let model = load_model(&args.checkpoint)?;
    let mut inputs: Vec<PathBuf> = glob::glob(&args.input)
        .with_context(|| format!("bad pattern `{}`", args.input))?
        .collect::<std::result::Result<_, _>>()?;
    inputs.sort();
    if inputs.is_empty() {
        bail!("no files match `{}`", args.input);
    }
    std::fs::create_dir_all(&args.out)?;
    RunManifest::new("infer", None, serde_json::to_value(&model.config)?, vec![args.out.clone()]).write(&args.out)?;
    let n = model.config.num_parts;
    let palette = imageio::label_palette(n);
    let s = model.config.image_size;
    for path in &inputs {
        let seg = pipeline::infer_segmentation(&model, &read_image(&model, path)?)?;
        let labels: Vec<u8> = seg.argmax(0).into_iter().map(|p| p as u8).collect();
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        imageio::write_indexed(&args.out.join(format!("{stem}.mask.png")), s, s, &labels, &palette)?;
        if args.probs {
            let mut archive = Archive::new(serde_json::json!({ "source": path, "num_parts": n }));
            archive.push("probs", seg.probs.clone());
            archive.write(&args.out.join(format!("{stem}.probs.bin")))?;
        }
    }
    println!("{} masks written to {}", inputs.len(), args.out.display());
    Ok(())
}

/// `""` is no part, `all` every part, otherwise 1-based ids.
fn parse_parts(spec: &str, n: usize) -> Result<Vec<usize>> {
    let spec = spec.trim();
    if spec.is_empty() {
        return Ok(Vec::new());
    }
    if spec == "all" {
        return Ok((0..n).collect());
    }
    spec.split(',')
        .map(|item| {
            let id: usize = item.trim().parse().with_context(|| format!("bad part id `{item}`"))?;
            if id == 0 || id > n {
                bail!(Error::Config(format!("part id {id} outside 1..={n}")));
            }
            Ok(id - 1)
        })
        .collect()
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("transfer");
    path.with_file_name(format!("{stem}{suffix}"))
}

fn transfer(args: TransferArgs) -> Result<()> {
    let model = load_model(&args.checkpoint)?;
    let active = parse_parts(&args.parts, model.config.num_parts)?;
    let pose = read_image(&model, &args.pose)?;
    let app = read_image(&model, &args.appearance)?;
    let out = pipeline::transfer_appearance(&model, &pose, &app, &active)?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let generated = imageio::array_to_rgb(&out, 0);
    imageio::write_rgb(&args.out, &generated)?;
    let s = model.config.image_size;
    let mut panel = RgbImage::new(3 * s, s);
    for (i, img) in [imageio::array_to_rgb(&pose, 0), imageio::array_to_rgb(&app, 0), generated].iter().enumerate() {
        for y in 0..s {
            for x in 0..s {
                panel.put(i * s + x, y, img.get(x, y));
            }
        }
    }
    imageio::write_rgb(&with_suffix(&args.out, ".panel.png"), &panel)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn read_metrics(path: Option<&PathBuf>) -> Result<Option<String>> {
    match path {
        Some(p) if p.exists() => Ok(Some(std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)),
        Some(p) => bail!("metrics file {} does not exist", p.display()),
        None => Ok(None),
    }
}

fn evaluate(args: EvalArgs) -> Result<()> {
    let model = load_model(&args.checkpoint)?;
    let test = synth_data::load_split(&args.data, "test")?.labeled()?;
    let mapping = args.mapping.as_deref().map(CalibrationMapping::load).transpose()?;
    let val = match &mapping {
        Some(_) => test.clone(),
        None => synth_data::load_split(&args.data, "val")?.labeled()?,
    };
    let metrics = read_metrics(args.metrics.as_ref())?;
    RunManifest::new("eval", None, serde_json::to_value(&model.config)?, vec![args.out.clone()]).write(&args.out)?;
    let evaluation = eval::evaluate_model(&model, &val, &test, mapping)?;
    let shown = eval::LabeledSet { items: test.items.iter().take(args.examples).cloned().collect(), ..test.clone() };
    let rows: Vec<QualitativeRow> = if shown.items.is_empty() {
        Vec::new()
    } else {
        eval::segment_set(&model, &shown, 32)?
            .into_iter()
            .zip(&shown.items)
            .map(|((prediction, _), item)| QualitativeRow {
                image: item.image.clone(),
                prediction,
                ground_truth: Some(item.labels.clone()),
            })
            .collect()
    };
    eval::emit_report(Some(&evaluation), metrics.as_deref(), &rows, &args.out)?;
    std::fs::write(args.out.join("evaluation.json"), serde_json::to_string_pretty(&evaluation)?)?;
    println!("overall IoU {:.4}", evaluation.iou.overall);
    for (c, v) in evaluation.iou.per_class.iter().enumerate() {
        println!("class {} IoU {v:.4}", c + 1);
    }
    for (alpha, v) in &evaluation.pck {
        println!("PCK@{alpha} {v:.4}");
    }
    Ok(())
}

fn report(args: ReportArgs) -> Result<()> {
    let evaluation: Option<Evaluation> = match &args.evaluation {
        Some(p) => Some(serde_json::from_str(&std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?),
        None => None,
    };
    let metrics = read_metrics(args.metrics.as_ref())?;
    let written = eval::emit_report(evaluation.as_ref(), metrics.as_deref(), &[], &args.out)?;
    for path in written {
        println!("{}", path.display());
    }
    Ok(())
}

/// 3 for numeric failures anywhere in the error chain, 2 otherwise.
fn exit_code(err: &anyhow::Error) -> u8 {
    let numeric = err.chain().any(|e| {
        matches!(e.downcast_ref::<Error>(), Some(Error::NonFiniteLoss { .. } | Error::NonFinite(_)))
    });
    if numeric {
        3
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Infer(a) => infer(a),
        Command::Transfer(a) => transfer(a),
        Command::Eval(a) => evaluate(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
