//! `dentseg`: generate synthetic scans, train the segmenter, run it on clouds.
//!
//! Exit status: 0 success, 1 runtime failure, 2 usage error.

mod config;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde_json::json;

use dentseg::dataio::{self, CloudFormat, DatasetHeader, DatasetWriter, Record};
use dentseg::eval::{self, ConfusionMatrix, Metrics};
use dentseg::net::{Example, Network};
use dentseg::noisebank::{apply_patch, ingest_flat_scan, NoiseBank, NoiseMap};
use dentseg::preprocess::preprocess;
use dentseg::synth::{generate_sample, sample_rng, DentStats};
use dentseg::grid::crop;
use dentseg::{LabelMask, SurfaceGrid};

use config::{ConfigError, RunConfig};

/// Stream offset separating training-time noise draws from generation draws.
const TRAIN_NOISE_STREAM: u64 = 1 << 40;

#[derive(Parser)]
#[command(name = "dentseg", version, about = "Dent segmentation on 3D surface scans")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default, Clone)]
struct Common {
    /// key = value configuration file; flags override it
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override any configuration key, e.g. `--set net.epochs=4` (repeatable)
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Number of samples (at least 1)
    #[arg(long, global = true, value_parser = clap::value_parser!(u64).range(1..))]
    count: Option<u64>,
    /// Worker threads
    #[arg(long, global = true, value_parser = clap::value_parser!(u64).range(1..))]
    threads: Option<u64>,
    #[arg(long, global = true)]
    noise_bank: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Probability threshold for the dent mask
    #[arg(long, global = true)]
    threshold: Option<f32>,
    /// Benchmark repetitions (at least 3)
    #[arg(long, global = true)]
    reps: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic labelled dataset
    Generate,
    /// Turn flat-board scans into a noise bank
    IngestNoise {
        #[arg(required = true)]
        scans: Vec<PathBuf>,
    },
    /// Train on a dataset and write the best checkpoint
    Train { dataset: PathBuf },
    /// Segment one point cloud
    Predict {
        cloud: PathBuf,
        /// Treat the file as unordered `x y z` lines binned at this pitch (mm)
        #[arg(long)]
        xyz_pitch: Option<f64>,
    },
    /// Score a checkpoint on a labelled dataset
    Evaluate {
        dataset: PathBuf,
        /// Score the ground truth against itself instead of a checkpoint
        #[arg(long)]
        oracle: bool,
    },
    /// Time preprocessing and inference on one cloud
    Bench { cloud: PathBuf },
    /// Write overlay images for dataset samples
    Render { dataset: PathBuf },
}

enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<dentseg::Error> for Failure {
    fn from(e: dentseg::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Usage(e.0)
    }
}

type CmdResult = Result<(), Failure>;

fn usage<T>(msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure::Usage(msg.into()))
}

fn resolve(common: &Common) -> Result<RunConfig, Failure> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    let overrides = config::parse_pairs(&common.set.join("\n"))?;
    cfg.apply(&overrides)?;
    if let Some(v) = common.seed {
        cfg.seed = v;
    }
    if let Some(v) = common.count {
        cfg.count = v;
    }
    if let Some(v) = common.threads {
        cfg.threads = Some(v as usize);
    }
    if let Some(v) = &common.noise_bank {
        cfg.noise_bank = Some(v.clone());
    }
    if let Some(v) = &common.checkpoint {
        cfg.checkpoint = Some(v.clone());
    }
    if let Some(v) = &common.out {
        cfg.out = Some(v.clone());
    }
    if let Some(v) = common.threshold {
        cfg.threshold = Some(v);
    }
    if let Some(v) = common.reps {
        cfg.reps = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn require_input(p: &Path, what: &str) -> CmdResult {
    if !p.is_file() {
        return usage(format!("{what} {} does not exist", p.display()));
    }
    Ok(())
}

fn require_output(p: Option<&PathBuf>, flag: &str) -> Result<PathBuf, Failure> {
    let Some(p) = p else {
        return usage(format!("{flag} is required for this command"));
    };
    if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
        if !parent.is_dir() {
            return usage(format!("output directory {} does not exist", parent.display()));
        }
    }
    Ok(p.clone())
}

fn require_checkpoint(cfg: &RunConfig) -> Result<PathBuf, Failure> {
    let Some(p) = &cfg.checkpoint else {
        return usage("--checkpoint is required for this command");
    };
    require_input(p, "checkpoint")?;
    Ok(p.clone())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |v| format!("{v:.6}"))
}

fn metrics_json(m: &Metrics, cm: &ConfusionMatrix) -> serde_json::Value {
    json!({
        "iou": m.iou,
        "precision": m.precision,
        "recall": m.recall,
        "accuracy": m.accuracy,
        "confusion": { "tp": cm.tp, "fp": cm.fp, "fn": cm.fn_, "tn": cm.tn },
    })
}

fn print_metrics(m: &Metrics, cm: &ConfusionMatrix) {
    println!("iou={}", fmt_opt(m.iou));
    println!("precision={}", fmt_opt(m.precision));
    println!("recall={}", fmt_opt(m.recall));
    println!("accuracy={}", fmt_opt(m.accuracy));
    println!("tp={} fp={} fn={} tn={}", cm.tp, cm.fp, cm.fn_, cm.tn);
}

fn write_json(path: &Path, value: &serde_json::Value) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    dataio::write_atomic(path, format!("{text}\n").as_bytes())?;
    Ok(())
}

fn cmd_generate(cfg: &RunConfig) -> CmdResult {
    let out = require_output(cfg.out.as_ref(), "--out")?;
    let bank = match &cfg.noise_bank {
        Some(p) => {
            require_input(p, "noise bank")?;
            Some(dataio::read_noise_bank(p)?)
        }
        None => None,
    };
    let s = &cfg.synth;
    let header = DatasetHeader::samples(s.width, s.height, s.world_x, s.world_y, true);
    let mut writer = DatasetWriter::create(&out, header)?;
    let mut stats = DentStats::default();
    let chunk = 256u64;
    let mut done = 0u64;
    while done < cfg.count {
        let end = (done + chunk).min(cfg.count);
        let batch: Vec<_> = (done..end)
            .into_par_iter()
            .map(|i| generate_sample(s, cfg.seed, i, bank.as_ref()))
            .collect::<Result<_, _>>()?;
        for sample in &batch {
            writer.write_sample(&sample.surface, Some(&sample.truth))?;
            stats.add(sample);
        }
        if done / 1000 != end / 1000 {
            eprintln!("generated {} / {}", end / 1000 * 1000, cfg.count);
        }
        done = end;
    }
    writer.finish()?;
    println!("samples={}", stats.samples);
    println!("mean_dents={:.4}", stats.mean_dents());
    for (k, n) in stats.histogram.iter().enumerate() {
        println!(
            "dents_{k}={n} observed={:.4} expected={:.4}",
            *n as f64 / stats.samples as f64,
            DentStats::expected_fraction(s, k)
        );
    }
    println!("positive_fraction={:.6}", stats.positive_fraction());
    println!("out={}", out.display());
    Ok(())
}

fn cmd_ingest_noise(cfg: &RunConfig, scans: &[PathBuf]) -> CmdResult {
    let out = require_output(cfg.out.as_ref(), "--out")?;
    for p in scans {
        require_input(p, "scan")?;
    }
    let mut maps = Vec::new();
    for p in scans {
        let cloud = dataio::read_cloud(p, CloudFormat::Auto).with_context(|| format!("reading {}", p.display()))?;
        maps.push(ingest_flat_scan(&cloud, p.display().to_string())?);
    }
    let w = maps.iter().map(|m| m.dims().0).min().expect("at least one scan");
    let h = maps.iter().map(|m| m.dims().1).min().expect("at least one scan");
    let mut cropped = Vec::with_capacity(maps.len());
    for m in maps {
        let residuals = crop(&m.residuals, (0, 0), (w, h))?;
        let rms = (residuals.as_slice().iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / (w * h) as f64).sqrt();
        println!("map={} dims={}x{} rms={rms:.4}", m.source, m.dims().0, m.dims().1);
        cropped.push(NoiseMap { residuals, source: m.source });
    }
    dataio::write_noise_bank(&out, &cropped)?;
    println!("maps={} stored_dims={w}x{h}", cropped.len());
    println!("out={}", out.display());
    Ok(())
}

fn read_labelled(path: &Path) -> anyhow::Result<Vec<(SurfaceGrid, LabelMask)>> {
    let reader = dataio::read_dataset(path)?;
    if !reader.header().has_mask() {
        bail!("{} carries no ground truth", path.display());
    }
    let mut out = Vec::new();
    for rec in reader {
        match rec? {
            Record::Sample { surface, truth: Some(t) } => out.push((surface, t)),
            _ => bail!("{} holds unlabelled records", path.display()),
        }
    }
    if out.is_empty() {
        bail!("{} is empty", path.display());
    }
    Ok(out)
}

fn to_examples(
    samples: &[(SurfaceGrid, LabelMask)],
    bank: Option<&NoiseBank>,
    seed: u64,
) -> anyhow::Result<Vec<Example>> {
    let v: Vec<Example> = samples
        .par_iter()
        .enumerate()
        .map(|(i, (surface, truth))| -> dentseg::Result<Example> {
            let surface = match bank {
                Some(b) => {
                    let mut rng = sample_rng(seed, TRAIN_NOISE_STREAM + i as u64);
                    let (w, h) = surface.dims();
                    apply_patch(surface, &b.sample_patch(w, h, &mut rng)?)?
                }
                None => surface.clone(),
            };
            Ok(Example {
                input: preprocess(&surface)?.residuals,
                truth: truth.clone(),
            })
        })
        .collect::<Result<_, _>>()?;
    Ok(v)
}

fn cmd_train(cfg: &RunConfig, dataset: &Path) -> CmdResult {
    require_input(dataset, "dataset")?;
    let ckpt = require_output(cfg.checkpoint.as_ref(), "--checkpoint")?;
    let report_path = match &cfg.out {
        Some(p) => Some(require_output(Some(p), "--out")?),
        None => None,
    };
    let bank = match &cfg.noise_bank {
        Some(p) => {
            require_input(p, "noise bank")?;
            Some(dataio::read_noise_bank(p)?)
        }
        None => None,
    };
    let samples = read_labelled(dataset)?;
    let n_val = ((samples.len() as f64 * cfg.val_fraction).round() as usize).clamp(1, samples.len().max(2) - 1);
    if samples.len() < 2 {
        return Err(anyhow::anyhow!("training needs at least 2 samples").into());
    }
    let (train_s, val_s) = samples.split_at(samples.len() - n_val);
    let train = to_examples(train_s, bank.as_ref(), cfg.seed)?;
    let val = to_examples(val_s, None, cfg.seed)?;
    eprintln!(
        "training on {} samples, validating on {}{}",
        train.len(),
        val.len(),
        if bank.is_some() { " (noise bank mixed into training)" } else { "" }
    );
    let mut net = Network::build(cfg.net.clone())?;
    let start = Instant::now();
    let report = net.train(&train, &val, &mut |e| {
        eprintln!(
            "epoch {} loss={:.5} val_iou={} ({:.1}s)",
            e.epoch,
            e.train_loss,
            fmt_opt(e.val_metrics.iou),
            start.elapsed().as_secs_f64()
        );
    })?;
    net.save(&ckpt)?;
    println!("best_epoch={}", report.best_epoch);
    println!("best_val_iou={}", fmt_opt(report.best_iou));
    println!("steps={}", report.steps);
    println!("checkpoint={}", ckpt.display());
    if let Some(p) = report_path {
        let epochs: Vec<_> = report
            .epochs
            .iter()
            .map(|e| {
                json!({
                    "epoch": e.epoch,
                    "train_loss": e.train_loss,
                    "validation": metrics_json(&e.val_metrics, &e.val_confusion),
                    "digest": format!("{:08x}", e.digest),
                })
            })
            .collect();
        let value = json!({
            "noise_bank": cfg.noise_bank.as_ref().map(|p| p.display().to_string()),
            "train_samples": train.len(),
            "val_samples": val.len(),
            "best_epoch": report.best_epoch,
            "best_val_iou": report.best_iou,
            "epochs": epochs,
        });
        write_json(&p, &value)?;
    }
    Ok(())
}

fn cmd_predict(cfg: &RunConfig, cloud: &Path, xyz_pitch: Option<f64>) -> CmdResult {
    require_input(cloud, "cloud")?;
    let ckpt = require_checkpoint(cfg)?;
    if let Some(dir) = &cfg.out {
        if dir.exists() && !dir.is_dir() {
            return usage(format!("--out {} must be a directory", dir.display()));
        }
    }
    let format = match xyz_pitch {
        Some(pitch) if pitch > 0.0 => CloudFormat::XyzList { pitch },
        Some(_) => return usage("--xyz-pitch must be positive"),
        None => CloudFormat::Auto,
    };
    let net = Network::load(&ckpt)?;
    let surface = dataio::read_cloud(cloud, format)?;
    let pre = preprocess(&surface)?;
    let (mask, _) = net.predict(&pre, cfg.threshold.unwrap_or(net.config.threshold))?;
    let (w, h) = mask.dims();
    println!("dims={w}x{h}");
    println!("dented_points={}", mask.count_positive());
    if let Some(dir) = &cfg.out {
        fs::create_dir_all(dir).map_err(anyhow::Error::from)?;
        dataio::write_atomic(&dir.join("mask.txt"), dataio::format_mask(&mask).as_bytes())?;
        dataio::write_overlay(dir.join("overlay.png"), &pre.residuals, &mask, None)?;
        println!("out={}", dir.display());
    }
    Ok(())
}

fn cmd_evaluate(cfg: &RunConfig, dataset: &Path, oracle: bool) -> CmdResult {
    require_input(dataset, "dataset")?;
    let samples = read_labelled(dataset)?;
    let (metrics, cm) = if oracle {
        eval::score_masks(samples.iter().map(|(_, t)| (t, t)))?
    } else {
        let net = Network::load(&require_checkpoint(cfg)?)?;
        let threshold = cfg.threshold.unwrap_or(net.config.threshold);
        let cms: Vec<ConfusionMatrix> = samples
            .par_iter()
            .map(|(s, t)| -> dentseg::Result<ConfusionMatrix> {
                let (mask, _) = net.predict(&preprocess(s)?, threshold)?;
                eval::confusion(&mask, t)
            })
            .collect::<Result<_, _>>()?;
        let cm: ConfusionMatrix = cms.into_iter().sum();
        (cm.metrics(), cm)
    };
    println!("samples={}", samples.len());
    print_metrics(&metrics, &cm);
    let value = metrics_json(&metrics, &cm);
    println!("{value}");
    if let Some(p) = &cfg.out {
        write_json(&require_output(Some(p), "--out")?, &value)?;
    }
    Ok(())
}

fn cmd_bench(cfg: &RunConfig, cloud: &Path) -> CmdResult {
    require_input(cloud, "cloud")?;
    let net = Network::load(&require_checkpoint(cfg)?)?;
    let surface = dataio::read_cloud(cloud, CloudFormat::Auto)?;
    let r = eval::bench(&net, &surface, cfg.reps)?;
    println!("points={}", r.points);
    println!("repetitions={}", r.repetitions);
    println!("preprocess_s={:.6}", r.preprocess_s);
    println!("inference_s={:.6}", r.inference_s);
    println!("total_s={:.6}", r.total_s);
    println!("points_per_second={:.0}", r.points_per_second);
    Ok(())
}

fn cmd_render(cfg: &RunConfig, dataset: &Path) -> CmdResult {
    require_input(dataset, "dataset")?;
    let Some(dir) = &cfg.out else {
        return usage("--out is required for this command");
    };
    let net = match &cfg.checkpoint {
        Some(_) => Some(Network::load(&require_checkpoint(cfg)?)?),
        None => None,
    };
    fs::create_dir_all(dir).map_err(anyhow::Error::from)?;
    let limit = cfg.count.min(dentseg::dataio::read_dataset(dataset)?.header().count);
    let reader = dataio::read_dataset(dataset)?;
    for (i, rec) in reader.take(limit as usize).enumerate() {
        let Record::Sample { surface, truth } = rec? else {
            return Err(anyhow::anyhow!("{} is a noise bank", dataset.display()).into());
        };
        let pre = preprocess(&surface)?;
        let path = dir.join(format!("sample_{i:05}.png"));
        match (&net, truth) {
            (Some(n), truth) => {
                let (mask, _) = n.predict(&pre, cfg.threshold.unwrap_or(n.config.threshold))?;
                dataio::write_overlay(&path, &pre.residuals, &mask, truth.as_ref())?;
            }
            (None, Some(t)) => dataio::write_overlay(&path, &pre.residuals, &t, None)?,
            (None, None) => {
                let empty = LabelMask::zeros(surface.width(), surface.height());
                dataio::write_overlay(&path, &pre.residuals, &empty, None)?;
            }
        }
    }
    println!("rendered={limit}");
    println!("out={}", dir.display());
    Ok(())
}

fn run(cli: Cli) -> CmdResult {
    let cfg = resolve(&cli.common)?;
    if let Some(n) = cfg.threads {
        // fails only if a pool already exists, which cannot happen here
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match &cli.command {
        Command::Generate => cmd_generate(&cfg),
        Command::IngestNoise { scans } => cmd_ingest_noise(&cfg, scans),
        Command::Train { dataset } => cmd_train(&cfg, dataset),
        Command::Predict { cloud, xyz_pitch } => cmd_predict(&cfg, cloud, *xyz_pitch),
        Command::Evaluate { dataset, oracle } => cmd_evaluate(&cfg, dataset, *oracle),
        Command::Bench { cloud } => cmd_bench(&cfg, cloud),
        Command::Render { dataset } => cmd_render(&cfg, dataset),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let result = run(cli);
    let _ = std::io::stdout().flush();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
