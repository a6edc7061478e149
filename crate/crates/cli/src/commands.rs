use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use promo_core::metrics::{evaluate_sets, train_feature_extractors, MetricRecord};
use promo_core::motion::{MotionSequence, Skeleton};
use promo_core::posture::{train_posture_diffuser, train_retrieval_encoders};
use promo_core::go::train_go_diffuser;
use promo_core::script::PostureScript;
use promo_core::synth::{synth_motions, synth_pose_pairs};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, TrainInfo};
use crate::config::PipelineConfig;
use crate::dataset::{read_motion_dataset, read_pose_dataset, write_motion_dataset, write_pose_dataset, MotionRecord};
use crate::export::{export_motion, ExportFormat};
use crate::pipeline::{load_models, plan, run_pipeline, MotionFile};

#[derive(Parser, Debug)]
#[command(name = "promo", version, about = "Text-to-motion through posture scripts and key poses")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic pose or motion dataset.
    SynthData(SynthArgs),
    /// Train one model and write its checkpoint.
    Train(TrainArgs),
    /// Print the posture-script plan for a prompt.
    Plan(PlanArgs),
    /// Run the full pipeline for a prompt.
    Generate(GenerateArgs),
    /// Compare generated motions with reference motions.
    Evaluate(EvaluateArgs),
    /// Convert a motion file to json, csv or bvh.
    Export(ExportArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SynthKind {
    Poses,
    Motions,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    pub kind: SynthKind,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TrainTarget {
    Posture,
    Go,
    Encoders,
    Extractors,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    pub target: TrainTarget,
    /// Dataset path; defaults to the config's data section.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Checkpoint path; defaults to the config's checkpoints section.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PlanArgs {
    #[arg(long)]
    pub prompt: String,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub fps: Option<u32>,
    /// Ask the chat endpoint instead of the bundled plans.
    #[arg(long)]
    pub live: bool,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub prompt: String,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Candidate poses per keyframe.
    #[arg(long)]
    pub candidates: Option<usize>,
    /// Guidance weight for both diffusion stages.
    #[arg(long)]
    pub guidance: Option<f64>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Motion files (`.json`) or motion datasets (`.jsonl`).
    #[arg(long, num_args = 1.., required = true)]
    pub generated: Vec<PathBuf>,
    #[arg(long, num_args = 1.., required = true)]
    pub reference: Vec<PathBuf>,
    /// Metric names to keep; all when omitted.
    #[arg(long, value_delimiter = ',')]
    pub metrics: Vec<String>,
    /// Feature extractor checkpoint for FID and retrieval metrics.
    #[arg(long)]
    pub extractor: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub format: String,
    /// Output path; defaults to the input with the format's extension.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub seed: u64,
    pub config_hash: String,
    pub n: usize,
    pub records: Vec<MetricRecord>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthData(a) => synth_data(a),
        Command::Train(a) => train(a),
        Command::Plan(a) => plan_cmd(a),
        Command::Generate(a) => generate(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Export(a) => export(a),
    }
}

fn synth_data(a: SynthArgs) -> Result<()> {
    ensure!(a.n >= 1, "synth-data: --n must be at least 1");
    let cfg = PipelineConfig::load_or_default(a.config.as_deref())?;
    match a.kind {
        SynthKind::Poses => write_pose_dataset(&a.out, &synth_pose_pairs(a.n, a.seed), a.seed, &cfg.hash())?,
        SynthKind::Motions => {
            let records: Vec<MotionRecord> = synth_motions(a.n, a.seed)?.iter().map(MotionRecord::from).collect();
            write_motion_dataset(&a.out, &records, a.seed, &cfg.hash())?
        }
    }
    eprintln!("wrote {} records to {}", a.n, a.out.display());
    Ok(())
}

fn progress(name: &'static str, total: usize) -> impl FnMut(usize, f64) {
    let every = (total / 10).max(1);
    move |epoch, loss| {
        if epoch % every == 0 || epoch + 1 == total {
            eprintln!("{name} epoch {epoch} loss {loss:.5}");
        }
    }
}

fn data_path(explicit: Option<PathBuf>, configured: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    explicit.or_else(|| configured.clone()).with_context(|| format!("no {what} dataset given (--data or [data] {what})"))
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = PipelineConfig::load_or_default(a.config.as_deref())?;
    let seed = a.seed.unwrap_or(cfg.seed);
    let hash = cfg.hash();
    let t = std::time::Instant::now();
    let (ck, default_out) = match a.target {
        TrainTarget::Posture | TrainTarget::Encoders => {
            let path = data_path(a.data, &cfg.data.poses, "poses")?;
            let (_, pairs) = read_pose_dataset(&path)?;
            if a.target == TrainTarget::Posture {
                let train = &mut cfg.posture.train;
                train.epochs = a.epochs.unwrap_or(train.epochs);
                let (model, _) = train_posture_diffuser(&pairs, train, seed, progress("posture", train.epochs))?;
                let info = TrainInfo { seed, epochs: train.epochs, config_hash: hash };
                (Checkpoint::from_posture(&model, &info), cfg.checkpoints.posture.clone())
            } else {
                let sec = &mut cfg.encoders;
                sec.train.epochs = a.epochs.unwrap_or(sec.train.epochs);
                let (enc, _) =
                    train_retrieval_encoders(&pairs, sec.model, &sec.train, seed, progress("encoders", sec.train.epochs))?;
                let info = TrainInfo { seed, epochs: sec.train.epochs, config_hash: hash };
                (Checkpoint::from_encoders(&enc, &info), cfg.checkpoints.encoders.clone())
            }
        }
        TrainTarget::Go | TrainTarget::Extractors => {
            let path = data_path(a.data, &cfg.data.motions, "motions")?;
            let (_, records) = read_motion_dataset(&path)?;
            let motions: Vec<MotionSequence> = records.iter().map(MotionRecord::motion).collect::<Result<_>>()?;
            if a.target == TrainTarget::Go {
                let train = &mut cfg.go.train;
                train.epochs = a.epochs.unwrap_or(train.epochs);
                let (model, _) = train_go_diffuser(&motions, train, seed, progress("go", train.epochs))?;
                let info = TrainInfo { seed, epochs: train.epochs, config_hash: hash };
                (Checkpoint::from_go(&model, &info), cfg.checkpoints.go.clone())
            } else {
                let plans: Vec<Vec<PostureScript>> = records.into_iter().map(|r| r.plan).collect();
                let sec = &mut cfg.extractors;
                sec.train.epochs = a.epochs.unwrap_or(sec.train.epochs);
                let (pair, _) = train_feature_extractors(
                    &motions,
                    &plans,
                    sec.model,
                    &sec.train,
                    seed,
                    progress("extractors", sec.train.epochs),
                )?;
                let info = TrainInfo { seed, epochs: sec.train.epochs, config_hash: hash };
                (Checkpoint::from_extractors(&pair, &info), cfg.checkpoints.extractors.clone())
            }
        }
    };
    let out = a.out.unwrap_or(default_out);
    ck.save(&out)?;
    eprintln!("saved {} checkpoint to {} in {:.1?}", ck.header.kind.name(), out.display(), t.elapsed());
    Ok(())
}

fn plan_cmd(a: PlanArgs) -> Result<()> {
    let mut cfg = PipelineConfig::load_or_default(a.config.as_deref())?;
    cfg.generation.frames = a.frames.unwrap_or(cfg.generation.frames);
    cfg.generation.fps = a.fps.unwrap_or(cfg.generation.fps);
    cfg.planner.live |= a.live;
    cfg.validate()?;
    let response = plan(&a.prompt, &cfg).context("plan stage")?;
    for (k, s) in response.scripts.iter().enumerate() {
        println!("POSE {}: {}", k + 1, s.text());
    }
    Ok(())
}

fn generate(a: GenerateArgs) -> Result<()> {
    let mut cfg = PipelineConfig::load_or_default(a.config.as_deref())?;
    if let Some(l) = a.candidates {
        cfg.generation.candidates = l;
    }
    if let Some(w) = a.guidance {
        cfg.posture.guidance = w;
        cfg.go.guidance = w;
    }
    cfg.validate()?;
    let seed = a.seed.unwrap_or(cfg.seed);
    let models = load_models(&cfg).context("load stage")?;
    let file = run_pipeline(&a.prompt, &cfg, seed, &models)?;
    file.save(&a.out)?;
    eprintln!("wrote {}", a.out.display());
    Ok(())
}

/// Records from motion files or motion datasets, in argument order.
pub fn load_records(paths: &[PathBuf]) -> Result<Vec<MotionRecord>> {
    let mut out = Vec::new();
    for p in paths {
        if p.extension().is_some_and(|e| e == "jsonl") {
            out.extend(read_motion_dataset(p)?.1);
        } else {
            out.push(MotionFile::load(p)?.record());
        }
    }
    Ok(out)
}

pub fn evaluate_records(
    generated: &[MotionRecord],
    reference: &[MotionRecord],
    extractor: Option<&Path>,
    metrics: &[String],
) -> Result<Vec<MetricRecord>> {
    ensure!(
        generated.len() == reference.len(),
        "{} generated motions but {} reference motions",
        generated.len(),
        reference.len()
    );
    let gen: Vec<MotionSequence> = generated.iter().map(MotionRecord::motion).collect::<Result<_>>()?;
    let reference: Vec<MotionSequence> = reference.iter().map(MotionRecord::motion).collect::<Result<_>>()?;
    let plans: Vec<Vec<PostureScript>> = generated.iter().map(|r| r.plan.clone()).collect();
    let plans = plans.iter().all(|p| !p.is_empty()).then_some(plans.as_slice());
    let extractor = extractor.map(|p| Checkpoint::load(p)?.to_extractors()).transpose()?;
    let records = evaluate_sets(&gen, &reference, plans, extractor.as_ref(), &Skeleton::canonical())?;
    Ok(records.into_iter().filter(|r| metrics.is_empty() || metrics.iter().any(|m| m == &r.metric)).collect())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let cfg = PipelineConfig::load_or_default(a.config.as_deref())?;
    let generated = load_records(&a.generated).context("reading generated motions")?;
    let reference = load_records(&a.reference).context("reading reference motions")?;
    let records = evaluate_records(&generated, &reference, a.extractor.as_deref(), &a.metrics).context("evaluate stage")?;
    if records.is_empty() {
        bail!("no metric matched {:?}", a.metrics);
    }
    let report = Report { seed: cfg.seed, config_hash: cfg.hash(), n: generated.len(), records };
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(&a.out, serde_json::to_string_pretty(&report)?)?;
    for r in &report.records {
        println!("{:<20} {:<12} {:.6}", r.metric, r.variant.as_deref().unwrap_or("-"), r.value);
    }
    Ok(())
}

fn export(a: ExportArgs) -> Result<()> {
    let format: ExportFormat = a.format.parse()?;
    let record = MotionFile::load(&a.input)?.record();
    let out = a.out.unwrap_or_else(|| a.input.with_extension(format.extension()));
    ensure!(out != a.input, "export would overwrite its input {}", a.input.display());
    export_motion(&record, format, &out)?;
    eprintln!("wrote {}", out.display());
    Ok(())
}
