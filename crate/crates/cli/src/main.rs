//! `scenesynth`: dataset building, composite scanning, training, synthesis,
//! filtering, label export and diagnostics.
//!
//! Exit codes: 0 success, 1 usage, 2 data or validation error, 3 external
//! service error.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use scenesynth::cfcomp::scan_pairs;
use scenesynth::config::PipelineConfig;
use scenesynth::dataset::{build_dataset, make_toy_dataset, read_manifest, write_manifest, DatasetManifest};
use scenesynth::diffusion::{
    load_checkpoint, save_checkpoint, train::checksum, Denoiser, DenoiserConfig, ParamGroup, StepMetrics, TrainState,
    TrainerSettings,
};
use scenesynth::embed::{BuiltinEmbedder, TextEmbedder};
use scenesynth::fsutil::write_atomic;
use scenesynth::hash::mix_seed;
use scenesynth::labelmap::{export, Task};
use scenesynth::rfilter::{filter_dataset, RemoteScorer, ScorerKind, DEFAULT_IN_FLIGHT};
use scenesynth::stats::dataset_stats;
use scenesynth::synthesis::{random_transform, sample_conditions, synthesize, write_synthesis, SynthesisJob};
use scenesynth::Error;

// Stream tags for per-stage seeds.
const SEED_MODEL: u64 = 1;
const SEED_TRAIN: u64 = 2;
const SEED_CONDITIONS: u64 = 3;
const SEED_TRANSFORM: u64 = 4;
const SEED_GENERATE: u64 = 5;
const SEED_BUILD: u64 = 6;

#[derive(Parser, Debug)]
#[command(name = "scenesynth", version, about = "Mask- and text-conditioned synthesis of labeled scenes")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Args, Debug)]
struct Global {
    /// JSON pipeline configuration; missing keys take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker cap for every stage.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Dot-path override such as `train.steps=200`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Print the full default configuration and exit.
    #[arg(long)]
    emit_default_config: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a triplet dataset from a manifest or the synthetic toy generator.
    BuildDataset(BuildArgs),
    /// Evaluate composite criteria over one batch of a dataset.
    PairScan(PairScanArgs),
    /// Train the denoiser and write a checkpoint.
    Train(TrainArgs),
    /// Generate a candidate dataset from sampled conditions.
    Synthesize(SynthArgs),
    /// Keep candidates whose image-text scores pass the threshold.
    Filter(FilterArgs),
    /// Write classification, segmentation or detection labels.
    ExportLabels(ExportArgs),
    /// Class histograms, foreground fractions and intensity-mixing checks.
    Stats(StatsArgs),
}

#[derive(Args, Debug)]
struct BuildArgs {
    /// Source manifest (file or directory); records are cropped to `crop_size`.
    #[arg(long, conflicts_with = "toy")]
    input: Option<PathBuf>,
    /// Generate this many synthetic disk/square scenes instead.
    #[arg(long)]
    toy: Option<usize>,
    /// Side length of toy scenes.
    #[arg(long, default_value_t = 32)]
    toy_size: usize,
    /// Add one single-class isolation per class of multi-class records.
    #[arg(long)]
    augment: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PairScanArgs {
    #[arg(long)]
    data: PathBuf,
    /// Records scanned from the start of the manifest; defaults to `train.batch`.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Start from this checkpoint's parameters with fresh optimizer state.
    #[arg(long, conflicts_with = "resume")]
    init: Option<PathBuf>,
    /// Continue this checkpoint's run up to `train.steps`.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Train without composites.
    #[arg(long)]
    no_cfcomp: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset conditions are sampled from.
    #[arg(long)]
    data: PathBuf,
    /// Conditions per class; defaults to `synth.per_class`.
    #[arg(long)]
    per_class: Option<usize>,
    /// Replace each condition with a random rotation, scaling or merge.
    #[arg(long)]
    transform: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct FilterArgs {
    #[arg(long)]
    data: PathBuf,
    /// `mock` or `remote`; defaults to `filter.scorer`.
    #[arg(long)]
    scorer: Option<String>,
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long)]
    data: PathBuf,
    /// classification, segmentation or detection.
    #[arg(long)]
    task: Task,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct StatsArgs {
    #[arg(long)]
    data: PathBuf,
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

type CliResult<T = ()> = Result<T, Failure>;

struct Context {
    cfg: PipelineConfig,
    threads: usize,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    ExitCode::from(run_args(std::env::args_os()))
}

fn run_args<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            if e.is_service() {
                3
            } else {
                2
            }
        }
    }
}

fn run(cli: Cli) -> CliResult {
    if cli.global.emit_default_config {
        print!("{}", PipelineConfig::default().to_json());
        return Ok(());
    }
    let Some(command) = cli.command else {
        return Err(Failure::Usage("a subcommand is required (see --help)".into()));
    };
    let mut cfg = match &cli.global.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    cfg = cfg.with_overrides(cli.global.overrides.iter().map(String::as_str))?;
    if let Some(seed) = cli.global.seed {
        cfg.seed = seed;
    }
    let threads = match cli.global.threads {
        Some(0) => return Err(Failure::Usage("--threads must be at least 1".into())),
        Some(n) => n,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    let ctx = Context { cfg, threads };
    match command {
        Command::BuildDataset(a) => build(&ctx, a),
        Command::PairScan(a) => pair_scan(&ctx, a),
        Command::Train(a) => train(&ctx, a),
        Command::Synthesize(a) => synth(&ctx, a),
        Command::Filter(a) => filter(&ctx, a),
        Command::ExportLabels(a) => export_labels(&ctx, a),
        Command::Stats(a) => stats(a),
    }
}

fn write_report(dir: &Path, name: &str, report: &impl Serialize) -> CliResult {
    let mut json = serde_json::to_vec_pretty(report).map_err(Error::from)?;
    json.push(b'\n');
    write_atomic(&dir.join(name), &json)?;
    Ok(())
}

#[derive(Serialize)]
struct BuildReport {
    records: usize,
    seed: u64,
    manifest: String,
}

fn build(ctx: &Context, a: BuildArgs) -> CliResult {
    let seed = mix_seed(ctx.cfg.seed, SEED_BUILD);
    let ds = match (&a.input, a.toy) {
        (Some(input), None) => build_dataset(&read_manifest(input)?, ctx.cfg.crop_size, a.augment, seed)?,
        (None, Some(n)) => {
            let toy = make_toy_dataset(n, a.toy_size, seed)?;
            if a.augment {
                build_dataset(&toy, a.toy_size, true, seed)?
            } else {
                toy
            }
        }
        _ => return Err(Failure::Usage("exactly one of --input or --toy is required".into())),
    };
    let manifest = write_manifest(&a.out, &ds)?;
    log::info!("wrote {} records to {}", ds.len(), manifest.display());
    write_report(
        &a.out,
        "build_report.json",
        &BuildReport {
            records: ds.len(),
            seed,
            manifest: scenesynth::dataset::MANIFEST_FILE.to_string(),
        },
    )
}

#[derive(Serialize)]
struct PairRow {
    a: String,
    b: String,
    ics: f64,
    mor: f64,
    tss: f64,
    passes: bool,
    accepted: bool,
}

fn pair_scan(ctx: &Context, a: PairScanArgs) -> CliResult {
    let ds = read_manifest(&a.data)?;
    let n = a.limit.unwrap_or(ctx.cfg.train.batch).min(ds.len());
    let batch = &ds.triplets[..n];
    let rows: Vec<PairRow> = scan_pairs(batch, &ctx.cfg.thresholds, &BuiltinEmbedder::default())?
        .into_iter()
        .map(|e| PairRow {
            a: batch[e.a].id.clone(),
            b: batch[e.b].id.clone(),
            ics: e.ics,
            mor: e.mor,
            tss: e.tss,
            passes: e.passes,
            accepted: e.accepted,
        })
        .collect();
    log::info!(
        "{} ordered pairs, {} pass, {} accepted",
        rows.len(),
        rows.iter().filter(|r| r.passes).count(),
        rows.iter().filter(|r| r.accepted).count()
    );
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in &rows {
        w.serialize(row).map_err(|e| Error::InvalidInput(format!("csv: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidInput(format!("csv: {e}")))?;
    write_atomic(&a.out.join("pair_scan.csv"), &bytes)?;
    Ok(())
}

#[derive(Serialize)]
struct TrainReport {
    steps: u64,
    updates: u64,
    mode: scenesynth::diffusion::TrainMode,
    composites: usize,
    first_window_loss: f64,
    last_window_loss: f64,
    frozen_checksum_before: u64,
    frozen_checksum_after: u64,
}

fn window_mean(ms: &[StepMetrics], first: bool) -> f64 {
    let k = ms.len().min(100);
    if k == 0 {
        return f64::NAN;
    }
    let w = if first { &ms[..k] } else { &ms[ms.len() - k..] };
    w.iter().map(|m| m.total).sum::<f64>() / k as f64
}

fn train(ctx: &Context, a: TrainArgs) -> CliResult {
    let cfg = &ctx.cfg;
    let ds = read_manifest(&a.data)?;
    let emb = BuiltinEmbedder::default();
    let schedule = cfg.schedule.build()?;
    let settings = TrainerSettings {
        train: cfg.train.clone(),
        thresholds: cfg.thresholds,
        gamma: cfg.gamma,
        cfcomp: !a.no_cfcomp,
    };
    let geometry = DenoiserConfig::for_dataset(&ds.triplets, ds.vocab.len(), emb.dim())?;
    let mut state: TrainState<f32> = match (&a.resume, &a.init) {
        (Some(path), _) => load_checkpoint(path)?,
        (None, Some(path)) => TrainState::new(
            load_checkpoint::<f32>(path)?.model,
            settings,
            mix_seed(cfg.seed, SEED_TRAIN),
        )?,
        (None, None) => TrainState::new(
            Denoiser::new(geometry, mix_seed(cfg.seed, SEED_MODEL))?,
            settings,
            mix_seed(cfg.seed, SEED_TRAIN),
        )?,
    };
    if *state.model.config() != geometry {
        return Err(Error::InvalidInput(format!(
            "checkpoint model {:?} does not fit dataset geometry {geometry:?}",
            state.model.config()
        ))
        .into());
    }
    let mode = state.settings.train.mode;
    let frozen = |g: ParamGroup| !mode.trains(g);
    let before = checksum(&state.model, frozen);
    let remaining = (cfg.train.steps as u64).saturating_sub(state.step) as usize;
    let mut log_lines = Vec::with_capacity(remaining);
    let metrics = state.run(&ds.triplets, remaining, &emb, &schedule, &ds.vocab, |m| {
        if m.step % 100 == 0 {
            log::info!("step {} loss {:.5} composites {}", m.step, m.total, m.composites);
        }
        log_lines.push(serde_json::to_string(m).expect("metrics serialize"));
    })?;
    let mut body = log_lines.join("\n");
    body.push('\n');
    write_atomic(&a.out.join("metrics.jsonl"), body.as_bytes())?;
    save_checkpoint(&state, &a.out)?;
    let report = TrainReport {
        steps: state.step,
        updates: state.updates,
        mode,
        composites: metrics.iter().map(|m| m.composites).sum(),
        first_window_loss: window_mean(&metrics, true),
        last_window_loss: window_mean(&metrics, false),
        frozen_checksum_before: before,
        frozen_checksum_after: checksum(&state.model, frozen),
    };
    write_report(&a.out, "train_report.json", &report)
}

fn synth(ctx: &Context, a: SynthArgs) -> CliResult {
    let cfg = &ctx.cfg;
    let ds = read_manifest(&a.data)?;
    let state: TrainState<f32> = load_checkpoint(&a.checkpoint)?;
    let per_class = a.per_class.unwrap_or(cfg.synth.per_class);
    let mut conditions = sample_conditions(&ds, per_class, mix_seed(cfg.seed, SEED_CONDITIONS))?.conditions;
    if a.transform {
        let pool = conditions.clone();
        conditions = conditions
            .iter()
            .enumerate()
            .map(|(i, c)| random_transform(c, &pool, mix_seed(mix_seed(cfg.seed, SEED_TRANSFORM), i as u64), &ds.vocab))
            .collect::<scenesynth::Result<_>>()?;
    }
    let job = SynthesisJob {
        conditions,
        steps: cfg.synth.steps,
        guidance: cfg.synth.guidance,
        sampler: cfg.synth.sampler,
        seed: mix_seed(cfg.seed, SEED_GENERATE),
    };
    let schedule = cfg.schedule.build()?;
    let out = synthesize(&state.model, &schedule, &job, &BuiltinEmbedder::default(), &ds.vocab, ctx.threads)?;
    let manifest = write_synthesis(&a.out, &out)?;
    log::info!("wrote {} candidates to {}", out.dataset.len(), manifest.display());
    Ok(())
}

#[derive(Serialize)]
struct FilterReport {
    records: usize,
    kept: usize,
    dropped: usize,
    errors: usize,
    s0: f64,
    scorer: ScorerKind,
}

fn filter(ctx: &Context, a: FilterArgs) -> CliResult {
    let mut fc = ctx.cfg.filter.clone();
    if let Some(kind) = &a.scorer {
        fc.scorer = match kind.as_str() {
            "mock" => ScorerKind::Mock,
            "remote" => ScorerKind::Remote,
            other => return Err(Failure::Usage(format!("unknown scorer {other:?}"))),
        };
    }
    if let Some(endpoint) = a.endpoint {
        fc.endpoint = endpoint;
    }
    let ds = read_manifest(&a.data)?;
    if fc.scorer == ScorerKind::Remote {
        let model = RemoteScorer::new(&fc.endpoint)?.health()?;
        log::info!("scoring with remote model {model}");
    }
    let scorer = fc.build_scorer()?;
    let in_flight = ctx.threads.min(DEFAULT_IN_FLIGHT);
    let outcome = filter_dataset(scorer.as_ref(), &ds, fc.s0, in_flight)?;
    write_manifest(&a.out, &outcome.kept)?;
    outcome.write_report(&a.out.join("filter_report.csv"))?;
    let errors = outcome
        .rows
        .iter()
        .filter(|r| r.decision == scenesynth::rfilter::Decision::Error)
        .count();
    log::info!("kept {} of {} records", outcome.kept.len(), ds.len());
    write_report(
        &a.out,
        "filter_report.json",
        &FilterReport {
            records: ds.len(),
            kept: outcome.kept.len(),
            dropped: ds.len() - outcome.kept.len() - errors,
            errors,
            s0: fc.s0,
            scorer: fc.scorer,
        },
    )
}

fn export_labels(ctx: &Context, a: ExportArgs) -> CliResult {
    let ds = read_manifest(&a.data)?;
    let summary = export(&ds, a.task, &a.out, &ctx.cfg.labelmap)?;
    log::info!("exported {} records ({} annotations)", summary.records, summary.annotations);
    write_report(&a.out, "export_report.json", &summary)
}

fn stats(a: StatsArgs) -> CliResult {
    let ds: DatasetManifest = read_manifest(&a.data)?;
    let report = dataset_stats(&ds)?;
    let json = serde_json::to_string_pretty(&report).map_err(Error::from)?;
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "{json}").map_err(|e| Error::Io {
        path: "<stdout>".into(),
        source: e,
    })?;
    if let Some(out) = a.out {
        write_report(&out, "stats.json", &report)?;
    }
    Ok(())
}
