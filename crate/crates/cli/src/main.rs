use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use slicevote::aggregate::{decide_all, decisions_to_csv, parse_decisions_csv, sweep_table, sweep_to_json};
use slicevote::config::{parse_crop_offset, parse_crop_size, BackendConfig, ConfigOverrides};
use slicevote::io_util::write_atomic;
use slicevote::metrics::{evaluate, EvalLevel, DEFAULT_Z};
use slicevote::pipeline::{self, OutputLayout};
use slicevote::scorer::{load_scores_file, DEFAULT_SUBPROCESS_TIMEOUT};
use slicevote::{load_manifest, run_pipeline, CropSpec, SelectionPolicy, Stage, SynthParams, Threshold};

#[derive(Parser)]
#[command(
    name = "slicevote",
    version,
    about = "CT slice preprocessing, per-slice scoring and majority-vote patient diagnosis"
)]
struct Cli {
    /// TOML config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Random seed (baseline initialization, synthetic data).
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Select central slices, crop and resize; write one tensor archive per patient.
    Preprocess(PreprocessArgs),
    /// Score preprocessed archives into a scores CSV.
    Score(ScoreArgs),
    /// Threshold slice scores and majority-vote a verdict per patient.
    Aggregate(AggregateArgs),
    /// Evaluate predictions against manifest labels.
    Evaluate(EvaluateArgs),
    /// Patient-level evaluation over several thresholds.
    Sweep(SweepArgs),
    /// Full pipeline: preprocess, score, aggregate, evaluate, sweep.
    Run(RunArgs),
    /// Generate a synthetic dataset with a planted COVID signal.
    Synth(SynthArgs),
}

#[derive(Args, Clone, Default)]
struct PreprocessFlags {
    #[arg(long)]
    root: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Fraction of slices kept from the middle of each volume.
    #[arg(long)]
    keep_fraction: Option<f64>,
    /// Crop size as HEIGHTxWIDTH.
    #[arg(long)]
    crop: Option<String>,
    /// Crop top-left corner as TOP,LEFT (default: centered).
    #[arg(long)]
    crop_offset: Option<String>,
    /// Reject slices that are not 512x512.
    #[arg(long)]
    strict_dims: bool,
}

#[derive(Args)]
struct PreprocessArgs {
    #[command(flatten)]
    flags: PreprocessFlags,
    /// Output directory; archives go to <out>/archives.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Copy, Clone, ValueEnum)]
enum BackendKind {
    Baseline,
    File,
    Subprocess,
}

impl BackendKind {
    fn as_str(self) -> &'static str {
        match self {
            BackendKind::Baseline => "baseline",
            BackendKind::File => "file",
            BackendKind::Subprocess => "subprocess",
        }
    }
}

#[derive(Args, Clone, Default)]
struct BackendFlags {
    #[arg(long, value_enum)]
    backend: Option<BackendKind>,
    /// Precomputed scores CSV for the file backend.
    #[arg(long)]
    scores_file: Option<PathBuf>,
    /// Scorer command line for the subprocess backend (whitespace-split).
    #[arg(long)]
    command: Option<String>,
    /// Subprocess timeout in seconds.
    #[arg(long)]
    timeout_secs: Option<u64>,
    /// Baseline training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Run directory holding archives/ (from `preprocess`); scores.csv is written here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    backend: BackendFlags,
}

#[derive(Args)]
struct AggregateArgs {
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    threshold: Option<f64>,
    /// Decisions CSV to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Copy, Clone, ValueEnum)]
enum LevelArg {
    Patient,
    Slice,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Scores CSV; decided at --threshold.
    #[arg(long, conflicts_with = "decisions")]
    scores: Option<PathBuf>,
    /// Decisions CSV from `aggregate` (patient level).
    #[arg(long)]
    decisions: Option<PathBuf>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long, value_enum, default_value = "patient")]
    level: LevelArg,
    #[arg(long)]
    z: Option<f64>,
    /// Report JSON to write.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Comma-separated thresholds.
    #[arg(long)]
    thresholds: Option<String>,
    #[arg(long)]
    z: Option<f64>,
    /// Sweep JSON to write.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    preprocess: PreprocessFlags,
    #[command(flatten)]
    backend: BackendFlags,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    thresholds: Option<String>,
    #[arg(long)]
    z: Option<f64>,
    /// Run output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 20)]
    patients: usize,
    #[arg(long, default_value_t = 50)]
    slices: usize,
    /// Dataset directory; manifest.csv is written inside it.
    #[arg(long)]
    out: PathBuf,
}

fn parse_threshold_list(list: Option<&str>) -> Result<Option<Vec<f64>>> {
    list.map(|l| {
        Ok(slicevote::aggregate::parse_thresholds(l)?
            .into_iter()
            .map(Threshold::value)
            .collect())
    })
    .transpose()
}

impl Cli {
    fn file_config(&self) -> Result<ConfigOverrides> {
        let globals = ConfigOverrides {
            jobs: self.jobs,
            seed: self.seed,
            ..Default::default()
        };
        let file = match &self.config {
            Some(path) => ConfigOverrides::load(path)
                .with_context(|| format!("reading config {}", path.display()))?,
            None => ConfigOverrides::default(),
        };
        Ok(globals.over(file))
    }
}

fn preprocess_overrides(f: &PreprocessFlags) -> ConfigOverrides {
    ConfigOverrides {
        root: f.root.clone(),
        manifest: f.manifest.clone(),
        keep_fraction: f.keep_fraction,
        crop: f.crop.clone(),
        crop_offset: f.crop_offset.clone(),
        strict_dims: f.strict_dims.then_some(true),
        ..Default::default()
    }
}

fn backend_overrides(f: &BackendFlags) -> ConfigOverrides {
    ConfigOverrides {
        backend: f.backend.map(|b| b.as_str().to_string()),
        scores_file: f.scores_file.clone(),
        command: f.command.clone(),
        timeout_secs: f.timeout_secs,
        epochs: f.epochs,
        learning_rate: f.learning_rate,
        momentum: f.momentum,
        ..Default::default()
    }
}

fn require<T: Clone>(value: &Option<T>, name: &str) -> Result<T> {
    match value {
        Some(v) => Ok(v.clone()),
        None => bail!("missing --{name} (flag or config key)"),
    }
}

fn manifest_root(manifest: &Path, root: &Option<PathBuf>) -> PathBuf {
    root.clone().unwrap_or_else(|| {
        manifest
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."))
    })
}

fn cmd_preprocess(cfg: ConfigOverrides) -> Result<()> {
    let manifest_path = require(&cfg.manifest, "manifest")?;
    let out = require(&cfg.out, "out")?;
    let root = manifest_root(&manifest_path, &cfg.root);
    let selection = SelectionPolicy::new(cfg.keep_fraction.unwrap_or(0.6))?;
    let mut crop = CropSpec::default();
    if let Some(size) = &cfg.crop {
        (crop.crop_height, crop.crop_width) = parse_crop_size(size)?;
    }
    crop.offset = cfg.crop_offset.as_deref().map(parse_crop_offset).transpose()?;
    crop.strict_dims = cfg.strict_dims.unwrap_or(false);

    let manifest = load_manifest(&manifest_path)?;
    let layout = OutputLayout::new(out);
    let pool = pipeline::thread_pool(cfg.jobs.unwrap_or(1))?;
    let summary = pool
        .install(|| pipeline::preprocess_stage(&manifest, &root, &selection, &crop, &layout))
        .map_err(|e| e.at_stage(Stage::Preprocess))?;
    let kept: usize = summary.iter().map(|s| s.kept).sum();
    eprintln!(
        "preprocessed {} patients, {kept} kept slices -> {}",
        summary.len(),
        layout.archives_dir().display()
    );
    Ok(())
}

fn cmd_score(cfg: ConfigOverrides) -> Result<()> {
    let manifest_path = require(&cfg.manifest, "manifest")?;
    let out = require(&cfg.out, "out")?;
    let backend = match cfg.backend.as_deref().unwrap_or("baseline") {
        "baseline" => {
            let d = slicevote::BaselineConfig::default();
            BackendConfig::Baseline(slicevote::BaselineConfig {
                epochs: cfg.epochs.unwrap_or(d.epochs),
                learning_rate: cfg.learning_rate.unwrap_or(d.learning_rate),
                momentum: cfg.momentum.unwrap_or(d.momentum),
                seed: cfg.seed.unwrap_or(0),
            })
        }
        "file" => BackendConfig::File(require(&cfg.scores_file, "scores-file")?),
        "subprocess" => BackendConfig::Subprocess {
            command: require(&cfg.command, "command")?
                .split_whitespace()
                .map(String::from)
                .collect(),
            timeout: cfg
                .timeout_secs
                .map(Duration::from_secs)
                .unwrap_or(DEFAULT_SUBPROCESS_TIMEOUT),
        },
        other => bail!("unknown backend {other:?}"),
    };
    let manifest = load_manifest(&manifest_path)?;
    let layout = OutputLayout::new(out);
    let pool = pipeline::thread_pool(cfg.jobs.unwrap_or(1))?;
    let outcome = pool
        .install(|| pipeline::score_stage(&manifest, &layout, &backend))
        .map_err(|e| e.at_stage(Stage::Score))?;
    eprintln!(
        "scored {} slices -> {}",
        outcome.scores.len(),
        layout.scores_csv().display()
    );
    Ok(())
}

fn cmd_aggregate(args: AggregateArgs, cfg: ConfigOverrides) -> Result<()> {
    let scores = load_scores_file(&args.scores)?.into_rows();
    let threshold = Threshold::new(args.threshold.or(cfg.threshold).unwrap_or(0.7))?;
    let decisions = match args.manifest.or(cfg.manifest) {
        Some(path) => {
            let manifest = load_manifest(&path)?;
            pipeline::aggregate_stage(&manifest, &scores, threshold, &args.out)
                .map_err(|e| e.at_stage(Stage::Aggregate))?
        }
        None => {
            let decisions = decide_all(&scores, threshold)?;
            write_atomic(&args.out, decisions_to_csv(&decisions).as_bytes())?;
            decisions
        }
    };
    eprintln!(
        "{} patient decisions at threshold {threshold} -> {}",
        decisions.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs, cfg: ConfigOverrides) -> Result<()> {
    let manifest = load_manifest(&require(&args.manifest.or(cfg.manifest), "manifest")?)?;
    let threshold = Threshold::new(args.threshold.or(cfg.threshold).unwrap_or(0.7))?;
    let z = args.z.or(cfg.z).unwrap_or(DEFAULT_Z);
    let report = match (&args.scores, &args.decisions, args.level) {
        (Some(path), _, LevelArg::Slice) => {
            let scores = load_scores_file(path)?.into_rows();
            pipeline::evaluate_slices(&manifest, &scores, threshold, z)?
        }
        (Some(path), _, LevelArg::Patient) => {
            let scores = load_scores_file(path)?.into_rows();
            let decisions = decide_all(&scores, threshold)?;
            pipeline::evaluate_patients(&manifest, &decisions, threshold, z)?
        }
        (None, Some(path), LevelArg::Patient) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            let verdicts = parse_decisions_csv(&text)?;
            evaluate(
                verdicts.iter().map(|(id, v)| (id.as_str(), *v)),
                pipeline::truth_lookup(&manifest),
                EvalLevel::Patient,
                threshold.value(),
                z,
            )?
        }
        (None, Some(_), LevelArg::Slice) => bail!("slice-level evaluation needs --scores"),
        (None, None, _) => bail!("provide --scores or --decisions"),
    };
    println!("{report}");
    if let Some(out) = args.out.or(cfg.out) {
        write_atomic(&out, report.to_json().as_bytes())?;
    }
    Ok(())
}

fn cmd_sweep(args: SweepArgs, cfg: ConfigOverrides) -> Result<()> {
    let manifest = load_manifest(&require(&args.manifest.or(cfg.manifest), "manifest")?)?;
    let scores = load_scores_file(&args.scores)?.into_rows();
    let values = parse_threshold_list(args.thresholds.as_deref())?
        .or(cfg.thresholds)
        .unwrap_or_else(|| slicevote::aggregate::DEFAULT_SWEEP.to_vec());
    let thresholds = values
        .into_iter()
        .map(Threshold::new)
        .collect::<slicevote::Result<Vec<_>>>()?;
    let z = args.z.or(cfg.z).unwrap_or(DEFAULT_Z);
    let rows = slicevote::sweep_thresholds(&scores, pipeline::truth_lookup(&manifest), &thresholds, z)
        .map_err(|e| e.at_stage(Stage::Sweep))?;
    print!("{}", sweep_table(&rows));
    if let Some(out) = args.out {
        write_atomic(&out, sweep_to_json(&rows).as_bytes())?;
    }
    Ok(())
}

fn cmd_run(args: RunArgs, cfg: ConfigOverrides) -> Result<()> {
    let flags = ConfigOverrides {
        threshold: args.threshold,
        thresholds: parse_threshold_list(args.thresholds.as_deref())?,
        z: args.z,
        out: args.out.clone(),
        ..Default::default()
    }
    .over(preprocess_overrides(&args.preprocess))
    .over(backend_overrides(&args.backend));
    let config = flags
        .over(cfg)
        .resolve()
        .map_err(|e| e.at_stage(Stage::Config))?;
    let outcome = run_pipeline(&config)?;
    let layout = OutputLayout::new(&config.out_dir);
    if let Some(report) = &outcome.patient_report {
        println!("{report}\n");
    }
    if let Some(rows) = &outcome.sweep {
        print!("{}", sweep_table(rows));
    }
    info!("outputs written to {}", layout.dir().display());
    Ok(())
}

fn cmd_synth(args: SynthArgs, cfg: ConfigOverrides) -> Result<()> {
    let params = SynthParams {
        n_patients: args.patients,
        slices_per_patient: args.slices,
        seed: cfg.seed.unwrap_or(0),
    };
    let pool = pipeline::thread_pool(cfg.jobs.unwrap_or(1))?;
    let manifest = pool
        .install(|| slicevote::generate_synthetic_dataset(&params, &args.out))
        .map_err(|e| e.at_stage(Stage::Synth))?;
    eprintln!(
        "wrote {} patients ({} covid, {} non-covid) x {} slices to {}",
        manifest.len(),
        manifest.counts().covid,
        manifest.counts().non_covid,
        params.slices_per_patient,
        args.out.display()
    );
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    let cfg = cli.file_config()?;
    match cli.command {
        Command::Preprocess(args) => {
            let flags = ConfigOverrides {
                out: args.out,
                ..preprocess_overrides(&args.flags)
            };
            cmd_preprocess(flags.over(cfg))
        }
        Command::Score(args) => {
            let flags = ConfigOverrides {
                manifest: args.manifest,
                out: args.out,
                ..backend_overrides(&args.backend)
            };
            cmd_score(flags.over(cfg))
        }
        Command::Aggregate(args) => cmd_aggregate(args, cfg),
        Command::Evaluate(args) => cmd_evaluate(args, cfg),
        Command::Sweep(args) => cmd_sweep(args, cfg),
        Command::Run(args) => cmd_run(args, cfg),
        Command::Synth(args) => cmd_synth(args, cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
