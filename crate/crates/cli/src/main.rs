//! `lumen` — batch pipeline for gradient-rich image enhancement:
//! synthetic dataset generation, staged training, sequence enhancement,
//! classical baselines and evaluation reports.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lumen_core::checkpoint::{load_checkpoint, save_checkpoint, StageTag};
use lumen_core::data::{default_grid, load_grid, DatasetManifest};
use lumen_core::error::Error;
use lumen_core::eval::{evaluate, EvalConfig, EvalMethod};
use lumen_core::frame::ImageFrame;
use lumen_core::model::{enhance, RecurrentState};
use lumen_core::train::{self, TrainConfig};
use lumen_core::util::parallel_map;

#[derive(Parser)]
#[command(
    name = "lumen",
    version,
    about = "Train and run a small neural enhancer that produces gradient-rich, illumination-stable image sequences",
    after_help = "Exit codes: 0 ok, 2 config error, 3 I/O error, 4 stage-order violation, \
                  5 numeric failure, 6 architecture mismatch.\n\
                  LUMEN_THREADS caps worker parallelism."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with the 12-condition photometric grid
    GenData(GenDataArgs),
    /// Run one training stage and write a checkpoint
    Train(TrainArgs),
    /// Enhance every PNG of a directory with a trained model
    Enhance(EnhanceArgs),
    /// Apply a classical baseline to every PNG of a directory
    Baseline(BaselineArgs),
    /// Evaluate a method over a dataset and write a metrics report
    Eval(EvalArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output dataset directory
    #[arg(long)]
    out: PathBuf,
    /// Number of scenes
    #[arg(long, default_value_t = 6)]
    scenes: usize,
    /// Frames per scene
    #[arg(long, default_value_t = 4)]
    frames: usize,
    /// Frame size as WxH; both divisible by 8
    #[arg(long, default_value = "64x48")]
    size: String,
    /// Condition grid JSON (array of {condition_id, gamma, contrast});
    /// defaults to the built-in 12-condition gamma/contrast grid
    #[arg(long)]
    grid: Option<PathBuf>,
    /// Fraction of scenes assigned to the train split
    #[arg(long, default_value_t = 0.9)]
    split_ratio: f64,
    /// Generation seed
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Training stage
    #[arg(long, value_enum)]
    stage: StageArg,
    /// Dataset manifest (directory or manifest.jsonl path)
    #[arg(long)]
    data: PathBuf,
    /// Output checkpoint path
    #[arg(long)]
    out: PathBuf,
    /// JSON config mirroring the training configuration fields
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint to resume from (required for siamese and temporal)
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Epochs (stage default: pretrain 20, siamese 10, temporal 10)
    #[arg(long)]
    epochs: Option<usize>,
    /// Learning rate
    #[arg(long, default_value_t = 0.0001)]
    lr: f64,
    /// Batch size
    #[arg(long, default_value_t = 8)]
    batch: usize,
    /// Training log path (JSON-lines, one record per epoch)
    #[arg(long)]
    log: Option<PathBuf>,
    /// Run seed
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Pretrain,
    Siamese,
    Temporal,
}

impl From<StageArg> for StageTag {
    fn from(s: StageArg) -> StageTag {
        match s {
            StageArg::Pretrain => StageTag::Pretrain,
            StageArg::Siamese => StageTag::Siamese,
            StageArg::Temporal => StageTag::Temporal,
        }
    }
}

#[derive(Args)]
struct EnhanceArgs {
    /// Model checkpoint
    #[arg(long)]
    model: PathBuf,
    /// Input directory of PNG frames
    #[arg(long = "in")]
    input: PathBuf,
    /// Output directory (same filenames)
    #[arg(long)]
    out: PathBuf,
    /// Run the recurrent model; must match the checkpoint architecture
    #[arg(long)]
    recurrent: bool,
    /// Seed (recorded for provenance; enhancement is deterministic)
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineMethod {
    Norm,
    Ghe,
    Ahe,
}

#[derive(Args)]
struct BaselineArgs {
    /// Baseline method
    #[arg(long, value_enum)]
    method: BaselineMethod,
    /// Input directory of PNG frames
    #[arg(long = "in")]
    input: PathBuf,
    /// Output directory (same filenames)
    #[arg(long)]
    out: PathBuf,
    /// Seed (recorded for provenance; baselines are deterministic)
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalMethodArg {
    Identity,
    Norm,
    Ghe,
    Ahe,
    Model,
}

#[derive(Args)]
struct EvalArgs {
    /// Method to evaluate
    #[arg(long, value_enum)]
    method: EvalMethodArg,
    /// Dataset manifest (directory or manifest.jsonl path)
    #[arg(long)]
    data: PathBuf,
    /// Output report path (JSON)
    #[arg(long)]
    report: PathBuf,
    /// Checkpoint path (required when --method model)
    #[arg(long)]
    model: Option<PathBuf>,
    /// Directory for jet gradient-difference maps (clamped to +-30 units)
    #[arg(long)]
    maps: Option<PathBuf>,
    /// Seed recorded in the report
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(args) => gen_data(args),
        Command::Train(args) => run_train(args),
        Command::Enhance(args) => run_enhance(args),
        Command::Baseline(args) => run_baseline(args),
        Command::Eval(args) => run_eval(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } => 3,
        Error::StageOrder(_) => 4,
        Error::Numeric(_) => 5,
        Error::Architecture(_) => 6,
        _ => 2,
    }
}

fn parse_size(size: &str) -> Result<(usize, usize), Error> {
    let parts: Vec<&str> = size.split(['x', 'X']).collect();
    let err = || Error::InvalidArgument(format!("size must look like 64x48, got \"{size}\""));
    if parts.len() != 2 {
        return Err(err());
    }
    let w: usize = parts[0].parse().map_err(|_| err())?;
    let h: usize = parts[1].parse().map_err(|_| err())?;
    if w == 0 || h == 0 || !w.is_multiple_of(8) || !h.is_multiple_of(8) {
        return Err(Error::InvalidArgument(format!(
            "dimensions must be divisible by 8, got {w}x{h}"
        )));
    }
    Ok((w, h))
}

fn gen_data(args: GenDataArgs) -> Result<(), Error> {
    let (width, height) = parse_size(&args.size)?;
    if args.scenes == 0 || args.frames == 0 {
        return Err(Error::InvalidArgument(
            "scenes and frames must be positive".into(),
        ));
    }
    let grid = match &args.grid {
        Some(path) => load_grid(path)?,
        None => default_grid(),
    };
    let manifest = lumen_core::data::generate_dataset(
        args.seed,
        args.scenes,
        args.frames,
        width,
        height,
        &grid,
        args.split_ratio,
        &args.out,
    )?;
    println!(
        "manifest: {}",
        DatasetManifest::records_path(&args.out).display()
    );
    println!("images: {}", manifest.records.len());
    println!("condition histogram:");
    for (cond, count) in manifest.condition_histogram() {
        println!("  condition {cond:2}: {count}");
    }
    Ok(())
}

fn run_train(args: TrainArgs) -> Result<(), Error> {
    let stage: StageTag = args.stage.into();
    let mut config = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let cfg: TrainConfig = serde_json::from_str(&text)
                .map_err(|e| Error::Format(format!("train config: {e}")))?;
            cfg
        }
        None => TrainConfig::default_for(stage),
    };
    config.stage = stage;
    if let Some(epochs) = args.epochs {
        config.epochs = epochs;
    }
    config.learning_rate = args.lr;
    config.batch_size = args.batch;
    config.seed = args.seed;

    let manifest = DatasetManifest::load(&args.data)?;
    let resume = match &args.resume {
        Some(path) => Some(load_checkpoint::<f32>(path)?),
        None => None,
    };
    let outcome = train::train(&config, &manifest, resume)?;
    for log in &outcome.logs {
        println!(
            "stage {} epoch {:3}: mean_loss {:.6}{}",
            log.stage,
            log.epoch,
            log.mean_loss,
            match log.holdout_loss {
                Some(h) => format!("  holdout {h:.6}"),
                None => String::new(),
            }
        );
    }
    save_checkpoint(&outcome.params, outcome.stage, outcome.seed, &args.out)?;
    let log_path = args
        .log
        .unwrap_or_else(|| args.out.with_extension("log.jsonl"));
    train::write_logs(&log_path, &outcome.logs)?;
    println!("checkpoint: {}", args.out.display());
    println!("log: {}", log_path.display());
    Ok(())
}

/// PNG files of a directory sorted by name and grouped by scene prefix
/// (the stem up to the last underscore).
fn png_groups(dir: &Path) -> Result<Vec<Vec<PathBuf>>, Error> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no PNG files found in {}",
            dir.display()
        )));
    }
    let prefix_of = |p: &Path| -> String {
        let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("");
        match stem.rfind('_') {
            Some(i) => stem[..i].to_string(),
            None => stem.to_string(),
        }
    };
    let mut groups: Vec<Vec<PathBuf>> = Vec::new();
    let mut current_prefix: Option<String> = None;
    for file in files {
        let prefix = prefix_of(&file);
        if current_prefix.as_deref() != Some(prefix.as_str()) {
            groups.push(Vec::new());
            current_prefix = Some(prefix);
        }
        groups.last_mut().expect("group exists").push(file);
    }
    Ok(groups)
}

fn run_enhance(args: EnhanceArgs) -> Result<(), Error> {
    let checkpoint = load_checkpoint::<f32>(&args.model)?;
    if checkpoint.params.is_recurrent() != args.recurrent {
        return Err(Error::Architecture(format!(
            "checkpoint is {} but --recurrent is {}",
            if checkpoint.params.is_recurrent() {
                "recurrent"
            } else {
                "non-recurrent"
            },
            if args.recurrent { "set" } else { "not set" },
        )));
    }
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let groups = png_groups(&args.input)?;
    let params = &checkpoint.params;
    let out_dir = args.out.clone();
    // Groups are independent; a recurrent state lives within one group.
    let results: Vec<Result<usize, Error>> = parallel_map(&groups, |group| {
        let mut state: Option<RecurrentState<f32>> = None;
        for file in group {
            let frame = ImageFrame::load_png(file)?;
            let (out, next) = enhance(params, &frame, state.take().as_ref())?;
            state = next;
            let name = file.file_name().expect("png file has a name");
            out.save_png(&out_dir.join(name))?;
        }
        Ok(group.len())
    });
    let mut total = 0;
    for r in results {
        total += r?;
    }
    println!("enhanced {total} frames into {}", args.out.display());
    Ok(())
}

fn run_baseline(args: BaselineArgs) -> Result<(), Error> {
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let files: Vec<PathBuf> = png_groups(&args.input)?.into_iter().flatten().collect();
    let out_dir = args.out.clone();
    let method = args.method;
    let results: Vec<Result<(), Error>> = parallel_map(&files, |file| {
        let frame = ImageFrame::load_png(file)?;
        let out = match method {
            BaselineMethod::Norm => lumen_core::baselines::normalize(&frame),
            BaselineMethod::Ghe => lumen_core::baselines::global_he(&frame),
            BaselineMethod::Ahe => lumen_core::baselines::adaptive_he(&frame, (8, 8), 2.0)?,
        };
        let name = file.file_name().expect("png file has a name");
        out.save_png(&out_dir.join(name))
    });
    for r in results {
        r?;
    }
    println!("processed {} frames into {}", files.len(), args.out.display());
    Ok(())
}

fn run_eval(args: EvalArgs) -> Result<(), Error> {
    let method = match args.method {
        EvalMethodArg::Identity => EvalMethod::Identity,
        EvalMethodArg::Norm => EvalMethod::Normalize,
        EvalMethodArg::Ghe => EvalMethod::GlobalHe,
        EvalMethodArg::Ahe => EvalMethod::AdaptiveHe,
        EvalMethodArg::Model => {
            let path = args.model.clone().ok_or_else(|| {
                Error::InvalidArgument("--method model requires --model CKPT".into())
            })?;
            EvalMethod::Model(path)
        }
    };
    let manifest = DatasetManifest::load(&args.data)?;
    let mut config = EvalConfig::new(method);
    config.seed = args.seed;
    config.maps_dir = args.maps.clone();
    let report = evaluate(&manifest, &config)?;
    report.save(&args.report)?;
    println!(
        "report: {} ({} records, mean gain {:.4})",
        args.report.display(),
        report.records.len(),
        report.aggregates.gain_mean
    );
    Ok(())
}
