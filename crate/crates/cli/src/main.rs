use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use kdseg::blackbox::{
    precompute_pseudo_labels, remote_predictor, serve_predictor, wrap_as_blackbox, BlackBoxPredictor,
    PseudoLabelCache,
};
use kdseg::data::{load_dataset, save_dataset, Domain, Split};
use kdseg::eval::evaluate;
use kdseg::model::load_checkpoint;
use kdseg::pipeline::{
    run_experiment, train_stage1, train_stage2, write_manifest, write_stage_report, CheckpointPlan,
    DataConfig, ExperimentConfig, Stage2Options, StageId, PSEUDO_LABEL_FILE,
};
use kdseg::augment::AugmentationPolicy;
use kdseg::report::generate_report;
use kdseg::{Error, ErrorCategory, Result};

/// Relative `output_dir` values are resolved against this directory when set.
const OUTPUT_ROOT_ENV: &str = "KDSEG_OUTPUT_ROOT";

#[derive(Parser)]
#[command(name = "kdseg", version, about = "Black-box source-free domain adaptation for segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Experiment config (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dotted-key override, e.g. `optimizer.stage1.epochs=5`. Repeatable, last wins.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Materialize the configured synthetic benchmark as PNG folders under `<out>/data`.
    GenData(ConfigArgs),
    /// Stage 0 only.
    TrainSource(ConfigArgs),
    /// Query the source predictor once per target-train image and store the soft labels.
    PrecomputeLabels {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Source checkpoint; defaults to `<out>/checkpoints/source.ckpt`.
        #[arg(long, conflicts_with = "remote")]
        checkpoint: Option<PathBuf>,
        /// Address of a running `kdseg serve`.
        #[arg(long)]
        remote: Option<String>,
    },
    /// Stage I from a pseudo-label cache.
    TrainStage1 {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Defaults to `<out>/pseudo_labels.bin`.
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Stage II from a Stage-I checkpoint.
    TrainStage2 {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Defaults to `<out>/checkpoints/stage1.ckpt`.
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Feed the student raw images instead of strong views.
        #[arg(long)]
        no_aug: bool,
    },
    /// Every enabled stage, end to end.
    RunAll(ConfigArgs),
    /// Expose a checkpoint as a probability-map predictor over TCP until interrupted.
    Serve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "127.0.0.1:7878")]
        addr: String,
    },
    /// Evaluate a checkpoint on a labeled `images/` + `masks/` directory.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Where to write the metric report (JSON).
        #[arg(long, default_value = "evaluation.json")]
        out: PathBuf,
    },
    /// Plots for a finished run directory.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
}

fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig> {
    let mut config = ExperimentConfig::load(&args.config, &args.overrides)?;
    if let Some(out) = &args.out {
        config.output_dir = out.clone();
    } else if config.output_dir.is_relative() {
        if let Some(root) = std::env::var_os(OUTPUT_ROOT_ENV) {
            config.output_dir = Path::new(&root).join(&config.output_dir);
        }
    }
    Ok(config)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn gen_data(args: &ConfigArgs) -> Result<()> {
    let config = load_config(args)?;
    if !matches!(config.data, DataConfig::Synthetic { .. }) {
        return Err(Error::Config("gen-data needs data.kind = \"synthetic\"".into()));
    }
    config.validate()?;
    let (source, target) = config.load_data()?;
    let root = config.output_dir.join("data");
    for (domain, split) in [("source", &source), ("target", &target)] {
        save_dataset(&split.train, &root.join(domain).join("train"))?;
        save_dataset(&split.test, &root.join(domain).join("test"))?;
    }
    write_manifest(&config, Vec::new())?;
    println!("wrote {}", root.display());
    Ok(())
}

fn train_source_cmd(args: &ConfigArgs) -> Result<()> {
    let mut config = load_config(args)?;
    config.stages.stage1 = false;
    config.stages.stage2 = false;
    config.stages.stage2_no_aug = false;
    config.stages.source = true;
    let outcome = run_experiment(&config)?;
    print!("{}", outcome.table);
    Ok(())
}

fn precompute_cmd(args: &ConfigArgs, checkpoint: Option<&Path>, remote: Option<&str>) -> Result<()> {
    let config = load_config(args)?;
    config.validate()?;
    let predictor: BlackBoxPredictor = match remote {
        Some(addr) => remote_predictor(addr)?,
        None => {
            let default = config.output_dir.join("checkpoints").join("source.ckpt");
            let path = checkpoint
                .map(Path::to_path_buf)
                .or_else(|| config.resume.source_checkpoint.clone())
                .unwrap_or(default);
            wrap_as_blackbox(load_checkpoint(&path)?)
        }
    };
    let (_, target) = config.load_data()?;
    let cache = precompute_pseudo_labels(&predictor, &target.train.without_labels())?;
    let path = config.output_dir.join(PSEUDO_LABEL_FILE);
    std::fs::create_dir_all(&config.output_dir).map_err(|e| Error::Io {
        path: config.output_dir.clone(),
        source: e,
    })?;
    cache.save(&path)?;
    write_manifest(&config, Vec::new())?;
    println!("{} soft labels, {} queries -> {}", cache.len(), predictor.query_count(), path.display());
    Ok(())
}

fn stage1_cmd(args: &ConfigArgs, cache: Option<&Path>) -> Result<()> {
    let config = load_config(args)?;
    config.validate()?;
    let cache_path = cache.map(Path::to_path_buf).unwrap_or_else(|| config.output_dir.join(PSEUDO_LABEL_FILE));
    let cache = PseudoLabelCache::load(&cache_path)?;
    let (_, target) = config.load_data()?;
    let plan = CheckpointPlan::in_dir(config.output_dir.join("checkpoints"));
    let (model, mut report) = train_stage1(
        &cache,
        &target.train.without_labels(),
        &config.effective_model(&config.target_model),
        &config.effective_optimizer(&config.optimizer.stage1),
        &plan,
    )?;
    let metrics = write_stage_report(&config.output_dir, &mut report, &model, &target.test)?;
    write_manifest(&config, vec![StageId::Stage1])?;
    println!("{}: DSC {:.2}", StageId::Stage1.label(), metrics.mean_dsc());
    Ok(())
}

fn stage2_cmd(args: &ConfigArgs, teacher: Option<&Path>, no_aug: bool) -> Result<()> {
    let config = load_config(args)?;
    config.validate()?;
    let teacher_path = teacher
        .map(Path::to_path_buf)
        .or_else(|| config.resume.stage1_checkpoint.clone())
        .unwrap_or_else(|| config.output_dir.join("checkpoints").join("stage1.ckpt"));
    let teacher = load_checkpoint(&teacher_path)?;
    let (_, target) = config.load_data()?;
    let options = Stage2Options {
        weak: AugmentationPolicy::Weak(config.augmentation.weak.clone()),
        strong: AugmentationPolicy::Strong(config.augmentation.strong.clone()),
        use_strong_aug: !no_aug,
    };
    let plan = CheckpointPlan::in_dir(config.output_dir.join("checkpoints"));
    let (model, mut report) = train_stage2(
        &teacher,
        &target.train.without_labels(),
        &config.effective_model(&config.student_model),
        &options,
        &config.effective_optimizer(&config.optimizer.stage2),
        &plan,
    )?;
    let metrics = write_stage_report(&config.output_dir, &mut report, &model, &target.test)?;
    write_manifest(&config, vec![report.stage])?;
    println!("{}: DSC {:.2}", report.stage.label(), metrics.mean_dsc());
    Ok(())
}

fn serve_cmd(checkpoint: &Path, addr: &str) -> Result<()> {
    let predictor = wrap_as_blackbox(load_checkpoint(checkpoint)?);
    let server = serve_predictor(predictor, addr)?;
    println!("serving {} on {}", checkpoint.display(), server.local_addr());
    server.wait();
    Ok(())
}

fn evaluate_cmd(checkpoint: &Path, data: &Path, out: &Path) -> Result<()> {
    let model = load_checkpoint(checkpoint)?;
    let dataset = load_dataset(data, model.spec().out_classes, Domain::Target, Split::Test)?;
    if !dataset.is_labeled() {
        return Err(Error::Data(format!("{}: every image needs a mask for evaluation", data.display())));
    }
    let report = evaluate(&model, &dataset)?;
    write_json(out, &report)?;
    println!("DSC {:.2} over {} cases -> {}", report.mean_dsc(), report.case_count(), out.display());
    Ok(())
}

fn report_cmd(dir: &Path) -> Result<()> {
    let summary = generate_report(dir)?;
    for file in &summary.files {
        println!("{}", file.display());
    }
    if summary.files.is_empty() {
        warn!("empty report for {}", dir.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(args) => gen_data(&args),
        Command::TrainSource(args) => train_source_cmd(&args),
        Command::PrecomputeLabels { cfg, checkpoint, remote } => {
            precompute_cmd(&cfg, checkpoint.as_deref(), remote.as_deref())
        }
        Command::TrainStage1 { cfg, cache } => stage1_cmd(&cfg, cache.as_deref()),
        Command::TrainStage2 { cfg, teacher, no_aug } => stage2_cmd(&cfg, teacher.as_deref(), no_aug),
        Command::RunAll(args) => {
            let config = load_config(&args)?;
            let outcome = run_experiment(&config)?;
            info!("outputs in {}", outcome.output_dir.display());
            print!("{}", outcome.table);
            Ok(())
        }
        Command::Serve { checkpoint, addr } => serve_cmd(&checkpoint, &addr),
        Command::Evaluate { checkpoint, data, out } => evaluate_cmd(&checkpoint, &data, &out),
        Command::Report { dir } => report_cmd(&dir),
    }
}

fn exit_code(err: &Error) -> u8 {
    match err.category() {
        ErrorCategory::Config => 2,
        ErrorCategory::Data => 3,
        ErrorCategory::Runtime => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    // clap exits with status 2 on usage errors.
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
