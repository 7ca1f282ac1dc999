mod config;

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Mutex;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use brainnet_moe::data_synth::generate_split;
use brainnet_moe::model::{relevance_scores, RelevanceAveraging};
use brainnet_moe::train_eval::{ablation_table, infer, run_ablation, Prepared};
use brainnet_moe::{
    evaluate, train, AblationPlan, BrainNetMoE, Cohort, Error, ModelConfig, Split, SynthSpec, TrainConfig,
};

use config::FileConfig;

const EXIT_USAGE: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_NUMERICAL: u8 = 4;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_IO,
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Io { .. } | Error::CorruptCheckpoint(_) => EXIT_IO,
            Error::Numerical(_) => EXIT_NUMERICAL,
            _ => EXIT_USAGE,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Parser)]
#[command(name = "brainnet", version, about = "Train, evaluate and inspect BrainNet-MoE connectome classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort with planted class signatures
    Synth(SynthArgs),
    /// Train a model on a cohort directory
    Train(TrainArgs),
    /// Print classification metrics of a checkpoint on one split
    Eval(EvalArgs),
    /// Write per-class and per-contrast region relevance tables
    Explain(ExplainArgs),
    /// Run the expert-count and loss-toggle ablation table
    Ablate(AblateArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    regions: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    effect_size: Option<f64>,
    #[arg(long)]
    dispersion: Option<f64>,
    #[arg(long)]
    test_fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Cohort directory to create
    #[arg(long)]
    out: PathBuf,
}

/// Overrides shared by the training commands.
#[derive(Args)]
struct TrainingFlags {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    cohort: PathBuf,
    /// Run directory (checkpoint/, metrics.jsonl, run_manifest.json)
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    experts: Option<usize>,
    #[command(flatten)]
    training: TrainingFlags,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    cohort: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Also write the metrics as JSON here
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum AveragingArg {
    AllSubjects,
    OwnClass,
}

#[derive(Args)]
struct ExplainArgs {
    #[arg(long)]
    cohort: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Regions listed per class and per contrast
    #[arg(long, default_value_t = 3)]
    top: usize,
    /// Subjects averaged for each class's relevance
    #[arg(long, value_enum, default_value = "all-subjects")]
    averaging: AveragingArg,
    /// Report file (stdout when omitted)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    cohort: PathBuf,
    /// Output directory for the table and per-row results
    #[arg(long)]
    out: PathBuf,
    /// Expert counts to compare
    #[arg(long, value_delimiter = ',', default_value = "2,4")]
    experts: Vec<usize>,
    /// Skip the loss-toggle rows
    #[arg(long)]
    no_loss_toggles: bool,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[command(flatten)]
    training: TrainingFlags,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    seed: u64,
    cohort: String,
    model: &'a ModelConfig,
    train: &'a TrainConfig,
    artifacts: BTreeMap<&'static str, String>,
    wall_clock_seconds: f64,
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult {
    fs::write(path, contents).map_err(|e| CliError::io(format!("{}: {e}", path.display())))
}

fn create_dir(path: &Path) -> CliResult {
    fs::create_dir_all(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))
}

fn cmd_synth(args: SynthArgs) -> CliResult {
    let file = FileConfig::load(args.config.as_deref())?;
    let mut spec = file.synth(SynthSpec::default());
    if let Some(v) = args.regions {
        spec.n_regions = v;
    }
    if let Some(v) = args.classes {
        spec.n_classes = v;
    }
    if let Some(v) = args.per_class {
        spec.subjects_per_class = v;
    }
    if let Some(v) = args.effect_size {
        spec.effect_size = v;
    }
    if let Some(v) = args.dispersion {
        spec.dispersion = v;
    }
    if let Some(v) = args.test_fraction {
        spec.test_fraction = v;
    }
    if let Some(v) = args.seed {
        spec.seed = v;
    }
    let cohort = generate_split(&spec)?;
    cohort.write_dir(&args.out, Some(&spec))?;
    println!(
        "wrote {} subjects ({} train, {} test, {} regions, {} classes) to {}",
        cohort.subjects.len(),
        cohort.train.len(),
        cohort.test.len(),
        spec.n_regions,
        spec.n_classes,
        args.out.display()
    );
    Ok(())
}

/// Model and training configs for a cohort: defaults, then file, then flags.
fn resolve_configs(cohort: &Cohort, flags: &TrainingFlags, experts: Option<usize>) -> CliResult<(ModelConfig, TrainConfig)> {
    let file = FileConfig::load(flags.config.as_deref())?;
    let base = ModelConfig {
        n_regions: cohort.n_regions(),
        n_classes: cohort.n_classes,
        ..ModelConfig::default()
    };
    let mut model = file.model(base);
    let mut train = file.train(TrainConfig::default());
    if model.n_regions != cohort.n_regions() || model.n_classes != cohort.n_classes {
        return Err(CliError::usage(format!(
            "config asks for {} regions and {} classes, cohort has {} and {}",
            model.n_regions,
            model.n_classes,
            cohort.n_regions(),
            cohort.n_classes
        )));
    }
    if let Some(v) = flags.seed {
        model.seed = v;
        train.seed = v;
    }
    if let Some(v) = flags.epochs {
        train.epochs = v;
    }
    if let Some(v) = flags.batch_size {
        train.batch_size = v;
    }
    if let Some(v) = flags.lr {
        train.optimizer.lr = v;
    }
    if let Some(v) = experts {
        model.experts_per_group = v;
    }
    model.validate()?;
    train.validate()?;
    Ok((model, train))
}

fn cmd_train(args: TrainArgs) -> CliResult {
    let start = Instant::now();
    let cohort = Cohort::read_dir(&args.cohort)?;
    let (model_cfg, train_cfg) = resolve_configs(&cohort, &args.training, args.experts)?;
    create_dir(&args.out)?;
    let log_path = args.out.join("metrics.jsonl");
    let file = File::create(&log_path).map_err(|e| CliError::io(format!("{}: {e}", log_path.display())))?;
    let mut log = BufWriter::new(file);
    let mut model = BrainNetMoE::new(model_cfg.clone())?;
    let history = train(&mut model, &cohort, &train_cfg, &mut |record| {
        log.write_all(record.to_json_line().as_bytes())
            .and_then(|()| log.flush())
            .map_err(|e| Error::Io {
                path: log_path.clone(),
                source: e,
            })
    })?;
    drop(log);
    let checkpoint = args.out.join("checkpoint");
    model.save_checkpoint(&checkpoint)?;

    let mut artifacts = BTreeMap::new();
    artifacts.insert("checkpoint", checkpoint.display().to_string());
    artifacts.insert("metrics_log", log_path.display().to_string());
    let manifest = RunManifest {
        tool: "brainnet",
        version: env!("CARGO_PKG_VERSION"),
        command: "train",
        seed: model_cfg.seed,
        cohort: args.cohort.display().to_string(),
        model: &model_cfg,
        train: &train_cfg,
        artifacts,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    };
    let manifest_path = args.out.join("run_manifest.json");
    write_file(&manifest_path, serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n")?;

    match (history.steps.last(), history.evals.last()) {
        (Some(step), Some(eval)) => println!(
            "trained {} steps; final total loss {:.6}; test ACC {:.2}",
            history.steps.len(),
            step.total,
            eval.accuracy
        ),
        (Some(step), None) => println!("trained {} steps; final total loss {:.6}", history.steps.len(), step.total),
        _ => println!("no training steps run; checkpoint holds the initialization"),
    }
    println!("wrote {}", args.out.display());
    Ok(())
}

fn load_for_inference(cohort_dir: &Path, checkpoint: &Path) -> CliResult<(Cohort, BrainNetMoE)> {
    let cohort = Cohort::read_dir(cohort_dir)?;
    let model = BrainNetMoE::load_checkpoint(checkpoint)?;
    let cfg = model.config();
    if cfg.n_regions != cohort.n_regions() || cfg.n_classes != cohort.n_classes {
        return Err(CliError::usage(format!(
            "checkpoint expects {} regions and {} classes, cohort has {} and {}",
            cfg.n_regions,
            cfg.n_classes,
            cohort.n_regions(),
            cohort.n_classes
        )));
    }
    Ok((cohort, model))
}

fn cmd_eval(args: EvalArgs) -> CliResult {
    let (cohort, model) = load_for_inference(&args.cohort, &args.checkpoint)?;
    let split: Split = args.split.into();
    let metrics = evaluate(&model, &cohort, split)?;
    println!("split: {} ({} subjects)", split.as_str(), metrics.total());
    print!("{}", metrics.to_text());
    if let Some(out) = args.out {
        write_file(&out, serde_json::to_string_pretty(&metrics).expect("metrics serialize") + "\n")?;
    }
    Ok(())
}

fn cmd_explain(args: ExplainArgs) -> CliResult {
    let (cohort, model) = load_for_inference(&args.cohort, &args.checkpoint)?;
    let data = Prepared::new(&cohort, cohort.split_indices(args.split.into()))?;
    let (_, trace) = infer(&model, &data, 64)?;
    let averaging = match args.averaging {
        AveragingArg::AllSubjects => RelevanceAveraging::AllSubjects,
        AveragingArg::OwnClass => RelevanceAveraging::OwnClass,
    };
    let report = relevance_scores(&trace, &data.labels, cohort.region_labels(), averaging)?;
    let text = report.to_text(args.top.min(cohort.n_regions()));
    match args.out {
        Some(out) => {
            write_file(&out, &text)?;
            println!("wrote {}", out.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> CliResult {
    let start = Instant::now();
    let cohort = Cohort::read_dir(&args.cohort)?;
    let (model_cfg, mut train_cfg) = resolve_configs(&cohort, &args.training, None)?;
    train_cfg.eval_every = 0;
    let plan = AblationPlan::build(&model_cfg, &args.experts, !args.no_loss_toggles);
    if plan.variants.is_empty() {
        return Err(CliError::usage("the ablation plan is empty"));
    }
    create_dir(&args.out)?;
    let rows_path = args.out.join("ablation.jsonl");
    let rows_file = File::create(&rows_path).map_err(|e| CliError::io(format!("{}: {e}", rows_path.display())))?;
    let rows_file = Mutex::new(rows_file);
    let rows = run_ablation(&plan, &model_cfg, &train_cfg, &cohort, args.jobs, &|_, row| {
        let line = serde_json::to_string(row).expect("row serializes") + "\n";
        let mut f = rows_file.lock().expect("rows file lock");
        f.write_all(line.as_bytes())
            .and_then(|()| f.sync_data())
            .map_err(|e| Error::Io {
                path: rows_path.clone(),
                source: e,
            })
    })?;
    let table = ablation_table(&rows);
    let table_path = args.out.join("ablation.txt");
    write_file(&table_path, &table)?;
    let json_path = args.out.join("ablation.json");
    write_file(&json_path, serde_json::to_string_pretty(&rows).expect("rows serialize") + "\n")?;

    let mut artifacts = BTreeMap::new();
    artifacts.insert("table", table_path.display().to_string());
    artifacts.insert("rows", json_path.display().to_string());
    artifacts.insert("rows_log", rows_path.display().to_string());
    let manifest = RunManifest {
        tool: "brainnet",
        version: env!("CARGO_PKG_VERSION"),
        command: "ablate",
        seed: model_cfg.seed,
        cohort: args.cohort.display().to_string(),
        model: &model_cfg,
        train: &train_cfg,
        artifacts,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    };
    write_file(
        &args.out.join("run_manifest.json"),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n",
    )?;
    print!("{table}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Explain(a) => cmd_explain(a),
        Command::Ablate(a) => cmd_ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
