use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use segloss::data::{generate_dataset, load_dataset, write_dataset};
use segloss::eval::{evaluate_split, write_records, write_report, EvalConfig};
use segloss::experiment::{load_ensemble, load_training_set, run_sweep, select_split, train_folds, ExperimentConfig, FoldPlan};
use segloss::schedule::ScheduleKind;
use segloss::segnet::ModelConfig;
use segloss::train::TrainConfig;
use segloss::{Error, Result};

const DEFAULT_OUT: &str = "segloss_out";

/// Compare BCE / soft Dice loss schedules for binary segmentation.
#[derive(Parser)]
#[command(name = "segloss", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (PGM images, masks and manifest.csv).
    Generate(GenerateArgs),
    /// Train one schedule with k-fold cross-validation.
    Train(TrainArgs),
    /// Evaluate a k-fold ensemble on a manifest.
    Eval(EvalArgs),
    /// Run every schedule end to end from a config file.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct OutDir {
    /// Output directory [default: segloss_out]
    #[arg(long, env = "SEGLOSS_OUT")]
    out_dir: Option<PathBuf>,
}

impl OutDir {
    fn or_default(&self) -> PathBuf {
        self.out_dir.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
    }
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value_t = 200)]
    n_lesion: usize,
    #[arg(long, default_value_t = 40)]
    n_clean: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[command(flatten)]
    out: OutDir,
}

#[derive(Args)]
struct TrainArgs {
    /// Manifest of the training images.
    #[arg(long)]
    manifest: PathBuf,
    /// One of bce, dice, add, soft_ft, hard_ft.
    #[arg(long)]
    schedule: ScheduleKind,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = TrainConfig::default().total_steps)]
    steps: usize,
    #[arg(long, default_value_t = TrainConfig::default().batch_size)]
    batch_size: usize,
    #[arg(long, default_value_t = TrainConfig::default().lr_max)]
    lr: f64,
    #[arg(long, default_value_t = TrainConfig::default().steps_per_epoch)]
    steps_per_epoch: usize,
    #[arg(long, default_value_t = ModelConfig::default().base_channels)]
    base_channels: usize,
    #[arg(long, default_value_t = ModelConfig::default().depth)]
    depth: usize,
    /// Use a single encoder-decoder stage.
    #[arg(long)]
    no_cascade: bool,
    /// Permit images without foreground in the training set.
    #[arg(long)]
    allow_clean_train: bool,
    /// Worker threads (0 = all cores).
    #[arg(long, default_value_t = 0)]
    workers: usize,
    #[command(flatten)]
    out: OutDir,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory holding fold_0.ckpt, fold_1.ckpt, …
    #[arg(long)]
    checkpoints: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Average over the four flip combinations.
    #[arg(long)]
    tta: bool,
    /// Keep every lesion image and add clean images until they form this
    /// fraction of the split. Without it the manifest is used as is.
    #[arg(long)]
    ood_fraction: Option<f64>,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[arg(long, default_value_t = 0)]
    min_area: usize,
    /// Schedule column of the report [default: checkpoint directory name]
    #[arg(long)]
    label: Option<String>,
    #[arg(long, default_value_t = 0)]
    workers: usize,
    #[command(flatten)]
    out: OutDir,
}

#[derive(Args)]
struct SweepArgs {
    /// Experiment config (flat `key = value` TOML).
    config: PathBuf,
    /// Overrides the config's worker count.
    #[arg(long)]
    workers: Option<usize>,
    #[command(flatten)]
    out: OutDir,
}

fn usage(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn with_pool<T: Send>(workers: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| usage(format!("thread pool: {e}")))?
        .install(f)
}

fn cmd_generate(a: GenerateArgs) -> Result<()> {
    if a.n_lesion + a.n_clean == 0 {
        return Err(usage("--n-lesion and --n-clean are both zero; nothing to generate"));
    }
    let samples = generate_dataset(a.n_lesion, a.n_clean, (a.height, a.width), a.seed)?;
    let manifest = write_dataset(&samples, &a.out.or_default())?;
    println!(
        "wrote {} samples ({} lesion, {} clean) to {}",
        samples.len(),
        a.n_lesion,
        a.n_clean,
        manifest.display()
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let samples = load_training_set(&a.manifest, a.allow_clean_train)?;
    let plan = FoldPlan {
        model: ModelConfig {
            base_channels: a.base_channels,
            depth: a.depth,
            cascade: !a.no_cascade,
            ..ModelConfig::default()
        },
        train: TrainConfig {
            total_steps: a.steps,
            batch_size: a.batch_size,
            lr_max: a.lr,
            steps_per_epoch: a.steps_per_epoch,
            schedule: a.schedule,
            ..TrainConfig::default()
        },
        folds: a.folds,
        seed: a.seed,
        reuse: false,
    };
    plan.model.validate()?;
    plan.train.validate()?;
    let dir = a.out.or_default();
    let outcomes = with_pool(a.workers, || train_folds(&samples, &plan, &dir))?;
    for o in &outcomes {
        println!("fold {} trained in {:.1} s", o.fold, o.seconds);
    }
    println!("wrote {} checkpoints to {}", outcomes.len(), dir.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let models = load_ensemble(&a.checkpoints)?;
    let samples = select_split(&load_dataset(&a.manifest)?, a.ood_fraction)?;
    let cfg = EvalConfig {
        threshold: a.threshold,
        min_area: a.min_area,
        tta: a.tta,
    };
    let label = a.label.clone().unwrap_or_else(|| dir_name(&a.checkpoints));
    let encoder = models[0].config().tag();
    let (records, row) = with_pool(a.workers, || evaluate_split(&models, &samples, &cfg, &label, &encoder))?;
    let out = a.out.or_default();
    std::fs::create_dir_all(&out).map_err(|e| Error::Io { path: out.clone(), source: e })?;
    write_report(std::slice::from_ref(&row), &out.join("report.csv"))?;
    write_records(&records, &out.join("records.csv"))?;
    println!(
        "{}: mean dsc {:.2} ({:.1}% rejected) over {} images",
        row.schedule, row.mean_dsc, row.rejected_pct, row.n
    );
    Ok(())
}

fn dir_name(p: &Path) -> String {
    p.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "ensemble".to_owned())
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::read(&a.config)?;
    if let Some(w) = a.workers {
        cfg.workers = w;
    }
    let out = a
        .out
        .out_dir
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    let outcome = run_sweep(&cfg, &out)?;
    for (id, mixed) in outcome.id_rows.iter().zip(&outcome.mixed_rows) {
        println!(
            "{:8} id {:6.2}   mixed {:6.2} ({:.1}% rejected)",
            id.schedule, id.mean_dsc, mixed.mean_dsc, mixed.rejected_pct
        );
    }
    println!("sweep finished in {:.0} s; reports in {}", outcome.wall_seconds, out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
