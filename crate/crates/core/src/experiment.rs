//! Experiment plumbing shared by the command-line tool: the flat experiment
//! config, k-fold training of one schedule, split selection, and the
//! all-schedules sweep.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ensure_lesion_only, generate_dataset, load_dataset, make_folds, write_dataset, Sample};
use crate::error::{Error, Result};
use crate::eval::{append_report_row, evaluate_split, write_records, EvalConfig, ReportRow};
use crate::losses::{DiceGranularity, LossConfig};
use crate::schedule::ScheduleKind;
use crate::segnet::{ModelConfig, SegNet};
use crate::train::{train, TrainConfig};

pub const CONFIG_FILE: &str = "experiment.toml";
pub const REPORT_ID: &str = "report_id.csv";
pub const REPORT_MIXED: &str = "report_mixed.csv";

/// Everything that determines a sweep, stored as a flat `key = value` file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed for data, folds, initialization and batch sampling.
    pub seed: u64,
    pub n_train: usize,
    pub n_test_lesion: usize,
    pub n_test_clean: usize,
    pub height: usize,
    pub width: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub cascade: bool,
    pub folds: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub steps_per_epoch: usize,
    pub switch_fraction: f64,
    pub log_every: usize,
    pub augment: bool,
    pub clamp_eps: f64,
    pub dice_smooth: f64,
    pub dice_granularity: DiceGranularity,
    pub schedules: Vec<String>,
    pub threshold: f64,
    pub min_area: usize,
    pub tta: bool,
    /// Worker threads; 0 uses every available core. Does not affect results.
    pub workers: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        let train = TrainConfig::default();
        let eval = EvalConfig::default();
        ExperimentConfig {
            seed: 0,
            n_train: 200,
            n_test_lesion: 80,
            n_test_clean: 20,
            height: 64,
            width: 64,
            base_channels: model.base_channels,
            depth: model.depth,
            cascade: model.cascade,
            folds: 5,
            total_steps: train.total_steps,
            batch_size: train.batch_size,
            lr_max: train.lr_max,
            adam_beta1: train.adam_beta1,
            adam_beta2: train.adam_beta2,
            adam_eps: train.adam_eps,
            steps_per_epoch: train.steps_per_epoch,
            switch_fraction: train.switch_fraction,
            log_every: train.log_every,
            augment: train.augment,
            clamp_eps: train.loss.clamp_eps,
            dice_smooth: train.loss.dice_smooth,
            dice_granularity: train.loss.dice_granularity,
            schedules: ScheduleKind::ALL.iter().map(|k| k.name().to_owned()).collect(),
            threshold: eval.threshold,
            min_area: eval.min_area,
            tta: eval.tta,
            workers: 0,
            out_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    pub fn schedule_kinds(&self) -> Result<Vec<ScheduleKind>> {
        let kinds = self.schedules.iter().map(|s| s.parse()).collect::<Result<Vec<ScheduleKind>>>()?;
        if kinds.is_empty() {
            return Err(Error::Config("schedule list is empty".into()));
        }
        Ok(kinds)
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule_kinds()?;
        if self.n_train < self.folds || self.folds == 0 {
            return Err(Error::Config(format!(
                "{} training images cannot fill {} folds",
                self.n_train, self.folds
            )));
        }
        if self.n_test_lesion + self.n_test_clean == 0 {
            return Err(Error::Config("test split is empty".into()));
        }
        let model = self.model_config(0);
        model.validate()?;
        let m = model.size_multiple();
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(m) || !self.width.is_multiple_of(m) {
            return Err(Error::Config(format!(
                "image size {}×{} must be a positive multiple of {m}",
                self.height, self.width
            )));
        }
        self.train_config(ScheduleKind::BceOnly, 0).validate()?;
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("threshold must lie in (0, 1), got {}", self.threshold)));
        }
        Ok(())
    }

    pub fn model_config(&self, seed: u64) -> ModelConfig {
        ModelConfig {
            base_channels: self.base_channels,
            depth: self.depth,
            cascade: self.cascade,
            in_channels: 1,
            seed,
        }
    }

    pub fn train_config(&self, schedule: ScheduleKind, seed: u64) -> TrainConfig {
        TrainConfig {
            total_steps: self.total_steps,
            batch_size: self.batch_size,
            lr_max: self.lr_max,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            adam_eps: self.adam_eps,
            schedule,
            switch_fraction: self.switch_fraction,
            steps_per_epoch: self.steps_per_epoch,
            seed,
            log_every: self.log_every,
            augment: self.augment,
            loss: LossConfig {
                clamp_eps: self.clamp_eps,
                dice_smooth: self.dice_smooth,
                dice_granularity: self.dice_granularity,
            },
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            threshold: self.threshold,
            min_area: self.min_area,
            tta: self.tta,
        }
    }

    /// The same experiment with the knobs that do not affect results reset.
    fn essence(&self) -> Self {
        ExperimentConfig {
            workers: 0,
            out_dir: None,
            ..self.clone()
        }
    }
}

/// Deterministic sub-seed of `master` for a numbered purpose.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(stream);
    rng.next_u64()
}

fn init_seed(master: u64, fold: usize) -> u64 {
    derive_seed(master, 1000 + fold as u64)
}

fn batch_seed(master: u64, fold: usize) -> u64 {
    derive_seed(master, 2000 + fold as u64)
}

pub fn checkpoint_path(dir: &Path, fold: usize) -> PathBuf {
    dir.join(format!("fold_{fold}.ckpt"))
}

pub fn log_path(dir: &Path, fold: usize) -> PathBuf {
    dir.join(format!("fold_{fold}_log.csv"))
}

/// What happened to one fold of a k-fold run.
#[derive(Clone, Debug)]
pub struct FoldOutcome {
    pub fold: usize,
    pub model: SegNet,
    pub seconds: f64,
    pub reused: bool,
}

/// Settings of one k-fold training run.
#[derive(Clone, Debug)]
pub struct FoldPlan {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub folds: usize,
    pub seed: u64,
    /// Load existing checkpoints instead of retraining.
    pub reuse: bool,
}

/// Trains one model per fold (run `i` holds out fold `i`), writing
/// `fold_{i}.ckpt` and `fold_{i}_log.csv` into `dir`. Folds run in parallel
/// on the current thread pool.
pub fn train_folds(samples: &[Sample], plan: &FoldPlan, dir: &Path) -> Result<Vec<FoldOutcome>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let split = make_folds(&ids, plan.folds, plan.seed)?;
    (0..plan.folds)
        .into_par_iter()
        .map(|fold| {
            let ckpt = checkpoint_path(dir, fold);
            if plan.reuse && ckpt.exists() && log_path(dir, fold).exists() {
                return Ok(FoldOutcome {
                    fold,
                    model: SegNet::load(&ckpt)?,
                    seconds: 0.0,
                    reused: true,
                });
            }
            let start = Instant::now();
            let train_set: Vec<Sample> = samples
                .iter()
                .filter(|s| split.fold_of(&s.id) != Some(fold))
                .cloned()
                .collect();
            let model = SegNet::init(ModelConfig {
                seed: init_seed(plan.seed, fold),
                ..plan.model
            })?;
            let cfg = TrainConfig {
                seed: batch_seed(plan.seed, fold),
                ..plan.train.clone()
            };
            let last_good = dir.join(format!("fold_{fold}.last_good.ckpt"));
            let (model, log) = train(&train_set, model, &cfg, Some(&last_good))?;
            log.write_csv(&log_path(dir, fold))?;
            // Write then rename, so a present checkpoint is always complete.
            let tmp = dir.join(format!("fold_{fold}.ckpt.tmp"));
            model.save(&tmp)?;
            fs::rename(&tmp, &ckpt).map_err(|e| Error::io(&ckpt, e))?;
            Ok(FoldOutcome {
                fold,
                model,
                seconds: start.elapsed().as_secs_f64(),
                reused: false,
            })
        })
        .collect()
}

/// Loads `fold_0.ckpt`, `fold_1.ckpt`, … from `dir`, stopping at the first
/// missing index.
pub fn load_ensemble(dir: &Path) -> Result<Vec<SegNet>> {
    let mut models = Vec::new();
    while checkpoint_path(dir, models.len()).exists() {
        models.push(SegNet::load(&checkpoint_path(dir, models.len()))?);
    }
    if models.is_empty() {
        return Err(Error::Contract(format!(
            "no checkpoints (fold_0.ckpt, …) found in {}",
            dir.display()
        )));
    }
    Ok(models)
}

/// Picks the evaluation split: every lesion image plus enough clean images
/// that they make up `ood_fraction` of the result (first ids first). With
/// no fraction the samples are used as given.
pub fn select_split(samples: &[Sample], ood_fraction: Option<f64>) -> Result<Vec<Sample>> {
    let Some(f) = ood_fraction else {
        return Ok(samples.to_vec());
    };
    if !(0.0..=1.0).contains(&f) {
        return Err(Error::Config(format!("ood fraction must lie in [0, 1], got {f}")));
    }
    let mut lesion: Vec<&Sample> = samples.iter().filter(|s| s.has_lesion).collect();
    let mut clean: Vec<&Sample> = samples.iter().filter(|s| !s.has_lesion).collect();
    lesion.sort_by(|a, b| a.id.cmp(&b.id));
    clean.sort_by(|a, b| a.id.cmp(&b.id));
    let wanted = if f == 1.0 {
        clean.len()
    } else {
        (f * lesion.len() as f64 / (1.0 - f)).round() as usize
    };
    if f == 1.0 {
        lesion.clear();
    }
    if wanted > clean.len() {
        return Err(Error::Contract(format!(
            "ood fraction {f} needs {wanted} clean images, only {} available",
            clean.len()
        )));
    }
    let out: Vec<Sample> = lesion.into_iter().chain(clean.into_iter().take(wanted)).cloned().collect();
    if out.is_empty() {
        return Err(Error::Contract("evaluation split is empty".into()));
    }
    Ok(out)
}

/// Timing of one schedule inside a sweep.
#[derive(Clone, Debug)]
pub struct ScheduleTiming {
    pub schedule: ScheduleKind,
    /// Training time of each fold; zero for reused checkpoints.
    pub fold_seconds: Vec<f64>,
    /// Wall time of the k-fold training stage.
    pub train_seconds: f64,
    pub eval_seconds: f64,
}

#[derive(Clone, Debug)]
pub struct SweepOutcome {
    pub id_rows: Vec<ReportRow>,
    pub mixed_rows: Vec<ReportRow>,
    pub timings: Vec<ScheduleTiming>,
    pub wall_seconds: f64,
}

/// Dataset directories of a sweep: generated once, then always read back
/// from disk so that fresh and resumed sweeps train on identical pixels.
fn prepare_data(cfg: &ExperimentConfig, out: &Path) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let train_dir = out.join("data").join("train");
    let test_dir = out.join("data").join("test");
    let train_manifest = train_dir.join("manifest.csv");
    let test_manifest = test_dir.join("manifest.csv");
    if !train_manifest.exists() || !test_manifest.exists() {
        let all = generate_dataset(
            cfg.n_train + cfg.n_test_lesion,
            cfg.n_test_clean,
            (cfg.height, cfg.width),
            cfg.seed,
        )?;
        let (train, test) = all.split_at(cfg.n_train);
        write_dataset(train, &train_dir)?;
        write_dataset(test, &test_dir)?;
    }
    let train = load_dataset(&train_manifest)?;
    ensure_lesion_only(&train)?;
    Ok((train, load_dataset(&test_manifest)?))
}

fn archive_config(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let path = out.join(CONFIG_FILE);
    if path.exists() {
        let old = ExperimentConfig::read(&path)?;
        if old.essence() != cfg.essence() {
            return Err(Error::Config(format!(
                "{} holds a different experiment; use a fresh output directory",
                out.display()
            )));
        }
    }
    cfg.write(&path)
}

/// Runs every configured schedule end to end: k-fold training, then
/// ensemble evaluation on the lesion-only test images and on the mixed
/// lesion/clean test images. Each finished schedule appends its row to
/// `report_id.csv` and `report_mixed.csv` immediately, so a failure keeps
/// the rows of the schedules before it. Existing checkpoints are reused.
pub fn run_sweep(cfg: &ExperimentConfig, out: &Path) -> Result<SweepOutcome> {
    let start = Instant::now();
    cfg.validate()?;
    let kinds = cfg.schedule_kinds()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    archive_config(cfg, out)?;
    let (train_set, test_set) = prepare_data(cfg, out)?;
    let id_split = select_split(&test_set, Some(0.0))?;
    let report_id = out.join(REPORT_ID);
    let report_mixed = out.join(REPORT_MIXED);
    for p in [&report_id, &report_mixed] {
        if p.exists() {
            fs::remove_file(p).map_err(|e| Error::io(p, e))?;
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;

    let mut outcome = SweepOutcome {
        id_rows: Vec::new(),
        mixed_rows: Vec::new(),
        timings: Vec::new(),
        wall_seconds: 0.0,
    };
    let model_cfg = cfg.model_config(0);
    let encoder = model_cfg.tag();
    for kind in kinds {
        let dir = out.join("runs").join(kind.name());
        let plan = FoldPlan {
            model: model_cfg,
            train: cfg.train_config(kind, 0),
            folds: cfg.folds,
            seed: cfg.seed,
            reuse: true,
        };
        let train_start = Instant::now();
        let folds = pool.install(|| train_folds(&train_set, &plan, &dir))?;
        let train_seconds = train_start.elapsed().as_secs_f64();
        let models: Vec<SegNet> = folds.iter().map(|f| f.model.clone()).collect();

        let eval_start = Instant::now();
        let eval_cfg = cfg.eval_config();
        let (id_records, id_row) = pool.install(|| evaluate_split(&models, &id_split, &eval_cfg, kind.name(), &encoder))?;
        write_records(&id_records, &dir.join("eval_id.csv"))?;
        append_report_row(&id_row, &report_id)?;
        let (mixed_records, mixed_row) =
            pool.install(|| evaluate_split(&models, &test_set, &eval_cfg, kind.name(), &encoder))?;
        write_records(&mixed_records, &dir.join("eval_mixed.csv"))?;
        append_report_row(&mixed_row, &report_mixed)?;

        outcome.id_rows.push(id_row);
        outcome.mixed_rows.push(mixed_row);
        outcome.timings.push(ScheduleTiming {
            schedule: kind,
            fold_seconds: folds.iter().map(|f| f.seconds).collect(),
            train_seconds,
            eval_seconds: eval_start.elapsed().as_secs_f64(),
        });
    }
    outcome.wall_seconds = start.elapsed().as_secs_f64();
    Ok(outcome)
}

/// Rejection rate on the clean images of a mixed evaluation, in percent.
pub fn ood_rejection_pct(records: &[crate::eval::EvalRecord]) -> Option<f64> {
    let ood: Vec<_> = records.iter().filter(|r| r.gt_empty).collect();
    (!ood.is_empty()).then(|| 100.0 * ood.iter().filter(|r| r.rejected).count() as f64 / ood.len() as f64)
}

/// Reads back the per-image records of one schedule's mixed evaluation.
pub fn read_records(path: &Path) -> Result<Vec<crate::eval::EvalRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    r.deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::csv(path, e))
}

/// Samples of the manifest at `path`, refusing clean images unless allowed.
pub fn load_training_set(manifest: &Path, allow_clean: bool) -> Result<Vec<Sample>> {
    let samples = load_dataset(manifest)?;
    if !allow_clean {
        ensure_lesion_only(&samples)?;
    }
    Ok(samples)
}
