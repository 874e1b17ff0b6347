//! Minibatch training: seeded batch sampling with augmentation, scheduled
//! BCE/Dice weights, Adam, and cosine learning-rate decay to zero.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment, Sample};
use crate::error::{Error, Result};
use crate::losses::{combined_loss, LossConfig, LossWeights};
use crate::schedule::{LossSchedule, ScheduleKind, DEFAULT_SWITCH_FRACTION};
use crate::segnet::{Param, SegNet};
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub schedule: ScheduleKind,
    pub switch_fraction: f64,
    /// Optimization steps per schedule epoch.
    pub steps_per_epoch: usize,
    pub seed: u64,
    pub log_every: usize,
    pub augment: bool,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_steps: 2000,
            batch_size: 4,
            lr_max: 3e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            schedule: ScheduleKind::BceOnly,
            switch_fraction: DEFAULT_SWITCH_FRACTION,
            steps_per_epoch: 50,
            seed: 0,
            log_every: 10,
            augment: true,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_max > 0.0 && self.lr_max.is_finite()) {
            return Err(Error::Config(format!("lr_max must be positive, got {}", self.lr_max)));
        }
        if self.steps_per_epoch == 0 || self.total_steps < self.steps_per_epoch {
            return Err(Error::Config(format!(
                "need total_steps ({}) ≥ steps_per_epoch ({}) ≥ 1",
                self.total_steps, self.steps_per_epoch
            )));
        }
        if self.batch_size == 0 || self.log_every == 0 {
            return Err(Error::Config("batch_size and log_every must be positive".into()));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return Err(Error::Config("adam_eps must be positive".into()));
        }
        self.loss.validate()?;
        self.loss_schedule().map(|_| ())
    }

    /// Number of schedule epochs, `total_steps / steps_per_epoch` rounded down.
    pub fn total_epochs(&self) -> usize {
        self.total_steps / self.steps_per_epoch
    }

    pub fn epoch_at(&self, step: usize) -> usize {
        (step / self.steps_per_epoch).min(self.total_epochs())
    }

    pub fn loss_schedule(&self) -> Result<LossSchedule> {
        LossSchedule::with_switch_fraction(self.schedule, self.total_epochs(), self.switch_fraction)
    }
}

/// `lr_max · ½(1 + cos(π · step / total_steps))`.
pub fn cosine_lr(step: usize, cfg: &TrainConfig) -> Result<f64> {
    if step > cfg.total_steps {
        return Err(Error::Contract(format!(
            "step {step} beyond total_steps {}",
            cfg.total_steps
        )));
    }
    let progress = step as f64 / cfg.total_steps as f64;
    Ok(cfg.lr_max * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for every parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[Param]) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        AdamState {
            first: zeros(),
            second: zeros(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. Gradients are checked for NaN before any
/// parameter is touched.
pub fn adam_step(params: &mut [Param], grads: &[Tensor], state: &mut AdamState, lr: f64, hyper: AdamHyper) -> Result<()> {
    if grads.len() != params.len() || state.first.len() != params.len() {
        return Err(Error::Contract(format!(
            "adam_step got {} parameters, {} gradients and {} moment buffers",
            params.len(),
            grads.len(),
            state.first.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if g.shape() != p.value.shape() {
            return Err(Error::dim(
                "adam_step",
                "all axes",
                format!("gradient {} for parameter {} {}", g.shape(), p.name, p.value.shape()),
            ));
        }
        if g.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numerical(format!("NaN gradient for parameter {}", p.name)));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - hyper.beta1.powi(t);
    let bias2 = 1.0 - hyper.beta2.powi(t);
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = &mut state.first[k];
        let v = &mut state.second[k];
        for (((w, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = hyper.beta1 * *mi + (1.0 - hyper.beta1) * gi;
            *vi = hyper.beta2 * *vi + (1.0 - hyper.beta2) * gi * gi;
            let m_hat = *mi / bias1;
            let v_hat = *vi / bias2;
            *w -= lr * m_hat / (v_hat.sqrt() + hyper.eps);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub lr: f64,
    pub w_bce: f64,
    pub w_dice: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    /// CSV with header `step,lr,w_bce,w_dice,loss`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
        if self.records.is_empty() {
            w.write_record(["step", "lr", "w_bce", "w_dice", "loss"])
                .map_err(|e| Error::csv(path, e))?;
        }
        for r in &self.records {
            w.serialize(r).map_err(|e| Error::csv(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
        let records = r
            .deserialize()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::csv(path, e))?;
        Ok(TrainLog { records })
    }
}

fn assemble_batch<R: Rng>(samples: &[Sample], cfg: &TrainConfig, rng: &mut R) -> Result<(Tensor, Tensor)> {
    let mut images = Vec::with_capacity(cfg.batch_size);
    let mut masks = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        let picked = &samples[rng.gen_range(0..samples.len())];
        let s = if cfg.augment {
            augment(picked, rng)
        } else {
            picked.clone()
        };
        images.push(s.image);
        masks.push(s.mask.to_tensor());
    }
    Ok((Tensor::stack(&images)?, Tensor::stack(&masks)?))
}

fn check_probability_map(t: &Tensor, step: usize) -> Result<()> {
    if let Some(v) = t.data().iter().find(|v| !(**v > 0.0 && **v < 1.0)) {
        return Err(Error::Numerical(format!(
            "step {step}: model output {v} outside the open unit interval"
        )));
    }
    Ok(())
}

/// Runs `cfg.total_steps` optimization steps and returns the final model
/// (no early stopping) and the training log.
///
/// On a numerical failure the model as it stood before the failing step is
/// written to `last_good` (when given) and the error is returned.
pub fn train(samples: &[Sample], model: SegNet, cfg: &TrainConfig, last_good: Option<&Path>) -> Result<(SegNet, TrainLog)> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Contract("training split is empty".into()));
    }
    if let Some(s) = samples.iter().find(|s| {
        s.height() % model.config().size_multiple() != 0 || s.width() % model.config().size_multiple() != 0
    }) {
        return Err(Error::dim(
            "train",
            "height/width",
            format!(
                "sample {} is {}×{}, not a multiple of {}",
                s.id,
                s.height(),
                s.width(),
                model.config().size_multiple()
            ),
        ));
    }
    let schedule = cfg.loss_schedule()?;
    let hyper = AdamHyper {
        beta1: cfg.adam_beta1,
        beta2: cfg.adam_beta2,
        eps: cfg.adam_eps,
    };
    let mut model = model;
    let mut state = AdamState::new(model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = TrainLog::default();

    for step in 0..cfg.total_steps {
        let outcome = train_step(samples, &mut model, &mut state, cfg, &schedule, hyper, step, &mut rng);
        match outcome {
            Ok(record) => {
                if step % cfg.log_every == 0 || step + 1 == cfg.total_steps {
                    log.records.push(record);
                }
            }
            Err(e) => {
                if let Some(path) = last_good {
                    model.save(path)?;
                }
                return Err(e);
            }
        }
    }
    Ok((model, log))
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    samples: &[Sample],
    model: &mut SegNet,
    state: &mut AdamState,
    cfg: &TrainConfig,
    schedule: &LossSchedule,
    hyper: AdamHyper,
    step: usize,
    rng: &mut ChaCha8Rng,
) -> Result<LogRecord> {
    let (images, targets) = assemble_batch(samples, cfg, rng)?;
    let weights: LossWeights = schedule.weights_at(cfg.epoch_at(step))?;
    let lr = cosine_lr(step, cfg)?;

    let graph = Graph::new();
    let out = model.forward(&graph, graph.constant(images))?;
    out.prob.with_value(|p| check_probability_map(p, step))?;
    let loss = combined_loss(&out.prob, &targets, weights, &cfg.loss)?;
    let loss_value = loss.item()?;
    if !loss_value.is_finite() {
        return Err(Error::Numerical(format!("step {step}: loss is {loss_value}")));
    }
    graph.backward(loss)?;
    let grads: Vec<Tensor> = out.params.iter().map(|p| p.grad()).collect();
    adam_step(model.params_mut(), &grads, state, lr, hyper)?;
    Ok(LogRecord {
        step,
        lr,
        w_bce: weights.bce,
        w_dice: weights.dice,
        loss: loss_value,
    })
}
