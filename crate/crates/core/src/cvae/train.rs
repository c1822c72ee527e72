use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, AdamConfig};
use crate::dataset::Trajectory;
use crate::rng::XorShift64;

use super::{Condition, CvaeModel, LossParts, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Stop after this many optimizer steps even mid-epoch.
    pub max_steps: Option<u64>,
    #[serde(default)]
    pub schedule: LrSchedule,
}

/// Learning rate as a function of the optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine from `lr` down to `lr * floor` over `steps`, then flat.
    Cosine { steps: u64, floor: f64 },
}

impl LrSchedule {
    /// Rate for the update that produces optimizer step `step + 1`.
    pub fn rate(&self, lr: f64, step: u64) -> f64 {
        match *self {
            LrSchedule::Constant => lr,
            LrSchedule::Cosine { steps, floor } => {
                let t = (step as f64 / steps.max(1) as f64).min(1.0);
                lr * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
            }
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 16,
            lr: 1e-3,
            seed: 0,
            max_steps: None,
            schedule: LrSchedule::Constant,
        }
    }
}

/// Batch-mean loss after one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub epoch: usize,
    pub loss: LossParts,
}

/// Sample-mean loss over one epoch, measured before each batch's update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: u64,
    pub loss: LossParts,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepControl {
    Continue,
    Stop,
}

fn add_parts(acc: &mut LossParts, p: &LossParts, w: f64) {
    acc.total += w * p.total;
    acc.nll += w * p.nll;
    acc.kl += w * p.kl;
    acc.mse += w * p.mse;
}

/// Adam on mini-batches, gradients averaged over each batch.
///
/// Per-sample gradients may be computed in parallel but are summed in
/// sample order, so a seed fixes the whole run bit for bit. `on_step` sees
/// the model after every update and may stop training early.
pub fn train<F>(model: &mut CvaeModel, data: &[(Condition, Trajectory)], cfg: &TrainConfig, mut on_step: F) -> Result<Vec<EpochLog>>
where
    F: FnMut(&CvaeModel, &StepLog) -> StepControl,
{
    if data.is_empty() || cfg.batch_size == 0 {
        return Err(super::CvaeError::InvalidConfig("empty training set or zero batch size".into()));
    }
    let mut rng = XorShift64::new(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut logs = Vec::with_capacity(cfg.epochs);
    'epochs: for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut epoch_loss = LossParts::default();
        let mut seen = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| model.store().step() >= m) {
                if seen > 0 {
                    logs.push(epoch_summary(epoch, model.store().step(), &epoch_loss, seen));
                }
                break 'epochs;
            }
            let results: Vec<_> = batch
                .par_iter()
                .map(|&i| model.loss_and_grads(&data[i].0, &data[i].1))
                .collect::<Result<_>>()?;
            let mut iter = results.into_iter();
            let (first_loss, mut grads) = iter.next().expect("non-empty batch");
            let mut batch_loss = LossParts::default();
            add_parts(&mut batch_loss, &first_loss, 1.0);
            for (loss, g) in iter {
                grads.add_assign(&g);
                add_parts(&mut batch_loss, &loss, 1.0);
            }
            let inv = 1.0 / batch.len() as f64;
            grads.scale(inv);
            let adam = AdamConfig::with_lr(cfg.schedule.rate(cfg.lr, model.store().step()));
            adam_step(model.store_mut(), &grads, &adam)?;
            add_parts(&mut epoch_loss, &batch_loss, 1.0);
            seen += batch.len();

            let mut mean = LossParts::default();
            add_parts(&mut mean, &batch_loss, inv);
            let log = StepLog {
                step: model.store().step(),
                epoch,
                loss: mean,
            };
            if on_step(model, &log) == StepControl::Stop {
                logs.push(epoch_summary(epoch, model.store().step(), &epoch_loss, seen));
                break 'epochs;
            }
        }
        logs.push(epoch_summary(epoch, model.store().step(), &epoch_loss, seen));
    }
    Ok(logs)
}

fn epoch_summary(epoch: usize, step: u64, sum: &LossParts, seen: usize) -> EpochLog {
    let mut loss = LossParts::default();
    add_parts(&mut loss, sum, 1.0 / seen.max(1) as f64);
    EpochLog { epoch, step, loss }
}
