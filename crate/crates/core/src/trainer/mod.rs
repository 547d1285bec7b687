//! Mask-network training: analytical gradients, Adam and the epoch loop.

mod backward;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use backward::{backward, evaluate, loss_and_gradients, Evaluation, Sample};

use crate::dataset::TrainingPair;
use crate::dsp::StftConfig;
use crate::loss::LossConfig;
use crate::mask::MaskConfig;
use crate::network::{NetworkConfig, UNetConfig, UNetWeights};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            learning_rate: 1e-4,
            epochs: 125,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1)")));
            }
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return Err(Error::Config("adam_eps must be positive".into()));
        }
        Ok(())
    }
}

/// Adam moment estimates, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl OptimizerState {
    pub fn new(weights: &UNetWeights) -> Self {
        let zeros: Vec<Vec<f64>> = weights.params().iter().map(|p| vec![0.0; p.values().len()]).collect();
        Self {
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &[Vec<f64>] {
        &self.first
    }

    pub fn second_moment(&self) -> &[Vec<f64>] {
        &self.second
    }
}

/// One bias-corrected Adam update of `weights` in place.
pub fn adam_step(
    weights: &mut UNetWeights,
    grads: &UNetWeights,
    state: &mut OptimizerState,
    cfg: &TrainConfig,
) -> Result<()> {
    let shapes_match = weights.params().len() == grads.params().len()
        && state.first.len() == weights.params().len()
        && weights
            .params()
            .iter()
            .zip(grads.params())
            .zip(&state.first)
            .all(|((p, g), m)| p.name == g.name && p.dims == g.dims && m.len() == p.values().len());
    if !shapes_match {
        return Err(Error::invalid("gradients or optimizer state do not match the weights"));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (((p, g), m), v) in weights
        .params_mut()
        .iter_mut()
        .zip(grads.params())
        .zip(&mut state.first)
        .zip(&mut state.second)
    {
        for (((w, &gi), mi), vi) in p.values_mut().iter_mut().zip(g.values()).zip(m).zip(v) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            *w -= cfg.learning_rate * (*mi / c1) / ((*vi / c2).sqrt() + cfg.adam_eps);
        }
    }
    Ok(())
}

/// Everything besides the data that fixes a training run.
#[derive(Debug, Clone)]
pub struct TrainSetup {
    pub stft: StftConfig,
    pub mask: MaskConfig,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
}

/// Mean losses of one epoch. The training components average the per-batch
/// losses seen during the epoch; `val_total` is measured after it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub bce: f64,
    pub mag: f64,
    pub td: f64,
    pub total: f64,
    pub val_total: f64,
    pub lambda: f64,
}

impl EpochLog {
    pub fn to_log_line(&self) -> String {
        serde_json::to_string(self).expect("log entry is plain data")
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Weights from the epoch with the lowest validation loss.
    pub weights: UNetWeights,
    pub best_epoch: usize,
    pub best_val: f64,
    pub log: Vec<EpochLog>,
    pub train_ids: Vec<usize>,
    pub val_ids: Vec<usize>,
}

/// Seeded 90/10 split of `n` items into (train, validation) indices.
pub fn split_indices(n: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 pairs to split into training and validation, got {n}"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((n as f64 / 10.0).round() as usize).max(1);
    let train = idx.split_off(n_val);
    Ok((train, idx))
}

fn mean_validation(
    weights: &UNetWeights,
    samples: &[Sample],
    ids: &[usize],
    cfg: &LossConfig,
    epoch: usize,
) -> Result<f64> {
    let mut sum = 0.0;
    for &i in ids {
        sum += evaluate(weights, &samples[i], cfg, epoch)?.report.total;
    }
    Ok(sum / ids.len() as f64)
}

/// Calls `on_epoch` after every epoch, e.g. to stream the log.
pub fn train_with(
    dataset: &[TrainingPair],
    setup: &TrainSetup,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::invalid("training dataset is empty"));
    }
    setup.train.validate()?;
    setup.loss.validate()?;
    setup.mask.validate()?;
    setup.network.validate()?;
    let cfg = &setup.train;
    let samples = dataset
        .iter()
        .map(|p| Sample::new(p, &setup.stft, &setup.mask))
        .collect::<Result<Vec<_>>>()?;
    let unet = UNetConfig::new(setup.stft.bins(), setup.network);
    let (train_ids, val_ids) = split_indices(samples.len(), cfg.seed)?;

    let mut weights = UNetWeights::init(unet, cfg.seed);
    let mut state = OptimizerState::new(&weights);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order = train_ids.clone();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, UNetWeights)> = None;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0; 4];
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Option<UNetWeights> = None;
            for &i in batch {
                let (report, g) = loss_and_gradients(&weights, &samples[i], &setup.loss, epoch)?;
                for (s, v) in sums
                    .iter_mut()
                    .zip([report.bce, report.weighted_mag, report.time_domain, report.total])
                {
                    *s += v;
                }
                match &mut acc {
                    None => acc = Some(g),
                    Some(a) => {
                        for (pa, pg) in a.params_mut().iter_mut().zip(g.params()) {
                            pa.tensor.add_assign(&pg.tensor)?;
                        }
                    }
                }
            }
            let mut grads = acc.expect("batches are non-empty");
            let inv = 1.0 / batch.len() as f64;
            for p in grads.params_mut() {
                p.values_mut().iter_mut().for_each(|v| *v *= inv);
            }
            adam_step(&mut weights, &grads, &mut state, cfg)?;
        }

        let n = order.len() as f64;
        let val_total = mean_validation(&weights, &samples, &val_ids, &setup.loss, epoch)?;
        let entry = EpochLog {
            epoch,
            bce: sums[0] / n,
            mag: sums[1] / n,
            td: sums[2] / n,
            total: sums[3] / n,
            val_total,
            lambda: setup.loss.td_weight(epoch),
        };
        on_epoch(&entry);
        log.push(entry);
        if best.as_ref().is_none_or(|(_, v, _)| val_total < *v) {
            best = Some((epoch, val_total, weights.clone()));
        }
    }

    let (best_epoch, best_val, weights) = match best {
        Some(b) => b,
        None => {
            let v = mean_validation(&weights, &samples, &val_ids, &setup.loss, 0)?;
            (0, v, weights)
        }
    };
    Ok(TrainOutcome {
        weights,
        best_epoch,
        best_val,
        log,
        train_ids,
        val_ids,
    })
}

pub fn train(dataset: &[TrainingPair], setup: &TrainSetup) -> Result<TrainOutcome> {
    train_with(dataset, setup, |_| {})
}
