//! Adam, training steps and the training log.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::layers::Grads;
use super::loss::{loss_and_grad, LossValue};
use super::model::{ImageEmbeddings, Network, SampleInput};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::par;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Steps during which the image encoder is trained before it is frozen.
    pub image_encoder_warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            epochs: 20,
            batch_size: 8,
            seed: 0,
            image_encoder_warmup_steps: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            return Err(Error::InvalidArgument("invalid Adam hyper-parameters".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    m: Grads,
    v: Grads,
    t: u64,
}

impl Adam {
    pub fn new(net: &Network) -> Self {
        Self {
            m: net.params.zeros_like(),
            v: net.params.zeros_like(),
            t: 0,
        }
    }

    /// Updates the parameters for which `trainable(i)` holds.
    pub fn step(&mut self, net: &mut Network, g: &Grads, cfg: &TrainConfig, trainable: impl Fn(usize) -> bool) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let c2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (i, gi) in g.iter().enumerate() {
            if !trainable(i) {
                continue;
            }
            let (m, v, w) = (&mut self.m[i], &mut self.v[i], &mut net.params.values[i]);
            for k in 0..gi.len() {
                m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gi[k];
                v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gi[k] * gi[k];
                w[k] -= cfg.learning_rate * (m[k] / c1) / ((v[k] / c2).sqrt() + cfg.adam_eps);
            }
        }
    }
}

/// A training slice; `embeddings` may hold cached image-encoder outputs.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub input: SampleInput,
    pub target: Tensor,
    pub embeddings: Option<ImageEmbeddings>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub dice_loss: f64,
    pub ce_loss: f64,
    pub total: f64,
}

/// Mean loss and summed-then-averaged gradients over a batch. Per-sample
/// work runs in parallel and is reduced in batch order.
pub fn batch_gradients(net: &Network, batch: &[TrainSample], train_image: bool) -> Result<(LossValue, Grads)> {
    let per = par::map(batch, |s| -> Result<(LossValue, Grads)> {
        s.input.check(net.config.slice_size)?;
        let emb = if train_image { None } else { s.embeddings.as_ref() };
        let (logits, cache) = net.forward_cached(&s.input, emb, train_image);
        let (loss, dl) = loss_and_grad(&logits, &s.target)?;
        let mut g = net.params.zeros_like();
        net.backward(cache, &dl, &mut g);
        Ok((loss, g))
    });
    let inv = 1.0 / batch.len() as f64;
    let mut total = LossValue::default();
    let mut grads = net.params.zeros_like();
    for r in per {
        let (l, g) = r?;
        total.dice += l.dice * inv;
        total.ce += l.ce * inv;
        for (acc, gi) in grads.iter_mut().zip(&g) {
            for (a, b) in acc.iter_mut().zip(gi) {
                *a += b * inv;
            }
        }
    }
    total.total = total.dice + total.ce;
    Ok((total, grads))
}

/// Owns the optimiser state and enforces the image-encoder freeze.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub network: Network,
    pub config: TrainConfig,
    pub adam: Adam,
    pub step: u64,
    pub log: Vec<LogRow>,
}

impl Trainer {
    pub fn new(network: Network, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = Adam::new(&network);
        Ok(Self {
            network,
            config,
            adam,
            step: 0,
            log: Vec::new(),
        })
    }

    pub fn image_encoder_frozen(&self) -> bool {
        self.step >= self.config.image_encoder_warmup_steps as u64
    }

    pub fn train_step(&mut self, batch: &[TrainSample]) -> Result<LossValue> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let frozen = self.image_encoder_frozen();
        let (loss, grads) = batch_gradients(&self.network, batch, !frozen)?;
        if !loss.total.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite loss at step {}: dice {}, ce {}",
                self.step + 1,
                loss.dice,
                loss.ce
            )));
        }
        if let Some(i) = grads.iter().position(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::Numerical(format!(
                "non-finite gradient for {} at step {}",
                self.network.params.names[i],
                self.step + 1
            )));
        }
        let net = &mut self.network;
        let image: Vec<bool> = (0..net.params.len()).map(|i| net.is_image_param(i)).collect();
        self.adam.step(net, &grads, &self.config, |i| !(frozen && image[i]));
        self.step += 1;
        self.log.push(LogRow {
            step: self.step,
            dice_loss: loss.dice,
            ce_loss: loss.ce,
            total: loss.total,
        });
        Ok(loss)
    }
}

pub fn write_training_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let io = |e: csv::Error| Error::format(path, e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    for r in rows {
        w.serialize(r).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_training_log(path: &Path) -> Result<Vec<LogRow>> {
    let io = |e: csv::Error| Error::format(path, e.to_string());
    let mut r = csv::Reader::from_path(path).map_err(io)?;
    r.deserialize().map(|row| row.map_err(io)).collect()
}
