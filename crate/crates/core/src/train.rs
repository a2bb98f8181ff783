//! Mini-batch SGD with classical momentum on the pooled smoothed-F1 loss.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{f1_loss_batch, f1_loss_grad_with, LossBreakdown, LossConfig};
use crate::model::{backward, forward, init_params, EncoderConfig, ModelParams};
use crate::superpixel::{FeatureMask, CLASS_COUNT};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub image_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    pub eps: f64,
    pub encoder: EncoderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 12,
            epochs: 5,
            image_size: 336,
            learning_rate: 0.05,
            momentum: 0.9,
            seed: 0,
            eps: 1.0,
            encoder: EncoderConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        self.loss().validate()?;
        self.encoder.validate()?;
        self.encoder.check_input_size(self.image_size, self.image_size)
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig { eps: self.eps }
    }
}

/// One training example: a `[C, H, W]` image and its binary `[4, H, W]` mask.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub name: String,
    pub image: Tensor,
    pub truth: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub batches: usize,
    pub mean_batch_loss: f64,
    /// Not serialized, so reports from identical runs compare equal byte for byte.
    #[serde(skip)]
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
}

/// `v ← μ·v − lr·g; θ ← θ + v`
#[derive(Debug, Clone)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(learning_rate: f64, momentum: f64, params: &ModelParams) -> Self {
        Sgd {
            learning_rate,
            momentum,
            velocity: vec![0.0; params.param_count()],
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams) {
        let mut offset = 0;
        for (p, g) in params.tensors_mut().into_iter().zip(grads.tensors()) {
            let v = &mut self.velocity[offset..offset + p.len()];
            for ((theta, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v) {
                *vi = self.momentum * *vi - self.learning_rate * gi;
                *theta += *vi;
            }
            offset += p.len();
        }
    }
}

/// Loss and parameter gradient for one mini-batch with pooled fuzzy counts.
pub fn batch_gradient(
    params: &ModelParams,
    encoder: &EncoderConfig,
    batch: &[&TrainSample],
    loss_cfg: &LossConfig,
) -> Result<(LossBreakdown, ModelParams)> {
    let mut outputs = Vec::with_capacity(batch.len());
    for s in batch {
        outputs.push(forward(params, encoder, &s.image)?);
    }
    let pairs: Vec<(&Tensor, &Tensor)> = outputs
        .iter()
        .zip(batch)
        .map(|((probs, _), s)| (probs.as_tensor(), &s.truth))
        .collect();
    let breakdown = f1_loss_batch(&pairs, loss_cfg)?;

    let mut total = ModelParams::zeros(encoder);
    for ((probs, cache), s) in outputs.iter().zip(batch) {
        let gp = f1_loss_grad_with(&breakdown, probs.as_tensor(), &s.truth, loss_cfg)?;
        let (g, _) = backward(params, encoder, cache, &gp)?;
        for (acc, gi) in total.tensors_mut().into_iter().zip(g.tensors()) {
            acc.add_assign(gi)?;
        }
    }
    Ok((breakdown, total))
}

/// Order in which samples are visited in each epoch, drawn from `rng`.
pub fn epoch_order(count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(rng);
    order
}

fn check_samples(samples: &[TrainSample], cfg: &TrainConfig) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let n = cfg.image_size;
    for s in samples {
        let expect_img = [cfg.encoder.input_channels, n, n];
        if s.image.shape() != expect_img {
            return Err(Error::shape(format!(
                "sample {}: image {:?} but training expects {:?}",
                s.name,
                s.image.shape(),
                expect_img
            )));
        }
        if s.truth.shape() != [CLASS_COUNT, n, n] {
            return Err(Error::shape(format!(
                "sample {}: mask {:?} but training expects [{CLASS_COUNT}, {n}, {n}]",
                s.name,
                s.truth.shape()
            )));
        }
    }
    Ok(())
}

pub fn train(samples: &[TrainSample], cfg: &TrainConfig) -> Result<(ModelParams, TrainReport)> {
    train_with_progress(samples, cfg, |_| {})
}

/// Like [`train`], calling `on_epoch` after each epoch completes.
pub fn train_with_progress(
    samples: &[TrainSample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(ModelParams, TrainReport)> {
    cfg.validate()?;
    check_samples(samples, cfg)?;
    let loss_cfg = cfg.loss();
    let mut params = init_params(&cfg.encoder, cfg.seed)?;
    let mut sgd = Sgd::new(cfg.learning_rate, cfg.momentum, &params);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);

    let mut report = TrainReport::default();
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let order = epoch_order(samples.len(), &mut shuffle_rng);
        let mut losses = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            // membership comes from the shuffle; a fixed order inside the batch
            // keeps the pooled sums bit-identical whenever membership repeats
            let mut members = chunk.to_vec();
            members.sort_unstable();
            let batch: Vec<&TrainSample> = members.iter().map(|&i| &samples[i]).collect();
            let (breakdown, grads) = batch_gradient(&params, &cfg.encoder, &batch, &loss_cfg)?;
            if !breakdown.loss.is_finite() || !grads.is_finite() {
                return Err(Error::invalid(format!(
                    "non-finite loss or gradient in epoch {epoch}"
                )));
            }
            sgd.step(&mut params, &grads);
            losses.push(breakdown.loss);
        }
        let record = EpochRecord {
            epoch,
            batches: losses.len(),
            mean_batch_loss: losses.iter().sum::<f64>() / losses.len() as f64,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        report.epochs.push(record);
    }
    Ok((params, report))
}

/// Forward pass only.
pub fn predict(params: &ModelParams, encoder: &EncoderConfig, image: &Tensor) -> Result<FeatureMask> {
    forward(params, encoder, image).map(|(probs, _)| probs)
}
