//! Smoothed F1 and dice losses built on fuzzy confusion counts.
//!
//! With probabilities `p` and binary truth `y` summed over pixels,
//! `tp = Σ p·y`, `fp = Σ p·(1−y)`, `fn = Σ (1−p)·y`, and each class scores
//! `2tp / (2tp + fp + fn + eps)`. The F1 loss is one minus the mean of that
//! term over the four classes; dice is the single-channel case.
//!
//! Since `2tp + fp + fn = Σp + Σy`, the derivative of the denominator with
//! respect to any prediction is 1, which keeps the gradient simple:
//! `∂term/∂p_j = (2·y_j·D − 2·tp) / D²`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::superpixel::CLASS_COUNT;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { eps: 1.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return Err(Error::invalid(format!(
                "loss eps must be finite and non-negative, got {}",
                self.eps
            )));
        }
        Ok(())
    }
}

/// Fuzzy true positives, false positives and false negatives of one class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct FuzzyCounts {
    pub tp: f64,
    pub fp: f64,
    #[serde(rename = "fn")]
    pub fn_: f64,
}

impl FuzzyCounts {
    fn accumulate(&mut self, pred: &[f64], truth: &[f64]) {
        for (&p, &y) in pred.iter().zip(truth) {
            self.tp += p * y;
            self.fp += p * (1.0 - y);
            self.fn_ += (1.0 - p) * y;
        }
    }

    fn denominator(&self, eps: f64) -> f64 {
        2.0 * self.tp + self.fp + self.fn_ + eps
    }

    /// Smoothed F1 term `2tp / (2tp + fp + fn + eps)`.
    pub fn f1_term(&self, eps: f64) -> Result<f64> {
        let d = self.denominator(eps);
        if d <= 0.0 {
            return Err(Error::invalid(
                "smoothed F1 undefined: no predicted or true positives and eps = 0",
            ));
        }
        Ok(2.0 * self.tp / d)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassTerm {
    pub counts: FuzzyCounts,
    pub f1_term: f64,
}

/// Per-class counts and terms behind one F1 loss value.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub classes: [ClassTerm; CLASS_COUNT],
    pub loss: f64,
}

fn check_pair(pred: &Tensor, truth: &Tensor, channels: usize) -> Result<()> {
    let (c, _, _) = pred.dims3()?;
    if c != channels {
        return Err(Error::shape(format!(
            "prediction has {c} channels, expected {channels}"
        )));
    }
    pred.expect_same_shape(truth, "loss prediction vs truth")?;
    if let Some(v) = pred.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::invalid(format!("prediction {v} outside [0, 1]")));
    }
    if let Some(v) = truth.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::invalid(format!("ground truth value {v} is not binary")));
    }
    Ok(())
}

/// Fuzzy counts for channel `class`, summed over all its pixels.
pub fn fuzzy_counts(pred: &Tensor, truth: &Tensor, class: usize) -> Result<FuzzyCounts> {
    let (c, _, _) = pred.dims3()?;
    check_pair(pred, truth, c)?;
    if class >= c {
        return Err(Error::invalid(format!("class {class} out of range for {c} channels")));
    }
    let mut counts = FuzzyCounts::default();
    counts.accumulate(pred.channel(class), truth.channel(class));
    Ok(counts)
}

/// Smoothed F1 loss of a single `[4, H, W]` prediction.
pub fn f1_loss(pred: &Tensor, truth: &Tensor, cfg: &LossConfig) -> Result<LossBreakdown> {
    f1_loss_batch(&[(pred, truth)], cfg)
}

/// Smoothed F1 loss with counts pooled over every image of a mini-batch:
/// one `tp`, `fp`, `fn` per class for the whole batch.
pub fn f1_loss_batch(pairs: &[(&Tensor, &Tensor)], cfg: &LossConfig) -> Result<LossBreakdown> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::invalid("f1 loss needs at least one prediction"));
    }
    let mut counts = [FuzzyCounts::default(); CLASS_COUNT];
    for (pred, truth) in pairs {
        check_pair(pred, truth, CLASS_COUNT)?;
        for (c, count) in counts.iter_mut().enumerate() {
            count.accumulate(pred.channel(c), truth.channel(c));
        }
    }
    let mut classes = [ClassTerm {
        counts: FuzzyCounts::default(),
        f1_term: 0.0,
    }; CLASS_COUNT];
    for (slot, counts) in classes.iter_mut().zip(counts) {
        *slot = ClassTerm {
            counts,
            f1_term: counts.f1_term(cfg.eps)?,
        };
    }
    let mean = classes.iter().map(|t| t.f1_term).sum::<f64>() / CLASS_COUNT as f64;
    Ok(LossBreakdown {
        classes,
        loss: 1.0 - mean,
    })
}

fn term_grad_into(out: &mut [f64], truth: &[f64], counts: &FuzzyCounts, eps: f64, scale: f64) {
    let d = counts.denominator(eps);
    let d2 = d * d;
    for (g, &y) in out.iter_mut().zip(truth) {
        *g = scale * (2.0 * y * d - 2.0 * counts.tp) / d2;
    }
}

/// `∂loss/∂pred` for one image, given the breakdown the loss was computed
/// with. For pooled batches pass the batch breakdown and each member in turn.
pub fn f1_loss_grad_with(
    breakdown: &LossBreakdown,
    pred: &Tensor,
    truth: &Tensor,
    cfg: &LossConfig,
) -> Result<Tensor> {
    check_pair(pred, truth, CLASS_COUNT)?;
    let mut grad = Tensor::zeros(pred.shape());
    for (c, term) in breakdown.classes.iter().enumerate() {
        if term.counts.denominator(cfg.eps) <= 0.0 {
            return Err(Error::invalid(format!(
                "class {c}: smoothed F1 gradient undefined with a zero denominator"
            )));
        }
        let scale = -1.0 / CLASS_COUNT as f64;
        term_grad_into(grad.channel_mut(c), truth.channel(c), &term.counts, cfg.eps, scale);
    }
    Ok(grad)
}

pub fn f1_loss_grad(pred: &Tensor, truth: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    let breakdown = f1_loss(pred, truth, cfg)?;
    f1_loss_grad_with(&breakdown, pred, truth, cfg)
}

/// Smoothed dice loss of a single-channel prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct DiceLoss {
    pub loss: f64,
    /// The smoothed overlap term, `1 − loss`.
    pub term: f64,
    pub counts: FuzzyCounts,
    pub grad: Tensor,
}

/// `1 − 2tp / (2tp + fp + fn + eps)` over a `[1, H, W]` prediction, with its
/// gradient.
pub fn dice_loss(pred: &Tensor, truth: &Tensor, cfg: &LossConfig) -> Result<DiceLoss> {
    cfg.validate()?;
    check_pair(pred, truth, 1)?;
    let mut counts = FuzzyCounts::default();
    counts.accumulate(pred.data(), truth.data());
    let term = counts.f1_term(cfg.eps)?;
    let mut grad = Tensor::zeros(pred.shape());
    term_grad_into(grad.data_mut(), truth.data(), &counts, cfg.eps, -1.0);
    Ok(DiceLoss {
        loss: 1.0 - term,
        term,
        counts,
        grad,
    })
}
