//! Soft Dice plus binary cross-entropy on logits.

use serde::{Deserialize, Serialize};

use super::layers::sigmoid;
use super::model::check_binary;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Smoothing constant in both numerator and denominator of the soft Dice.
pub const DICE_EPS: f64 = 1.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub dice: f64,
    pub ce: f64,
    pub total: f64,
}

/// `(2 Σpt + ε) / (Σp + Σt + ε)` with `p = σ(logits)`.
pub fn soft_dice(logits: &Tensor, target: &Tensor) -> f64 {
    let (mut i, mut s) = (0.0, DICE_EPS);
    for (&z, &t) in logits.data.iter().zip(&target.data) {
        let p = sigmoid(z);
        i += p * t;
        s += p + t;
    }
    (2.0 * i + DICE_EPS) / s
}

fn bce(z: f64, t: f64) -> f64 {
    z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
}

fn check(logits: &Tensor, target: &Tensor) -> Result<()> {
    if logits.shape() != target.shape() {
        return Err(Error::ShapeMismatch(format!(
            "logits {:?} vs target {:?}",
            logits.shape(),
            target.shape()
        )));
    }
    check_binary(target)
}

pub fn compute_loss(logits: &Tensor, target: &Tensor) -> Result<LossValue> {
    check(logits, target)?;
    let n = logits.data.len() as f64;
    let ce = logits.data.iter().zip(&target.data).map(|(&z, &t)| bce(z, t)).sum::<f64>() / n;
    let dice = 1.0 - soft_dice(logits, target);
    Ok(LossValue { dice, ce, total: dice + ce })
}

/// Loss and its gradient with respect to the logits.
pub fn loss_and_grad(logits: &Tensor, target: &Tensor) -> Result<(LossValue, Tensor)> {
    let value = compute_loss(logits, target)?;
    let n = logits.data.len() as f64;
    let p: Vec<f64> = logits.data.iter().map(|&z| sigmoid(z)).collect();
    let (mut i, mut s) = (0.0, DICE_EPS);
    for (&pk, &t) in p.iter().zip(&target.data) {
        i += pk * t;
        s += pk + t;
    }
    let num = 2.0 * i + DICE_EPS;
    let mut g = Tensor::zeros(logits.c, logits.h, logits.w);
    for (k, (&pk, &t)) in p.iter().zip(&target.data).enumerate() {
        let ddice_dp = -(2.0 * t * s - num) / (s * s);
        g.data[k] = ddice_dp * pk * (1.0 - pk) + (pk - t) / n;
    }
    Ok((value, g))
}
