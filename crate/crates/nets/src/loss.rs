//! Training losses. Each returns the scalar value and its gradient with
//! respect to the network output.

use crate::error::{NetError, Result};
use crate::tensor::{Scalar, Tensor};
use crate::unet::Branch;

/// Smoothing term of the soft Dice ratio.
pub const DICE_EPS: f64 = 1e-6;

/// Binary mask plus the decoder it trains.
#[derive(Debug, Clone, PartialEq)]
pub struct SegTarget {
    pub h: usize,
    pub w: usize,
    /// Row-major foreground flags.
    pub mask: Vec<bool>,
    pub branch: Branch,
}

impl SegTarget {
    pub fn new(h: usize, w: usize, mask: Vec<bool>, branch: Branch) -> Result<Self> {
        if mask.len() != h * w {
            return Err(NetError::ShapeMismatch(format!("mask has {} pixels, expected {h}x{w}", mask.len())));
        }
        Ok(SegTarget { h, w, mask, branch })
    }

    /// Branch given as a textual tag.
    pub fn tagged(h: usize, w: usize, mask: Vec<bool>, tag: &str) -> Result<Self> {
        Self::new(h, w, mask, Branch::parse(tag)?)
    }
}

/// Components of the segmentation loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegLossParts {
    pub dice: f64,
    pub ce: f64,
}

impl SegLossParts {
    pub fn total(&self) -> f64 {
        0.5 * self.dice + 0.5 * self.ce
    }
}

/// Two-channel softmax, channel 1 being foreground.
pub fn softmax2<T: Scalar>(logits: &Tensor<T>) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(logits.c, 2, "two-class logits expected");
    let (l0, l1) = (logits.channel(0), logits.channel(1));
    let mut p0 = Vec::with_capacity(l0.len());
    let mut p1 = Vec::with_capacity(l0.len());
    for (a, b) in l0.iter().zip(l1) {
        // p1 = sigmoid(b - a), computed stably.
        let d = b.to_f64_lossy() - a.to_f64_lossy();
        let q = if d >= 0.0 {
            1.0 / (1.0 + (-d).exp())
        } else {
            let e = d.exp();
            e / (1.0 + e)
        };
        p1.push(q);
        p0.push(1.0 - q);
    }
    (p0, p1)
}

fn check_seg<T: Scalar>(logits: &Tensor<T>, target: &SegTarget) -> Result<()> {
    if logits.c != 2 || logits.h != target.h || logits.w != target.w {
        return Err(NetError::ShapeMismatch(format!(
            "logits {}x{}x{} vs target 2x{}x{}",
            logits.c, logits.h, logits.w, target.h, target.w
        )));
    }
    Ok(())
}

/// Soft Dice (mean over both classes) and mean cross-entropy.
pub fn seg_loss_parts<T: Scalar>(logits: &Tensor<T>, target: &SegTarget) -> Result<SegLossParts> {
    check_seg(logits, target)?;
    let (p0, p1) = softmax2(logits);
    let n = p0.len() as f64;
    let mut ce = 0.0;
    let mut dice = 0.0;
    for (c, p) in [&p0, &p1].into_iter().enumerate() {
        let mut inter = 0.0;
        let mut sp = 0.0;
        let mut st = 0.0;
        for (&pi, &m) in p.iter().zip(&target.mask) {
            let t = f64::from(u8::from(m == (c == 1)));
            inter += pi * t;
            sp += pi;
            st += t;
            if t > 0.0 {
                ce -= pi.max(f64::MIN_POSITIVE).ln();
            }
        }
        dice += 1.0 - (2.0 * inter + DICE_EPS) / (sp + st + DICE_EPS);
    }
    Ok(SegLossParts { dice: dice / 2.0, ce: ce / n })
}

/// `0.5 * softDice + 0.5 * CE` and its gradient with respect to the logits.
pub fn seg_loss<T: Scalar>(logits: &Tensor<T>, target: &SegTarget) -> Result<(f64, Tensor<T>)> {
    let parts = seg_loss_parts(logits, target)?;
    let (p0, p1) = softmax2(logits);
    let probs = [p0, p1];
    let n = probs[0].len();
    // d(loss)/d(p_c) for the Dice half.
    let mut gp = [vec![0.0; n], vec![0.0; n]];
    for c in 0..2 {
        let p = &probs[c];
        let mut inter = 0.0;
        let mut sp = 0.0;
        let mut st = 0.0;
        for (&pi, &m) in p.iter().zip(&target.mask) {
            let t = f64::from(u8::from(m == (c == 1)));
            inter += pi * t;
            sp += pi;
            st += t;
        }
        let num = 2.0 * inter + DICE_EPS;
        let den = sp + st + DICE_EPS;
        for (i, &m) in target.mask.iter().enumerate() {
            let t = f64::from(u8::from(m == (c == 1)));
            // 0.5 weight, 1/2 from averaging the classes.
            gp[c][i] = -0.25 * (2.0 * t / den - num / (den * den));
        }
    }
    let mut grad = Tensor::zeros(2, logits.h, logits.w);
    let inv_n = 1.0 / n as f64;
    for i in 0..n {
        let (q0, q1) = (probs[0][i], probs[1][i]);
        let dot = gp[0][i] * q0 + gp[1][i] * q1;
        let fg = f64::from(u8::from(target.mask[i]));
        let d0 = q0 * (gp[0][i] - dot) + 0.5 * (q0 - (1.0 - fg)) * inv_n;
        let d1 = q1 * (gp[1][i] - dot) + 0.5 * (q1 - fg) * inv_n;
        grad.data[i] = T::from_f64_lossy(d0);
        grad.data[n + i] = T::from_f64_lossy(d1);
    }
    Ok((parts.total(), grad))
}

/// Mean squared error and its gradient.
pub fn femur_loss<T: Scalar>(pred: &Tensor<T>, target: &[f64]) -> Result<(f64, Tensor<T>)> {
    if pred.data.len() != target.len() {
        return Err(NetError::ShapeMismatch(format!(
            "prediction has {} values, target {}",
            pred.data.len(),
            target.len()
        )));
    }
    let n = target.len() as f64;
    let mut sum = 0.0;
    let mut grad = Tensor::zeros(pred.c, pred.h, pred.w);
    for ((g, p), t) in grad.data.iter_mut().zip(&pred.data).zip(target) {
        let d = p.to_f64_lossy() - t;
        sum += d * d;
        *g = T::from_f64_lossy(2.0 * d / n);
    }
    Ok((sum / n, grad))
}
