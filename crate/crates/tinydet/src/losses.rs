//! Classification and regression losses: sigmoid focal loss, smooth-L1,
//! and the scale-aware margin variant that widens the decision band for
//! small boxes.
//!
//! Scalar kernels compute value and d(value)/d(logit) together; the
//! `*_sum` builders fold a whole batch of samples into one graph node so
//! the backward pass is a single fused scatter.

use crate::autodiff::{Real, Tensor};

pub const DEFAULT_GAMMA: f64 = 2.0;
pub const DEFAULT_BALANCE: f64 = 0.25;

/// Loss components of one training step. `total` is always the exact sum
/// of the three parts; the counts are the positive-sample normalizers of
/// the four loss terms (clamped to >= 1 when used).
#[derive(Clone, Debug, Default)]
pub struct LossReport {
    pub str_loss: f64,
    pub stc_loss: f64,
    pub fsm_loss: f64,
    pub total: f64,
    pub n_s1: usize,
    pub n_s2: usize,
    pub n_s3: usize,
    pub n_s4: usize,
}

fn softplus<S: Real>(x: S) -> S {
    // ln(1 + e^x) without overflow: max(x,0) + ln(1 + e^{ -|x| }).
    x.maxv(S::ZERO) + (S::ONE + (-x.abs()).exp()).ln()
}

fn pow<S: Real>(base: S, exponent: S) -> S {
    if exponent == S::ZERO {
        return S::ONE;
    }
    if base <= S::ZERO {
        return S::ZERO;
    }
    (exponent * base.ln()).exp()
}

/// Focal loss value and its derivative w.r.t. the raw logit, evaluated on
/// the margin-shifted logit `x - m` (positives) / `x + m` (negatives).
/// `balance` of `None` disables the class weighting.
fn focal_value_grad<S: Real>(
    logit: S,
    label: bool,
    margin: S,
    gamma: S,
    balance: Option<S>,
) -> (S, S) {
    let sign = if label { S::ONE } else { -S::ONE };
    // z is the "logit of the correct class" after the margin shift.
    let z = sign * logit - margin;
    let weight = match balance {
        Some(b) => {
            if label {
                b
            } else {
                S::ONE - b
            }
        }
        None => S::ONE,
    };
    // p_t = sigmoid(z); 1 - p_t = sigmoid(-z); -ln p_t = softplus(-z).
    let one_minus_pt = crate::autodiff::stable_sigmoid(-z);
    let p_t = S::ONE - one_minus_pt;
    let neg_log_pt = softplus(-z);
    let mod_factor = pow(one_minus_pt, gamma);
    let value = weight * mod_factor * neg_log_pt;
    // d value / d z, then chain through z = sign*logit - margin.
    let dz = -(weight * mod_factor * (gamma * p_t * neg_log_pt + one_minus_pt));
    (value, dz * sign)
}

/// Sigmoid focal loss of one sample. Numerically stable for |logit| up to
/// several hundred.
pub fn sigmoid_focal_loss<S: Real>(logit: S, label: bool, gamma: S, balance: Option<S>) -> S {
    focal_value_grad(logit, label, S::ZERO, gamma, balance).0
}

/// Scale-aware margin `m = alpha / sqrt(w * h)`.
pub fn scale_margin<S: Real>(w: S, h: S, alpha: S) -> S {
    assert!(
        w > S::ZERO && h > S::ZERO,
        "scale_margin requires positive box dimensions, got {w} x {h}"
    );
    alpha / (w * h).sqrt()
}

/// Focal loss on the margin-shifted logit: positives are pushed to clear
/// `m` more, negatives to clear `-m`. With `alpha = 0` this is exactly
/// [`sigmoid_focal_loss`].
pub fn margined_focal_loss<S: Real>(
    logit: S,
    label: bool,
    box_w: S,
    box_h: S,
    alpha: S,
    gamma: S,
    balance: Option<S>,
) -> S {
    let m = scale_margin(box_w, box_h, alpha);
    focal_value_grad(logit, label, m, gamma, balance).0
}

/// Smooth-L1 (Huber at 1): per coordinate `0.5 d^2` for |d| < 1, else
/// `|d| - 0.5`; summed over the coordinates.
pub fn smooth_l1<S: Real>(pred: &[S], target: &[S]) -> S {
    assert_eq!(pred.len(), target.len(), "smooth_l1 length mismatch");
    let half = S::from_f64(0.5);
    let mut acc = S::ZERO;
    for (&p, &t) in pred.iter().zip(target) {
        let d = (p - t).abs();
        acc += if d < S::ONE { half * d * d } else { d - half };
    }
    acc
}

fn smooth_l1_grad<S: Real>(d: S) -> S {
    if d.abs() < S::ONE {
        d
    } else if d > S::ZERO {
        S::ONE
    } else {
        -S::ONE
    }
}

/// Sum of focal losses over a vector of logits, one label and margin per
/// element; a single fused graph node.
pub fn focal_loss_sum<S: Real>(
    logits: &Tensor<S>,
    labels: &[bool],
    margins: &[S],
    gamma: S,
    balance: Option<S>,
) -> Tensor<S> {
    let n = logits.numel();
    assert_eq!(labels.len(), n, "focal_loss_sum: {} labels for {n} logits", labels.len());
    assert_eq!(margins.len(), n, "focal_loss_sum: {} margins for {n} logits", margins.len());
    let xs = logits.to_vec();
    let mut total = S::ZERO;
    let mut dx = vec![S::ZERO; n];
    for i in 0..n {
        let (v, g) = focal_value_grad(xs[i], labels[i], margins[i], gamma, balance);
        total += v;
        dx[i] = g;
    }
    Tensor::reduce_with_grad(logits, total, dx)
}

/// Sum of smooth-L1 losses of a flat prediction vector against constant
/// targets; a single fused graph node.
pub fn smooth_l1_sum<S: Real>(pred: &Tensor<S>, target: &[S]) -> Tensor<S> {
    let n = pred.numel();
    assert_eq!(target.len(), n, "smooth_l1_sum: {} targets for {n} predictions", target.len());
    let xs = pred.to_vec();
    let mut total = S::ZERO;
    let half = S::from_f64(0.5);
    let mut dx = vec![S::ZERO; n];
    for i in 0..n {
        let d = xs[i] - target[i];
        let a = d.abs();
        total += if a < S::ONE { half * d * d } else { a - half };
        dx[i] = smooth_l1_grad(d);
    }
    Tensor::reduce_with_grad(pred, total, dx)
}
