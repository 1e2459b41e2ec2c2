//! Soft-Dice segmentation loss, latent-space distillation loss and their
//! weighted sum. Each function returns the loss value together with the
//! gradient with respect to its prediction-side argument.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Scalar, Tensor};

/// Smoothing added to every Dice denominator.
pub const DICE_EPS: f64 = 1e-6;

/// Weight of the distillation term.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda: 0.2 }
    }
}

impl LossWeights {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::Invalid(format!("lambda must be >= 0, got {lambda}")));
        }
        Ok(Self { lambda })
    }
}

/// One-hot encode binary masks into `[N, K, H, W]` (class 1 = foreground).
pub fn one_hot<T: Scalar>(masks: &[ArrayView2<'_, u8>], num_classes: usize) -> Tensor<T> {
    assert!(num_classes >= 2);
    let (h, w) = masks.first().map(|m| m.dim()).unwrap_or((0, 0));
    let mut t = Tensor::zeros([masks.len(), num_classes, h, w]);
    for (n, m) in masks.iter().enumerate() {
        for ((y, x), &v) in m.indexed_iter() {
            let k = (v as usize).min(num_classes - 1);
            t.set(n, k, y, x, T::one());
        }
    }
    t
}

fn check_same(a: [usize; 4], b: [usize; 4], what: &str) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::Shape(format!("{what}: {a:?} vs {b:?}")))
    }
}

/// `1 - (1/K) Σ_k 2 Σ_n y ŷ / (Σ_n y + Σ_n ŷ + ε)`, averaged over the batch.
pub fn soft_dice_loss<T: Scalar>(y: &Tensor<T>, yhat: &Tensor<T>) -> Result<T> {
    Ok(soft_dice_loss_grad(y, yhat)?.0)
}

/// Soft-Dice loss and `∂L/∂ŷ`.
pub fn soft_dice_loss_grad<T: Scalar>(y: &Tensor<T>, yhat: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    check_same(y.shape(), yhat.shape(), "soft dice")?;
    let [n, k, _, _] = y.shape();
    if n == 0 || k == 0 {
        return Err(Error::Shape("soft dice needs a non-empty batch".into()));
    }
    #[cfg(debug_assertions)]
    debug_check_normalised(yhat);
    let eps = T::of(DICE_EPS);
    let two = T::of(2.0);
    let norm = T::one() / T::of((n * k) as f64);
    let mut grad = Tensor::zeros(y.shape());
    let mut total = T::zero();
    for i in 0..n {
        let mut dice_sum = T::zero();
        for c in 0..k {
            let yc = y.channel(i, c);
            let pc = yhat.channel(i, c);
            let mut inter = T::zero();
            let mut sy = T::zero();
            let mut sp = T::zero();
            for (&a, &b) in yc.iter().zip(pc) {
                inter = inter + a * b;
                sy = sy + a;
                sp = sp + b;
            }
            let denom = sy + sp + eps;
            dice_sum = dice_sum + two * inter / denom;
            // ∂D/∂ŷ_p = 2 y_p / S − 2 I / S²; the loss carries −1/(K N)
            let base = two * inter / (denom * denom);
            for (g, &a) in grad.channel_mut(i, c).iter_mut().zip(yc) {
                *g = -norm * (two * a / denom - base);
            }
        }
        total = total + (T::one() - dice_sum / T::of(k as f64));
    }
    Ok((total / T::of(n as f64), grad))
}

#[cfg(debug_assertions)]
fn debug_check_normalised<T: Scalar>(yhat: &Tensor<T>) {
    let [n, k, h, w] = yhat.shape();
    let hw = h * w;
    for i in 0..n {
        let s = yhat.sample(i);
        for p in 0..hw {
            let total: f64 = (0..k).map(|c| s[c * hw + p].as_f64()).sum();
            debug_assert!((total - 1.0).abs() < 1e-3, "prediction not normalised: {total}");
        }
    }
}

/// `‖z − z′‖² / n_target`, summed over every tensor element.
pub fn kd_loss<T: Scalar>(z: &Tensor<T>, z_prime: &Tensor<T>, n_target: usize) -> Result<T> {
    Ok(kd_loss_grad(z, z_prime, n_target)?.0)
}

/// Distillation loss and `∂L/∂z` (the teacher side `z′` is held fixed).
pub fn kd_loss_grad<T: Scalar>(z: &Tensor<T>, z_prime: &Tensor<T>, n_target: usize) -> Result<(T, Tensor<T>)> {
    check_same(z.shape(), z_prime.shape(), "kd loss")?;
    if n_target == 0 {
        return Err(Error::Invalid("n_target must be >= 1".into()));
    }
    let inv = T::one() / T::of(n_target as f64);
    let two = T::of(2.0);
    let mut grad = Tensor::zeros(z.shape());
    let mut acc = T::zero();
    for ((g, &a), &b) in grad.data_mut().iter_mut().zip(z.data()).zip(z_prime.data()) {
        let d = a - b;
        acc = acc + d * d;
        *g = two * d * inv;
    }
    Ok((acc * inv, grad))
}

/// Per-term breakdown of the combined objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub seg: f64,
    pub kd: f64,
    pub total: f64,
}

/// `soft_dice + λ · kd`.
pub fn total_loss<T: Scalar>(
    y: &Tensor<T>,
    yhat: &Tensor<T>,
    z: &Tensor<T>,
    z_prime: &Tensor<T>,
    w: LossWeights,
) -> Result<T> {
    let seg = soft_dice_loss(y, yhat)?;
    let kd = kd_loss(z, z_prime, z.batch())?;
    Ok(seg + T::of(w.lambda) * kd)
}
