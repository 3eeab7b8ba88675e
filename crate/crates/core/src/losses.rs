//! Spatially weighted cross-entropy, the squared-denominator dice
//! coefficient, and the composite training objectives.
//!
//! Losses act on softmax probabilities shaped `(n, 2, h, w)`; targets are
//! class indices and weight maps are laid out as `(n, h, w)`. Every loss has
//! a `_grad` twin returning the gradient with respect to the probabilities.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::DenseFcn;
use crate::preprocess::Target;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Probabilities are clipped below at this value before the logarithm.
pub const PROB_CLIP: f64 = 1e-7;
pub const DICE_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda: f64,
    pub gamma: f64,
    pub l2: f64,
}

impl LossWeights {
    pub fn liver() -> Self {
        Self {
            lambda: 1.0,
            gamma: 0.0,
            l2: 1e-6,
        }
    }

    pub fn tumor() -> Self {
        Self {
            lambda: 0.5,
            gamma: 0.5,
            l2: 1e-6,
        }
    }

    pub fn for_target(target: Target) -> Self {
        match target {
            Target::Liver => Self::liver(),
            Target::Tumor => Self::tumor(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda", self.lambda),
            ("gamma", self.gamma),
            ("l2", self.l2),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidSpec(format!(
                    "loss weight {name} = {v} must be >= 0"
                )));
            }
        }
        Ok(())
    }
}

fn check_layout<T: Scalar>(probs: &Tensor<T>, target: &[u8], wmap: &[T]) -> Result<usize> {
    let [n, c, h, w] = probs.shape();
    if c != 2 {
        return Err(Error::ShapeMismatch(format!(
            "expected 2 class channels, got {c}"
        )));
    }
    let len = n * h * w;
    if target.len() != len || wmap.len() != len {
        return Err(Error::ShapeMismatch(format!(
            "probabilities cover {len} pixels, target {} and weights {}",
            target.len(),
            wmap.len()
        )));
    }
    if !probs.is_finite() {
        return Err(Error::NonfiniteInput("non-finite probability".into()));
    }
    if let Some(&bad) = target.iter().find(|&&t| t > 1) {
        return Err(Error::ShapeMismatch(format!(
            "target class {bad} outside a two-class head"
        )));
    }
    Ok(h * w)
}

/// `Σ w·(−log p_target) / Σ w`, with the gradient w.r.t. the probabilities.
pub fn weighted_cross_entropy_grad<T: Scalar>(
    probs: &Tensor<T>,
    target: &[u8],
    wmap: &[T],
) -> Result<(T, Tensor<T>)> {
    let plane = check_layout(probs, target, wmap)?;
    let clip = T::of(PROB_CLIP);
    let wsum: T = wmap.iter().copied().sum();
    if !(wsum > T::zero()) {
        return Err(Error::NonfiniteInput(
            "weight map must have a positive sum".into(),
        ));
    }
    let mut loss = T::zero();
    let mut grad = Tensor::zeros(probs.shape());
    for (i, (&t, &w)) in target.iter().zip(wmap).enumerate() {
        let (s, px) = (i / plane, i % plane);
        let idx = (s * 2 + t as usize) * plane + px;
        let p = probs.data()[idx];
        if p > clip {
            loss += -w * p.ln();
            grad.data_mut()[idx] = -w / (p * wsum);
        } else {
            loss += -w * clip.ln();
        }
    }
    Ok((loss / wsum, grad))
}

pub fn weighted_cross_entropy<T: Scalar>(
    probs: &Tensor<T>,
    target: &[u8],
    wmap: &[T],
) -> Result<T> {
    Ok(weighted_cross_entropy_grad(probs, target, wmap)?.0)
}

/// `(2 Σ p g + ε) / (Σ p² + Σ g² + ε)` and its gradient w.r.t. `p`.
pub fn dice_coefficient_grad<T: Scalar>(p: &[T], g: &[bool], eps: f64) -> Result<(T, Vec<T>)> {
    if p.len() != g.len() {
        return Err(Error::ShapeMismatch(format!(
            "dice inputs {} vs {}",
            p.len(),
            g.len()
        )));
    }
    let eps = T::of(eps);
    let two = T::of(2.0);
    let (mut inter, mut pp, mut gg) = (T::zero(), T::zero(), T::zero());
    for (&pi, &gi) in p.iter().zip(g) {
        pp += pi * pi;
        if gi {
            inter += pi;
            gg += T::one();
        }
    }
    let num = two * inter + eps;
    let den = pp + gg + eps;
    if den == T::zero() {
        return Err(Error::NonfiniteInput(
            "dice of empty inputs needs a positive epsilon".into(),
        ));
    }
    let d = num / den;
    let grad = p
        .iter()
        .zip(g)
        .map(|(&pi, &gi)| {
            let dn = if gi { two } else { T::zero() };
            (dn * den - num * two * pi) / (den * den)
        })
        .collect();
    Ok((d, grad))
}

pub fn dice_coefficient<T: Scalar>(p: &[T], g: &[bool], eps: f64) -> Result<T> {
    Ok(dice_coefficient_grad(p, g, eps)?.0)
}

/// Foreground probabilities of the whole batch, flattened.
pub fn foreground<T: Scalar>(probs: &Tensor<T>) -> Vec<T> {
    (0..probs.n())
        .flat_map(|s| probs.plane(s, 1).to_vec())
        .collect()
}

/// Individual terms of a composite loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms<T> {
    pub total: T,
    pub wce: T,
    /// Batch soft dice of the foreground class.
    pub dice: T,
    pub l2: T,
}

/// Composite objective for `target` and the gradient w.r.t. `probs`.
/// The L2 gradient is not included; apply it with
/// [`DenseFcn::add_l2_grad`].
pub fn total_loss_grad<T: Scalar>(
    objective: Target,
    probs: &Tensor<T>,
    target: &[u8],
    wmap: &[T],
    model: &DenseFcn<T>,
    weights: &LossWeights,
) -> Result<(LossTerms<T>, Tensor<T>)> {
    weights.validate()?;
    let (wce, mut grad) = weighted_cross_entropy_grad(probs, target, wmap)?;
    let fg = foreground(probs);
    let truth: Vec<bool> = target.iter().map(|&t| t == 1).collect();
    let (dice, dgrad) = dice_coefficient_grad(&fg, &truth, DICE_EPS)?;
    let l2 = T::of(weights.l2) * model.conv_weight_sq_norm();
    let total = match objective {
        Target::Liver => wce + l2,
        Target::Tumor => {
            let (lambda, gamma) = (T::of(weights.lambda), T::of(weights.gamma));
            grad = grad.map(|v| v * lambda);
            let plane = probs.plane_len();
            for (i, &dg) in dgrad.iter().enumerate() {
                let (s, px) = (i / plane, i % plane);
                grad.plane_mut(s, 1)[px] -= gamma * dg;
            }
            lambda * wce + gamma * (T::one() - dice) + l2
        }
    };
    if !total.is_finite() {
        return Err(Error::NonfiniteInput(format!("loss evaluated to {total}")));
    }
    Ok((
        LossTerms {
            total,
            wce,
            dice,
            l2,
        },
        grad,
    ))
}

/// Weighted cross-entropy plus L2 on convolution weights.
pub fn liver_total_loss<T: Scalar>(
    probs: &Tensor<T>,
    target: &[u8],
    wmap: &[T],
    model: &DenseFcn<T>,
    weights: &LossWeights,
) -> Result<T> {
    Ok(
        total_loss_grad(Target::Liver, probs, target, wmap, model, weights)?
            .0
            .total,
    )
}

/// `λ·WCE + γ·(1 − dice) + L2`.
pub fn tumor_total_loss<T: Scalar>(
    probs: &Tensor<T>,
    target: &[u8],
    wmap: &[T],
    model: &DenseFcn<T>,
    weights: &LossWeights,
) -> Result<T> {
    Ok(
        total_loss_grad(Target::Tumor, probs, target, wmap, model, weights)?
            .0
            .total,
    )
}
