//! Focal loss per attribute, KL heterogeneity penalty over group features and
//! the λ-weighted total objective.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::model::ForwardVars;
use crate::ops::{activation, mean_pool_spatial, Activation};
use crate::scalar::Scalar;
use crate::tape::{self, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight of positive labels; negatives get `1 - alpha`.
    pub alpha: f64,
    /// Focusing exponent.
    pub gamma: f64,
    /// Coefficient of the (subtracted) divergence penalty.
    pub eta: f64,
    /// Clamp floor for log and ratio arguments.
    pub eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            gamma: 2.0,
            eta: 0.0025,
            eps: 1e-8,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.gamma >= 0.0) || !(self.eta >= 0.0) || !(self.eps > 0.0) {
            return Err(Error::Config(format!(
                "need gamma >= 0, eta >= 0, eps > 0 (got {}, {}, {})",
                self.gamma, self.eta, self.eps
            )));
        }
        Ok(())
    }

    /// `alpha` for positive labels, `1 - alpha` for negatives.
    pub fn class_weight(&self, label: u8) -> f64 {
        if label == 1 {
            self.alpha
        } else {
            1.0 - self.alpha
        }
    }
}

/// `-α_t · (1 - p_t)^γ · ln(max(p_t, eps))`
pub fn focal_term<T: Scalar>(pt: T, alpha_t: T, gamma: T, eps: T) -> T {
    tape::focal_term(pt, alpha_t, gamma, eps)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FocalOutput<T> {
    /// Loss per attribute (batch mean when computed over a batch).
    pub per_task: Vec<T>,
    pub sum: T,
    /// Number of true-class probabilities that fell at or below `eps`.
    pub clamped: usize,
}

/// Focal loss of one sample: one term per attribute.
pub fn focal_loss<T: Scalar>(probs: &[[T; 2]], labels: &[u8], cfg: &LossConfig) -> Result<FocalOutput<T>> {
    focal_loss_batch(std::slice::from_ref(&probs.to_vec()), std::slice::from_ref(&labels.to_vec()), cfg)
}

/// Per-attribute focal loss averaged over the batch.
pub fn focal_loss_batch<T: Scalar>(
    probs: &[Vec<[T; 2]>],
    labels: &[Vec<u8>],
    cfg: &LossConfig,
) -> Result<FocalOutput<T>> {
    if probs.is_empty() || probs.len() != labels.len() {
        return shape_err(format!("{} predictions for {} label rows", probs.len(), labels.len()));
    }
    let k = probs[0].len();
    let eps = T::lit(cfg.eps);
    let gamma = T::lit(cfg.gamma);
    let mut per_task = vec![T::zero(); k];
    let mut clamped = 0;
    for (p_row, y_row) in probs.iter().zip(labels) {
        if p_row.len() != k || y_row.len() != k {
            return shape_err(format!("rows of {} predictions / {} labels, expected {k}", p_row.len(), y_row.len()));
        }
        for ((acc, p), &y) in per_task.iter_mut().zip(p_row).zip(y_row) {
            if y > 1 {
                return Err(Error::Validation(format!("label {y} is not binary")));
            }
            let pt = p[y as usize];
            if pt <= eps {
                clamped += 1;
            }
            *acc += focal_term(pt, T::lit(cfg.class_weight(y)), gamma, eps);
        }
    }
    let n = T::from_usize_lossy(probs.len());
    for v in &mut per_task {
        *v /= n;
    }
    if clamped > 0 {
        log::debug!("focal loss clamped {clamped} probabilities at {}", cfg.eps);
    }
    let sum = per_task.iter().copied().sum();
    Ok(FocalOutput {
        per_task,
        sum,
        clamped,
    })
}

/// `Σ x_n ln(x_n / max(y_n, eps))` in nats; zero-mass terms of `x` contribute 0.
pub fn kl_divergence<T: Scalar>(x: &[T], y: &[T], eps: T) -> Result<T> {
    tape::kl_value(x, y, eps)
}

/// Spatially pooled, softmax-normalised distribution of each group feature.
pub fn group_distributions<T: Scalar>(fused: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
    fused
        .iter()
        .map(|f| Ok(activation(Activation::Softmax, &mean_pool_spatial(f)?)))
        .collect()
}

/// `Σ_i Σ_{j≠i} KL(D_i ‖ D_j)` over the group distributions.
pub fn divergence_over_distributions<T: Scalar>(dists: &[Tensor<T>], eps: T) -> Result<T> {
    let mut total = T::zero();
    for (i, di) in dists.iter().enumerate() {
        for (j, dj) in dists.iter().enumerate() {
            if i != j {
                total += kl_divergence(di.data(), dj.data(), eps)?;
            }
        }
    }
    Ok(total)
}

/// Divergence penalty of one sample's fused group features. Zero for one group.
pub fn group_divergence_penalty<T: Scalar>(fused: &[Tensor<T>], eps: T) -> Result<T> {
    if fused.is_empty() {
        return shape_err("divergence penalty needs at least one group");
    }
    divergence_over_distributions(&group_distributions(fused)?, eps)
}

/// `Σ λ_i L_i − η · penalty`
pub fn total_loss<T: Scalar>(per_task: &[T], lambda: &[T], penalty: T, eta: T) -> Result<T> {
    if per_task.len() != lambda.len() {
        return shape_err(format!("{} losses for {} weights", per_task.len(), lambda.len()));
    }
    if let Some(bad) = lambda.iter().find(|&&l| l < T::zero()) {
        return Err(Error::Validation(format!("negative task weight {bad}")));
    }
    if eta < T::zero() {
        return Err(Error::Validation(format!("negative eta {eta}")));
    }
    let weighted: T = per_task.iter().zip(lambda).map(|(&l, &w)| l * w).sum();
    Ok(weighted - eta * penalty)
}

/// Loss nodes of one sample recorded on a tape.
#[derive(Debug, Clone)]
pub struct LossVars {
    /// `scale · (Σ λ_i L_i − η · penalty)`
    pub total: Var,
    pub focal: Vec<Var>,
    pub penalty: Option<Var>,
}

/// Records the weighted objective of one sample. `scale` is typically
/// `1 / batch_size` so gradients of a batch sum to the batch-mean objective.
pub fn loss_on_tape<T: Scalar>(
    tape: &mut Tape<'_, T>,
    vars: &ForwardVars,
    labels: &[u8],
    lambda: &[T],
    cfg: &LossConfig,
    scale: T,
) -> Result<LossVars> {
    let k = vars.probs.len();
    if labels.len() != k || lambda.len() != k {
        return shape_err(format!("{} labels and {} weights for {k} heads", labels.len(), lambda.len()));
    }
    if let Some(bad) = lambda.iter().find(|&&l| l < T::zero()) {
        return Err(Error::Validation(format!("negative task weight {bad}")));
    }
    let eps = T::lit(cfg.eps);
    let gamma = T::lit(cfg.gamma);
    let mut focal = Vec::with_capacity(k);
    let mut terms = Vec::with_capacity(k + 1);
    for ((&p, &y), &w) in vars.probs.iter().zip(labels).zip(lambda) {
        if y > 1 {
            return Err(Error::Validation(format!("label {y} is not binary")));
        }
        let l = tape.focal(p, y as usize, T::lit(cfg.class_weight(y)), gamma, eps)?;
        focal.push(l);
        terms.push((l, w * scale));
    }
    let penalty = if vars.pooled.len() > 1 {
        let dists: Vec<Var> = vars.pooled.iter().map(|&p| tape.softmax(p)).collect();
        let mut pair_terms = Vec::new();
        for (i, &di) in dists.iter().enumerate() {
            for (j, &dj) in dists.iter().enumerate() {
                if i != j {
                    pair_terms.push(tape.kl(di, dj, eps)?);
                }
            }
        }
        let p = tape.sum_of(&pair_terms)?;
        terms.push((p, -T::lit(cfg.eta) * scale));
        Some(p)
    } else {
        None
    };
    let total = tape.combine(terms)?;
    Ok(LossVars {
        total,
        focal,
        penalty,
    })
}
