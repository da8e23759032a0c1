//! Training objectives with analytic gradients.
//!
//! | Function | Gradient w.r.t. |
//! |---|---|
//! | [`cross_entropy`] | logits |
//! | [`focal_loss`] | logits |
//! | [`lovasz_softmax`] | probabilities (chain with [`softmax_backward`]) |
//! | [`proto_loss`] | embedding and every prototype |
//! | [`supcon_loss`] | embeddings (normalized internally) |
//! | [`total_loss`] | logits, embeddings, prototypes |

mod ce;
mod lovasz;
mod proto;
mod supcon;
mod total;

use std::collections::BTreeSet;

pub use ce::{cross_entropy, focal_loss};
pub use lovasz::{lovasz_extension, lovasz_softmax};
pub use proto::{proto_loss, proto_loss_batch, PrototypeBank};
pub use supcon::supcon_loss;
pub use total::{total_loss, LossBatch, LossBreakdown, TotalLoss};

use crate::error::{Error, Result};
use crate::model::{ClassId, Taxonomy};

/// Probability floor applied before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub lambda_proto: f64,
    pub lambda_supcon: f64,
    /// Temperature shared by the prototype and contrastive terms.
    pub tau: f64,
    /// Sample weight of rare classes in the prototype and contrastive terms.
    pub rare_weight: f64,
    pub focal_gamma: f64,
    /// Replace the cross-entropy term by focal loss.
    pub use_focal: bool,
    pub rare_set: BTreeSet<ClassId>,
    /// Optional per-class weights on the cross-entropy / focal term.
    pub class_weights: Option<Vec<f64>>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::for_taxonomy(&Taxonomy::default())
    }
}

impl LossConfig {
    pub fn for_taxonomy(tax: &Taxonomy) -> Self {
        Self {
            lambda_proto: 0.1,
            lambda_supcon: 0.5,
            tau: 0.1,
            rare_weight: 5.0,
            focal_gamma: 2.0,
            use_focal: false,
            rare_set: tax.rare_set().clone(),
            class_weights: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.lambda_proto >= 0.0) || !(self.lambda_supcon >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !(self.rare_weight >= 1.0) {
            return Err(Error::Config(format!("rare_weight must be >= 1, got {}", self.rare_weight)));
        }
        if !(self.focal_gamma >= 0.0) {
            return Err(Error::Config(format!("focal_gamma must be >= 0, got {}", self.focal_gamma)));
        }
        Ok(())
    }

    /// `w_y`: `rare_weight` for rare classes, 1 otherwise.
    pub fn sample_weight(&self, label: ClassId) -> f64 {
        if self.rare_set.contains(&label) {
            self.rare_weight
        } else {
            1.0
        }
    }

    pub fn class_weight(&self, label: ClassId) -> f64 {
        self.class_weights
            .as_ref()
            .and_then(|w| w.get(label as usize).copied())
            .unwrap_or(1.0)
    }
}

/// Loss of a single row with its gradient w.r.t. the logits.
#[derive(Debug, Clone, PartialEq)]
pub struct RowLoss {
    pub loss: f64,
    pub grad: Vec<f64>,
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&v| v - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Chains a row-major gradient w.r.t. softmax probabilities back to logits.
pub fn softmax_backward(probs: &[f64], grad_probs: &[f64], num_classes: usize) -> Vec<f64> {
    let mut out = vec![0.0; probs.len()];
    for ((p, g), o) in probs
        .chunks_exact(num_classes)
        .zip(grad_probs.chunks_exact(num_classes))
        .zip(out.chunks_exact_mut(num_classes))
    {
        let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        for j in 0..num_classes {
            o[j] = p[j] * (g[j] - dot);
        }
    }
    out
}

#[cfg(test)]
pub(crate) mod fd {
    //! Central finite-difference oracle shared by the gradient tests.

    pub fn gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        let mut x = x.to_vec();
        (0..x.len())
            .map(|i| {
                let orig = x[i];
                x[i] = orig + h;
                let up = f(&x);
                x[i] = orig - h;
                let down = f(&x);
                x[i] = orig;
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    /// Max relative error with an absolute floor on the denominator.
    pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
        let scale = analytic
            .iter()
            .chain(numeric)
            .fold(0.0f64, |m, v| m.max(v.abs()))
            .max(1e-3);
        analytic
            .iter()
            .zip(numeric)
            .map(|(a, n)| (a - n).abs() / scale)
            .fold(0.0, f64::max)
    }
}
