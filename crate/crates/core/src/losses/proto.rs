use rand::Rng;

use super::{log_softmax, LossConfig};
use crate::error::{Error, Result};
use crate::model::ClassId;

/// One learnable `dim`-dimensional prototype token per class, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    protos: Vec<f64>,
    num_classes: usize,
    dim: usize,
}

impl PrototypeBank {
    pub fn new(protos: Vec<f64>, num_classes: usize, dim: usize) -> Result<Self> {
        if num_classes == 0 || dim == 0 || protos.len() != num_classes * dim {
            return Err(Error::ShapeMismatch(format!(
                "{} prototype values for {num_classes} classes x {dim} dims",
                protos.len()
            )));
        }
        if protos.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("non-finite prototype entry".into()));
        }
        Ok(Self { protos, num_classes, dim })
    }

    pub fn zeros(num_classes: usize, dim: usize) -> Self {
        Self {
            protos: vec![0.0; num_classes * dim],
            num_classes,
            dim,
        }
    }

    /// Entries drawn uniformly from `[-scale, scale]`.
    pub fn random(num_classes: usize, dim: usize, scale: f64, rng: &mut impl Rng) -> Self {
        Self {
            protos: (0..num_classes * dim).map(|_| rng.gen_range(-scale..=scale)).collect(),
            num_classes,
            dim,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn prototype(&self, c: usize) -> &[f64] {
        &self.protos[c * self.dim..(c + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.protos
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.protos
    }
}

/// Weighted prototype loss of one embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtoLoss {
    pub loss: f64,
    pub grad_z: Vec<f64>,
    /// Gradient w.r.t. every prototype, row-major like the bank.
    pub grad_bank: Vec<f64>,
}

/// `-w log softmax_c(z·m_c / tau)` evaluated at `c = label`.
pub fn proto_loss(z: &[f64], label: usize, bank: &PrototypeBank, tau: f64, weight: f64) -> ProtoLoss {
    let (c, e) = (bank.num_classes, bank.dim);
    debug_assert_eq!(z.len(), e);
    let logits: Vec<f64> = (0..c)
        .map(|k| bank.prototype(k).iter().zip(z).map(|(m, v)| m * v).sum::<f64>() / tau)
        .collect();
    let logp = log_softmax(&logits);
    let loss = -weight * logp[label];
    let mut grad_z = vec![0.0; e];
    let mut grad_bank = vec![0.0; c * e];
    for k in 0..c {
        let dl = weight * (logp[k].exp() - if k == label { 1.0 } else { 0.0 }) / tau;
        let m = bank.prototype(k);
        for d in 0..e {
            grad_z[d] += dl * m[d];
            grad_bank[k * e + d] = dl * z[d];
        }
    }
    ProtoLoss { loss, grad_z, grad_bank }
}

/// Mean weighted prototype loss over a row-major B×e batch.
pub fn proto_loss_batch(embeddings: &[f64], labels: &[ClassId], bank: &PrototypeBank, cfg: &LossConfig) -> ProtoLoss {
    let e = bank.dim;
    let b = labels.len();
    let mut out = ProtoLoss {
        loss: 0.0,
        grad_z: vec![0.0; b * e],
        grad_bank: vec![0.0; bank.protos.len()],
    };
    if b == 0 {
        return out;
    }
    let inv = 1.0 / b as f64;
    for (i, &y) in labels.iter().enumerate() {
        let z = &embeddings[i * e..(i + 1) * e];
        let l = proto_loss(z, y as usize, bank, cfg.tau, cfg.sample_weight(y));
        out.loss += l.loss * inv;
        for (dst, g) in out.grad_z[i * e..(i + 1) * e].iter_mut().zip(&l.grad_z) {
            *dst = g * inv;
        }
        for (dst, g) in out.grad_bank.iter_mut().zip(&l.grad_bank) {
            *dst += g * inv;
        }
    }
    out
}
