use super::{
    cross_entropy, focal_loss, lovasz_softmax, proto_loss_batch, softmax, softmax_backward, supcon_loss, LossConfig,
    PrototypeBank,
};
use crate::error::{Error, Result};
use crate::model::ClassId;

/// One training batch: logits and optional projected embeddings of the same points.
#[derive(Debug, Clone, Copy)]
pub struct LossBatch<'a> {
    /// Row-major N×C.
    pub logits: &'a [f64],
    pub num_classes: usize,
    /// Labels `>= num_classes` are ignored.
    pub labels: &'a [ClassId],
    /// Row-major N×`embedding_dim`.
    pub embeddings: Option<&'a [f64]>,
    pub embedding_dim: usize,
    /// Rows that enter the supervised contrastive term (all when `None`).
    pub contrastive_rows: Option<&'a [usize]>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub ce: f64,
    pub lovasz: f64,
    pub proto: f64,
    pub supcon: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TotalLoss {
    pub loss: f64,
    pub parts: LossBreakdown,
    pub grad_logits: Vec<f64>,
    /// Empty when the batch carries no embeddings.
    pub grad_embeddings: Vec<f64>,
    /// Empty when no prototype bank is given.
    pub grad_bank: Vec<f64>,
}

/// `L = L_ce + L_lovasz + lambda_proto * L_proto + lambda_supcon * L_supcon`.
///
/// The cross-entropy term is averaged over the non-ignored points and is
/// replaced by focal loss when `cfg.use_focal` is set. The contrastive terms
/// are evaluated only when embeddings are present and their weight is
/// positive (the prototype term also needs a bank).
pub fn total_loss(batch: &LossBatch<'_>, bank: Option<&PrototypeBank>, cfg: &LossConfig) -> Result<TotalLoss> {
    let c = batch.num_classes;
    let n = batch.labels.len();
    if batch.logits.len() != n * c {
        return Err(Error::ShapeMismatch(format!("{} logits for {n} points x {c} classes", batch.logits.len())));
    }
    if let Some(emb) = batch.embeddings {
        if emb.len() != n * batch.embedding_dim {
            return Err(Error::ShapeMismatch(format!(
                "{} embedding values for {n} points x {} dims",
                emb.len(),
                batch.embedding_dim
            )));
        }
    }
    let valid: Vec<usize> = (0..n).filter(|&i| (batch.labels[i] as usize) < c).collect();

    let mut parts = LossBreakdown::default();
    let mut grad_logits = vec![0.0; n * c];
    if !valid.is_empty() {
        let inv = 1.0 / valid.len() as f64;
        for &i in &valid {
            let y = batch.labels[i];
            let row = &batch.logits[i * c..(i + 1) * c];
            let w = cfg.class_weight(y);
            let l = if cfg.use_focal {
                focal_loss(row, y as usize, cfg.focal_gamma, w)
            } else {
                cross_entropy(row, y as usize, w)
            };
            parts.ce += l.loss * inv;
            for (dst, g) in grad_logits[i * c..(i + 1) * c].iter_mut().zip(&l.grad) {
                *dst = g * inv;
            }
        }
    }

    let probs: Vec<f64> = batch.logits.chunks_exact(c).flat_map(softmax).collect();
    let (lovasz, grad_probs) = lovasz_softmax(&probs, c, batch.labels);
    parts.lovasz = lovasz;
    let lovasz_logits = softmax_backward(&probs, &grad_probs, c);
    for (dst, g) in grad_logits.iter_mut().zip(&lovasz_logits) {
        *dst += g;
    }

    let e = batch.embedding_dim;
    let mut grad_embeddings = Vec::new();
    let mut grad_bank = Vec::new();
    if let Some(emb) = batch.embeddings {
        grad_embeddings = vec![0.0; n * e];
        if let Some(bank) = bank {
            grad_bank = vec![0.0; bank.as_slice().len()];
            if cfg.lambda_proto > 0.0 && !valid.is_empty() {
                if bank.dim() != e || bank.num_classes() != c {
                    return Err(Error::ShapeMismatch(format!(
                        "prototype bank {}x{} for {c} classes x {e} dims",
                        bank.num_classes(),
                        bank.dim()
                    )));
                }
                let z: Vec<f64> = valid.iter().flat_map(|&i| emb[i * e..(i + 1) * e].iter().copied()).collect();
                let y: Vec<ClassId> = valid.iter().map(|&i| batch.labels[i]).collect();
                let p = proto_loss_batch(&z, &y, bank, cfg);
                parts.proto = p.loss;
                for (k, &i) in valid.iter().enumerate() {
                    for d in 0..e {
                        grad_embeddings[i * e + d] += cfg.lambda_proto * p.grad_z[k * e + d];
                    }
                }
                for (dst, g) in grad_bank.iter_mut().zip(&p.grad_bank) {
                    *dst += cfg.lambda_proto * g;
                }
            }
        }
        if cfg.lambda_supcon > 0.0 {
            let rows: Vec<usize> = match batch.contrastive_rows {
                Some(r) => r.iter().copied().filter(|&i| (batch.labels[i] as usize) < c).collect(),
                None => valid.clone(),
            };
            let z: Vec<f64> = rows.iter().flat_map(|&i| emb[i * e..(i + 1) * e].iter().copied()).collect();
            let y: Vec<ClassId> = rows.iter().map(|&i| batch.labels[i]).collect();
            let (l, g) = supcon_loss(&z, e, &y, cfg);
            parts.supcon = l;
            for (k, &i) in rows.iter().enumerate() {
                for d in 0..e {
                    grad_embeddings[i * e + d] += cfg.lambda_supcon * g[k * e + d];
                }
            }
        }
    }

    let loss = parts.ce + parts.lovasz + cfg.lambda_proto * parts.proto + cfg.lambda_supcon * parts.supcon;
    if !loss.is_finite() {
        return Err(Error::Training(format!("non-finite loss: {parts:?}")));
    }
    Ok(TotalLoss {
        loss,
        parts,
        grad_logits,
        grad_embeddings,
        grad_bank,
    })
}
