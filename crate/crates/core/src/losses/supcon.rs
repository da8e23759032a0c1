use super::LossConfig;
use crate::model::ClassId;

const NORM_FLOOR: f64 = 1e-12;

/// Weighted supervised contrastive loss over a row-major B×`dim` batch.
///
/// Embeddings are L2-normalized internally. For anchor `i` with positives
/// `P(i)` (same label, `j != i`):
///
/// `L_i = -w_{y_i} / |P(i)| * sum_{p in P(i)} log( exp(u_i·u_p/tau) / sum_{a != i} exp(u_i·u_a/tau) )`
///
/// Anchors without positives contribute 0; the batch loss is the sum over
/// anchors divided by B. Returns the loss and its gradient w.r.t. the raw
/// embeddings.
pub fn supcon_loss(embeddings: &[f64], dim: usize, labels: &[ClassId], cfg: &LossConfig) -> (f64, Vec<f64>) {
    let b = labels.len();
    debug_assert_eq!(embeddings.len(), b * dim);
    let mut grad = vec![0.0; b * dim];
    if b < 2 {
        return (0.0, grad);
    }
    let norms: Vec<f64> = embeddings
        .chunks_exact(dim)
        .map(|z| z.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR))
        .collect();
    let units: Vec<f64> = embeddings
        .chunks_exact(dim)
        .zip(&norms)
        .flat_map(|(z, &n)| z.iter().map(move |v| v / n))
        .collect();
    let u = |i: usize| &units[i * dim..(i + 1) * dim];
    let inv_tau = 1.0 / cfg.tau;
    let inv_b = 1.0 / b as f64;

    let mut grad_u = vec![0.0; b * dim];
    let mut loss = 0.0;
    let mut sims = vec![0.0; b];
    for i in 0..b {
        let positives = (0..b).filter(|&j| j != i && labels[j] == labels[i]).count();
        if positives == 0 {
            continue;
        }
        let w = cfg.sample_weight(labels[i]) * inv_b;
        let ui = u(i);
        let mut max = f64::NEG_INFINITY;
        for (a, s) in sims.iter_mut().enumerate() {
            if a == i {
                continue;
            }
            *s = ui.iter().zip(u(a)).map(|(x, y)| x * y).sum::<f64>() * inv_tau;
            max = max.max(*s);
        }
        let sum_exp: f64 = (0..b).filter(|&a| a != i).map(|a| (sims[a] - max).exp()).sum();
        let lse = max + sum_exp.ln();
        let inv_p = 1.0 / positives as f64;
        let pos_mean: f64 = (0..b)
            .filter(|&j| j != i && labels[j] == labels[i])
            .map(|j| sims[j])
            .sum::<f64>()
            * inv_p;
        loss += w * (lse - pos_mean);
        for a in 0..b {
            if a == i {
                continue;
            }
            let q = (sims[a] - lse).exp();
            let target = if labels[a] == labels[i] { inv_p } else { 0.0 };
            let ds = w * (q - target) * inv_tau;
            if ds == 0.0 {
                continue;
            }
            for d in 0..dim {
                grad_u[i * dim + d] += ds * units[a * dim + d];
                grad_u[a * dim + d] += ds * units[i * dim + d];
            }
        }
    }
    // back through u = z / |z|
    for i in 0..b {
        let ui = u(i);
        let gi = &grad_u[i * dim..(i + 1) * dim];
        let dot: f64 = ui.iter().zip(gi).map(|(x, y)| x * y).sum();
        for d in 0..dim {
            grad[i * dim + d] = (gi[d] - ui[d] * dot) / norms[i];
        }
    }
    (loss, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::fd;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_pair_is_zero() {
        let cfg = LossConfig::default();
        let (l, g) = supcon_loss(&[0.3, 0.4, 0.3, 0.4], 2, &[8, 8], &cfg);
        assert!(l.abs() < 1e-15);
        assert!(g.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn distinct_labels_have_no_positives() {
        let cfg = LossConfig::default();
        let (l, g) = supcon_loss(&[1.0, 0.0, 0.0, 1.0, -1.0, 0.5], 2, &[1, 2, 3], &cfg);
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scale_invariant() {
        let cfg = LossConfig::default();
        let z = [0.3, -0.1, 0.9, 0.2, 0.5, 0.5, -0.4, 0.1, 0.2];
        let labels = [2, 2, 3];
        let scaled: Vec<f64> = z.iter().map(|v| v * 4.0).collect();
        let (a, _) = supcon_loss(&z, 3, &labels, &cfg);
        let (b, _) = supcon_loss(&scaled, 3, &labels, &cfg);
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let cfg = LossConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..100 {
            let (b, e) = (8, 4);
            let z: Vec<f64> = (0..b * e).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let labels: Vec<u16> = (0..b).map(|_| [0u16, 10, 12][rng.gen_range(0..3)]).collect();
            let (_, g) = supcon_loss(&z, e, &labels, &cfg);
            let num = fd::gradient(|x| supcon_loss(x, e, &labels, &cfg).0, &z, 1e-5);
            assert!(fd::rel_err(&g, &num) <= 1e-5, "{}", fd::rel_err(&g, &num));
        }
    }
}
