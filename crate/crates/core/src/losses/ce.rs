use super::{log_softmax, RowLoss, PROB_FLOOR};

/// `-w log p_y` with `p = softmax(logits)`; gradient `w (p - onehot(y))`.
pub fn cross_entropy(logits: &[f64], label: usize, weight: f64) -> RowLoss {
    let logp = log_softmax(logits);
    let loss = -logp[label].max(PROB_FLOOR.ln());
    let grad = logp
        .iter()
        .enumerate()
        .map(|(c, &lp)| weight * (lp.exp() - if c == label { 1.0 } else { 0.0 }))
        .collect();
    RowLoss {
        loss: weight * loss,
        grad,
    }
}

/// `-w (1 - p_y)^gamma log p_y`. With `gamma == 0` this is [`cross_entropy`].
pub fn focal_loss(logits: &[f64], label: usize, gamma: f64, weight: f64) -> RowLoss {
    if gamma == 0.0 {
        return cross_entropy(logits, label, weight);
    }
    let logp = log_softmax(logits);
    let probs: Vec<f64> = logp.iter().map(|v| v.exp()).collect();
    let p = probs[label];
    // 1 - p_y summed from the other classes keeps precision near p_y = 1
    let q: f64 = probs
        .iter()
        .enumerate()
        .filter(|&(c, _)| c != label)
        .map(|(_, v)| v)
        .sum();
    let log_p = logp[label].max(PROB_FLOOR.ln());
    let modulation = q.powf(gamma);
    let loss = -modulation * log_p;
    // dL/dp_y, then through dp_y/dz_j = p_y (delta_jy - p_j)
    let dmod = if q > 0.0 { gamma * q.powf(gamma - 1.0) } else { 0.0 };
    let dl_dp = dmod * log_p - modulation / p.max(PROB_FLOOR);
    let grad = probs
        .iter()
        .enumerate()
        .map(|(j, &pj)| weight * dl_dp * p * (if j == label { 1.0 } else { 0.0 } - pj))
        .collect();
    RowLoss {
        loss: weight * loss,
        grad,
    }
}
