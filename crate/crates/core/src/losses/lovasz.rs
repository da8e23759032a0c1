//! Lovász-Softmax: the Lovász extension of the per-class Jaccard loss,
//! averaged over the classes present in the labels.

/// Lovász extension of the Jaccard loss at an error vector.
///
/// `fg[i]` marks ground-truth members of the class. Errors are visited in
/// descending order (ties by index); the returned gradient is w.r.t.
/// `errors` in their original order.
pub fn lovasz_extension(errors: &[f64], fg: &[bool]) -> (f64, Vec<f64>) {
    let n = errors.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| errors[b].total_cmp(&errors[a]).then(a.cmp(&b)));
    let gts = fg.iter().filter(|&&f| f).count() as f64;
    let mut grad = vec![0.0; n];
    let mut loss = 0.0;
    let mut cum_fg = 0.0;
    let mut cum_bg = 0.0;
    let mut prev_jaccard = 0.0;
    for &i in &order {
        if fg[i] {
            cum_fg += 1.0;
        } else {
            cum_bg += 1.0;
        }
        let intersection = gts - cum_fg;
        let union = gts + cum_bg;
        let jaccard = if union > 0.0 { 1.0 - intersection / union } else { 0.0 };
        let g = jaccard - prev_jaccard;
        prev_jaccard = jaccard;
        grad[i] = g;
        loss += g * errors[i];
    }
    (loss, grad)
}

/// Lovász-Softmax over a row-major N×C probability matrix.
///
/// Returns the loss and its gradient w.r.t. every probability. Classes that
/// do not occur in `labels` are skipped; labels `>= num_classes` are ignored
/// points.
pub fn lovasz_softmax(probs: &[f64], num_classes: usize, labels: &[u16]) -> (f64, Vec<f64>) {
    let n = labels.len();
    debug_assert_eq!(probs.len(), n * num_classes);
    let valid: Vec<usize> = (0..n).filter(|&i| (labels[i] as usize) < num_classes).collect();
    let mut present = vec![false; num_classes];
    for &i in &valid {
        present[labels[i] as usize] = true;
    }
    let classes: Vec<usize> = (0..num_classes).filter(|&c| present[c]).collect();
    let mut grad = vec![0.0; probs.len()];
    if classes.is_empty() {
        return (0.0, grad);
    }
    let scale = 1.0 / classes.len() as f64;
    let mut total = 0.0;
    for &c in &classes {
        let fg: Vec<bool> = valid.iter().map(|&i| labels[i] as usize == c).collect();
        let errors: Vec<f64> = valid
            .iter()
            .zip(&fg)
            .map(|(&i, &f)| {
                let p = probs[i * num_classes + c];
                if f {
                    1.0 - p
                } else {
                    p
                }
            })
            .collect();
        let (loss, g) = lovasz_extension(&errors, &fg);
        total += loss;
        for ((&i, &f), gi) in valid.iter().zip(&fg).zip(g) {
            let de_dp = if f { -1.0 } else { 1.0 };
            grad[i * num_classes + c] += scale * gi * de_dp;
        }
    }
    (total * scale, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{fd, softmax, softmax_backward};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_prediction_is_zero() {
        let labels = [0u16, 2, 1, 2];
        let mut probs = vec![0.0; 12];
        for (i, &l) in labels.iter().enumerate() {
            probs[i * 3 + l as usize] = 1.0;
        }
        assert_eq!(lovasz_softmax(&probs, 3, &labels).0, 0.0);
    }

    #[test]
    fn binary_errors_give_jaccard_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let n = rng.gen_range(1..30);
            let fg: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
            let errors: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 }).collect();
            // |FN ∪ FP| / |gt ∪ mispredicted|
            let wrong = errors.iter().filter(|&&e| e == 1.0).count() as f64;
            let union = (0..n).filter(|&i| fg[i] || errors[i] == 1.0).count() as f64;
            let expected = if union == 0.0 { 0.0 } else { wrong / union };
            let (got, _) = lovasz_extension(&errors, &fg);
            assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
        }
    }

    #[test]
    fn loss_is_in_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let (n, c) = (15, 4);
            let logits: Vec<f64> = (0..n * c).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let probs: Vec<f64> = logits.chunks(c).flat_map(softmax).collect();
            let labels: Vec<u16> = (0..n).map(|_| rng.gen_range(0..c as u16)).collect();
            let (l, _) = lovasz_softmax(&probs, c, &labels);
            assert!((0.0..=1.0).contains(&l));
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (n, c) = (20, 4);
        for _ in 0..100 {
            // continuous random logits make error ties a null event
            let logits: Vec<f64> = (0..n * c).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let labels: Vec<u16> = (0..n).map(|_| rng.gen_range(0..c as u16)).collect();
            let probs: Vec<f64> = logits.chunks(c).flat_map(softmax).collect();
            let (_, gp) = lovasz_softmax(&probs, c, &labels);
            let gz = softmax_backward(&probs, &gp, c);
            let f = |z: &[f64]| {
                let p: Vec<f64> = z.chunks(c).flat_map(softmax).collect();
                lovasz_softmax(&p, c, &labels).0
            };
            let num = fd::gradient(f, &logits, 1e-6);
            assert!(fd::rel_err(&gz, &num) <= 1e-4);
        }
    }
}
