//! Convex fusion of the local and global probability fields, preliminary
//! labels, and validation sweeps over the fusion weight.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::eval::ConfusionMatrix;
use crate::model::{argmax_labels, ClassId, FieldSource, Prediction, ProbabilityField, Provenance};

/// Tuned weights reported for the three benchmark datasets.
pub const ALPHA_TOWER: f64 = 0.50;
pub const ALPHA_ECLAIR: f64 = 0.30;
pub const ALPHA_TORONTO: f64 = 0.66;

/// Steps of the default sweep grid `{0, 1/50, ..., 1}`.
pub const DEFAULT_GRID_STEPS: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct FusionConfig {
    /// Weight of the local branch.
    pub alpha: f64,
    pub grid: Vec<f64>,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            alpha: ALPHA_TOWER,
            grid: alpha_grid(DEFAULT_GRID_STEPS),
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        if self.grid.is_empty() {
            return Err(Error::Config("empty alpha grid".into()));
        }
        self.grid.iter().try_for_each(|&a| check_alpha(a))
    }
}

/// `{i / steps : i = 0..=steps}`.
pub fn alpha_grid(steps: usize) -> Vec<f64> {
    let steps = steps.max(1);
    (0..=steps).map(|i| i as f64 / steps as f64).collect()
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    Ok(())
}

/// Weights `(a, b)` with `a + b == 1` exactly.
///
/// For `alpha >= 0.5`, `1 - alpha` is exact; below that the local weight is
/// recomputed as `1 - fl(1 - alpha)` (within one ulp of `alpha`). Either way
/// `fuse(l, g, alpha)` and `fuse(g, l, 1 - alpha)` use the same pair of
/// weights, so swapping the branches is bit-exact.
fn weights(alpha: f64) -> (f64, f64) {
    if alpha >= 0.5 {
        (alpha, 1.0 - alpha)
    } else {
        let b = 1.0 - alpha;
        (1.0 - b, b)
    }
}

/// `alpha * local + (1 - alpha) * global`, row by row. Entries on which the
/// two fields agree are copied, so `fuse(f, f, alpha) == f` exactly.
pub fn fuse(local: &ProbabilityField, global: &ProbabilityField, alpha: f64) -> Result<ProbabilityField> {
    check_alpha(alpha)?;
    if local.len() != global.len() || local.num_classes() != global.num_classes() {
        return Err(Error::ShapeMismatch(format!(
            "local field {}x{} vs global field {}x{}",
            local.len(),
            local.num_classes(),
            global.len(),
            global.num_classes()
        )));
    }
    let (a, b) = weights(alpha);
    let probs = local
        .as_slice()
        .iter()
        .zip(global.as_slice())
        .map(|(&l, &g)| if l == g { l } else { a * l + b * g })
        .collect();
    ProbabilityField::new(probs, local.num_classes(), FieldSource::Fused)
}

pub fn preliminary_labels(fused: &ProbabilityField) -> Result<Prediction> {
    let mut p = argmax_labels(fused)?;
    p.provenance = Provenance::FusedPreliminary;
    Ok(p)
}

/// One validation scene: both branch fields and the ground truth.
#[derive(Debug, Clone, Copy)]
pub struct FieldPair<'a> {
    pub local: &'a ProbabilityField,
    pub global: &'a ProbabilityField,
    pub labels: &'a [ClassId],
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlphaCurve {
    /// `(alpha, mIoU)` for every grid value, in grid order.
    pub points: Vec<(f64, f64)>,
    pub best_alpha: f64,
    pub best_miou: f64,
}

impl AlphaCurve {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("alpha\tmiou\n");
        for (a, m) in &self.points {
            let _ = writeln!(s, "{a:.4}\t{m:.6}");
        }
        s
    }
}

/// mIoU of the fused preliminary labels, pooled over scenes.
pub fn fused_miou(pairs: &[FieldPair<'_>], alpha: f64) -> Result<f64> {
    let c = pairs.first().map_or(0, |p| p.local.num_classes());
    let mut m = ConfusionMatrix::new(c);
    for p in pairs {
        let pred = preliminary_labels(&fuse(p.local, p.global, alpha)?)?;
        m.add(&pred.labels, p.labels)?;
    }
    Ok(m.report().miou)
}

/// Exhaustive sweep; ties go to the smaller alpha.
pub fn tune_alpha(pairs: &[FieldPair<'_>], grid: &[f64]) -> Result<AlphaCurve> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty alpha grid".into()));
    }
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no validation scenes".into()));
    }
    let mut sorted = grid.to_vec();
    sorted.iter().try_for_each(|&a| check_alpha(a))?;
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let mut points = Vec::with_capacity(sorted.len());
    let mut best = (sorted[0], f64::NEG_INFINITY);
    for &a in &sorted {
        let m = fused_miou(pairs, a)?;
        if m > best.1 {
            best = (a, m);
        }
        points.push((a, m));
    }
    Ok(AlphaCurve {
        points,
        best_alpha: best.0,
        best_miou: best.1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::argmax;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn field(rows: &[&[f64]], source: FieldSource) -> ProbabilityField {
        ProbabilityField::new(rows.concat(), rows[0].len(), source).unwrap()
    }

    fn random_field(n: usize, c: usize, rng: &mut ChaCha8Rng, source: FieldSource) -> ProbabilityField {
        let logits: Vec<f64> = (0..n * c).map(|_| rng.gen_range(-3.0..3.0)).collect();
        ProbabilityField::from_logits(&logits, c, source).unwrap()
    }

    #[test]
    fn endpoints_and_midpoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let l = random_field(50, 4, &mut rng, FieldSource::Local);
        let g = random_field(50, 4, &mut rng, FieldSource::Global);
        assert_eq!(fuse(&l, &g, 1.0).unwrap().as_slice(), l.as_slice());
        assert_eq!(fuse(&l, &g, 0.0).unwrap().as_slice(), g.as_slice());
        let f = fuse(
            &field(&[&[0.8, 0.2]], FieldSource::Local),
            &field(&[&[0.2, 0.8]], FieldSource::Global),
            0.5,
        )
        .unwrap();
        assert_eq!(f.row(0), &[0.5, 0.5]);
        assert_eq!(f.source(), FieldSource::Fused);
    }

    #[test]
    fn eclair_weight() {
        let f = fuse(
            &field(&[&[1.0, 0.0]], FieldSource::Local),
            &field(&[&[0.0, 1.0]], FieldSource::Global),
            ALPHA_ECLAIR,
        )
        .unwrap();
        assert!((f.row(0)[0] - 0.3).abs() < 1e-15 && (f.row(0)[1] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn shape_and_alpha_errors() {
        let a = field(&[&[1.0, 0.0]], FieldSource::Local);
        let b = field(&[&[1.0, 0.0, 0.0]], FieldSource::Global);
        assert!(matches!(fuse(&a, &b, 0.5), Err(Error::ShapeMismatch(_))));
        assert!(fuse(&a, &a, 1.5).is_err());
        assert!(tune_alpha(&[FieldPair { local: &a, global: &a, labels: &[0] }], &[]).is_err());
    }

    #[test]
    fn properties_hold_on_random_fields() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let l = random_field(40, 5, &mut rng, FieldSource::Local);
            let g = random_field(40, 5, &mut rng, FieldSource::Global);
            let alpha = rng.gen_range(0.0..=1.0);
            let f = fuse(&l, &g, alpha).unwrap();
            for row in f.rows() {
                assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            }
            assert_eq!(fuse(&l, &l, alpha).unwrap().as_slice(), l.as_slice());
            let swapped = fuse(&g, &l, 1.0 - alpha).unwrap();
            assert_eq!(
                preliminary_labels(&f).unwrap().labels,
                preliminary_labels(&swapped).unwrap().labels
            );
            assert_eq!(f.as_slice(), swapped.as_slice());
        }
    }

    #[test]
    fn local_better_everywhere_picks_one() {
        let l = field(&[&[0.51, 0.49], &[0.51, 0.49]], FieldSource::Local);
        let g = field(&[&[0.0, 1.0], &[0.0, 1.0]], FieldSource::Global);
        let curve = tune_alpha(&[FieldPair { local: &l, global: &g, labels: &[0, 0] }], &alpha_grid(50)).unwrap();
        assert_eq!(curve.best_alpha, 1.0);
        assert_eq!(curve.points.len(), 51);
    }

    #[test]
    fn identical_branches_pick_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = random_field(30, 3, &mut rng, FieldSource::Local);
        let labels: Vec<ClassId> = (0..30).map(|_| rng.gen_range(0..3)).collect();
        let curve = tune_alpha(&[FieldPair { local: &f, global: &f, labels: &labels }], &alpha_grid(50)).unwrap();
        assert_eq!(curve.best_alpha, 0.0);
        assert!(curve.points.iter().all(|&(_, m)| m == curve.points[0].1));
    }

    #[test]
    fn complementary_errors_prefer_interior_alpha() {
        // classes: 0 wire, 1 tower, 2 ground. Local branch is confidently
        // wrong on towers, global on wires; each is mildly right elsewhere.
        let labels: Vec<ClassId> = [vec![0; 20], vec![1; 20], vec![2; 60]].concat();
        let row = |hot: usize, p: f64| {
            let mut r = vec![(1.0 - p) / 2.0; 3];
            r[hot] = p;
            r
        };
        let mut l = Vec::new();
        let mut g = Vec::new();
        for &y in &labels {
            let y = y as usize;
            let (lr, gr) = match y {
                0 => (row(0, 0.7), row(2, 0.6)),
                1 => (row(2, 0.6), row(1, 0.7)),
                _ => (row(2, 0.7), row(2, 0.7)),
            };
            l.extend(lr);
            g.extend(gr);
        }
        let l = ProbabilityField::new(l, 3, FieldSource::Local).unwrap();
        let g = ProbabilityField::new(g, 3, FieldSource::Global).unwrap();
        let pairs = [FieldPair { local: &l, global: &g, labels: &labels }];
        let curve = tune_alpha(&pairs, &alpha_grid(50)).unwrap();
        let at = |a: f64| curve.points.iter().find(|p| p.0 == a).unwrap().1;
        assert!(curve.best_alpha > 0.0 && curve.best_alpha < 1.0);
        assert!(curve.best_miou > at(0.0) && curve.best_miou > at(1.0));
        // the curve agrees with a direct evaluation at every grid point
        for &(a, m) in &curve.points {
            let fused = fuse(&l, &g, a).unwrap();
            let pred: Vec<ClassId> = fused.rows().map(|r| argmax(r) as ClassId).collect();
            let direct = ConfusionMatrix::from_labels(&pred, &labels, 3).unwrap().report().miou;
            assert_eq!(m, direct);
        }
    }
}
