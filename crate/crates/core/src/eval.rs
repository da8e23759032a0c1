//! Segmentation metrics and dataset statistics.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{read_scene, SceneManifest, Split};
use crate::model::{class, ClassId, LabeledCloud, Prediction, Taxonomy};

/// Ground-truth-major C×C counts.
///
/// Points whose ground truth is the ignore label (or any ID `>= C`) are not
/// evaluated. A valid ground-truth point predicted as ignore has no column
/// to land in; it is kept in `missed` and counts as a false negative of its
/// ground-truth class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
    missed: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
            missed: vec![0; num_classes],
        }
    }

    pub fn from_labels(pred: &[ClassId], gt: &[ClassId], num_classes: usize) -> Result<Self> {
        let mut m = Self::new(num_classes);
        m.add(pred, gt)?;
        Ok(m)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn add(&mut self, pred: &[ClassId], gt: &[ClassId]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} predictions for {} ground-truth labels",
                pred.len(),
                gt.len()
            )));
        }
        let c = self.num_classes;
        for (&p, &g) in pred.iter().zip(gt) {
            let (p, g) = (p as usize, g as usize);
            if g >= c {
                continue;
            }
            if p >= c {
                self.missed[g] += 1;
            } else {
                self.counts[g * c + p] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::ShapeMismatch("confusion matrices differ in class count".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        for (a, b) in self.missed.iter_mut().zip(&other.missed) {
            *a += b;
        }
        Ok(())
    }

    pub fn get(&self, gt: ClassId, pred: ClassId) -> u64 {
        self.counts[gt as usize * self.num_classes + pred as usize]
    }

    pub fn missed(&self, gt: ClassId) -> u64 {
        self.missed[gt as usize]
    }

    /// Number of evaluated points.
    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.missed.iter().sum::<u64>()
    }

    /// `TP / (TP + FP + FN)` per class; `None` where the union is empty.
    pub fn iou(&self) -> Vec<Option<f64>> {
        let c = self.num_classes;
        (0..c)
            .map(|k| {
                let tp = self.counts[k * c + k];
                let row: u64 = self.counts[k * c..(k + 1) * c].iter().sum::<u64>() + self.missed[k];
                let col: u64 = (0..c).map(|g| self.counts[g * c + k]).sum();
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    pub fn report(&self) -> IouReport {
        let per_class = self.iou();
        let included: Vec<f64> = per_class.iter().flatten().copied().collect();
        let miou = if included.is_empty() {
            0.0
        } else {
            included.iter().sum::<f64>() / included.len() as f64
        };
        IouReport {
            per_class,
            miou,
            points: self.total(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IouReport {
    /// `None` for classes absent from both prediction and ground truth.
    pub per_class: Vec<Option<f64>>,
    /// Mean over the classes with a non-empty union.
    pub miou: f64,
    pub points: u64,
}

impl IouReport {
    pub fn included(&self) -> usize {
        self.per_class.iter().flatten().count()
    }

    /// `class_id  name  iou` lines for the included classes, then `mIoU`.
    pub fn to_tsv(&self, tax: &Taxonomy, label: &str) -> String {
        let mut s = String::new();
        for (c, iou) in self.per_class.iter().enumerate() {
            if let Some(v) = iou {
                let _ = writeln!(s, "{label}\t{c}\t{}\t{v:.6}", tax.name(c as ClassId));
            }
        }
        let _ = writeln!(s, "{label}\tmIoU\t{}\t{:.6}", self.included(), self.miou);
        s
    }

    /// Aligned table of the included classes.
    pub fn to_table(&self, tax: &Taxonomy, title: &str) -> String {
        let mut s = format!("{title}\n");
        for (c, iou) in self.per_class.iter().enumerate() {
            if let Some(v) = iou {
                let _ = writeln!(s, "  {:>2} {:<24} {v:.4}", c, tax.name(c as ClassId));
            }
        }
        let _ = writeln!(s, "  mIoU over {} classes: {:.4}", self.included(), self.miou);
        s
    }
}

/// Full-taxonomy IoU of `pred` against `gt`.
pub fn iou_per_class(pred: &Prediction, gt: &[ClassId], tax: &Taxonomy) -> Result<IouReport> {
    Ok(ConfusionMatrix::from_labels(&pred.labels, gt, tax.num_classes())?.report())
}

/// IoU under the primary protocol: both sides go through the taxonomy's
/// primary map, and classes outside it are not evaluated.
pub fn primary_iou(pred: &Prediction, gt: &[ClassId], tax: &Taxonomy) -> Result<IouReport> {
    Ok(primary_confusion(pred, gt, tax)?.report())
}

pub fn primary_confusion(pred: &Prediction, gt: &[ClassId], tax: &Taxonomy) -> Result<ConfusionMatrix> {
    let p: Vec<ClassId> = pred.labels.iter().map(|&l| tax.primary_of(l)).collect();
    let g: Vec<ClassId> = gt.iter().map(|&l| tax.primary_of(l)).collect();
    ConfusionMatrix::from_labels(&p, &g, tax.num_classes())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassGroup {
    pub name: String,
    pub classes: BTreeSet<ClassId>,
}

impl ClassGroup {
    pub fn new(name: impl Into<String>, classes: impl IntoIterator<Item = ClassId>) -> Self {
        Self {
            name: name.into(),
            classes: classes.into_iter().collect(),
        }
    }
}

pub const GROUP_GROUND_VEGETATION: &str = "ground+vegetation";
pub const GROUP_CRITICAL_ATTACHMENTS: &str = "critical attachments";

/// Semantic groups of the default taxonomy. The last group collects every
/// class not named by the others.
pub fn default_groups(tax: &Taxonomy) -> Vec<ClassGroup> {
    use class::*;
    let mut groups = vec![
        ClassGroup::new(GROUP_GROUND_VEGETATION, [GROUND, LOW_VEGETATION, HIGH_VEGETATION]),
        ClassGroup::new("power-line backbone", [CONDUCTOR, TOWER, GROUND_WIRE]),
        ClassGroup::new(
            GROUP_CRITICAL_ATTACHMENTS,
            [JUMPER, STRAIN_INSULATOR, V_STRING_INSULATOR, LINE_INSULATOR, SPACER],
        ),
        ClassGroup::new("optical cable", [OPTICAL_CABLE]),
        ClassGroup::new("distribution", [DISTRIBUTION_TOWER, DISTRIBUTION_CONDUCTOR]),
    ];
    let named: BTreeSet<ClassId> = groups.iter().flat_map(|g| g.classes.iter().copied()).collect();
    let rest = (0..tax.num_classes() as ClassId).filter(|c| !named.contains(c));
    groups.push(ClassGroup::new("other context", rest));
    groups
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupShare {
    pub name: String,
    pub count: u64,
    /// Percentage of all labeled points.
    pub percent: f64,
}

/// Per-class point counts over labeled scenes (ignored labels skipped).
pub fn class_counts<'a>(labels: impl IntoIterator<Item = &'a [ClassId]>, num_classes: usize) -> Vec<u64> {
    let mut counts = vec![0u64; num_classes];
    for scene in labels {
        for &l in scene {
            if let Some(c) = counts.get_mut(l as usize) {
                *c += 1;
            }
        }
    }
    counts
}

pub fn shares_from_counts(counts: &[u64], groups: &[ClassGroup]) -> Vec<GroupShare> {
    let total: u64 = counts.iter().sum();
    groups
        .iter()
        .map(|g| {
            let count: u64 = g.classes.iter().filter_map(|&c| counts.get(c as usize)).sum();
            GroupShare {
                name: g.name.clone(),
                count,
                percent: if total == 0 {
                    0.0
                } else {
                    100.0 * count as f64 / total as f64
                },
            }
        })
        .collect()
}

pub fn class_shares(scenes: &[LabeledCloud], groups: &[ClassGroup], num_classes: usize) -> Result<Vec<GroupShare>> {
    let labels = scenes.iter().map(|s| s.require_labels()).collect::<Result<Vec<_>>>()?;
    Ok(shares_from_counts(&class_counts(labels, num_classes), groups))
}

/// `value` rounded to `digits` significant digits, as text.
pub fn format_significant(value: f64, digits: usize) -> String {
    if value == 0.0 || !value.is_finite() {
        return format!("{value}");
    }
    let magnitude = value.abs().log10().floor() as i32;
    let decimals = (digits as i32 - 1 - magnitude).max(0) as usize;
    format!("{value:.decimals$}")
}

pub fn shares_tsv(shares: &[GroupShare]) -> String {
    let mut s = String::from("group\tpoints\tpercent\n");
    for g in shares {
        let _ = writeln!(s, "{}\t{}\t{}", g.name, g.count, format_significant(g.percent, 4));
    }
    s
}

/// Minimum-area rectangle around a planar point set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientedBox {
    /// Longer side, meters.
    pub length: f64,
    pub width: f64,
    pub area: f64,
    /// Direction of the longer side, radians.
    pub angle: f64,
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Counter-clockwise convex hull without collinear vertices (monotone chain).
pub fn convex_hull(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<[f64; 2]> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &[f64; 2]>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            a[0] * b[1] - b[0] * a[1]
        })
        .sum::<f64>()
        .abs()
        / 2.0
}

/// Minimum-area enclosing rectangle. One side of the optimum is collinear
/// with a hull edge, so every edge direction is tried (the rotating-calipers
/// candidate set). Collinear input yields a zero-width box along the line.
pub fn min_area_box(points: &[[f64; 2]]) -> Option<OrientedBox> {
    let hull = convex_hull(points);
    if hull.is_empty() {
        return None;
    }
    if hull.len() < 3 {
        let (a, b) = (hull[0], *hull.last().unwrap());
        let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
        return Some(OrientedBox {
            length: dx.hypot(dy),
            width: 0.0,
            area: 0.0,
            angle: dy.atan2(dx),
        });
    }
    let mut best: Option<OrientedBox> = None;
    for i in 0..hull.len() {
        let (a, b) = (hull[i], hull[(i + 1) % hull.len()]);
        let len = (b[0] - a[0]).hypot(b[1] - a[1]);
        if len == 0.0 {
            continue;
        }
        let u = [(b[0] - a[0]) / len, (b[1] - a[1]) / len];
        let v = [-u[1], u[0]];
        let (mut lo_u, mut hi_u, mut lo_v, mut hi_v) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for p in &hull {
            let pu = p[0] * u[0] + p[1] * u[1];
            let pv = p[0] * v[0] + p[1] * v[1];
            lo_u = lo_u.min(pu);
            hi_u = hi_u.max(pu);
            lo_v = lo_v.min(pv);
            hi_v = hi_v.max(pv);
        }
        let (su, sv) = (hi_u - lo_u, hi_v - lo_v);
        let area = su * sv;
        if best.map_or(true, |b| area < b.area) {
            let (length, width, angle) = if su >= sv {
                (su, sv, u[1].atan2(u[0]))
            } else {
                (sv, su, v[1].atan2(v[0]))
            };
            best = Some(OrientedBox {
                length,
                width,
                area,
                angle,
            });
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneStats {
    pub scene_id: String,
    pub point_count: usize,
    /// Major-axis length of the XY oriented bounding box, meters.
    pub length: f64,
    /// XY oriented-bounding-box area, square meters.
    pub footprint: f64,
    /// Points per square meter; `None` for collinear scenes.
    pub density: Option<f64>,
    pub class_counts: Vec<u64>,
}

impl SceneStats {
    pub fn occurs(&self, c: ClassId) -> bool {
        self.class_counts.get(c as usize).is_some_and(|&n| n > 0)
    }
}

pub fn scene_stats(cloud: &LabeledCloud, num_classes: usize) -> Result<SceneStats> {
    let xy: Vec<[f64; 2]> = cloud.coords().iter().map(|p| [p[0], p[1]]).collect();
    let obb = min_area_box(&xy).ok_or_else(|| Error::InvalidData("empty scene".into()))?;
    let class_counts = match cloud.labels() {
        Some(l) => class_counts([l], num_classes),
        None => vec![0; num_classes],
    };
    Ok(SceneStats {
        scene_id: cloud.scene_id.clone(),
        point_count: cloud.len(),
        length: obb.length,
        footprint: obb.area,
        density: (obb.area > 0.0).then(|| cloud.len() as f64 / obb.area),
        class_counts,
    })
}

/// Nearest-rank percentile: the `ceil(p/100 * n)`-th smallest value.
pub fn percentile_nearest_rank(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() || !(0.0..=100.0).contains(&p) {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
    Some(v[rank.min(v.len()) - 1])
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitRow {
    /// `None` for the all-splits row.
    pub split: Option<Split>,
    pub scenes: usize,
    pub points: u64,
    pub median_points: f64,
    pub p90_points: f64,
    pub median_length: f64,
    pub p90_length: f64,
    /// Over scenes with a defined density.
    pub median_density: Option<f64>,
}

pub fn summarize(stats: &[(Split, SceneStats)]) -> Vec<SplitRow> {
    let row = |split: Option<Split>| {
        let sel: Vec<&SceneStats> = stats
            .iter()
            .filter(|(s, _)| split.is_none_or(|want| *s == want))
            .map(|(_, st)| st)
            .collect();
        let pts: Vec<f64> = sel.iter().map(|s| s.point_count as f64).collect();
        let len: Vec<f64> = sel.iter().map(|s| s.length).collect();
        let den: Vec<f64> = sel.iter().filter_map(|s| s.density).collect();
        SplitRow {
            split,
            scenes: sel.len(),
            points: sel.iter().map(|s| s.point_count as u64).sum(),
            median_points: percentile_nearest_rank(&pts, 50.0).unwrap_or(0.0),
            p90_points: percentile_nearest_rank(&pts, 90.0).unwrap_or(0.0),
            median_length: percentile_nearest_rank(&len, 50.0).unwrap_or(0.0),
            p90_length: percentile_nearest_rank(&len, 90.0).unwrap_or(0.0),
            median_density: percentile_nearest_rank(&den, 50.0),
        }
    };
    Split::ALL.iter().map(|&s| row(Some(s))).chain([row(None)]).collect()
}

/// Per-split table for a manifest; scene paths resolve against `root`.
pub fn split_summary(manifest: &SceneManifest, root: &Path, num_classes: usize) -> Result<Vec<SplitRow>> {
    let stats = manifest
        .entries
        .iter()
        .map(|e| {
            let cloud = read_scene(&root.join(&e.path))?;
            if cloud.len() as u64 != e.point_count {
                return Err(Error::Integrity(format!(
                    "manifest lists {} points for {}, file has {}",
                    e.point_count,
                    e.scene_id,
                    cloud.len()
                )));
            }
            Ok((e.split, scene_stats(&cloud, num_classes)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(&stats))
}

pub fn split_table_tsv(rows: &[SplitRow]) -> String {
    let mut s = String::from("split\tscenes\tpoints\tmedian_points\tp90_points\tmedian_length_m\tp90_length_m\tmedian_density\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{:.1}\t{:.1}\t{}",
            r.split.map_or("all", Split::as_str),
            r.scenes,
            r.points,
            r.median_points,
            r.p90_points,
            r.median_length,
            r.p90_length,
            r.median_density.map_or("undefined".to_string(), |d| format!("{d:.1}"))
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Provenance;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pred(labels: Vec<ClassId>) -> Prediction {
        Prediction::new(labels, Provenance::GroundTruth)
    }

    #[test]
    fn perfect_prediction() {
        let tax = Taxonomy::default();
        let gt = vec![2, 2, 10, 18, 8];
        let r = iou_per_class(&pred(gt.clone()), &gt, &tax).unwrap();
        assert_eq!(r.included(), 4);
        assert!(r.per_class.iter().flatten().all(|&v| v == 1.0));
        assert_eq!(r.miou, 1.0);
    }

    #[test]
    fn one_third_iou() {
        // A = class 1: pred on points {1,2}, gt on {2,3}
        let p = vec![0, 1, 1, 0];
        let g = vec![0, 0, 1, 1];
        let m = ConfusionMatrix::from_labels(&p, &g, 2).unwrap();
        assert_eq!(m.iou()[1], Some(1.0 / 3.0));
    }

    #[test]
    fn absent_classes_excluded_present_zero_counted() {
        let m = ConfusionMatrix::from_labels(&[0, 0], &[0, 1], 3).unwrap();
        let r = m.report();
        assert_eq!(r.per_class, vec![Some(0.5), Some(0.0), None]);
        assert_eq!(r.miou, 0.25);
    }

    #[test]
    fn ignore_handling() {
        let tax = Taxonomy::default();
        let ig = tax.ignore_label();
        let m = ConfusionMatrix::from_labels(&[1, ig, 1], &[1, 1, ig], 22).unwrap();
        assert_eq!(m.total(), 2);
        assert_eq!(m.missed(1), 1);
        assert_eq!(m.iou()[1], Some(0.5));
    }

    #[test]
    fn random_case_matches_double_entry_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = 6;
        let p: Vec<ClassId> = (0..1000).map(|_| rng.gen_range(0..c as ClassId)).collect();
        let g: Vec<ClassId> = (0..1000).map(|_| rng.gen_range(0..c as ClassId)).collect();
        let r = ConfusionMatrix::from_labels(&p, &g, c).unwrap().report();
        for k in 0..c as ClassId {
            let inter = p.iter().zip(&g).filter(|(a, b)| **a == k && **b == k).count();
            let union = p.iter().zip(&g).filter(|(a, b)| **a == k || **b == k).count();
            let expected = (union > 0).then(|| inter as f64 / union as f64);
            assert_eq!(r.per_class[k as usize], expected);
        }
    }

    #[test]
    fn primary_protocol_merges_vegetation() {
        let tax = Taxonomy::default();
        let gt = vec![class::HIGH_VEGETATION, class::LOW_VEGETATION, class::BUILDING];
        let p = pred(vec![class::LOW_VEGETATION, class::HIGH_VEGETATION, class::GROUND]);
        let r = primary_iou(&p, &gt, &tax).unwrap();
        assert_eq!(r.per_class[class::LOW_VEGETATION as usize], Some(1.0));
        assert_eq!(r.included(), 1);
    }

    #[test]
    fn shares() {
        let tax = Taxonomy::default();
        let groups = default_groups(&tax);
        let one = shares_from_counts(&class_counts([&[2u16, 2, 2][..]], 22), &groups);
        assert_eq!(one[0].percent, 100.0);
        assert!(one[1..].iter().all(|g| g.count == 0));
        let halves = shares_from_counts(&class_counts([&[2u16, 10][..]], 22), &groups);
        assert_eq!((halves[0].percent, halves[1].percent), (50.0, 50.0));
        let all: BTreeSet<ClassId> = groups.iter().flat_map(|g| g.classes.iter().copied()).collect();
        assert_eq!(all.len(), 22);
        assert_eq!(format_significant(94.9431, 4), "94.94");
        assert_eq!(format_significant(0.43012, 4), "0.4301");
    }

    fn rect_cloud(angle: f64) -> LabeledCloud {
        let (s, c) = angle.sin_cos();
        let mut pts = Vec::new();
        for i in 0..20 {
            for j in 0..10 {
                let (x, y) = (10.0 * i as f64 / 19.0, 2.0 * j as f64 / 9.0);
                pts.push([c * x - s * y + 3.0, s * x + c * y - 1.0, 0.0]);
            }
        }
        LabeledCloud::new("r", pts, None, None).unwrap()
    }

    #[test]
    fn rectangle_stats_and_rotation_invariance() {
        let a = scene_stats(&rect_cloud(0.0), 22).unwrap();
        assert!((a.length - 10.0).abs() < 1e-9);
        assert!((a.density.unwrap() - 10.0).abs() < 1e-9);
        let b = scene_stats(&rect_cloud(0.7), 22).unwrap();
        assert!((b.length - 10.0).abs() < 1e-9);
        assert!((b.density.unwrap() - 10.0).abs() < 1e-9);
    }

    #[test]
    fn collinear_scene_has_undefined_density() {
        let pts = (0..5).map(|i| [i as f64, 2.0 * i as f64, 0.0]).collect();
        let s = scene_stats(&LabeledCloud::new("l", pts, None, None).unwrap(), 22).unwrap();
        assert_eq!(s.density, None);
        assert!((s.length - 20f64.sqrt() * 2.0).abs() < 1e-12);
    }

    #[test]
    fn obb_between_hull_and_aabb() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let pts: Vec<[f64; 2]> = (0..60).map(|_| [rng.gen_range(-5.0..5.0), rng.gen_range(-2.0..2.0)]).collect();
            let obb = min_area_box(&pts).unwrap();
            let hull_area = polygon_area(&convex_hull(&pts));
            let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
            for p in &pts {
                for k in 0..2 {
                    lo[k] = lo[k].min(p[k]);
                    hi[k] = hi[k].max(p[k]);
                }
            }
            let aabb = (hi[0] - lo[0]) * (hi[1] - lo[1]);
            assert!(obb.area >= hull_area - 1e-9 && obb.area <= aabb + 1e-9);
        }
    }

    #[test]
    fn nearest_rank_matches_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for n in 1..40 {
            let v: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..100.0)).collect();
            let mut sorted = v.clone();
            sorted.sort_by(f64::total_cmp);
            for p in [50.0, 90.0] {
                let rank = (1..=n).find(|&r| r as f64 * 100.0 >= p * n as f64).unwrap();
                assert_eq!(percentile_nearest_rank(&v, p), Some(sorted[rank - 1]));
            }
        }
    }
}
