//! Geometric verification: per-class DBSCAN instances, weighted constraint
//! scores, and relabeling of implausible instances to their runner-up class.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::covariance_eigen;
use crate::model::{class, ClassId, Point3, Prediction, ProbabilityField, Provenance, Taxonomy};
use crate::spatial::{dist2, KdTree};

pub const DEFAULT_TAU_GEO: f64 = 0.4;
pub const DEFAULT_EPS: f64 = 0.5;
pub const DEFAULT_MIN_SAMPLES: usize = 10;
/// Horizontal search radius for the local ground level, meters.
const GROUND_SEARCH_RADIUS: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DbscanParams {
    pub eps: f64,
    pub min_samples: usize,
}

impl Default for DbscanParams {
    fn default() -> Self {
        Self {
            eps: DEFAULT_EPS,
            min_samples: DEFAULT_MIN_SAMPLES,
        }
    }
}

impl DbscanParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) || !self.eps.is_finite() || self.min_samples == 0 {
            return Err(Error::Config(format!(
                "dbscan needs eps > 0 and min_samples >= 1, got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterSet {
    /// Cluster of each input point, `None` for noise.
    pub assignment: Vec<Option<usize>>,
    /// Members of each cluster, ascending.
    pub clusters: Vec<Vec<usize>>,
    pub noise: Vec<usize>,
}

/// DBSCAN with inclusive neighborhoods (`dist <= eps`, the point itself
/// counts towards `min_samples`).
///
/// Clusters are the connected components of core points, numbered in order
/// of their lowest core-point index. A border point joins the cluster of its nearest core
/// neighbor; equal distances go to the lowest cluster ID. Up to that null
/// event the partition does not depend on input order.
pub fn dbscan(points: &[Point3], eps: f64, min_samples: usize) -> ClusterSet {
    let n = points.len();
    let tree = KdTree::new(points.to_vec());
    let neighbors: Vec<Vec<(usize, f64)>> = points
        .iter()
        .map(|p| {
            let mut v = Vec::new();
            tree.for_each_in_radius(p, eps, |j, d2| v.push((j, d2)));
            v.sort_by_key(|&(j, _)| j);
            v
        })
        .collect();
    let core: Vec<bool> = neighbors.iter().map(|v| v.len() >= min_samples).collect();
    let mut assignment: Vec<Option<usize>> = vec![None; n];
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    for start in 0..n {
        if !core[start] || assignment[start].is_some() {
            continue;
        }
        let id = clusters.len();
        let mut members = vec![start];
        assignment[start] = Some(id);
        let mut head = 0;
        while head < members.len() {
            let i = members[head];
            head += 1;
            for &(j, _) in &neighbors[i] {
                if core[j] && assignment[j].is_none() {
                    assignment[j] = Some(id);
                    members.push(j);
                }
            }
        }
        clusters.push(members);
    }
    let mut noise = Vec::new();
    for i in 0..n {
        if core[i] {
            continue;
        }
        let best = neighbors[i]
            .iter()
            .filter(|&&(j, _)| core[j])
            .map(|&(j, d2)| (d2, assignment[j].expect("core points are assigned")))
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        match best {
            Some((_, id)) => {
                assignment[i] = Some(id);
                clusters[id].push(i);
            }
            None => noise.push(i),
        }
    }
    for c in &mut clusters {
        c.sort_unstable();
    }
    ClusterSet {
        assignment,
        clusters,
        noise,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Orientation {
    /// `|dz| / |d|`: 1 vertical, 0 horizontal.
    pub ratio: f64,
    /// Coincident endpoints; `ratio` is then 0.
    pub degenerate: bool,
}

pub fn orientation_ratio(start: &Point3, end: &Point3) -> Orientation {
    let d = [end[0] - start[0], end[1] - start[1], end[2] - start[2]];
    let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    if norm == 0.0 {
        return Orientation {
            ratio: 0.0,
            degenerate: true,
        };
    }
    Orientation {
        ratio: (d[2].abs() / norm).min(1.0),
        degenerate: false,
    }
}

/// The two members extreme along the first principal axis (ties to the
/// lower index). Clusters with a degenerate covariance fall back to their
/// first and last member.
pub fn cluster_endpoints(coords: &[Point3], members: &[usize]) -> (usize, usize) {
    let pts: Vec<Point3> = members.iter().map(|&i| coords[i]).collect();
    let Some((_, vectors)) = covariance_eigen(&pts) else {
        return (members[0], members[members.len() - 1]);
    };
    let axis = vectors[0];
    let proj = |p: &Point3| p[0] * axis[0] + p[1] * axis[1] + p[2] * axis[2];
    let mut lo = (f64::INFINITY, usize::MAX);
    let mut hi = (f64::NEG_INFINITY, usize::MAX);
    for &i in members {
        let v = proj(&coords[i]);
        if v < lo.0 || (v == lo.0 && i < lo.1) {
            lo = (v, i);
        }
        if v > hi.0 || (v == hi.0 && i < hi.1) {
            hi = (v, i);
        }
    }
    (lo.1, hi.1)
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConstraintKind {
    Orientation { min: f64, max: f64 },
    PointCount { min: usize, max: usize },
    /// Longest side of the axis-aligned bounding box, meters.
    BboxExtent { min: f64, max: f64 },
    /// `sqrt(l1 / l2)` of the member covariance.
    Elongation { min: f64 },
    /// Centroid height above the lowest ground-labeled point within 10 m
    /// horizontally.
    HeightAboveGround { min: f64, max: f64 },
    /// Some member lies within `max_dist` of a point predicted as `class`.
    Proximity { class: ClassId, max_dist: f64 },
}

impl ConstraintKind {
    pub fn name(&self) -> &'static str {
        match self {
            ConstraintKind::Orientation { .. } => "orientation",
            ConstraintKind::PointCount { .. } => "point_count",
            ConstraintKind::BboxExtent { .. } => "bbox_extent",
            ConstraintKind::Elongation { .. } => "elongation",
            ConstraintKind::HeightAboveGround { .. } => "height_above_ground",
            ConstraintKind::Proximity { .. } => "proximity",
        }
    }

    fn params_text(&self) -> String {
        match self {
            ConstraintKind::Orientation { min, max }
            | ConstraintKind::BboxExtent { min, max }
            | ConstraintKind::HeightAboveGround { min, max } => format!("min={min} max={max}"),
            ConstraintKind::PointCount { min, max } => format!("min={min} max={max}"),
            ConstraintKind::Elongation { min } => format!("min={min}"),
            ConstraintKind::Proximity { class, max_dist } => format!("class={class} max={max_dist}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeoConstraint {
    pub kind: ConstraintKind,
    pub weight: f64,
}

impl GeoConstraint {
    pub fn new(kind: ConstraintKind, weight: f64) -> Self {
        Self { kind, weight }
    }
}

/// Verified classes, their clustering parameters and constraints.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintRegistry {
    pub verified: BTreeSet<ClassId>,
    pub default_dbscan: DbscanParams,
    pub dbscan: BTreeMap<ClassId, DbscanParams>,
    pub constraints: BTreeMap<ClassId, Vec<GeoConstraint>>,
}

const DEFAULT_REGISTRY: &str = "\
# Geometric verification registry.
#
# Only the two orientation ranges of the insulator classes come from the
# method description; every other constraint, threshold and weight is
# implementer policy tuned to the synthetic corridor generator.
#
#   verify <class>...
#   dbscan <class|default> eps=<m> min_samples=<n>
#   constraint <class> <kind> <params> weight=<w>
#
# kinds: orientation min= max= | point_count min= max= | bbox_extent min= max=
#        elongation min= | height_above_ground min= max= | proximity class= max=
# Classes may be given by ID or taxonomy name.

verify jumper strain_insulator v_string_insulator spacer line_insulator ground_wire optical_cable
dbscan default eps=0.5 min_samples=10

constraint line_insulator orientation min=0.85 max=1.0 weight=4
constraint line_insulator proximity class=tower max=3 weight=1
constraint line_insulator point_count min=10 max=2000 weight=1

constraint strain_insulator orientation min=0 max=0.35 weight=4
constraint strain_insulator proximity class=tower max=3 weight=1
constraint strain_insulator point_count min=10 max=2000 weight=1

# no stated geometry for the two-armed V-string: extent and proximity only
constraint v_string_insulator bbox_extent min=0.5 max=6 weight=1
constraint v_string_insulator proximity class=tower max=3 weight=1
constraint v_string_insulator point_count min=10 max=4000 weight=1

constraint jumper bbox_extent min=0.5 max=15 weight=1
constraint jumper proximity class=tower max=6 weight=1

constraint spacer bbox_extent min=0.1 max=2 weight=1
constraint spacer proximity class=conductor max=1 weight=1

constraint ground_wire elongation min=5 weight=1
constraint ground_wire height_above_ground min=5 max=200 weight=1

constraint optical_cable elongation min=5 weight=1
constraint optical_cable height_above_ground min=5 max=200 weight=1
";

impl ConstraintRegistry {
    pub fn default_for(tax: &Taxonomy) -> Self {
        Self::parse(DEFAULT_REGISTRY, tax).expect("built-in registry parses")
    }

    pub fn default_text() -> &'static str {
        DEFAULT_REGISTRY
    }

    pub fn load(path: &Path, tax: &Taxonomy) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, tax)
    }

    pub fn dbscan_for(&self, c: ClassId) -> DbscanParams {
        self.dbscan.get(&c).copied().unwrap_or(self.default_dbscan)
    }

    pub fn constraints_for(&self, c: ClassId) -> &[GeoConstraint] {
        self.constraints.get(&c).map_or(&[], Vec::as_slice)
    }

    pub fn parse(text: &str, tax: &Taxonomy) -> Result<Self> {
        let mut reg = Self {
            verified: BTreeSet::new(),
            default_dbscan: DbscanParams::default(),
            dbscan: BTreeMap::new(),
            constraints: BTreeMap::new(),
        };
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Config(format!("registry line {}: {msg}", lineno + 1));
            let class_of = |tok: &str| -> Result<ClassId> {
                tax.class_by_name(tok)
                    .or_else(|| tok.parse::<ClassId>().ok().filter(|&c| (c as usize) < tax.num_classes()))
                    .ok_or_else(|| err(format!("unknown class {tok:?}")))
            };
            let mut toks = line.split_whitespace();
            let directive = toks.next().unwrap_or_default();
            match directive {
                "verify" => {
                    for t in toks {
                        reg.verified.insert(class_of(t)?);
                    }
                }
                "dbscan" => {
                    let target = toks.next().ok_or_else(|| err("missing class".into()))?;
                    let kv = key_values(toks).map_err(err)?;
                    let params = DbscanParams {
                        eps: num(&kv, "eps").map_err(err)?,
                        min_samples: num(&kv, "min_samples").map_err(err)?,
                    };
                    params.validate().map_err(|e| err(e.to_string()))?;
                    if target == "default" {
                        reg.default_dbscan = params;
                    } else {
                        reg.dbscan.insert(class_of(target)?, params);
                    }
                }
                "constraint" => {
                    let c = class_of(toks.next().ok_or_else(|| err("missing class".into()))?)?;
                    let kind_name = toks.next().ok_or_else(|| err("missing constraint kind".into()))?;
                    let kv = key_values(toks).map_err(err)?;
                    let weight: f64 = num(&kv, "weight").map_err(err)?;
                    if !(weight > 0.0) || !weight.is_finite() {
                        return Err(err(format!("weight must be positive, got {weight}")));
                    }
                    let kind = match kind_name {
                        "orientation" => ConstraintKind::Orientation {
                            min: num(&kv, "min").map_err(err)?,
                            max: num(&kv, "max").map_err(err)?,
                        },
                        "point_count" => ConstraintKind::PointCount {
                            min: num(&kv, "min").map_err(err)?,
                            max: num(&kv, "max").map_err(err)?,
                        },
                        "bbox_extent" => ConstraintKind::BboxExtent {
                            min: num(&kv, "min").map_err(err)?,
                            max: num(&kv, "max").map_err(err)?,
                        },
                        "elongation" => ConstraintKind::Elongation {
                            min: num(&kv, "min").map_err(err)?,
                        },
                        "height_above_ground" => ConstraintKind::HeightAboveGround {
                            min: num(&kv, "min").map_err(err)?,
                            max: num(&kv, "max").map_err(err)?,
                        },
                        "proximity" => ConstraintKind::Proximity {
                            class: class_of(kv.get("class").ok_or_else(|| err("proximity needs class=".into()))?)?,
                            max_dist: num(&kv, "max").map_err(err)?,
                        },
                        other => return Err(err(format!("unknown constraint kind {other:?}"))),
                    };
                    reg.constraints.entry(c).or_default().push(GeoConstraint { kind, weight });
                }
                other => return Err(err(format!("unknown directive {other:?}"))),
            }
        }
        Ok(reg)
    }

    pub fn to_text(&self, tax: &Taxonomy) -> String {
        let mut s = String::from("verify");
        for &c in &self.verified {
            let _ = write!(s, " {}", tax.name(c));
        }
        let d = self.default_dbscan;
        let _ = write!(s, "\ndbscan default eps={} min_samples={}\n", d.eps, d.min_samples);
        for (&c, d) in &self.dbscan {
            let _ = writeln!(s, "dbscan {} eps={} min_samples={}", tax.name(c), d.eps, d.min_samples);
        }
        for (&c, list) in &self.constraints {
            for g in list {
                let _ = writeln!(
                    s,
                    "constraint {} {} {} weight={}",
                    tax.name(c),
                    g.kind.name(),
                    g.kind.params_text(),
                    g.weight
                );
            }
        }
        s
    }
}

fn key_values<'a>(toks: impl Iterator<Item = &'a str>) -> std::result::Result<BTreeMap<&'a str, &'a str>, String> {
    toks.map(|t| t.split_once('=').ok_or_else(|| format!("expected key=value, got {t:?}")))
        .collect()
}

fn num<T: std::str::FromStr>(kv: &BTreeMap<&str, &str>, key: &str) -> std::result::Result<T, String> {
    let v = kv.get(key).ok_or_else(|| format!("missing {key}="))?;
    v.parse().map_err(|_| format!("bad value for {key}: {v:?}"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Keep,
    Relabel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterReport {
    pub class: ClassId,
    pub members: Vec<usize>,
    pub start: Point3,
    pub end: Point3,
    pub orientation: Orientation,
    pub score: f64,
    /// No applicable constraint: score 1 by definition.
    pub unconstrained: bool,
    /// `(constraint kind, satisfied)` in registry order.
    pub checks: Vec<(&'static str, bool)>,
    pub decision: Decision,
}

/// Points grouped by preliminary label, with lazily built indices.
pub struct SceneContext<'a> {
    coords: &'a [Point3],
    labels: &'a [ClassId],
    by_class: BTreeMap<ClassId, KdTree>,
    ground_xy: Option<KdTree>,
    ground_idx: Vec<usize>,
}

impl<'a> SceneContext<'a> {
    /// Indexes the classes referenced by proximity constraints and the
    /// ground class.
    pub fn new(coords: &'a [Point3], labels: &'a [ClassId], registry: &ConstraintRegistry) -> Self {
        let targets: BTreeSet<ClassId> = registry
            .constraints
            .values()
            .flatten()
            .filter_map(|g| match g.kind {
                ConstraintKind::Proximity { class, .. } => Some(class),
                _ => None,
            })
            .collect();
        let by_class = targets
            .into_iter()
            .map(|c| {
                let pts: Vec<Point3> = coords.iter().zip(labels).filter(|(_, &l)| l == c).map(|(p, _)| *p).collect();
                (c, KdTree::new(pts))
            })
            .collect();
        let ground_idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class::GROUND).collect();
        let ground_xy = (!ground_idx.is_empty())
            .then(|| KdTree::new(ground_idx.iter().map(|&i| [coords[i][0], coords[i][1], 0.0]).collect()));
        Self {
            coords,
            labels,
            by_class,
            ground_xy,
            ground_idx,
        }
    }

    fn nearest_of_class(&self, c: ClassId, members: &[usize]) -> Option<f64> {
        match self.by_class.get(&c) {
            Some(tree) => members
                .iter()
                .filter_map(|&i| tree.nearest(&self.coords[i]))
                .map(|n| n.dist2.sqrt())
                .min_by(f64::total_cmp),
            None => {
                // not prebuilt: linear scan
                let mut best: Option<f64> = None;
                for (j, p) in self.coords.iter().enumerate() {
                    if self.labels[j] != c {
                        continue;
                    }
                    for &i in members {
                        let d = dist2(p, &self.coords[i]).sqrt();
                        best = Some(best.map_or(d, |b: f64| b.min(d)));
                    }
                }
                best
            }
        }
    }

    fn ground_below(&self, p: &Point3) -> Option<f64> {
        let tree = self.ground_xy.as_ref()?;
        let mut min_z: Option<f64> = None;
        tree.for_each_in_radius(&[p[0], p[1], 0.0], GROUND_SEARCH_RADIUS, |k, _| {
            let z = self.coords[self.ground_idx[k]][2];
            min_z = Some(min_z.map_or(z, |m: f64| m.min(z)));
        });
        min_z
    }
}

fn check(kind: &ConstraintKind, members: &[usize], orientation: Orientation, ctx: &SceneContext<'_>) -> bool {
    let pts = || members.iter().map(|&i| ctx.coords[i]);
    match *kind {
        ConstraintKind::Orientation { min, max } => {
            !orientation.degenerate && orientation.ratio >= min && orientation.ratio <= max
        }
        ConstraintKind::PointCount { min, max } => (min..=max).contains(&members.len()),
        ConstraintKind::BboxExtent { min, max } => {
            let (mut lo, mut hi) = ([f64::INFINITY; 3], [f64::NEG_INFINITY; 3]);
            for p in pts() {
                for k in 0..3 {
                    lo[k] = lo[k].min(p[k]);
                    hi[k] = hi[k].max(p[k]);
                }
            }
            let extent = (0..3).map(|k| hi[k] - lo[k]).fold(0.0, f64::max);
            extent >= min && extent <= max
        }
        ConstraintKind::Elongation { min } => {
            let p: Vec<Point3> = pts().collect();
            covariance_eigen(&p).is_some_and(|(l, _)| (l[0] / l[1].max(1e-12)).sqrt() >= min)
        }
        ConstraintKind::HeightAboveGround { min, max } => {
            let n = members.len() as f64;
            let c = pts().fold([0.0; 3], |a, p| [a[0] + p[0] / n, a[1] + p[1] / n, a[2] + p[2] / n]);
            ctx.ground_below(&c).is_some_and(|g| {
                let h = c[2] - g;
                h >= min && h <= max
            })
        }
        ConstraintKind::Proximity { class, max_dist } => {
            ctx.nearest_of_class(class, members).is_some_and(|d| d <= max_dist)
        }
    }
}

/// Weighted mean of the satisfied indicators, weights renormalized over the
/// applicable set.
pub fn score_cluster(
    class: ClassId,
    members: &[usize],
    constraints: &[GeoConstraint],
    ctx: &SceneContext<'_>,
    tau_geo: f64,
) -> ClusterReport {
    let (a, b) = cluster_endpoints(ctx.coords, members);
    let (start, end) = (ctx.coords[a], ctx.coords[b]);
    let orientation = orientation_ratio(&start, &end);
    let checks: Vec<(&'static str, bool)> =
        constraints.iter().map(|g| (g.kind.name(), check(&g.kind, members, orientation, ctx))).collect();
    let total: f64 = constraints.iter().map(|g| g.weight).sum();
    let unconstrained = constraints.is_empty();
    let score = if unconstrained {
        1.0
    } else {
        constraints
            .iter()
            .zip(&checks)
            .filter(|(_, c)| c.1)
            .map(|(g, _)| g.weight / total)
            .sum::<f64>()
            .min(1.0)
    };
    ClusterReport {
        class,
        members: members.to_vec(),
        start,
        end,
        orientation,
        score,
        unconstrained,
        checks,
        decision: if score < tau_geo {
            Decision::Relabel
        } else {
            Decision::Keep
        },
    }
}

/// Index of the largest entry other than `exclude` (ties to the lower index).
pub fn runner_up(row: &[f64], exclude: usize) -> usize {
    let mut best = usize::MAX;
    for (c, &v) in row.iter().enumerate() {
        if c != exclude && (best == usize::MAX || v > row[best]) {
            best = c;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyOutput {
    pub prediction: Prediction,
    pub reports: Vec<ClusterReport>,
    /// DBSCAN noise per verified class; these points keep their labels.
    pub noise: BTreeMap<ClassId, Vec<usize>>,
}

impl VerifyOutput {
    pub fn relabeled_count(&self) -> usize {
        self.reports
            .iter()
            .filter(|r| r.decision == Decision::Relabel)
            .map(|r| r.members.len())
            .sum()
    }

    pub fn reports_tsv(&self, tax: &Taxonomy) -> String {
        let mut s = String::from(
            "class\tname\tcluster\tpoints\torientation\tscore\tdecision\tstart_x\tstart_y\tstart_z\tend_x\tend_y\tend_z\tchecks\n",
        );
        let mut per_class: BTreeMap<ClassId, usize> = BTreeMap::new();
        for r in &self.reports {
            let k = per_class.entry(r.class).or_default();
            let checks: Vec<String> = r.checks.iter().map(|(n, ok)| format!("{n}={}", *ok as u8)).collect();
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{:.4}\t{:.4}\t{}\t{:.3}\t{:.3}\t{:.3}\t{:.3}\t{:.3}\t{:.3}\t{}",
                r.class,
                tax.name(r.class),
                k,
                r.members.len(),
                r.orientation.ratio,
                r.score,
                match r.decision {
                    Decision::Keep => "keep",
                    Decision::Relabel => "relabel",
                },
                r.start[0],
                r.start[1],
                r.start[2],
                r.end[0],
                r.end[1],
                r.end[2],
                if checks.is_empty() { "unconstrained".to_string() } else { checks.join(",") }
            );
            *k += 1;
        }
        s
    }
}

/// Clusters every verified class of the preliminary prediction and moves
/// the members of clusters scoring below `tau_geo` to their runner-up class
/// in the fused field. All other labels are copied unchanged.
pub fn verify_and_relabel(
    coords: &[Point3],
    pred: &Prediction,
    fused: &ProbabilityField,
    registry: &ConstraintRegistry,
    tau_geo: f64,
) -> Result<VerifyOutput> {
    let n = pred.len();
    if coords.len() != n || fused.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} points, {} labels, {} probability rows",
            coords.len(),
            n,
            fused.len()
        )));
    }
    if !tau_geo.is_finite() {
        return Err(Error::InvalidArgument(format!("tau_geo must be finite, got {tau_geo}")));
    }
    let ctx = SceneContext::new(coords, &pred.labels, registry);
    let per_class: Vec<(ClassId, Vec<ClusterReport>, Vec<usize>)> = registry
        .verified
        .iter()
        .copied()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|&c| {
            let idx: Vec<usize> = (0..n).filter(|&i| pred.labels[i] == c).collect();
            let params = registry.dbscan_for(c);
            let pts: Vec<Point3> = idx.iter().map(|&i| coords[i]).collect();
            let set = dbscan(&pts, params.eps, params.min_samples);
            let reports = set
                .clusters
                .iter()
                .map(|members| {
                    let global: Vec<usize> = members.iter().map(|&k| idx[k]).collect();
                    score_cluster(c, &global, registry.constraints_for(c), &ctx, tau_geo)
                })
                .collect();
            (c, reports, set.noise.iter().map(|&k| idx[k]).collect())
        })
        .collect();
    let mut labels = pred.labels.clone();
    let mut reports = Vec::new();
    let mut noise = BTreeMap::new();
    for (c, class_reports, class_noise) in per_class {
        for r in &class_reports {
            if r.decision == Decision::Relabel {
                for &i in &r.members {
                    labels[i] = runner_up(fused.row(i), pred.labels[i] as usize) as ClassId;
                }
            }
        }
        reports.extend(class_reports);
        noise.insert(c, class_noise);
    }
    Ok(VerifyOutput {
        prediction: Prediction::new(labels, Provenance::GeoVerified),
        reports,
        noise,
    })
}
