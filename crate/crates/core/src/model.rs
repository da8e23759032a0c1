//! Scene data model, class taxonomy and prediction containers.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::KeyValues;
use crate::error::{Error, Result};

pub type ClassId = u16;
pub type Point3 = [f64; 3];

/// Default 22-class corridor taxonomy IDs.
pub mod class {
    use super::ClassId;

    pub const JUMPER: ClassId = 0;
    pub const STREET_SIGN: ClassId = 1;
    pub const GROUND: ClassId = 2;
    pub const BUILDING: ClassId = 3;
    pub const ROAD: ClassId = 4;
    pub const GREENHOUSE: ClassId = 5;
    pub const RAILWAY: ClassId = 6;
    pub const VEHICLE: ClassId = 7;
    pub const LOW_VEGETATION: ClassId = 8;
    pub const HIGH_VEGETATION: ClassId = 9;
    pub const CONDUCTOR: ClassId = 10;
    pub const TOWER: ClassId = 11;
    pub const STRAIN_INSULATOR: ClassId = 12;
    pub const V_STRING_INSULATOR: ClassId = 13;
    pub const SPACER: ClassId = 14;
    pub const DISTRIBUTION_TOWER: ClassId = 15;
    pub const DISTRIBUTION_CONDUCTOR: ClassId = 16;
    pub const WATER: ClassId = 17;
    pub const LINE_INSULATOR: ClassId = 18;
    pub const GROUND_WIRE: ClassId = 19;
    pub const OPTICAL_CABLE: ClassId = 20;
    pub const OTHER: ClassId = 21;
}

const DEFAULT_NAMES: [&str; 22] = [
    "jumper",
    "street_sign",
    "ground",
    "building",
    "road",
    "greenhouse",
    "railway",
    "vehicle",
    "low_vegetation",
    "high_vegetation",
    "conductor",
    "tower",
    "strain_insulator",
    "v_string_insulator",
    "spacer",
    "distribution_tower",
    "distribution_conductor",
    "water",
    "line_insulator",
    "ground_wire",
    "optical_cable",
    "other",
];

/// Class names, the rare-class set and the 10-class primary protocol map.
#[derive(Debug, Clone, PartialEq)]
pub struct Taxonomy {
    names: Vec<String>,
    rare: BTreeSet<ClassId>,
    primary_map: BTreeMap<ClassId, ClassId>,
}

impl Default for Taxonomy {
    fn default() -> Self {
        use class::*;
        let names = DEFAULT_NAMES.iter().map(|s| s.to_string()).collect();
        let rare = [
            JUMPER,
            STRAIN_INSULATOR,
            V_STRING_INSULATOR,
            SPACER,
            LINE_INSULATOR,
            GROUND_WIRE,
            OPTICAL_CABLE,
        ]
        .into_iter()
        .collect();
        let mut primary_map: BTreeMap<ClassId, ClassId> = [
            JUMPER,
            STRAIN_INSULATOR,
            V_STRING_INSULATOR,
            LINE_INSULATOR,
            SPACER,
            OPTICAL_CABLE,
            CONDUCTOR,
            GROUND_WIRE,
            TOWER,
            LOW_VEGETATION,
        ]
        .into_iter()
        .map(|c| (c, c))
        .collect();
        primary_map.insert(HIGH_VEGETATION, LOW_VEGETATION);
        Self {
            names,
            rare,
            primary_map,
        }
    }
}

impl Taxonomy {
    pub fn new(
        names: Vec<String>,
        rare: BTreeSet<ClassId>,
        primary_map: BTreeMap<ClassId, ClassId>,
    ) -> Result<Self> {
        let c = names.len();
        if c == 0 || c >= ClassId::MAX as usize {
            return Err(Error::Config(format!("unsupported class count {c}")));
        }
        if let Some(&bad) = rare.iter().find(|&&r| r as usize >= c) {
            return Err(Error::Config(format!("rare class {bad} outside 0..{c}")));
        }
        for (&from, &to) in &primary_map {
            if from as usize >= c || to as usize >= c {
                return Err(Error::Config(format!("primary map entry {from}->{to} outside 0..{c}")));
            }
        }
        Ok(Self {
            names,
            rare,
            primary_map,
        })
    }

    /// Parses a taxonomy config (`class.<id> = name`, `rare = ids`, `primary.<id> = id`).
    /// Missing sections fall back to the defaults.
    pub fn from_config(kv: &KeyValues) -> Result<Self> {
        let defaults = Self::default();
        let num_classes: usize = kv.get_or("num_classes", defaults.num_classes())?;
        let mut names: Vec<String> = (0..num_classes)
            .map(|i| {
                DEFAULT_NAMES
                    .get(i)
                    .map(|s| s.to_string())
                    .unwrap_or_else(|| format!("class_{i}"))
            })
            .collect();
        for (key, value) in kv.section("class") {
            let id: usize = key
                .parse()
                .map_err(|_| Error::Config(format!("class.{key}: not a class id")))?;
            let slot = names
                .get_mut(id)
                .ok_or_else(|| Error::Config(format!("class.{id} outside 0..{num_classes}")))?;
            *slot = value.to_string();
        }
        let rare = match kv.get_list::<ClassId>("rare")? {
            Some(list) => list.into_iter().collect(),
            None => defaults.rare.clone(),
        };
        let mut primary_map = BTreeMap::new();
        let mut any_primary = false;
        for (key, value) in kv.section("primary") {
            any_primary = true;
            let from: ClassId = key
                .parse()
                .map_err(|_| Error::Config(format!("primary.{key}: not a class id")))?;
            let to: ClassId = value
                .parse()
                .map_err(|_| Error::Config(format!("primary.{key} = {value}: not a class id")))?;
            primary_map.insert(from, to);
        }
        if !any_primary {
            primary_map = defaults.primary_map.clone();
        }
        Self::new(names, rare, primary_map)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_config(&KeyValues::load(path)?)
    }

    /// Canonical config text; `from_config(to_config())` reproduces `self`.
    pub fn to_config(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("num_classes = {}\n", self.num_classes()));
        for (i, name) in self.names.iter().enumerate() {
            out.push_str(&format!("class.{i} = {name}\n"));
        }
        let rare: Vec<String> = self.rare.iter().map(|r| r.to_string()).collect();
        out.push_str(&format!("rare = {}\n", rare.join(",")));
        for (from, to) in &self.primary_map {
            out.push_str(&format!("primary.{from} = {to}\n"));
        }
        out
    }

    /// 64-bit checksum of the canonical config, stored in scene headers.
    pub fn hash64(&self) -> u64 {
        let digest = Sha256::digest(self.to_config().as_bytes());
        let mut bytes = [0u8; 8];
        bytes.copy_from_slice(&digest[..8]);
        u64::from_le_bytes(bytes)
    }

    pub fn num_classes(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, id: ClassId) -> &str {
        self.names.get(id as usize).map(String::as_str).unwrap_or("ignore")
    }

    pub fn class_by_name(&self, name: &str) -> Option<ClassId> {
        self.names.iter().position(|n| n == name).map(|i| i as ClassId)
    }

    /// Sentinel label one past the last valid class.
    pub fn ignore_label(&self) -> ClassId {
        self.names.len() as ClassId
    }

    pub fn rare_set(&self) -> &BTreeSet<ClassId> {
        &self.rare
    }

    pub fn is_rare(&self, id: ClassId) -> bool {
        self.rare.contains(&id)
    }

    pub fn primary_map(&self) -> &BTreeMap<ClassId, ClassId> {
        &self.primary_map
    }

    /// Distinct classes of the primary protocol, ascending.
    pub fn primary_classes(&self) -> Vec<ClassId> {
        let set: BTreeSet<ClassId> = self.primary_map.values().copied().collect();
        set.into_iter().collect()
    }

    pub fn primary_of(&self, id: ClassId) -> ClassId {
        self.primary_map
            .get(&id)
            .copied()
            .unwrap_or_else(|| self.ignore_label())
    }
}

/// N points with coordinates in meters, optional RGB and optional labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledCloud {
    pub scene_id: String,
    coords: Vec<Point3>,
    colors: Option<Vec<[u8; 3]>>,
    labels: Option<Vec<ClassId>>,
}

impl LabeledCloud {
    pub fn new(
        scene_id: impl Into<String>,
        coords: Vec<Point3>,
        colors: Option<Vec<[u8; 3]>>,
        labels: Option<Vec<ClassId>>,
    ) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::InvalidData("cloud has no points".into()));
        }
        if let Some(i) = coords.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::InvalidData(format!("non-finite coordinate at point {i}")));
        }
        let n = coords.len();
        if let Some(c) = &colors {
            if c.len() != n {
                return Err(Error::ShapeMismatch(format!("{} colors for {n} points", c.len())));
            }
        }
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::ShapeMismatch(format!("{} labels for {n} points", l.len())));
            }
        }
        Ok(Self {
            scene_id: scene_id.into(),
            coords,
            colors,
            labels,
        })
    }

    pub fn labeled(scene_id: impl Into<String>, coords: Vec<Point3>, labels: Vec<ClassId>) -> Result<Self> {
        Self::new(scene_id, coords, None, Some(labels))
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[Point3] {
        &self.coords
    }

    pub fn colors(&self) -> Option<&[[u8; 3]]> {
        self.colors.as_deref()
    }

    pub fn labels(&self) -> Option<&[ClassId]> {
        self.labels.as_deref()
    }

    pub fn require_labels(&self) -> Result<&[ClassId]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::InvalidData(format!("scene {} has no labels", self.scene_id)))
    }

    pub fn with_labels(mut self, labels: Vec<ClassId>) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} labels for {} points",
                labels.len(),
                self.len()
            )));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    /// Checks every label lies in `0..num_classes`.
    pub fn validate_labels(&self, tax: &Taxonomy) -> Result<()> {
        if let Some(labels) = &self.labels {
            let c = tax.num_classes();
            if let Some(i) = labels.iter().position(|&l| l as usize >= c) {
                return Err(Error::InvalidData(format!(
                    "label {} at point {i} outside 0..{c}",
                    labels[i]
                )));
            }
        }
        Ok(())
    }

    /// Points at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            scene_id: self.scene_id.clone(),
            coords: indices.iter().map(|&i| self.coords[i]).collect(),
            colors: self
                .colors
                .as_ref()
                .map(|c| indices.iter().map(|&i| c[i]).collect()),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
        }
    }

    /// Axis-aligned bounds `(min, max)`.
    pub fn bounds(&self) -> (Point3, Point3) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &self.coords {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        (lo, hi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FieldSource {
    Local,
    Global,
    Fused,
}

impl FieldSource {
    pub fn as_str(self) -> &'static str {
        match self {
            FieldSource::Local => "local",
            FieldSource::Global => "global",
            FieldSource::Fused => "fused",
        }
    }
}

/// Tolerance on row sums accepted by [`ProbabilityField::new`].
pub const ROW_SUM_TOLERANCE: f64 = 1e-6;

/// Row-major N×C per-point class probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityField {
    probs: Vec<f64>,
    num_classes: usize,
    source: FieldSource,
}

impl ProbabilityField {
    pub fn new(probs: Vec<f64>, num_classes: usize, source: FieldSource) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::InvalidData("probability field with zero classes".into()));
        }
        if probs.len() % num_classes != 0 {
            return Err(Error::ShapeMismatch(format!(
                "{} values is not a multiple of {num_classes} classes",
                probs.len()
            )));
        }
        for (i, row) in probs.chunks_exact(num_classes).enumerate() {
            if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
                return Err(Error::InvalidData(format!("row {i} has a negative or non-finite entry")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(Error::InvalidData(format!("row {i} sums to {sum}")));
            }
        }
        Ok(Self {
            probs,
            num_classes,
            source,
        })
    }

    /// Row-wise softmax of a row-major logit matrix.
    pub fn from_logits(logits: &[f64], num_classes: usize, source: FieldSource) -> Result<Self> {
        if num_classes == 0 || logits.len() % num_classes != 0 {
            return Err(Error::ShapeMismatch(format!(
                "{} logits for {num_classes} classes",
                logits.len()
            )));
        }
        let mut probs = Vec::with_capacity(logits.len());
        for row in logits.chunks_exact(num_classes) {
            probs.extend(crate::losses::softmax(row));
        }
        Self::new(probs, num_classes, source)
    }

    /// One-hot rows for `labels`.
    pub fn one_hot(labels: &[ClassId], num_classes: usize, source: FieldSource) -> Result<Self> {
        let mut probs = vec![0.0; labels.len() * num_classes];
        for (i, &l) in labels.iter().enumerate() {
            if l as usize >= num_classes {
                return Err(Error::InvalidData(format!("label {l} outside 0..{num_classes}")));
            }
            probs[i * num_classes + l as usize] = 1.0;
        }
        Self::new(probs, num_classes, source)
    }

    pub fn len(&self) -> usize {
        self.probs.len() / self.num_classes
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn source(&self) -> FieldSource {
        self.source
    }

    pub fn with_source(mut self, source: FieldSource) -> Self {
        self.source = source;
        self
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.probs[i * self.num_classes..(i + 1) * self.num_classes]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.probs.chunks_exact(self.num_classes)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.probs
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.probs
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Provenance {
    ArgmaxLocal,
    ArgmaxGlobal,
    FusedPreliminary,
    GeoVerified,
    GroundTruth,
}

impl Provenance {
    pub fn for_source(source: FieldSource) -> Self {
        match source {
            FieldSource::Local => Provenance::ArgmaxLocal,
            FieldSource::Global => Provenance::ArgmaxGlobal,
            FieldSource::Fused => Provenance::FusedPreliminary,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Provenance::ArgmaxLocal => 0,
            Provenance::ArgmaxGlobal => 1,
            Provenance::FusedPreliminary => 2,
            Provenance::GeoVerified => 3,
            Provenance::GroundTruth => 4,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => Provenance::ArgmaxLocal,
            1 => Provenance::ArgmaxGlobal,
            2 => Provenance::FusedPreliminary,
            3 => Provenance::GeoVerified,
            4 => Provenance::GroundTruth,
            _ => return None,
        })
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::ArgmaxLocal => "argmax-local",
            Provenance::ArgmaxGlobal => "argmax-global",
            Provenance::FusedPreliminary => "fused-preliminary",
            Provenance::GeoVerified => "geo-verified",
            Provenance::GroundTruth => "ground-truth",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prediction {
    pub labels: Vec<ClassId>,
    pub provenance: Provenance,
}

impl Prediction {
    pub fn new(labels: Vec<ClassId>, provenance: Provenance) -> Self {
        Self { labels, provenance }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Index of the row maximum; ties go to the lowest class ID.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (c, &p) in row.iter().enumerate().skip(1) {
        if p > row[best] {
            best = c;
        }
    }
    best
}

pub fn argmax_labels(field: &ProbabilityField) -> Result<Prediction> {
    if field.is_empty() {
        return Err(Error::EmptyField);
    }
    let labels = field.rows().map(|r| argmax(r) as ClassId).collect();
    Ok(Prediction::new(labels, Provenance::for_source(field.source())))
}

/// Maps labels onto the 10-class primary protocol; unmapped classes become
/// the ignore label.
pub fn to_primary_protocol(pred: &Prediction, tax: &Taxonomy) -> Prediction {
    Prediction::new(
        pred.labels.iter().map(|&l| tax.primary_of(l)).collect(),
        pred.provenance,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn field(rows: &[&[f64]]) -> ProbabilityField {
        let c = rows[0].len();
        ProbabilityField::new(rows.concat(), c, FieldSource::Fused).unwrap()
    }

    #[test]
    fn argmax_examples() {
        assert_eq!(argmax_labels(&field(&[&[0.1, 0.7, 0.2]])).unwrap().labels, vec![1]);
        assert_eq!(argmax_labels(&field(&[&[0.5, 0.5]])).unwrap().labels, vec![0]);
    }

    #[test]
    fn argmax_matches_column_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (n, c) = (100, 22);
        let mut probs = Vec::with_capacity(n * c);
        for _ in 0..n {
            let raw: Vec<f64> = (0..c).map(|_| rng.gen::<f64>()).collect();
            let s: f64 = raw.iter().sum();
            probs.extend(raw.iter().map(|v| v / s));
        }
        let f = ProbabilityField::new(probs, c, FieldSource::Local).unwrap();
        let pred = argmax_labels(&f).unwrap();
        assert_eq!(pred.provenance, Provenance::ArgmaxLocal);
        for i in 0..n {
            let row = f.row(i);
            let mut best = 0usize;
            let mut best_v = f64::NEG_INFINITY;
            for (col, &v) in row.iter().enumerate() {
                if v > best_v {
                    best_v = v;
                    best = col;
                }
            }
            assert_eq!(pred.labels[i] as usize, best);
        }
    }

    #[test]
    fn argmax_invariant_under_row_rescaling() {
        let row = [0.2, 0.3, 0.5];
        let scaled: Vec<f64> = row.iter().map(|v| v * 7.5).collect();
        assert_eq!(argmax(&row), argmax(&scaled));
    }

    #[test]
    fn empty_field_is_an_error() {
        let f = ProbabilityField::new(vec![], 3, FieldSource::Fused).unwrap();
        let err = argmax_labels(&f).unwrap_err();
        assert_eq!(err.to_string(), "empty probability field");
    }

    #[test]
    fn field_rejects_unnormalized_rows() {
        assert!(ProbabilityField::new(vec![0.5, 0.6], 2, FieldSource::Local).is_err());
        assert!(ProbabilityField::new(vec![-0.1, 1.1], 2, FieldSource::Local).is_err());
        assert!(ProbabilityField::new(vec![0.5, 0.5 + 5e-7], 2, FieldSource::Local).is_ok());
    }

    #[test]
    fn default_taxonomy_shape() {
        let tax = Taxonomy::default();
        assert_eq!(tax.num_classes(), 22);
        assert_eq!(tax.ignore_label(), 22);
        let rare: Vec<_> = tax.rare_set().iter().copied().collect();
        assert_eq!(rare, vec![0, 12, 13, 14, 18, 19, 20]);
        assert_eq!(tax.primary_classes().len(), 10);
    }

    #[test]
    fn primary_protocol_examples() {
        let tax = Taxonomy::default();
        let pred = Prediction::new(
            vec![class::HIGH_VEGETATION, class::CONDUCTOR, class::GROUND],
            Provenance::GeoVerified,
        );
        let p = to_primary_protocol(&pred, &tax);
        assert_eq!(p.labels, vec![class::LOW_VEGETATION, class::CONDUCTOR, tax.ignore_label()]);
        // idempotent on its image
        assert_eq!(to_primary_protocol(&p, &tax), p);
    }

    #[test]
    fn primary_classes_match_reported_columns() {
        // the ten per-class columns of the ablation table
        let tax = Taxonomy::default();
        let names: Vec<&str> = tax.primary_classes().iter().map(|&c| tax.name(c)).collect();
        for expected in [
            "jumper",
            "strain_insulator",
            "v_string_insulator",
            "line_insulator",
            "spacer",
            "optical_cable",
            "conductor",
            "ground_wire",
            "tower",
            "low_vegetation",
        ] {
            assert!(names.contains(&expected), "{expected} missing");
        }
        assert!(!names.contains(&"ground"));
    }

    #[test]
    fn taxonomy_config_round_trip() {
        let tax = Taxonomy::default();
        let kv = KeyValues::parse(&tax.to_config()).unwrap();
        let back = Taxonomy::from_config(&kv).unwrap();
        assert_eq!(back, tax);
        assert_eq!(back.hash64(), tax.hash64());

        let bad = KeyValues::parse("rare = 0, 40").unwrap();
        assert!(Taxonomy::from_config(&bad).is_err());
    }

    #[test]
    fn cloud_invariants() {
        assert!(LabeledCloud::new("s", vec![], None, None).is_err());
        assert!(LabeledCloud::new("s", vec![[f64::NAN, 0.0, 0.0]], None, None).is_err());
        assert!(LabeledCloud::new("s", vec![[0.0; 3]], Some(vec![]), None).is_err());
        let c = LabeledCloud::labeled("s", vec![[0.0; 3]], vec![30]).unwrap();
        assert!(c.validate_labels(&Taxonomy::default()).is_err());
    }
}
