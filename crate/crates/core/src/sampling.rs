//! Grid (voxel) downsampling, point-budget random crop, sphere crop and the
//! inverse mapping from downsampled predictions back to full resolution.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{ClassId, LabeledCloud, Point3, ProbabilityField};
use crate::spatial::{dist2, KdTree, Neighbor};

/// Grid size of the whole-scene branch, meters.
pub const DEFAULT_GRID_SIZE: f64 = 0.25;
/// Points kept per local sphere crop.
pub const DEFAULT_K_LOCAL: usize = 120_000;
/// Point budget of the whole-scene random crop.
pub const DEFAULT_N_MAX: usize = 4_000_000;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Representative {
    /// Member nearest the voxel centroid (ties to the lower index).
    #[default]
    NearestCentroid,
    /// Lowest-index member.
    First,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum LabelRule {
    /// The representative's own label.
    #[default]
    Representative,
    /// Most frequent member label (ties to the lower class ID).
    Majority,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GridSampleOptions {
    pub representative: Representative,
    pub label_rule: LabelRule,
}

#[derive(Debug, Clone)]
pub struct GridSampleResult {
    pub sampled: LabeledCloud,
    /// For every original point, the index of its representative in `sampled`.
    pub inverse: Vec<usize>,
    /// Original index of each sampled point.
    pub representatives: Vec<usize>,
    pub grid_size: f64,
}

/// Integer voxel coordinates `floor(p / s)` relative to the cell holding
/// the cloud's minimum corner.
pub fn voxel_key(p: &Point3, s: f64, origin: [i64; 3]) -> [i64; 3] {
    [
        (p[0] / s).floor() as i64 - origin[0],
        (p[1] / s).floor() as i64 - origin[1],
        (p[2] / s).floor() as i64 - origin[2],
    ]
}

pub fn grid_sample(cloud: &LabeledCloud, s: f64) -> Result<GridSampleResult> {
    grid_sample_with(cloud, s, GridSampleOptions::default())
}

pub fn grid_sample_with(cloud: &LabeledCloud, s: f64, opts: GridSampleOptions) -> Result<GridSampleResult> {
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::InvalidArgument(format!("grid size must be positive, got {s}")));
    }
    let (lo, _) = cloud.bounds();
    let origin = [
        (lo[0] / s).floor() as i64,
        (lo[1] / s).floor() as i64,
        (lo[2] / s).floor() as i64,
    ];
    let coords = cloud.coords();
    // voxels in order of first appearance
    let mut slot_of: HashMap<[i64; 3], usize> = HashMap::new();
    let mut members: Vec<Vec<usize>> = Vec::new();
    let mut voxel_of = Vec::with_capacity(coords.len());
    for (i, p) in coords.iter().enumerate() {
        let key = voxel_key(p, s, origin);
        let slot = *slot_of.entry(key).or_insert_with(|| {
            members.push(Vec::new());
            members.len() - 1
        });
        members[slot].push(i);
        voxel_of.push(slot);
    }
    let representatives: Vec<usize> = members
        .iter()
        .map(|m| match opts.representative {
            Representative::First => m[0],
            Representative::NearestCentroid => {
                let mut c = [0.0; 3];
                for &i in m {
                    for a in 0..3 {
                        c[a] += coords[i][a];
                    }
                }
                let inv = 1.0 / m.len() as f64;
                let c = [c[0] * inv, c[1] * inv, c[2] * inv];
                *m.iter()
                    .min_by(|&&a, &&b| dist2(&coords[a], &c).total_cmp(&dist2(&coords[b], &c)).then(a.cmp(&b)))
                    .unwrap()
            }
        })
        .collect();
    let mut sampled = cloud.select(&representatives);
    if opts.label_rule == LabelRule::Majority {
        if let Some(labels) = cloud.labels() {
            let voted: Vec<ClassId> = members.iter().map(|m| majority(m.iter().map(|&i| labels[i]))).collect();
            sampled = sampled.with_labels(voted)?;
        }
    }
    Ok(GridSampleResult {
        sampled,
        inverse: voxel_of,
        representatives,
        grid_size: s,
    })
}

fn majority(labels: impl Iterator<Item = ClassId>) -> ClassId {
    let mut counts: HashMap<ClassId, usize> = HashMap::new();
    for l in labels {
        *counts.entry(l).or_default() += 1;
    }
    counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(l, _)| l)
        .unwrap_or(0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropSpec {
    pub n_max: usize,
    pub k_local: usize,
    pub seed: u64,
}

impl Default for CropSpec {
    fn default() -> Self {
        Self {
            n_max: DEFAULT_N_MAX,
            k_local: DEFAULT_K_LOCAL,
            seed: 0,
        }
    }
}

impl CropSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_max == 0 || self.k_local == 0 {
            return Err(Error::InvalidArgument("n_max and k_local must be at least 1".into()));
        }
        Ok(())
    }
}

/// Indices of a seeded uniform subsample of `n_max` out of `n`, ascending.
/// Partial Fisher–Yates; returns `0..n` when under budget.
pub fn random_crop_indices(n: usize, n_max: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    if n <= n_max {
        return idx;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..n_max {
        let j = rng.gen_range(i..n);
        idx.swap(i, j);
    }
    idx.truncate(n_max);
    idx.sort_unstable();
    idx
}

pub fn random_crop(cloud: &LabeledCloud, spec: &CropSpec) -> Result<(LabeledCloud, Vec<usize>)> {
    spec.validate()?;
    if cloud.len() <= spec.n_max {
        return Ok((cloud.clone(), (0..cloud.len()).collect()));
    }
    let idx = random_crop_indices(cloud.len(), spec.n_max, spec.seed);
    Ok((cloud.select(&idx), idx))
}

/// Indices of the `k_local` points nearest `center` (ties to the lower
/// index), ascending.
pub fn sphere_crop_indices(coords: &[Point3], center: &Point3, k_local: usize) -> Vec<usize> {
    if coords.len() <= k_local {
        return (0..coords.len()).collect();
    }
    let mut cand: Vec<Neighbor> = coords
        .iter()
        .enumerate()
        .map(|(i, p)| Neighbor {
            index: i,
            dist2: dist2(p, center),
        })
        .collect();
    if k_local > 0 {
        cand.select_nth_unstable(k_local - 1);
    }
    let mut idx: Vec<usize> = cand[..k_local].iter().map(|n| n.index).collect();
    idx.sort_unstable();
    idx
}

pub fn sphere_crop(cloud: &LabeledCloud, center: &Point3, k_local: usize) -> Result<(LabeledCloud, Vec<usize>)> {
    if k_local == 0 {
        return Err(Error::InvalidArgument("k_local must be at least 1".into()));
    }
    let idx = sphere_crop_indices(cloud.coords(), center, k_local);
    Ok((cloud.select(&idx), idx))
}

/// Row `i` of the output is row `inverse[i]` of `field`.
pub fn lift_predictions(field: &ProbabilityField, inverse: &[usize]) -> Result<ProbabilityField> {
    let c = field.num_classes();
    let m = field.len();
    let mut out = Vec::with_capacity(inverse.len() * c);
    for (i, &r) in inverse.iter().enumerate() {
        if r >= m {
            return Err(Error::Integrity(format!(
                "inverse[{i}] = {r} but the sampled field has {m} rows"
            )));
        }
        out.extend_from_slice(field.row(r));
    }
    ProbabilityField::new(out, c, field.source())
}

/// Sphere crops tiling a whole scene for inference.
///
/// Centers sit at the cell midpoints of a regular XY grid at the mean scene
/// height. Cells are at most 1.5 times the radius a `k_local` crop would
/// have at the scene's mean XY density, so neighboring crops overlap by at
/// least a quarter of their diameter. Any point left uncovered seeds an
/// extra crop centered on it.
pub fn sphere_tiles(cloud: &LabeledCloud, k_local: usize) -> Result<Vec<Vec<usize>>> {
    if k_local == 0 {
        return Err(Error::InvalidArgument("k_local must be at least 1".into()));
    }
    let n = cloud.len();
    if n <= k_local {
        return Ok(vec![(0..n).collect()]);
    }
    let coords = cloud.coords();
    let (lo, hi) = cloud.bounds();
    let wx = (hi[0] - lo[0]).max(1e-6);
    let wy = (hi[1] - lo[1]).max(1e-6);
    let density = n as f64 / (wx * wy);
    let radius = (k_local as f64 / (std::f64::consts::PI * density)).sqrt();
    let spacing = (1.5 * radius).max(1e-6);
    let mean_z = coords.iter().map(|p| p[2]).sum::<f64>() / n as f64;
    let steps = |w: f64| ((w / spacing).ceil() as usize).max(1);
    let (nx, ny) = (steps(wx), steps(wy));
    let mut tiles = Vec::new();
    let mut covered = vec![false; n];
    for ix in 0..nx {
        for iy in 0..ny {
            let cx = lo[0] + wx * (ix as f64 + 0.5) / nx as f64;
            let cy = lo[1] + wy * (iy as f64 + 0.5) / ny as f64;
            let idx = sphere_crop_indices(coords, &[cx, cy, mean_z], k_local);
            for &i in &idx {
                covered[i] = true;
            }
            tiles.push(idx);
        }
    }
    let mut next = 0;
    while let Some(i) = covered[next..].iter().position(|c| !c).map(|p| p + next) {
        let idx = sphere_crop_indices(coords, &coords[i], k_local);
        for &j in &idx {
            covered[j] = true;
        }
        tiles.push(idx);
        next = i + 1;
    }
    Ok(tiles)
}

/// Exact sphere crop through a prebuilt index (same result as
/// [`sphere_crop_indices`]).
pub fn sphere_crop_indexed(index: &KdTree, center: &Point3, k_local: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = index.knn(center, k_local).into_iter().map(|n| n.index).collect();
    idx.sort_unstable();
    idx
}
