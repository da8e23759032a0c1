//! Per-point handcrafted geometric features over k-nearest neighborhoods.
//!
//! Columns, in order:
//!
//! | # | feature |
//! |---|---|
//! | 0 | linearity `(l1 - l2) / l1` |
//! | 1 | planarity `(l2 - l3) / l1` |
//! | 2 | scattering `l3 / l1` |
//! | 3 | verticality: `|z|` of the least-variance eigenvector |
//! | 4 | height above the lowest point within a vertical cylinder |
//! | 5 | `ln(1 + k / sphere volume)` at the k-th neighbor distance |
//! | 6 | neighborhood z extent |
//! | 7 | distance from the point to its neighborhood centroid |
//!
//! `l1 >= l2 >= l3` are the eigenvalues of the neighborhood covariance.
//! Neighborhoods with `l1 <= 1e-12` produce an all-zero row.

use nalgebra::{Matrix3, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{LabeledCloud, Point3};
use crate::spatial::{ColumnMinGrid, KdTree};

pub const FEATURE_DIM: usize = 8;
pub const FEATURE_NAMES: [&str; FEATURE_DIM] = [
    "linearity",
    "planarity",
    "scattering",
    "verticality",
    "height_above_local_min",
    "log_density",
    "z_extent",
    "centroid_offset",
];

const DEGENERATE_EIGENVALUE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureConfig {
    pub k_neighbors: usize,
    /// Radius of the XY disk searched for the local ground minimum, meters.
    pub height_radius: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            k_neighbors: 16,
            height_radius: 5.0,
        }
    }
}

/// Row-major N×d feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    feats: Vec<f64>,
    dim: usize,
    pub k_neighbors: usize,
}

impl FeatureMatrix {
    pub fn new(feats: Vec<f64>, dim: usize, k_neighbors: usize) -> Result<Self> {
        if dim == 0 || feats.len() % dim != 0 {
            return Err(Error::ShapeMismatch(format!("{} values for dimension {dim}", feats.len())));
        }
        if feats.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("non-finite feature".into()));
        }
        Ok(Self { feats, dim, k_neighbors })
    }

    pub fn len(&self) -> usize {
        self.feats.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.feats.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.feats[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.feats
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut feats = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            feats.extend_from_slice(self.row(i));
        }
        Self {
            feats,
            dim: self.dim,
            k_neighbors: self.k_neighbors,
        }
    }
}

pub fn build_index(cloud: &LabeledCloud) -> KdTree {
    KdTree::new(cloud.coords().to_vec())
}

/// Eigen-features of a point set: `[linearity, planarity, scattering,
/// verticality]`, or `None` when degenerate.
pub fn eigen_features(points: &[Point3]) -> Option<[f64; 4]> {
    let (values, vectors) = covariance_eigen(points)?;
    let [l1, l2, l3] = values;
    if l1 <= DEGENERATE_EIGENVALUE {
        return None;
    }
    let normal = vectors[2];
    Some([
        ((l1 - l2) / l1).clamp(0.0, 1.0),
        ((l2 - l3) / l1).clamp(0.0, 1.0),
        (l3 / l1).clamp(0.0, 1.0),
        normal[2].abs().clamp(0.0, 1.0),
    ])
}

/// Eigenvalues of the (biased) covariance in descending order with their
/// unit eigenvectors. Negative round-off is clamped to zero.
pub fn covariance_eigen(points: &[Point3]) -> Option<([f64; 3], [[f64; 3]; 3])> {
    if points.is_empty() {
        return None;
    }
    let n = points.len() as f64;
    let mut mean = [0.0; 3];
    for p in points {
        for a in 0..3 {
            mean[a] += p[a];
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut cov = Matrix3::<f64>::zeros();
    for p in points {
        let d = [p[0] - mean[0], p[1] - mean[1], p[2] - mean[2]];
        for r in 0..3 {
            for c in 0..3 {
                cov[(r, c)] += d[r] * d[c];
            }
        }
    }
    cov /= n;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.map(|i| eig.eigenvalues[i].max(0.0));
    let vectors = order.map(|i| {
        let v = eig.eigenvectors.column(i);
        [v[0], v[1], v[2]]
    });
    Some((values, vectors))
}

pub fn extract_features(cloud: &LabeledCloud, index: &KdTree, cfg: &FeatureConfig) -> Result<FeatureMatrix> {
    if cfg.k_neighbors < 3 {
        return Err(Error::InvalidArgument(format!(
            "k_neighbors must be at least 3, got {}",
            cfg.k_neighbors
        )));
    }
    if index.len() != cloud.len() {
        return Err(Error::ShapeMismatch(format!(
            "index over {} points for a cloud of {}",
            index.len(),
            cloud.len()
        )));
    }
    let coords = cloud.coords();
    let columns = ColumnMinGrid::new(coords, cfg.height_radius);
    let rows: Vec<[f64; FEATURE_DIM]> = coords
        .par_iter()
        .map(|p| point_features(p, coords, index, &columns, cfg))
        .collect();
    let feats = rows.into_iter().flatten().collect();
    FeatureMatrix::new(feats, FEATURE_DIM, cfg.k_neighbors)
}

fn point_features(
    p: &Point3,
    coords: &[Point3],
    index: &KdTree,
    columns: &ColumnMinGrid,
    cfg: &FeatureConfig,
) -> [f64; FEATURE_DIM] {
    let neighbors = index.knn(p, cfg.k_neighbors);
    let hood: Vec<Point3> = neighbors.iter().map(|n| coords[n.index]).collect();
    let Some(eigen) = eigen_features(&hood) else {
        return [0.0; FEATURE_DIM];
    };
    let min_z = columns.min_z(p[0], p[1], cfg.height_radius).unwrap_or(p[2]).min(p[2]);
    let r_k = neighbors.last().map(|n| n.dist2.sqrt()).unwrap_or(0.0).max(1e-3);
    let volume = 4.0 / 3.0 * std::f64::consts::PI * r_k.powi(3);
    let density = (hood.len() as f64 / volume).ln_1p();
    let (lo_z, hi_z) = hood
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), q| (lo.min(q[2]), hi.max(q[2])));
    let k = hood.len() as f64;
    let c = hood.iter().fold([0.0; 3], |acc, q| [acc[0] + q[0], acc[1] + q[1], acc[2] + q[2]]);
    let c = [c[0] / k, c[1] / k, c[2] / k];
    let offset = crate::spatial::dist2(p, &c).sqrt();
    [
        eigen[0],
        eigen[1],
        eigen[2],
        eigen[3],
        p[2] - min_z,
        density,
        hi_z - lo_z,
        offset,
    ]
}
