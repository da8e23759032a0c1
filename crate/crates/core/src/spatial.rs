//! Balanced KD-tree over 3D points with exact k-nearest and radius queries.
//!
//! Results are ordered by `(squared distance, point index)`, so equal
//! distances resolve to the lower index and every query returns exactly
//! the brute-force answer.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::sync::atomic::{AtomicU64, Ordering as AtomicOrdering};

use crate::model::Point3;

pub const DEFAULT_LEAF_SIZE: usize = 16;

#[inline]
pub fn dist2(a: &Point3, b: &Point3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub dist2: f64,
}

impl Eq for Neighbor {}

impl Ord for Neighbor {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist2
            .total_cmp(&other.dist2)
            .then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Neighbor {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone)]
struct Node {
    lo: Point3,
    hi: Point3,
    kind: NodeKind,
}

#[derive(Debug, Clone)]
enum NodeKind {
    Leaf { start: usize, end: usize },
    Inner { left: usize, right: usize },
}

#[derive(Debug)]
pub struct KdTree {
    points: Vec<Point3>,
    order: Vec<usize>,
    nodes: Vec<Node>,
    queries: AtomicU64,
    visits: AtomicU64,
}

impl Clone for KdTree {
    fn clone(&self) -> Self {
        Self {
            points: self.points.clone(),
            order: self.order.clone(),
            nodes: self.nodes.clone(),
            queries: AtomicU64::new(0),
            visits: AtomicU64::new(0),
        }
    }
}

fn box_dist2(q: &Point3, lo: &Point3, hi: &Point3) -> f64 {
    let mut d = 0.0;
    for a in 0..3 {
        let v = if q[a] < lo[a] {
            lo[a] - q[a]
        } else if q[a] > hi[a] {
            q[a] - hi[a]
        } else {
            0.0
        };
        d += v * v;
    }
    d
}

impl KdTree {
    pub fn new(points: Vec<Point3>) -> Self {
        Self::with_leaf_size(points, DEFAULT_LEAF_SIZE)
    }

    pub fn with_leaf_size(points: Vec<Point3>, leaf_size: usize) -> Self {
        let leaf_size = leaf_size.max(1);
        let mut tree = Self {
            order: (0..points.len()).collect(),
            points,
            nodes: Vec::new(),
            queries: AtomicU64::new(0),
            visits: AtomicU64::new(0),
        };
        if !tree.points.is_empty() {
            let n = tree.points.len();
            tree.build(0, n, leaf_size);
        }
        tree
    }

    fn build(&mut self, start: usize, end: usize, leaf_size: usize) -> usize {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in &self.order[start..end] {
            let p = self.points[i];
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            lo,
            hi,
            kind: NodeKind::Leaf { start, end },
        });
        let extent = [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]];
        if end - start <= leaf_size || extent.iter().all(|&e| e == 0.0) {
            return id;
        }
        let axis = (0..3)
            .max_by(|&a, &b| extent[a].total_cmp(&extent[b]))
            .unwrap();
        let mid = start + (end - start) / 2;
        let points = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points[a][axis].total_cmp(&points[b][axis]).then(a.cmp(&b))
        });
        let left = self.build(start, mid, leaf_size);
        let right = self.build(mid, end, leaf_size);
        self.nodes[id].kind = NodeKind::Inner { left, right };
        id
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    /// Number of queries answered since construction (or the last reset).
    pub fn query_count(&self) -> u64 {
        self.queries.load(AtomicOrdering::Relaxed)
    }

    /// Number of tree nodes visited by all queries.
    pub fn node_visits(&self) -> u64 {
        self.visits.load(AtomicOrdering::Relaxed)
    }

    pub fn reset_counters(&self) {
        self.queries.store(0, AtomicOrdering::Relaxed);
        self.visits.store(0, AtomicOrdering::Relaxed);
    }

    /// The `k` nearest points, nearest first.
    pub fn knn(&self, query: &Point3, k: usize) -> Vec<Neighbor> {
        self.queries.fetch_add(1, AtomicOrdering::Relaxed);
        if k == 0 || self.nodes.is_empty() {
            return Vec::new();
        }
        let mut heap: BinaryHeap<Neighbor> = BinaryHeap::with_capacity(k + 1);
        let mut visits = 0u64;
        let mut stack = vec![0usize];
        while let Some(id) = stack.pop() {
            let node = &self.nodes[id];
            if heap.len() == k && box_dist2(query, &node.lo, &node.hi) > heap.peek().unwrap().dist2 {
                continue;
            }
            visits += 1;
            match node.kind {
                NodeKind::Leaf { start, end } => {
                    for &i in &self.order[start..end] {
                        let cand = Neighbor {
                            index: i,
                            dist2: dist2(query, &self.points[i]),
                        };
                        if heap.len() < k {
                            heap.push(cand);
                        } else if cand < *heap.peek().unwrap() {
                            heap.pop();
                            heap.push(cand);
                        }
                    }
                }
                NodeKind::Inner { left, right } => {
                    let dl = box_dist2(query, &self.nodes[left].lo, &self.nodes[left].hi);
                    let dr = box_dist2(query, &self.nodes[right].lo, &self.nodes[right].hi);
                    // nearer child popped first
                    if dl <= dr {
                        stack.push(right);
                        stack.push(left);
                    } else {
                        stack.push(left);
                        stack.push(right);
                    }
                }
            }
        }
        self.visits.fetch_add(visits, AtomicOrdering::Relaxed);
        heap.into_sorted_vec()
    }

    pub fn nearest(&self, query: &Point3) -> Option<Neighbor> {
        self.knn(query, 1).into_iter().next()
    }

    /// All points with distance `<= radius`, ascending by index.
    pub fn radius(&self, query: &Point3, radius: f64) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .radius_neighbors(query, radius)
            .into_iter()
            .map(|n| n.index)
            .collect();
        out.sort_unstable();
        out
    }

    /// All points with distance `<= radius`, ordered by `(distance, index)`.
    pub fn radius_neighbors(&self, query: &Point3, radius: f64) -> Vec<Neighbor> {
        let mut out = Vec::new();
        self.for_each_in_radius(query, radius, |index, dist2| out.push(Neighbor { index, dist2 }));
        out.sort_unstable();
        out
    }

    /// Calls `visit(index, dist2)` for every point within `radius`, in tree order.
    pub fn for_each_in_radius(&self, query: &Point3, radius: f64, mut visit: impl FnMut(usize, f64)) {
        self.queries.fetch_add(1, AtomicOrdering::Relaxed);
        if self.nodes.is_empty() || !(radius >= 0.0) {
            return;
        }
        let r2 = radius * radius;
        let mut visits = 0u64;
        let mut stack = vec![0usize];
        while let Some(id) = stack.pop() {
            let node = &self.nodes[id];
            if box_dist2(query, &node.lo, &node.hi) > r2 {
                continue;
            }
            visits += 1;
            match node.kind {
                NodeKind::Leaf { start, end } => {
                    for &i in &self.order[start..end] {
                        let d = dist2(query, &self.points[i]);
                        if d <= r2 {
                            visit(i, d);
                        }
                    }
                }
                NodeKind::Inner { left, right } => {
                    stack.push(right);
                    stack.push(left);
                }
            }
        }
        self.visits.fetch_add(visits, AtomicOrdering::Relaxed);
    }
}

/// Lowest z among the points within a horizontal radius of a query, from a
/// 2D grid of per-cell minima. Cells entirely inside the disk contribute
/// their stored minimum; cells crossing the circle are scanned point by
/// point, so the answer equals a brute-force scan.
#[derive(Debug, Clone)]
pub struct ColumnMinGrid {
    cell: f64,
    origin: [f64; 2],
    nx: usize,
    ny: usize,
    cell_min: Vec<f64>,
    starts: Vec<usize>,
    members: Vec<usize>,
    points: Vec<Point3>,
}

impl ColumnMinGrid {
    /// Grid tuned for queries of about `radius`.
    pub fn new(points: &[Point3], radius: f64) -> Self {
        let cell = (radius / 2.0).max(1e-6);
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for p in points {
            for a in 0..2 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        if points.is_empty() {
            lo = [0.0; 2];
            hi = [0.0; 2];
        }
        let nx = ((hi[0] - lo[0]) / cell).floor() as usize + 1;
        let ny = ((hi[1] - lo[1]) / cell).floor() as usize + 1;
        let key = |p: &Point3| {
            let ix = (((p[0] - lo[0]) / cell).floor() as usize).min(nx - 1);
            let iy = (((p[1] - lo[1]) / cell).floor() as usize).min(ny - 1);
            iy * nx + ix
        };
        let mut counts = vec![0usize; nx * ny + 1];
        let mut cell_min = vec![f64::INFINITY; nx * ny];
        for p in points {
            let k = key(p);
            counts[k + 1] += 1;
            cell_min[k] = cell_min[k].min(p[2]);
        }
        for i in 1..counts.len() {
            counts[i] += counts[i - 1];
        }
        let starts = counts.clone();
        let mut fill = counts;
        let mut members = vec![0; points.len()];
        for (i, p) in points.iter().enumerate() {
            let k = key(p);
            members[fill[k]] = i;
            fill[k] += 1;
        }
        Self {
            cell,
            origin: lo,
            nx,
            ny,
            cell_min,
            starts,
            members,
            points: points.to_vec(),
        }
    }

    /// Minimum z over points with `dx^2 + dy^2 <= radius^2`.
    pub fn min_z(&self, x: f64, y: f64, radius: f64) -> Option<f64> {
        if self.points.is_empty() || !(radius >= 0.0) {
            return None;
        }
        let r2 = radius * radius;
        // cells are classified with a relative margin against rounding
        let inside = r2 * (1.0 - 1e-9);
        let span = |q: f64, o: f64, n: usize| {
            let a = ((q - radius - o) / self.cell).floor() - 1.0;
            let b = ((q + radius - o) / self.cell).floor() + 1.0;
            (a.max(0.0) as usize, (b.max(-1.0) as i64).min(n as i64 - 1))
        };
        let (x0, x1) = span(x, self.origin[0], self.nx);
        let (y0, y1) = span(y, self.origin[1], self.ny);
        let mut best: Option<f64> = None;
        for iy in y0 as i64..=y1 {
            let cy0 = self.origin[1] + iy as f64 * self.cell;
            let (near_y, far_y) = axis_gap(y, cy0, cy0 + self.cell);
            for ix in x0 as i64..=x1 {
                let k = iy as usize * self.nx + ix as usize;
                if self.starts[k] == self.starts[k + 1] {
                    continue;
                }
                let cx0 = self.origin[0] + ix as f64 * self.cell;
                let (near_x, far_x) = axis_gap(x, cx0, cx0 + self.cell);
                if near_x * near_x + near_y * near_y > r2 * (1.0 + 1e-9) + 1e-12 {
                    continue;
                }
                if far_x * far_x + far_y * far_y <= inside {
                    best = Some(best.map_or(self.cell_min[k], |b| b.min(self.cell_min[k])));
                    continue;
                }
                for &i in &self.members[self.starts[k]..self.starts[k + 1]] {
                    let p = &self.points[i];
                    let (dx, dy) = (p[0] - x, p[1] - y);
                    if dx * dx + dy * dy <= r2 {
                        best = Some(best.map_or(p[2], |b| b.min(p[2])));
                    }
                }
            }
        }
        best
    }
}

/// Smallest and largest distance from `q` to the interval `[lo, hi]`.
fn axis_gap(q: f64, lo: f64, hi: f64) -> (f64, f64) {
    let near = if q < lo {
        lo - q
    } else if q > hi {
        q - hi
    } else {
        0.0
    };
    (near, (q - lo).abs().max((hi - q).abs()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn column_min_matches_brute_force() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<Point3> = (0..3000)
            .map(|_| [rng.gen_range(-20.0..20.0), rng.gen_range(-8.0..8.0), rng.gen_range(-3.0..3.0)])
            .collect();
        for radius in [0.3, 2.0, 5.0] {
            let grid = ColumnMinGrid::new(&pts, radius);
            for q in pts.iter().take(400) {
                let brute = pts
                    .iter()
                    .filter(|p| (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) <= radius * radius)
                    .map(|p| p[2])
                    .fold(None, |m: Option<f64>, z| Some(m.map_or(z, |m| m.min(z))));
                assert_eq!(grid.min_z(q[0], q[1], radius), brute);
            }
        }
        assert_eq!(ColumnMinGrid::new(&pts, 1.0).min_z(100.0, 0.0, 1.0), None);
    }
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_knn(points: &[Point3], q: &Point3, k: usize) -> Vec<Neighbor> {
        let mut all: Vec<Neighbor> = points
            .iter()
            .enumerate()
            .map(|(i, p)| Neighbor { index: i, dist2: dist2(q, p) })
            .collect();
        all.sort();
        all.truncate(k);
        all
    }

    #[test]
    fn single_point() {
        let t = KdTree::new(vec![[1.0, 2.0, 3.0]]);
        let n = t.nearest(&[100.0, -4.0, 0.0]).unwrap();
        assert_eq!(n.index, 0);
    }

    #[test]
    fn line_knn() {
        let pts: Vec<Point3> = (0..10).map(|i| [i as f64, 0.0, 0.0]).collect();
        let t = KdTree::with_leaf_size(pts, 2);
        let got: Vec<usize> = t.knn(&[6.2, 0.0, 0.0], 3).iter().map(|n| n.index).collect();
        assert_eq!(got, vec![6, 7, 5]);
    }

    #[test]
    fn ties_resolve_to_lower_index() {
        // duplicates and equidistant points
        let pts = vec![[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, -1.0, 0.0]];
        let t = KdTree::with_leaf_size(pts.clone(), 1);
        for k in 1..=5 {
            assert_eq!(t.knn(&[0.0; 3], k), brute_knn(&pts, &[0.0; 3], k));
        }
    }

    #[test]
    fn matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // integer-valued grid coordinates force many exact ties
        let pts: Vec<Point3> = (0..1000)
            .map(|i| {
                if i % 2 == 0 {
                    [rng.gen_range(0..10) as f64, rng.gen_range(0..10) as f64, rng.gen_range(0..10) as f64]
                } else {
                    [rng.gen_range(-5.0..15.0), rng.gen_range(-5.0..15.0), rng.gen_range(-5.0..15.0)]
                }
            })
            .collect();
        let t = KdTree::new(pts.clone());
        for _ in 0..100 {
            let q = [rng.gen_range(-6.0..16.0), rng.gen_range(-6.0..16.0), rng.gen_range(-6.0..16.0)];
            for k in [1, 5, 17] {
                assert_eq!(t.knn(&q, k), brute_knn(&pts, &q, k));
            }
            let r = rng.gen_range(0.0..4.0);
            let mut brute: Vec<usize> = (0..pts.len()).filter(|&i| dist2(&q, &pts[i]) <= r * r).collect();
            brute.sort_unstable();
            assert_eq!(t.radius(&q, r), brute);
        }
        assert_eq!(t.query_count(), 100 * 4);
    }

    #[test]
    fn k_larger_than_n() {
        let t = KdTree::new(vec![[0.0; 3], [1.0; 3]]);
        assert_eq!(t.knn(&[0.0; 3], 5).len(), 2);
    }
}
