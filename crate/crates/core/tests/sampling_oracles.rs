use std::collections::{BTreeMap, BTreeSet};

use corrseg::sampling::{grid_sample, lift_predictions, sphere_crop, sphere_crop_indexed, sphere_tiles};
use corrseg::spatial::KdTree;
use corrseg::{FieldSource, LabeledCloud, Point3, ProbabilityField};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_cloud(n: usize, seed: u64) -> LabeledCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords: Vec<Point3> = (0..n)
        .map(|_| [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(0.0..3.0)])
        .collect();
    let labels = (0..n).map(|_| rng.gen_range(0..22)).collect();
    LabeledCloud::labeled("r", coords, labels).unwrap()
}

fn cells(coords: &[Point3], s: f64) -> Vec<[i64; 3]> {
    coords
        .iter()
        .map(|p| [(p[0] / s).floor() as i64, (p[1] / s).floor() as i64, (p[2] / s).floor() as i64])
        .collect()
}

#[test]
fn grid_sample_matches_cell_oracle() {
    for seed in 0..5 {
        let cloud = random_cloud(1000, seed);
        for s in [0.25, 0.5, 1.3] {
            let r = grid_sample(&cloud, s).unwrap();
            let cell = cells(cloud.coords(), s);
            let distinct: BTreeSet<_> = cell.iter().collect();
            assert_eq!(r.sampled.len(), distinct.len());
            let mut group: BTreeMap<[i64; 3], usize> = BTreeMap::new();
            for (i, &v) in r.inverse.iter().enumerate() {
                assert_eq!(cell[r.representatives[v]], cell[i]);
                assert_eq!(*group.entry(cell[i]).or_insert(v), v);
            }
            assert_eq!(r.sampled.coords()[0], cloud.coords()[r.representatives[0]]);
        }
    }
}

#[test]
fn sphere_crop_matches_sorted_oracle() {
    for seed in 0..5 {
        let cloud = random_cloud(1000, seed + 10);
        let center = cloud.coords()[seed as usize * 7];
        for k in [1, 37, 500, 1000, 2000] {
            let (_, idx) = sphere_crop(&cloud, &center, k).unwrap();
            let mut order: Vec<usize> = (0..cloud.len()).collect();
            let d = |i: usize| {
                let p = cloud.coords()[i];
                (0..3).map(|a| (p[a] - center[a]).powi(2)).sum::<f64>()
            };
            order.sort_by(|&a, &b| d(a).total_cmp(&d(b)).then(a.cmp(&b)));
            order.truncate(k.min(cloud.len()));
            order.sort_unstable();
            assert_eq!(idx, order);
            let tree = KdTree::new(cloud.coords().to_vec());
            assert_eq!(sphere_crop_indexed(&tree, &center, k), order);
        }
    }
}

#[test]
fn lift_copies_representative_rows() {
    let cloud = random_cloud(1000, 99);
    let r = grid_sample(&cloud, 0.7).unwrap();
    let m = r.sampled.len();
    let logits: Vec<f64> = (0..m * 4).map(|i| (i as f64 * 0.37).sin()).collect();
    let field = ProbabilityField::from_logits(&logits, 4, FieldSource::Global).unwrap();
    let lifted = lift_predictions(&field, &r.inverse).unwrap();
    assert_eq!(lifted.len(), cloud.len());
    for i in 0..cloud.len() {
        assert_eq!(lifted.row(i), field.row(r.inverse[i]));
    }
    assert!(lift_predictions(&field, &[m]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn representatives_never_leave_their_voxel(seed in any::<u64>(), n in 1usize..400, s in 0.05f64..2.0) {
        let cloud = random_cloud(n, seed);
        let r = grid_sample(&cloud, s).unwrap();
        let cell = cells(cloud.coords(), s);
        let reps: BTreeSet<_> = r.representatives.iter().collect();
        prop_assert_eq!(reps.len(), r.sampled.len());
        for (i, &v) in r.inverse.iter().enumerate() {
            prop_assert_eq!(cell[r.representatives[v]], cell[i]);
        }
    }

    #[test]
    fn tiles_cover_every_point(seed in any::<u64>(), n in 1usize..600, k in 1usize..200) {
        let cloud = random_cloud(n, seed);
        let tiles = sphere_tiles(&cloud, k).unwrap();
        let mut covered = vec![false; n];
        for t in &tiles {
            prop_assert!(t.len() == k.min(n));
            for &i in t {
                covered[i] = true;
            }
        }
        prop_assert!(covered.iter().all(|&c| c));
    }
}
