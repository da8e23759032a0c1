use corrseg::io::{
    decode_field, decode_prediction, decode_scene, encode_field, encode_prediction, encode_scene, export_ply, import_ply,
    parse_ply, read_scene, write_ply_bytes, write_scene, PlyFormat,
};
use corrseg::{FieldSource, LabeledCloud, Prediction, ProbabilityField, Provenance, Taxonomy};
use proptest::prelude::*;

fn cloud_strategy() -> impl Strategy<Value = LabeledCloud> {
    (1usize..200, any::<bool>()).prop_flat_map(|(n, with_colors)| {
        (
            prop::collection::vec(prop::array::uniform3(-1e6f64..1e6), n),
            prop::collection::vec(prop::array::uniform3(any::<u8>()), n),
            prop::collection::vec(0u16..22, n),
        )
            .prop_map(move |(coords, colors, labels)| {
                LabeledCloud::new("prop", coords, with_colors.then_some(colors), Some(labels)).unwrap()
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn native_scene_is_bit_exact(cloud in cloud_strategy()) {
        let hash = Taxonomy::default().hash64();
        let bytes = encode_scene(&cloud, hash);
        let (header, back) = decode_scene(&bytes).unwrap();
        prop_assert_eq!(header.taxonomy_hash, hash);
        prop_assert_eq!(&back, &cloud);
        prop_assert_eq!(encode_scene(&back, hash), bytes);
    }

    #[test]
    fn ply_preserves_labels(cloud in cloud_strategy(), binary in any::<bool>()) {
        let format = if binary { PlyFormat::BinaryLittleEndian } else { PlyFormat::Ascii };
        let back = parse_ply(&write_ply_bytes(&cloud, format), "prop").unwrap();
        prop_assert_eq!(back.labels(), cloud.labels());
        prop_assert_eq!(back.colors(), cloud.colors());
        for (a, b) in back.coords().iter().zip(cloud.coords()) {
            for k in 0..3 {
                // coordinates are stored as float32
                prop_assert_eq!(a[k], b[k] as f32 as f64);
            }
        }
    }

    #[test]
    fn fields_and_predictions_round_trip(n in 1usize..50, c in 2usize..8, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let logits: Vec<f64> = (0..n * c).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let f = ProbabilityField::from_logits(&logits, c, FieldSource::Local).unwrap();
        prop_assert_eq!(decode_field(&encode_field(&f)).unwrap(), f);
        let p = Prediction::new((0..n).map(|i| (i % c) as u16).collect(), Provenance::GeoVerified);
        prop_assert_eq!(decode_prediction(&encode_prediction(&p)).unwrap(), p);
    }
}

#[test]
fn files_round_trip_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let cloud = LabeledCloud::labeled("disk", vec![[0.1, 0.2, 0.3], [1e-300, -0.0, 7.5]], vec![4, 21]).unwrap();
    let path = dir.path().join("a.crs");
    write_scene(&path, &cloud, 9).unwrap();
    assert_eq!(read_scene(&path).unwrap(), cloud);
    for format in [PlyFormat::Ascii, PlyFormat::BinaryLittleEndian] {
        let ply = dir.path().join("a.ply");
        export_ply(&cloud, &ply, format).unwrap();
        assert_eq!(import_ply(&ply).unwrap().labels(), cloud.labels());
    }
}

#[test]
fn truncated_scene_is_rejected() {
    let cloud = LabeledCloud::labeled("t", vec![[0.0; 3]; 4], vec![1; 4]).unwrap();
    let bytes = encode_scene(&cloud, 1);
    for cut in [0, 8, bytes.len() / 2, bytes.len() - 1] {
        assert!(decode_scene(&bytes[..cut]).is_err());
    }
}
