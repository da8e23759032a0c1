use corrseg::eval::{class_shares, default_groups, GROUP_CRITICAL_ATTACHMENTS, GROUP_GROUND_VEGETATION};
use corrseg::io::{read_scene, SceneManifest, Split};
use corrseg::synth::{make_benchmark, BenchmarkProfile};
use corrseg::Taxonomy;

#[test]
fn ten_scene_benchmark_splits_and_regenerates() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let profile = BenchmarkProfile::default();
    let m = make_benchmark(10, &profile, 11, a.path()).unwrap();
    assert_eq!((m.count(Split::Train), m.count(Split::Val), m.count(Split::Test)), (7, 1, 2));
    assert_eq!(SceneManifest::load(&a.path().join("manifest.tsv")).unwrap(), m);
    make_benchmark(10, &profile, 11, b.path()).unwrap();
    for name in ["manifest.tsv", "scenes/scene_000.crs", "scenes/scene_009.crs"] {
        assert_eq!(std::fs::read(a.path().join(name)).unwrap(), std::fs::read(b.path().join(name)).unwrap());
    }

    let tax = Taxonomy::default();
    let scenes: Vec<_> = m.split(Split::Train).chain(m.split(Split::Val)).chain(m.split(Split::Test))
        .map(|e| read_scene(&a.path().join(&e.path)).unwrap())
        .collect();
    let shares = class_shares(&scenes, &default_groups(&tax), tax.num_classes()).unwrap();
    let pct = |name: &str| shares.iter().find(|s| s.name == name).unwrap().percent;
    assert!(pct(GROUP_GROUND_VEGETATION) >= 90.0);
    let rare = pct(GROUP_CRITICAL_ATTACHMENTS);
    assert!((0.2..=1.0).contains(&rare), "{rare}");
}

#[test]
fn tiny_benchmarks_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    assert!(make_benchmark(2, &BenchmarkProfile::default(), 0, dir.path()).is_err());
}
