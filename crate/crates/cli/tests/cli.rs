use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use corrseg::io::{read_field, read_scene, Split};
use corrseg_cli::stages::Benchmark;

const TINY: &str = "\
seed = 3
[sampling]
n_max = 2048
k_local = 2048
[train]
epochs = 3
optimizer = adamw
lr = 0.01
hidden = 16
embed_dim = 8
supcon_samples = 32
[fusion]
grid_steps = 10
";

fn corrseg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_corrseg"))
        .args(args)
        .current_dir(dir)
        .env_remove("CORRSEG_CONFIG")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = corrseg(dir, args);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> Option<i32> {
    out.status.code()
}

fn scene(dir: &Path) -> PathBuf {
    std::fs::write(dir.join("small.spec"), "span_length = 40\ntowers = 2\nvegetation_points = 200\n").unwrap();
    ok(dir, &["--seed", "4", "synth", "--spec", "small.spec", "--out", "scene.crs"]);
    dir.join("scene.crs")
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for args in [
        &[][..],
        &["frobnicate"],
        &["eval", "--bogus"],
        &["train", "--branch", "sideways", "--manifest", "m.tsv", "--out", "x"],
        &["fuse", "--local", "a"],
        &["--jobs", "0", "stats", "--input", "x.crs"],
    ] {
        let out = corrseg(d, args);
        assert_eq!(code(&out), Some(2), "{args:?}");
        assert!(!out.stderr.is_empty(), "{args:?} printed no usage text");
    }
    assert_eq!(code(&corrseg(d, &["--help"])), Some(0));
}

#[test]
fn domain_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&corrseg(d, &["stats", "--input", "missing.crs"])), Some(1));
    std::fs::write(d.join("bad.cfg"), "sampling.gridsize = 1\n").unwrap();
    assert_eq!(code(&corrseg(d, &["--config", "bad.cfg", "stats", "--input", "x.crs"])), Some(1));
    std::fs::write(d.join("junk.crs"), b"not a scene").unwrap();
    assert_eq!(code(&corrseg(d, &["voxelize", "--input", "junk.crs", "--out", "v.crs"])), Some(1));
    assert_eq!(code(&corrseg(d, &["synth", "--scenes", "2", "--out", "bench"])), Some(1));
}

#[test]
fn eval_of_ground_truth_against_itself_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    scene(d);
    let stdout = ok(d, &["eval", "--gt", "scene.crs", "--pred", "scene.crs", "--tsv", "m.tsv", "--min-miou", "1"]);
    assert!(stdout.contains("mIoU 1.0000"), "{stdout}");
    let tsv = std::fs::read_to_string(d.join("m.tsv")).unwrap();
    assert!(tsv.starts_with("protocol\tclass\tname\tiou\n"));
    assert!(tsv.lines().any(|l| l.starts_with("full\tmIoU\t") && l.ends_with("\t1.000000")), "{tsv}");
}

#[test]
fn min_miou_gate_fails_with_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    scene(d);
    ok(d, &["voxelize", "--input", "scene.crs", "--out", "vox.crs", "--grid-size", "50"]);
    let out = corrseg(d, &["eval", "--gt", "vox.crs", "--pred", "vox.crs", "--min-miou", "0.5"]);
    assert_eq!(code(&out), Some(0));
    // a one-class prediction scores far below the gate
    let cloud = read_scene(&d.join("scene.crs")).unwrap();
    let flat = corrseg::model::Prediction::new(vec![2; cloud.len()], corrseg::model::Provenance::FusedPreliminary);
    corrseg::io::write_prediction(&d.join("flat.labels"), &flat).unwrap();
    let out = corrseg(d, &["eval", "--gt", "scene.crs", "--pred", "flat.labels", "--min-miou", "0.5"]);
    assert_eq!(code(&out), Some(1));
}

#[test]
fn fusing_identical_fields_returns_the_input() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cloud = read_scene(&scene(d)).unwrap();
    let field = corrseg::model::ProbabilityField::from_logits(
        &(0..cloud.len() * 22).map(|i| ((i * 7919) % 13) as f64 / 3.0).collect::<Vec<_>>(),
        22,
        corrseg::model::FieldSource::Local,
    )
    .unwrap();
    corrseg::io::write_field(&d.join("a.prob"), &field).unwrap();
    std::fs::copy(d.join("a.prob"), d.join("b.prob")).unwrap();
    ok(d, &["fuse", "--local", "a.prob", "--global", "b.prob", "--alpha", "0.5", "--out", "f.prob"]);
    let fused = read_field(&d.join("f.prob")).unwrap();
    let bits = |f: &corrseg::model::ProbabilityField| f.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&fused), bits(&field));
}

#[test]
fn config_falls_back_to_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    scene(d);
    std::fs::write(d.join("coarse.cfg"), "sampling.grid_size = 2.5\n").unwrap();
    let run = |env: Option<&str>| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_corrseg"));
        cmd.args(["voxelize", "--input", "scene.crs", "--out", "v.crs"]).current_dir(d).env_remove("CORRSEG_CONFIG");
        if let Some(e) = env {
            cmd.env("CORRSEG_CONFIG", e);
        }
        String::from_utf8(cmd.output().unwrap().stdout).unwrap()
    };
    assert!(run(Some("coarse.cfg")).contains("at 2.5 m"));
    assert!(run(None).contains("at 0.25 m"));
    let explicit = ok(d, &["--config", "coarse.cfg", "voxelize", "--input", "scene.crs", "--out", "v.crs"]);
    assert!(explicit.contains("at 2.5 m"));
}

#[test]
fn synth_benchmark_and_stats() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("bench.spec"), "profile = desk\nspan_length = 30\n").unwrap();
    let stdout = ok(d, &["--seed", "1", "synth", "--spec", "bench.spec", "--scenes", "4", "--out", "bench"]);
    assert!(stdout.contains("wrote 4 scenes (2 train, 0 val, 2 test)"), "{stdout}");
    ok(d, &["stats", "--manifest", "bench/manifest.tsv", "--tsv", "stats.tsv"]);
    let tsv = std::fs::read_to_string(d.join("stats.tsv")).unwrap();
    assert!(tsv.contains("ground+vegetation"), "{tsv}");
}

fn with<'a>(rest: &[&'a str]) -> Vec<&'a str> {
    [&["--config", "tiny.cfg"][..], rest].concat()
}

fn tsv_bytes(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn pipeline_matches_the_individual_stages() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("tiny.cfg"), TINY).unwrap();
    std::fs::write(d.join("bench.spec"), "profile = desk\nspan_length = 30\nvegetation_points = 200\n").unwrap();
    ok(d, &["--seed", "2", "synth", "--spec", "bench.spec", "--scenes", "7", "--out", "bench"]);

    ok(d, &with(&["pipeline", "--manifest", "bench/manifest.tsv", "--out", "run"]));

    for branch in ["global", "local"] {
        let ckpt = format!("models/{branch}.ckpt");
        ok(d, &with(&["train", "--branch", branch, "--manifest", "bench/manifest.tsv", "--out", &ckpt]));
        assert_eq!(tsv_bytes(&d.join(&ckpt)), tsv_bytes(&d.join("run").join(&ckpt)), "{branch} checkpoint");
        for split in ["val", "test"] {
            ok(
                d,
                &with(&["predict", "--model", &ckpt, "--manifest", "bench/manifest.tsv", "--split", split, "--out-dir", "s"]),
            );
        }
    }
    let tuned = ok(d, &with(&["tune-alpha", "--manifest", "bench/manifest.tsv", "--fields", "s", "--tsv", "alpha.tsv"]));
    let alpha = tuned.split_whitespace().nth(2).unwrap().to_string();
    assert_eq!(tsv_bytes(&d.join("alpha.tsv")), tsv_bytes(&d.join("run/metrics/alpha_curve.tsv")));

    let bench = Benchmark::load(&d.join("bench/manifest.tsv")).unwrap();
    for e in bench.entries(Split::Test) {
        let id = &e.scene_id;
        let scene = bench.root.join(&e.path);
        let scene = scene.to_str().unwrap();
        let (l, g, f) = (format!("s/{id}.local.prob"), format!("s/{id}.global.prob"), format!("s/{id}.fused.prob"));
        let fl = format!("s/{id}.fused.labels");
        ok(d, &with(&["fuse", "--local", &l, "--global", &g, "--alpha", &alpha, "--out", &f, "--labels", &fl]));
        let vl = format!("s/{id}.verified.labels");
        ok(d, &with(&["verify", "--input", scene, "--fused", &f, "--out", &vl]));
        for name in [&l, &g, &f, &fl, &vl] {
            assert_eq!(tsv_bytes(&d.join(name)), tsv_bytes(&d.join("run/scenes").join(&name[2..])), "{name}");
        }
    }
    for stage in ["global", "local", "fused", "verified"] {
        let out = format!("{stage}.tsv");
        ok(d, &with(&["eval", "--manifest", "bench/manifest.tsv", "--dir", "s", "--stage", stage, "--tsv", &out]));
        assert_eq!(tsv_bytes(&d.join(&out)), tsv_bytes(&d.join("run/metrics").join(&out)), "{stage} metrics");
    }
}
