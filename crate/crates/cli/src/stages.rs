//! Pipeline stages as file-level functions. The `pipeline` subcommand and
//! the single-stage subcommands share these, so both write identical files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use corrseg::eval::{primary_iou, ConfusionMatrix, IouReport};
use corrseg::fusion::{fuse, preliminary_labels, tune_alpha, AlphaCurve, FieldPair};
use corrseg::geoverify::{verify_and_relabel, VerifyOutput};
use corrseg::io::{
    read_field, read_prediction, read_scene, write_field, write_file, write_prediction, ManifestEntry, SceneManifest,
    Split,
};
use corrseg::trainer::{predict, train_branch, Branch, Checkpoint};
use corrseg::{argmax_labels, Error, LabeledCloud, Prediction, ProbabilityField, Provenance, Result, Taxonomy};

use crate::config::PipelineConfig;

/// Artifact kinds stored per scene.
pub const STAGES: [&str; 4] = ["global", "local", "fused", "verified"];

pub fn field_path(dir: &Path, scene_id: &str, stage: &str) -> PathBuf {
    dir.join(format!("{scene_id}.{stage}.prob"))
}

pub fn labels_path(dir: &Path, scene_id: &str, stage: &str) -> PathBuf {
    dir.join(format!("{scene_id}.{stage}.labels"))
}

pub fn report_path(dir: &Path, scene_id: &str) -> PathBuf {
    dir.join(format!("{scene_id}.verify.tsv"))
}

pub fn checkpoint_path(dir: &Path, branch: Branch) -> PathBuf {
    dir.join(format!("{branch}.ckpt"))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_file(path, text.as_bytes())
}

/// A manifest with scene paths resolved against its directory.
pub struct Benchmark {
    pub manifest: SceneManifest,
    pub root: PathBuf,
}

impl Benchmark {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self {
            manifest: SceneManifest::load(path)?,
            root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        })
    }

    pub fn entries(&self, split: Split) -> Vec<&ManifestEntry> {
        self.manifest.split(split).collect()
    }

    pub fn read(&self, entry: &ManifestEntry) -> Result<LabeledCloud> {
        let mut cloud = read_scene(&self.root.join(&entry.path))?;
        if cloud.len() as u64 != entry.point_count {
            return Err(Error::Integrity(format!(
                "manifest lists {} points for {}, file has {}",
                entry.point_count,
                entry.scene_id,
                cloud.len()
            )));
        }
        cloud.scene_id = entry.scene_id.clone();
        Ok(cloud)
    }

    pub fn read_split(&self, split: Split) -> Result<Vec<LabeledCloud>> {
        self.entries(split).into_iter().map(|e| self.read(e)).collect()
    }
}

pub fn train_stage(cfg: &PipelineConfig, scenes: &[LabeledCloud], branch: Branch) -> Result<Checkpoint> {
    if scenes.is_empty() {
        return Err(Error::InvalidArgument("the training split is empty".into()));
    }
    let tcfg = cfg.branch_train(branch);
    let out = train_branch(scenes, branch, cfg.taxonomy.num_classes(), &tcfg)?;
    Ok(Checkpoint {
        params: out.params,
        bank: out.bank,
        config_hash: tcfg.hash64(),
        loss_curve: out.loss_curve,
    })
}

pub fn loss_curve_tsv(ckpt: &Checkpoint) -> String {
    let mut s = String::from("epoch\tloss\n");
    for (i, l) in ckpt.loss_curve.iter().enumerate() {
        let _ = writeln!(s, "{}\t{l:.9}", i + 1);
    }
    s
}

/// Predicts `scenes` with one checkpoint and writes `<scene>.<branch>.prob`.
pub fn predict_stage(cfg: &PipelineConfig, ckpt: &Checkpoint, scenes: &[LabeledCloud], out_dir: &Path) -> Result<()> {
    let branch = ckpt.params.branch;
    let pcfg = cfg.predict();
    scenes.par_iter().try_for_each(|scene| {
        let field = predict(&ckpt.params, scene, branch, &pcfg)?;
        write_field(&field_path(out_dir, &scene.scene_id, branch.as_str()), &field)
    })
}

/// Alpha sweep over the stored branch fields of `scenes`.
pub fn tune_stage(cfg: &PipelineConfig, scenes: &[LabeledCloud], field_dir: &Path) -> Result<AlphaCurve> {
    let fields = scenes
        .iter()
        .map(|s| {
            Ok((
                read_field(&field_path(field_dir, &s.scene_id, "local"))?,
                read_field(&field_path(field_dir, &s.scene_id, "global"))?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let pairs = scenes
        .iter()
        .zip(&fields)
        .map(|(s, (l, g))| {
            Ok(FieldPair {
                local: l,
                global: g,
                labels: s.require_labels()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    tune_alpha(&pairs, &cfg.fusion.grid)
}

pub fn fuse_files(local: &Path, global: &Path, alpha: f64, out: &Path, labels_out: Option<&Path>) -> Result<()> {
    let fused = fuse(&read_field(local)?, &read_field(global)?, alpha)?;
    write_field(out, &fused)?;
    if let Some(p) = labels_out {
        write_prediction(p, &preliminary_labels(&fused)?)?;
    }
    Ok(())
}

/// Fuses the stored branch fields of every scene and writes the fused field
/// with its preliminary labels.
pub fn fuse_stage(scenes: &[LabeledCloud], dir: &Path, alpha: f64) -> Result<()> {
    scenes.par_iter().try_for_each(|s| {
        let id = &s.scene_id;
        fuse_files(
            &field_path(dir, id, "local"),
            &field_path(dir, id, "global"),
            alpha,
            &field_path(dir, id, "fused"),
            Some(&labels_path(dir, id, "fused")),
        )
    })
}

pub fn verify_scene(cfg: &PipelineConfig, cloud: &LabeledCloud, fused: &ProbabilityField) -> Result<VerifyOutput> {
    let prelim = preliminary_labels(fused)?;
    verify_and_relabel(cloud.coords(), &prelim, fused, &cfg.registry, cfg.tau_geo)
}

pub fn verify_files(cfg: &PipelineConfig, cloud: &LabeledCloud, fused: &Path, out: &Path, report: Option<&Path>) -> Result<usize> {
    let result = verify_scene(cfg, cloud, &read_field(fused)?)?;
    write_prediction(out, &result.prediction)?;
    if let Some(r) = report {
        write_text(r, &result.reports_tsv(&cfg.taxonomy))?;
    }
    Ok(result.relabeled_count())
}

/// Verifies every scene; returns the number of relabeled points.
pub fn verify_stage(cfg: &PipelineConfig, scenes: &[LabeledCloud], dir: &Path) -> Result<usize> {
    let counts = scenes
        .par_iter()
        .map(|s| {
            let id = &s.scene_id;
            verify_files(
                cfg,
                s,
                &field_path(dir, id, "fused"),
                &labels_path(dir, id, "verified"),
                Some(&report_path(dir, id)),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(counts.iter().sum())
}

/// Labels of a stored artifact: `.labels` as is, `.prob` by argmax, `.crs`
/// by its ground truth.
pub fn load_labels(path: &Path) -> Result<Prediction> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("prob") => argmax_labels(&read_field(path)?),
        Some("crs") => Ok(Prediction::new(
            read_scene(path)?.require_labels()?.to_vec(),
            Provenance::GroundTruth,
        )),
        _ => read_prediction(path),
    }
}

/// The stored labels of `stage` for one scene, preferring `.labels` over
/// the argmax of `.prob`.
pub fn stage_labels(dir: &Path, scene_id: &str, stage: &str) -> Result<Prediction> {
    let labels = labels_path(dir, scene_id, stage);
    if labels.exists() {
        read_prediction(&labels)
    } else {
        argmax_labels(&read_field(&field_path(dir, scene_id, stage))?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageMetrics {
    pub full: IouReport,
    pub primary: IouReport,
}

impl StageMetrics {
    pub fn to_tsv(&self, tax: &Taxonomy) -> String {
        let mut s = String::from("protocol\tclass\tname\tiou\n");
        s += &self.full.to_tsv(tax, "full");
        s += &self.primary.to_tsv(tax, "primary");
        s
    }
}

/// IoU pooled over scenes under both protocols.
pub fn evaluate(tax: &Taxonomy, pairs: &[(Prediction, &[corrseg::ClassId])]) -> Result<StageMetrics> {
    let c = tax.num_classes();
    let mut full = ConfusionMatrix::new(c);
    let mut primary = ConfusionMatrix::new(c);
    for (pred, gt) in pairs {
        full.add(&pred.labels, gt)?;
        primary.merge(&corrseg::eval::primary_confusion(pred, gt, tax)?)?;
    }
    Ok(StageMetrics {
        full: full.report(),
        primary: primary.report(),
    })
}

pub fn eval_stage(tax: &Taxonomy, scenes: &[LabeledCloud], dir: &Path, stage: &str) -> Result<StageMetrics> {
    let preds = scenes
        .iter()
        .map(|s| stage_labels(dir, &s.scene_id, stage))
        .collect::<Result<Vec<_>>>()?;
    let pairs = scenes
        .iter()
        .zip(preds)
        .map(|(s, p)| Ok((p, s.require_labels()?)))
        .collect::<Result<Vec<_>>>()?;
    evaluate(tax, &pairs)
}

/// Metrics of a single scene.
pub fn scene_metrics(tax: &Taxonomy, pred: &Prediction, gt: &[corrseg::ClassId]) -> Result<StageMetrics> {
    Ok(StageMetrics {
        full: corrseg::eval::iou_per_class(pred, gt, tax)?,
        primary: primary_iou(pred, gt, tax)?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineSummary {
    pub alpha: f64,
    pub tuned: bool,
    pub relabeled: usize,
    /// Metrics of each entry of [`STAGES`] on the test split.
    pub stages: Vec<(String, StageMetrics)>,
}

impl PipelineSummary {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("stage\tmiou\tprimary_miou\n");
        for (name, m) in &self.stages {
            let _ = writeln!(s, "{name}\t{:.6}\t{:.6}", m.full.miou, m.primary.miou);
        }
        let _ = writeln!(s, "alpha\t{:.6}\t{}", self.alpha, if self.tuned { "tuned" } else { "fixed" });
        let _ = writeln!(s, "relabeled_points\t{}\t-", self.relabeled);
        s
    }

    pub fn miou(&self, stage: &str) -> Option<f64> {
        self.stages.iter().find(|(n, _)| n == stage).map(|(_, m)| m.full.miou)
    }
}

/// Output layout of a pipeline run.
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn models(&self) -> PathBuf {
        self.root.join("models")
    }
    pub fn scenes(&self) -> PathBuf {
        self.root.join("scenes")
    }
    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics")
    }
}

/// Train both branches, predict validation and test scenes with both, tune
/// alpha on validation, then fuse, verify and evaluate the test split.
pub fn run_pipeline(cfg: &PipelineConfig, out: &Path, log: &mut dyn FnMut(&str)) -> Result<PipelineSummary> {
    let layout = RunLayout { root: out.to_path_buf() };
    let manifest_path = match &cfg.manifest {
        Some(p) => p.clone(),
        None => {
            log(&format!("generating {} synthetic scenes", cfg.synth_scenes));
            corrseg::synth::make_benchmark(cfg.synth_scenes, &cfg.profile, cfg.synth_seed(), &layout.data())?;
            layout.data().join("manifest.tsv")
        }
    };
    let bench = Benchmark::load(&manifest_path)?;
    let train = bench.read_split(Split::Train)?;
    let val = bench.read_split(Split::Val)?;
    let test = bench.read_split(Split::Test)?;
    if test.is_empty() {
        return Err(Error::InvalidData("the test split is empty".into()));
    }
    let scene_dir = layout.scenes();
    for branch in [Branch::Global, Branch::Local] {
        log(&format!("training the {branch} branch on {} scenes", train.len()));
        let ckpt = train_stage(cfg, &train, branch)?;
        ckpt.save(&checkpoint_path(&layout.models(), branch))?;
        write_text(&layout.metrics().join(format!("loss_{branch}.tsv")), &loss_curve_tsv(&ckpt))?;
        log(&format!("predicting {} scenes with the {branch} branch", val.len() + test.len()));
        predict_stage(cfg, &ckpt, &val, &scene_dir)?;
        predict_stage(cfg, &ckpt, &test, &scene_dir)?;
    }
    let (alpha, tuned) = if cfg.tune_alpha && !val.is_empty() {
        let curve = tune_stage(cfg, &val, &scene_dir)?;
        write_text(&layout.metrics().join("alpha_curve.tsv"), &curve.to_tsv())?;
        (curve.best_alpha, true)
    } else {
        (cfg.fusion.alpha, false)
    };
    log(&format!("fusing with alpha {alpha:.2}"));
    fuse_stage(&test, &scene_dir, alpha)?;
    let relabeled = verify_stage(cfg, &test, &scene_dir)?;
    let mut stages = Vec::new();
    for stage in STAGES {
        let m = eval_stage(&cfg.taxonomy, &test, &scene_dir, stage)?;
        write_text(&layout.metrics().join(format!("{stage}.tsv")), &m.to_tsv(&cfg.taxonomy))?;
        stages.push((stage.to_string(), m));
    }
    let summary = PipelineSummary {
        alpha,
        tuned,
        relabeled,
        stages,
    };
    write_text(&layout.metrics().join("summary.tsv"), &summary.to_tsv())?;
    Ok(summary)
}
