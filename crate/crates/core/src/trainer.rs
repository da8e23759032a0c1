//! Desk-scale two-branch trainer.
//!
//! Each branch is a per-point MLP over [`FeatureMatrix`] rows:
//! standardized input `d -> h -> h` (ReLU), a linear classifier head
//! `h -> C` and a linear projection head `h -> e`. The global branch trains
//! on grid-sampled whole scenes with a point-budget random crop per step;
//! the local branch trains on sphere-crop tiles with features computed
//! inside each tile.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::{build_index, extract_features, FeatureConfig, FeatureMatrix, FEATURE_DIM};
use crate::io::{read_file, write_file, ByteReader};
use crate::losses::{total_loss, LossBatch, LossConfig, PrototypeBank, TotalLoss};
use crate::model::{ClassId, FieldSource, LabeledCloud, ProbabilityField};
use crate::rng::derive_seed;
use crate::sampling::{grid_sample, lift_predictions, random_crop_indices, sphere_tiles};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CRSMODEL";
pub const CHECKPOINT_VERSION: u32 = 1;

const STD_FLOOR: f64 = 1e-9;
const PROTO_INIT_SCALE: f64 = 0.1;
// stream ids keep independent draws from perturbing each other
const STREAM_INIT: u64 = 0x1;
const STREAM_PROTO: u64 = 0x2;
const STREAM_ORDER: u64 = 0x3;
const STREAM_CROP: u64 = 0x4;
const STREAM_SUPCON: u64 = 0x5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Branch {
    Global,
    Local,
}

impl Branch {
    pub fn as_str(self) -> &'static str {
        match self {
            Branch::Global => "global",
            Branch::Local => "local",
        }
    }

    pub fn field_source(self) -> FieldSource {
        match self {
            Branch::Global => FieldSource::Global,
            Branch::Local => FieldSource::Local,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Branch::Global => 0,
            Branch::Local => 1,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Branch::Global),
            1 => Some(Branch::Local),
            _ => None,
        }
    }
}

impl FromStr for Branch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(Branch::Global),
            "local" => Ok(Branch::Local),
            _ => Err(Error::InvalidArgument(format!("unknown branch {s:?}, expected global or local"))),
        }
    }
}

impl std::fmt::Display for Branch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

fn stream_seed(seed: u64, stream: u64, a: u64, b: u64) -> u64 {
    derive_seed(seed, &[stream, a, b])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub input: usize,
    pub hidden: usize,
    pub classes: usize,
    pub embed: usize,
}

#[derive(Debug, Clone, Copy)]
struct Offsets {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    wc: usize,
    bc: usize,
    wp: usize,
    bp: usize,
    end: usize,
}

impl ModelDims {
    fn offsets(&self) -> Offsets {
        let (d, h, c, e) = (self.input, self.hidden, self.classes, self.embed);
        let w1 = 0;
        let b1 = w1 + h * d;
        let w2 = b1 + h;
        let b2 = w2 + h * h;
        let wc = b2 + h;
        let bc = wc + c * h;
        let wp = bc + c;
        let bp = wp + e * h;
        Offsets {
            w1,
            b1,
            w2,
            b2,
            wc,
            bc,
            wp,
            bp,
            end: bp + e,
        }
    }

    pub fn param_count(&self) -> usize {
        self.offsets().end
    }

    fn validate(&self) -> Result<()> {
        if self.input == 0 || self.hidden == 0 || self.classes == 0 || self.embed == 0 {
            return Err(Error::Config(format!("model dimensions must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// All parameters of one branch, flattened in the order
/// `W1 b1 W2 b2 Wc bc Wp bp` (weights row-major, output-major).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub branch: Branch,
    dims: ModelDims,
    pub features: FeatureConfig,
    mean: Vec<f64>,
    scale: Vec<f64>,
    theta: Vec<f64>,
    trained: bool,
}

/// Logits and projected embeddings of a batch, both row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub logits: Vec<f64>,
    pub embeddings: Vec<f64>,
}

struct Activations {
    x: Vec<f64>,
    a1: Vec<f64>,
    a2: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(branch: Branch, dims: ModelDims, features: FeatureConfig) -> Result<Self> {
        dims.validate()?;
        Ok(Self {
            branch,
            dims,
            features,
            mean: vec![0.0; dims.input],
            scale: vec![1.0; dims.input],
            theta: vec![0.0; dims.param_count()],
            trained: false,
        })
    }

    /// Glorot-uniform weights and zero biases.
    pub fn init(branch: Branch, dims: ModelDims, features: FeatureConfig, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(branch, dims, features)?;
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, STREAM_INIT, 0, 0));
        let o = dims.offsets();
        let (d, h, c, e) = (dims.input, dims.hidden, dims.classes, dims.embed);
        for (start, fan_out, fan_in) in [(o.w1, h, d), (o.w2, h, h), (o.wc, c, h), (o.wp, e, h)] {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for v in &mut p.theta[start..start + fan_out * fan_in] {
                *v = rng.gen_range(-limit..=limit);
            }
        }
        Ok(p)
    }

    pub fn from_parts(
        branch: Branch,
        dims: ModelDims,
        features: FeatureConfig,
        mean: Vec<f64>,
        scale: Vec<f64>,
        theta: Vec<f64>,
        trained: bool,
    ) -> Result<Self> {
        let mut p = Self::zeros(branch, dims, features)?;
        if theta.len() != p.theta.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} parameters for dims {dims:?} (expected {})",
                theta.len(),
                p.theta.len()
            )));
        }
        p.set_normalization(mean, scale)?;
        p.theta = theta;
        p.trained = trained;
        p.validate()?;
        Ok(p)
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn mark_trained(&mut self) {
        self.trained = true;
    }

    pub fn normalization(&self) -> (&[f64], &[f64]) {
        (&self.mean, &self.scale)
    }

    pub fn set_normalization(&mut self, mean: Vec<f64>, scale: Vec<f64>) -> Result<()> {
        if mean.len() != self.dims.input || scale.len() != self.dims.input {
            return Err(Error::ShapeMismatch("normalization length differs from input dim".into()));
        }
        if scale.iter().any(|s| !(*s > 0.0) || !s.is_finite()) || mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidData("normalization must be finite with positive scale".into()));
        }
        self.mean = mean;
        self.scale = scale;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        if self.theta.len() != self.dims.param_count() {
            return Err(Error::ShapeMismatch("parameter vector length differs from dims".into()));
        }
        if self.theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("non-finite model parameter".into()));
        }
        Ok(())
    }

    fn check_input(&self, feats: &FeatureMatrix) -> Result<()> {
        if feats.dim() != self.dims.input {
            return Err(Error::Config(format!(
                "feature dim {} does not match model input dim {}",
                feats.dim(),
                self.dims.input
            )));
        }
        Ok(())
    }

    pub fn forward(&self, feats: &FeatureMatrix) -> Result<ForwardOutput> {
        self.check_input(feats)?;
        let (out, _) = self.forward_rows(feats, None);
        if out.logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::Training("non-finite logits".into()));
        }
        Ok(out)
    }

    fn forward_rows(&self, feats: &FeatureMatrix, rows: Option<&[usize]>) -> (ForwardOutput, Activations) {
        let ModelDims {
            input: d,
            hidden: h,
            classes: c,
            embed: e,
        } = self.dims;
        let o = self.dims.offsets();
        let t = &self.theta;
        let n = rows.map_or(feats.len(), |r| r.len());
        let mut act = Activations {
            x: Vec::with_capacity(n * d),
            a1: vec![0.0; n * h],
            a2: vec![0.0; n * h],
        };
        let mut out = ForwardOutput {
            logits: vec![0.0; n * c],
            embeddings: vec![0.0; n * e],
        };
        for r in 0..n {
            let src = rows.map_or(r, |rs| rs[r]);
            let row = feats.row(src);
            for j in 0..d {
                act.x.push((row[j] - self.mean[j]) / self.scale[j]);
            }
            let x = &act.x[r * d..(r + 1) * d];
            let a1 = &mut act.a1[r * h..(r + 1) * h];
            dense(&t[o.w1..o.b1], &t[o.b1..o.w2], x, a1);
            relu(a1);
            let a1 = &act.a1[r * h..(r + 1) * h];
            let a2 = &mut act.a2[r * h..(r + 1) * h];
            dense(&t[o.w2..o.b2], &t[o.b2..o.wc], a1, a2);
            relu(a2);
            let a2 = &act.a2[r * h..(r + 1) * h];
            dense(&t[o.wc..o.bc], &t[o.bc..o.wp], a2, &mut out.logits[r * c..(r + 1) * c]);
            dense(&t[o.wp..o.bp], &t[o.bp..o.end], a2, &mut out.embeddings[r * e..(r + 1) * e]);
        }
        (out, act)
    }

    /// Accumulates the parameter gradient of a batch given the gradients
    /// w.r.t. its logits and (optionally) embeddings.
    fn backward(&self, act: &Activations, grad_logits: &[f64], grad_emb: Option<&[f64]>) -> Vec<f64> {
        let ModelDims {
            input: d,
            hidden: h,
            classes: c,
            embed: e,
        } = self.dims;
        let o = self.dims.offsets();
        let t = &self.theta;
        let mut g = vec![0.0; o.end];
        let n = grad_logits.len() / c;
        let mut ga2 = vec![0.0; h];
        let mut ga1 = vec![0.0; h];
        for r in 0..n {
            let x = &act.x[r * d..(r + 1) * d];
            let a1 = &act.a1[r * h..(r + 1) * h];
            let a2 = &act.a2[r * h..(r + 1) * h];
            let gl = &grad_logits[r * c..(r + 1) * c];
            ga2.iter_mut().for_each(|v| *v = 0.0);
            dense_backward(&t[o.wc..o.bc], gl, a2, &mut g[o.wc..o.wp], &mut ga2);
            if let Some(ge) = grad_emb {
                let ge = &ge[r * e..(r + 1) * e];
                dense_backward(&t[o.wp..o.bp], ge, a2, &mut g[o.wp..o.end], &mut ga2);
            }
            for (v, a) in ga2.iter_mut().zip(a2) {
                if *a <= 0.0 {
                    *v = 0.0;
                }
            }
            ga1.iter_mut().for_each(|v| *v = 0.0);
            dense_backward(&t[o.w2..o.b2], &ga2, a1, &mut g[o.w2..o.wc], &mut ga1);
            for (v, a) in ga1.iter_mut().zip(a1) {
                if *a <= 0.0 {
                    *v = 0.0;
                }
            }
            dense_backward_input_free(&ga1, x, &mut g[o.w1..o.w2]);
        }
        g
    }
}

/// `out = W x + b` with `W` of shape `out.len() x x.len()`.
fn dense(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let k = x.len();
    for (i, o) in out.iter_mut().enumerate() {
        *o = b[i] + w[i * k..(i + 1) * k].iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

fn relu(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

/// Adds `dL/dW` and `dL/db` (stored contiguously after `W`) to `g_wb` and
/// `W^T gy` to `gx`.
fn dense_backward(w: &[f64], gy: &[f64], x: &[f64], g_wb: &mut [f64], gx: &mut [f64]) {
    let k = x.len();
    let (gw, gb) = g_wb.split_at_mut(gy.len() * k);
    for (i, &gi) in gy.iter().enumerate() {
        if gi == 0.0 {
            continue;
        }
        gb[i] += gi;
        let wr = &w[i * k..(i + 1) * k];
        for j in 0..k {
            gw[i * k + j] += gi * x[j];
            gx[j] += gi * wr[j];
        }
    }
}

fn dense_backward_input_free(gy: &[f64], x: &[f64], g_wb: &mut [f64]) {
    let k = x.len();
    let (gw, gb) = g_wb.split_at_mut(gy.len() * k);
    for (i, &gi) in gy.iter().enumerate() {
        if gi == 0.0 {
            continue;
        }
        gb[i] += gi;
        for j in 0..k {
            gw[i * k + j] += gi * x[j];
        }
    }
}

/// Parameter update rule. Both apply the learning-rate schedule and
/// decoupled weight decay the same way.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Optimizer {
    /// Plain gradient descent.
    #[default]
    Sgd,
    /// Adam moments with bias correction (betas 0.9 / 0.999).
    AdamW,
}

impl Optimizer {
    pub fn as_str(self) -> &'static str {
        match self {
            Optimizer::Sgd => "sgd",
            Optimizer::AdamW => "adamw",
        }
    }
}

impl FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Optimizer::Sgd),
            "adamw" => Ok(Optimizer::AdamW),
            other => Err(Error::Config(format!("unknown optimizer {other:?} (sgd, adamw)"))),
        }
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// First and second moment estimates for one parameter vector.
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Moments {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    /// Bias-corrected Adam direction for step `t` (1-based), in place of `grad`.
    fn direction(&mut self, grad: &mut [f64], t: i32) {
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        for ((g, m), v) in grad.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * *g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * *g * *g;
            *g = (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub optimizer: Optimizer,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub hidden: usize,
    pub embed_dim: usize,
    pub grid_size: f64,
    /// Row budget of a global-branch step.
    pub n_max: usize,
    /// Points per local-branch sphere crop.
    pub k_local: usize,
    pub features: FeatureConfig,
    pub loss: LossConfig,
    pub contrastive_global: bool,
    pub contrastive_local: bool,
    /// Size of the class-stratified subset entering the contrastive term.
    pub supcon_samples: usize,
    /// Units whose gradients are averaged per step; 1 is plain sequential
    /// training.
    pub jobs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            optimizer: Optimizer::Sgd,
            lr: 1e-2,
            weight_decay: 1e-4,
            seed: 0,
            hidden: 64,
            embed_dim: 16,
            grid_size: crate::sampling::DEFAULT_GRID_SIZE,
            n_max: crate::sampling::DEFAULT_N_MAX,
            k_local: crate::sampling::DEFAULT_K_LOCAL,
            features: FeatureConfig::default(),
            loss: LossConfig::default(),
            contrastive_global: true,
            contrastive_local: false,
            supcon_samples: 128,
            jobs: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if self.hidden == 0 || self.embed_dim == 0 || self.n_max == 0 || self.k_local == 0 || self.jobs == 0 {
            return Err(Error::Config("hidden, embed_dim, n_max, k_local and jobs must be positive".into()));
        }
        if !(self.grid_size > 0.0) {
            return Err(Error::Config("grid_size must be positive".into()));
        }
        self.loss.validate()
    }

    pub fn contrastive(&self, branch: Branch) -> bool {
        match branch {
            Branch::Global => self.contrastive_global,
            Branch::Local => self.contrastive_local,
        }
    }

    /// Canonical text of every field, used for the checkpoint hash.
    pub fn describe(&self) -> String {
        let mut s = String::new();
        let l = &self.loss;
        let _ = writeln!(
            s,
            "epochs={} optimizer={} lr={:e} weight_decay={:e} seed={} hidden={} embed_dim={} grid_size={:e} n_max={} k_local={}",
            self.epochs, self.optimizer.as_str(), self.lr, self.weight_decay, self.seed, self.hidden, self.embed_dim, self.grid_size, self.n_max,
            self.k_local
        );
        let _ = writeln!(
            s,
            "k_neighbors={} height_radius={:e} contrastive={},{} supcon_samples={} jobs={}",
            self.features.k_neighbors,
            self.features.height_radius,
            self.contrastive_global,
            self.contrastive_local,
            self.supcon_samples,
            self.jobs
        );
        let _ = writeln!(
            s,
            "lambda_proto={:e} lambda_supcon={:e} tau={:e} rare_weight={:e} focal_gamma={:e} use_focal={} rare={:?} class_weights={:?}",
            l.lambda_proto, l.lambda_supcon, l.tau, l.rare_weight, l.focal_gamma, l.use_focal, l.rare_set, l.class_weights
        );
        s
    }

    pub fn hash64(&self) -> u64 {
        let digest = Sha256::digest(self.describe().as_bytes());
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }
}

/// Feature rows of one training unit with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainUnit {
    pub feats: FeatureMatrix,
    pub labels: Vec<ClassId>,
}

impl TrainUnit {
    pub fn new(feats: FeatureMatrix, labels: Vec<ClassId>) -> Result<Self> {
        if feats.len() != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} feature rows for {} labels",
                feats.len(),
                labels.len()
            )));
        }
        Ok(Self { feats, labels })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub bank: PrototypeBank,
    /// Mean total loss of each epoch.
    pub loss_curve: Vec<f64>,
}

/// Training units of one branch, grouped by scene.
///
/// Global: one unit per scene holding the features of its grid-sampled
/// cloud. Local: one unit per sphere-crop tile, features computed inside
/// the tile.
pub fn prepare_units(scenes: &[LabeledCloud], branch: Branch, cfg: &TrainConfig) -> Result<Vec<Vec<TrainUnit>>> {
    if scenes.is_empty() {
        return Err(Error::InvalidArgument("no training scenes".into()));
    }
    scenes
        .iter()
        .map(|scene| {
            scene.require_labels()?;
            match branch {
                Branch::Global => {
                    let g = grid_sample(&scene_without_colors(scene), cfg.grid_size)?;
                    Ok(vec![cloud_unit(&g.sampled, &cfg.features)?])
                }
                Branch::Local => sphere_tiles(scene, cfg.k_local)?
                    .iter()
                    .map(|tile| cloud_unit(&scene.select(tile), &cfg.features))
                    .collect(),
            }
        })
        .collect()
}

fn scene_without_colors(scene: &LabeledCloud) -> LabeledCloud {
    // colors are not model inputs; dropping them saves a copy per voxel
    LabeledCloud::new(
        scene.scene_id.clone(),
        scene.coords().to_vec(),
        None,
        scene.labels().map(<[ClassId]>::to_vec),
    )
    .expect("subset of a valid cloud")
}

fn cloud_unit(cloud: &LabeledCloud, cfg: &FeatureConfig) -> Result<TrainUnit> {
    let feats = extract_features(cloud, &build_index(cloud), cfg)?;
    TrainUnit::new(feats, cloud.require_labels()?.to_vec())
}

pub fn train_branch(
    scenes: &[LabeledCloud],
    branch: Branch,
    num_classes: usize,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let units = prepare_units(scenes, branch, cfg)?;
    train_on_units(&units, branch, num_classes, cfg)
}

/// Loss and gradient of one batch. `rows` selects the batch rows of `unit`
/// (all when `None`).
pub fn batch_loss(
    params: &ModelParams,
    bank: &PrototypeBank,
    unit: &TrainUnit,
    rows: Option<&[usize]>,
    loss_cfg: &LossConfig,
    contrastive_rows: Option<&[usize]>,
    contrastive: bool,
) -> Result<(TotalLoss, Vec<f64>)> {
    params.check_input(&unit.feats)?;
    let dims = params.dims;
    let (out, act) = params.forward_rows(&unit.feats, rows);
    let labels: Vec<ClassId> = match rows {
        Some(r) => r.iter().map(|&i| unit.labels[i]).collect(),
        None => unit.labels.clone(),
    };
    let active = contrastive && (loss_cfg.lambda_proto > 0.0 || loss_cfg.lambda_supcon > 0.0);
    let batch = LossBatch {
        logits: &out.logits,
        num_classes: dims.classes,
        labels: &labels,
        embeddings: active.then_some(out.embeddings.as_slice()),
        embedding_dim: dims.embed,
        contrastive_rows,
    };
    let loss = total_loss(&batch, active.then_some(bank), loss_cfg)?;
    let grad_emb = active.then_some(loss.grad_embeddings.as_slice());
    let grad = params.backward(&act, &loss.grad_logits, grad_emb);
    Ok((loss, grad))
}

/// Up to `budget` rows, drawn round-robin over classes in seeded order so
/// rare classes keep their positives.
fn stratified_rows(labels: &[ClassId], num_classes: usize, budget: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        if (l as usize) < num_classes {
            by_class[l as usize].push(i);
        }
    }
    for rows in &mut by_class {
        rows.shuffle(rng);
    }
    let mut picked = Vec::with_capacity(budget);
    let mut depth = 0;
    while picked.len() < budget {
        let mut any = false;
        for rows in &by_class {
            if let Some(&r) = rows.get(depth) {
                any = true;
                if picked.len() < budget {
                    picked.push(r);
                }
            }
        }
        if !any {
            break;
        }
        depth += 1;
    }
    picked.sort_unstable();
    picked
}

fn normalization(units: &[Vec<TrainUnit>], d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut count = 0.0f64;
    let mut sum = vec![0.0; d];
    for u in units.iter().flatten() {
        for r in 0..u.feats.len() {
            for (s, v) in sum.iter_mut().zip(u.feats.row(r)) {
                *s += v;
            }
            count += 1.0;
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count.max(1.0)).collect();
    let mut var = vec![0.0; d];
    for u in units.iter().flatten() {
        for r in 0..u.feats.len() {
            for ((v, x), m) in var.iter_mut().zip(u.feats.row(r)).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
    }
    let scale = var
        .iter()
        .map(|v| {
            let s = (v / count.max(1.0)).sqrt();
            if s > STD_FLOOR {
                s
            } else {
                1.0
            }
        })
        .collect();
    (mean, scale)
}

/// Gradient descent (or AdamW) with a cosine learning-rate schedule and
/// decoupled weight decay on the network weights (the prototype bank is not
/// decayed).
///
/// An epoch visits every group once in seeded order; each visit draws one
/// unit of the group and, for the global branch, a random crop of at most
/// `n_max` rows. With `jobs > 1` consecutive visits are evaluated in
/// parallel and their mean gradient applied as one step: reproducible for a
/// fixed `jobs`, but a different trajectory from `jobs = 1`.
pub fn train_on_units(
    units: &[Vec<TrainUnit>],
    branch: Branch,
    num_classes: usize,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if units.is_empty() || units.iter().any(Vec::is_empty) {
        return Err(Error::InvalidArgument("no training units".into()));
    }
    let input = units[0][0].feats.dim();
    if units.iter().flatten().any(|u| u.feats.dim() != input) {
        return Err(Error::ShapeMismatch("training units differ in feature dim".into()));
    }
    let dims = ModelDims {
        input,
        hidden: cfg.hidden,
        classes: num_classes,
        embed: cfg.embed_dim,
    };
    let mut params = ModelParams::init(branch, dims, cfg.features, cfg.seed)?;
    let (mean, scale) = normalization(units, input);
    params.set_normalization(mean, scale)?;
    let mut proto_rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, STREAM_PROTO, 0, 0));
    let mut bank = PrototypeBank::random(num_classes, cfg.embed_dim, PROTO_INIT_SCALE, &mut proto_rng);
    let contrastive = cfg.contrastive(branch);

    let groups = units.len();
    let steps_per_epoch = groups.div_ceil(cfg.jobs);
    let total_steps = (cfg.epochs * steps_per_epoch) as f64;
    let mut order_rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, STREAM_ORDER, 0, 0));
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    let mut moments = (cfg.optimizer == Optimizer::AdamW)
        .then(|| (Moments::new(params.theta.len()), Moments::new(bank.as_slice().len())));
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..groups).collect();
        order.shuffle(&mut order_rng);
        let visits: Vec<(usize, usize)> = order
            .iter()
            .map(|&g| (g, order_rng.gen_range(0..units[g].len())))
            .collect();
        let mut epoch_loss = 0.0;
        for chunk in visits.chunks(cfg.jobs) {
            let eval = |&(g, m): &(usize, usize)| -> Result<(f64, Vec<f64>, Vec<f64>)> {
                let unit = &units[g][m];
                let rows = match branch {
                    Branch::Global if unit.feats.len() > cfg.n_max => Some(random_crop_indices(
                        unit.feats.len(),
                        cfg.n_max,
                        stream_seed(cfg.seed, STREAM_CROP, epoch as u64, g as u64),
                    )),
                    _ => None,
                };
                let batch_labels: Vec<ClassId> = match &rows {
                    Some(r) => r.iter().map(|&i| unit.labels[i]).collect(),
                    None => unit.labels.clone(),
                };
                let contrastive_rows = contrastive.then(|| {
                    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, STREAM_SUPCON, epoch as u64, g as u64));
                    stratified_rows(&batch_labels, num_classes, cfg.supcon_samples, &mut rng)
                });
                let (loss, grad) = batch_loss(
                    &params,
                    &bank,
                    unit,
                    rows.as_deref(),
                    &cfg.loss,
                    contrastive_rows.as_deref(),
                    contrastive,
                )
                .map_err(|e| Error::Training(format!("{branch} branch, epoch {epoch}, group {g}: {e}")))?;
                Ok((loss.loss, grad, loss.grad_bank))
            };
            let results: Vec<(f64, Vec<f64>, Vec<f64>)> = if chunk.len() > 1 {
                chunk.par_iter().map(eval).collect::<Result<_>>()?
            } else {
                vec![eval(&chunk[0])?]
            };
            let lr = 0.5 * cfg.lr * (1.0 + (std::f64::consts::PI * step as f64 / total_steps).cos());
            let inv = 1.0 / results.len() as f64;
            let mut grad = vec![0.0; params.theta.len()];
            let mut grad_bank = vec![0.0; bank.as_slice().len()];
            for (l, g, gb) in &results {
                epoch_loss += l;
                for (a, b) in grad.iter_mut().zip(g) {
                    *a += b * inv;
                }
                for (a, b) in grad_bank.iter_mut().zip(gb) {
                    *a += b * inv;
                }
            }
            if let Some((mt, mb)) = moments.as_mut() {
                let t = step as i32 + 1;
                mt.direction(&mut grad, t);
                mb.direction(&mut grad_bank, t);
            }
            let decay = lr * cfg.weight_decay;
            let o = dims.offsets();
            for (i, (t, g)) in params.theta.iter_mut().zip(&grad).enumerate() {
                let is_bias = (o.b1..o.w2).contains(&i)
                    || (o.b2..o.wc).contains(&i)
                    || (o.bc..o.wp).contains(&i)
                    || (o.bp..o.end).contains(&i);
                if !is_bias {
                    *t -= decay * *t;
                }
                *t -= lr * g;
            }
            for (m, g) in bank.as_mut_slice().iter_mut().zip(&grad_bank) {
                *m -= lr * g;
            }
            step += 1;
        }
        let mean = epoch_loss / visits.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Training(format!("{branch} branch: non-finite mean loss at epoch {epoch}")));
        }
        curve.push(mean);
    }
    params.validate()?;
    params.mark_trained();
    Ok(TrainOutcome {
        params,
        bank,
        loss_curve: curve,
    })
}

/// Sampling settings used at inference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictConfig {
    pub grid_size: f64,
    pub k_local: usize,
}

impl Default for PredictConfig {
    fn default() -> Self {
        Self {
            grid_size: crate::sampling::DEFAULT_GRID_SIZE,
            k_local: crate::sampling::DEFAULT_K_LOCAL,
        }
    }
}

impl From<&TrainConfig> for PredictConfig {
    fn from(cfg: &TrainConfig) -> Self {
        Self {
            grid_size: cfg.grid_size,
            k_local: cfg.k_local,
        }
    }
}

/// Softmax probabilities of every row of `feats`.
pub fn predict_features(params: &ModelParams, feats: &FeatureMatrix, source: FieldSource) -> Result<ProbabilityField> {
    let out = params.forward(feats)?;
    ProbabilityField::from_logits(&out.logits, params.dims.classes, source)
}

/// Full-resolution probability field of `cloud`.
///
/// Global: grid-sample, predict the sampled points, lift back through the
/// voxel inverse. The point budget only bounds training batches, so no crop
/// is applied at inference. Local: predict every sphere tile and average
/// the rows of points covered more than once.
pub fn predict(params: &ModelParams, cloud: &LabeledCloud, branch: Branch, cfg: &PredictConfig) -> Result<ProbabilityField> {
    if !params.is_trained() {
        return Err(Error::Training("parameters are untrained".into()));
    }
    if branch != params.branch {
        return Err(Error::InvalidArgument(format!(
            "checkpoint holds the {} branch, {branch} requested",
            params.branch
        )));
    }
    let source = branch.field_source();
    match branch {
        Branch::Global => {
            let stripped = LabeledCloud::new(cloud.scene_id.clone(), cloud.coords().to_vec(), None, None)?;
            let g = grid_sample(&stripped, cfg.grid_size)?;
            let feats = extract_features(&g.sampled, &build_index(&g.sampled), &params.features)?;
            let field = predict_features(params, &feats, source)?;
            lift_predictions(&field, &g.inverse)
        }
        Branch::Local => {
            let tiles = sphere_tiles(cloud, cfg.k_local)?;
            let fields = tiles
                .iter()
                .map(|tile| {
                    let sub = LabeledCloud::new(
                        cloud.scene_id.clone(),
                        tile.iter().map(|&i| cloud.coords()[i]).collect(),
                        None,
                        None,
                    )?;
                    let feats = extract_features(&sub, &build_index(&sub), &params.features)?;
                    predict_features(params, &feats, source)
                })
                .collect::<Result<Vec<_>>>()?;
            merge_tiles(cloud.len(), &tiles, &fields)
        }
    }
}

/// Per-point arithmetic mean over the tiles covering each point.
pub fn merge_tiles(n: usize, tiles: &[Vec<usize>], fields: &[ProbabilityField]) -> Result<ProbabilityField> {
    if tiles.len() != fields.len() || fields.is_empty() {
        return Err(Error::ShapeMismatch(format!("{} tiles for {} fields", tiles.len(), fields.len())));
    }
    let c = fields[0].num_classes();
    let mut sum = vec![0.0; n * c];
    let mut count = vec![0usize; n];
    for (tile, field) in tiles.iter().zip(fields) {
        if field.len() != tile.len() || field.num_classes() != c {
            return Err(Error::ShapeMismatch("tile field shape differs from tile".into()));
        }
        for (k, &i) in tile.iter().enumerate() {
            if i >= n {
                return Err(Error::Integrity(format!("tile index {i} out of range for {n} points")));
            }
            count[i] += 1;
            for (s, v) in sum[i * c..(i + 1) * c].iter_mut().zip(field.row(k)) {
                *s += v;
            }
        }
    }
    if let Some(i) = count.iter().position(|&k| k == 0) {
        return Err(Error::Integrity(format!("point {i} is not covered by any tile")));
    }
    for (i, &k) in count.iter().enumerate() {
        let inv = 1.0 / k as f64;
        sum[i * c..(i + 1) * c].iter_mut().for_each(|v| *v *= inv);
    }
    ProbabilityField::new(sum, c, fields[0].source())
}

/// Trained branch as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub bank: PrototypeBank,
    pub config_hash: u64,
    pub loss_curve: Vec<f64>,
}

impl Checkpoint {
    /// ```text
    /// CRSMODEL | u32 version | u8 branch | u8 trained | u64 d h C e
    ///   | u64 k_neighbors | f64 height_radius | u64 config hash
    ///   | d f64 mean | d f64 scale | P f64 theta | C*e f64 prototypes
    ///   | u64 epochs | epochs f64 loss curve
    /// ```
    pub fn encode(&self) -> Vec<u8> {
        let p = &self.params;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.push(p.branch.code());
        out.push(p.trained as u8);
        for v in [p.dims.input, p.dims.hidden, p.dims.classes, p.dims.embed, p.features.k_neighbors] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        out.extend_from_slice(&p.features.height_radius.to_le_bytes());
        out.extend_from_slice(&self.config_hash.to_le_bytes());
        for v in p.mean.iter().chain(&p.scale).chain(&p.theta).chain(self.bank.as_slice()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.loss_curve.len() as u64).to_le_bytes());
        for v in &self.loss_curve {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(8, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::parse(0, "bad magic, expected \"CRSMODEL\""));
        }
        let at = r.offset();
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::parse(at, format!("unsupported checkpoint version {version}")));
        }
        let at = r.offset();
        let branch = Branch::from_code(r.u8("branch")?).ok_or_else(|| Error::parse(at, "unknown branch code"))?;
        let trained = r.u8("trained flag")? != 0;
        let mut dim = |what| -> Result<usize> {
            let v = r.u64(what)?;
            usize::try_from(v).ok().filter(|&v| v < (1 << 32)).ok_or_else(|| Error::parse(r.offset(), format!("{what} {v} out of range")))
        };
        let dims = ModelDims {
            input: dim("input dim")?,
            hidden: dim("hidden dim")?,
            classes: dim("class count")?,
            embed: dim("embedding dim")?,
        };
        let k_neighbors = dim("k_neighbors")?;
        let height_radius = r.f64("height radius")?;
        let config_hash = r.u64("config hash")?;
        dims.validate()?;
        let mut floats = |n: usize, what: &str| -> Result<Vec<f64>> { (0..n).map(|_| r.f64(what)).collect() };
        let mean = floats(dims.input, "mean")?;
        let scale = floats(dims.input, "scale")?;
        let theta = floats(dims.param_count(), "parameters")?;
        let protos = floats(dims.classes * dims.embed, "prototypes")?;
        let epochs = r.u64("epoch count")? as usize;
        if epochs.checked_mul(8) != Some(r.remaining()) {
            return Err(Error::parse(r.offset(), format!("loss curve of {epochs} epochs does not match {} bytes", r.remaining())));
        }
        let loss_curve = (0..epochs).map(|_| r.f64("loss curve")).collect::<Result<_>>()?;
        r.expect_end()?;
        let features = FeatureConfig {
            k_neighbors,
            height_radius,
        };
        Ok(Self {
            params: ModelParams::from_parts(branch, dims, features, mean, scale, theta, trained)?,
            bank: PrototypeBank::new(protos, dims.classes, dims.embed)?,
            config_hash,
            loss_curve,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&read_file(path)?)
    }
}

/// Default input width: the handcrafted feature vector.
pub const INPUT_DIM: usize = FEATURE_DIM;
