//! Pipeline configuration: one flat `key = value` file, sectioned by prefix.
//!
//! ```text
//! seed = 7
//! [sampling]      grid_size n_max k_local
//! [features]      k_neighbors height_radius
//! [train]         epochs optimizer lr weight_decay hidden embed_dim
//!                 supcon_samples contrastive_global contrastive_local jobs
//! [loss]          lambda_proto lambda_supcon tau rare_weight focal_gamma
//!                 use_focal class_weights
//! [fusion]        alpha tune grid_steps
//! [verify]        registry tau_geo eps min_samples
//! [taxonomy]      path
//! [data]          manifest scenes
//! [synth]         profile span_jitter <any corridor key>
//! ```

use std::path::{Path, PathBuf};

use corrseg::config::KeyValues;
use corrseg::fusion::{alpha_grid, FusionConfig, ALPHA_TOWER, DEFAULT_GRID_STEPS};
use corrseg::geoverify::{ConstraintRegistry, DbscanParams, DEFAULT_TAU_GEO};
use corrseg::losses::LossConfig;
use corrseg::rng::derive_seed;
use corrseg::synth::BenchmarkProfile;
use corrseg::trainer::{Branch, Optimizer, PredictConfig, TrainConfig};
use corrseg::{Error, Result, Taxonomy};

/// Environment variable naming a config file when `--config` is absent.
pub const CONFIG_ENV: &str = "CORRSEG_CONFIG";

const KNOWN_KEYS: &[&str] = &[
    "seed",
    "taxonomy.path",
    "sampling.grid_size",
    "sampling.n_max",
    "sampling.k_local",
    "features.k_neighbors",
    "features.height_radius",
    "train.epochs",
    "train.optimizer",
    "train.lr",
    "train.weight_decay",
    "train.hidden",
    "train.embed_dim",
    "train.supcon_samples",
    "train.contrastive_global",
    "train.contrastive_local",
    "train.jobs",
    "loss.lambda_proto",
    "loss.lambda_supcon",
    "loss.tau",
    "loss.rare_weight",
    "loss.focal_gamma",
    "loss.use_focal",
    "loss.class_weights",
    "fusion.alpha",
    "fusion.tune",
    "fusion.grid_steps",
    "verify.registry",
    "verify.tau_geo",
    "verify.eps",
    "verify.min_samples",
    "data.manifest",
    "data.scenes",
];

// seed streams
const SEED_TRAIN: u64 = 0x7261;
const SEED_SYNTH: u64 = 0x5e7;

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub taxonomy: Taxonomy,
    pub taxonomy_path: Option<PathBuf>,
    /// Sampling, feature, optimizer and loss settings of both branches.
    pub train: TrainConfig,
    pub fusion: FusionConfig,
    /// Sweep alpha on the validation split; otherwise use `fusion.alpha`.
    pub tune_alpha: bool,
    pub registry: ConstraintRegistry,
    pub registry_path: Option<PathBuf>,
    pub tau_geo: f64,
    pub seed: u64,
    /// Existing benchmark; a synthetic one is generated when absent.
    pub manifest: Option<PathBuf>,
    pub synth_scenes: usize,
    pub profile: BenchmarkProfile,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let taxonomy = Taxonomy::default();
        Self {
            train: TrainConfig {
                epochs: 100,
                optimizer: Optimizer::AdamW,
                lr: 3e-3,
                weight_decay: 0.05,
                loss: LossConfig::for_taxonomy(&taxonomy),
                ..TrainConfig::default()
            },
            fusion: FusionConfig {
                alpha: ALPHA_TOWER,
                grid: alpha_grid(DEFAULT_GRID_STEPS),
            },
            tune_alpha: true,
            registry: ConstraintRegistry::default_for(&taxonomy),
            registry_path: None,
            tau_geo: DEFAULT_TAU_GEO,
            seed: 0,
            manifest: None,
            synth_scenes: 10,
            profile: BenchmarkProfile::default(),
            taxonomy,
            taxonomy_path: None,
        }
    }
}

impl PipelineConfig {
    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        for (k, _) in kv.iter() {
            if !KNOWN_KEYS.contains(&k) && !k.starts_with("synth.") {
                return Err(Error::Config(format!("unknown config key {k:?}")));
            }
        }
        let d = Self::default();
        let taxonomy_path: Option<PathBuf> = kv.get("taxonomy.path")?;
        let taxonomy = match &taxonomy_path {
            Some(p) => Taxonomy::load(&existing(p)?)?,
            None => d.taxonomy.clone(),
        };

        let t = &d.train;
        let mut loss = LossConfig::for_taxonomy(&taxonomy);
        loss.lambda_proto = kv.get_or("loss.lambda_proto", loss.lambda_proto)?;
        loss.lambda_supcon = kv.get_or("loss.lambda_supcon", loss.lambda_supcon)?;
        loss.tau = kv.get_or("loss.tau", loss.tau)?;
        loss.rare_weight = kv.get_or("loss.rare_weight", loss.rare_weight)?;
        loss.focal_gamma = kv.get_or("loss.focal_gamma", loss.focal_gamma)?;
        loss.use_focal = kv.get_or("loss.use_focal", loss.use_focal)?;
        loss.class_weights = kv.get_list("loss.class_weights")?;
        if let Some(w) = &loss.class_weights {
            if w.len() != taxonomy.num_classes() {
                return Err(Error::Config(format!(
                    "loss.class_weights has {} entries for {} classes",
                    w.len(),
                    taxonomy.num_classes()
                )));
            }
        }
        let mut features = t.features;
        features.k_neighbors = kv.get_or("features.k_neighbors", features.k_neighbors)?;
        features.height_radius = kv.get_or("features.height_radius", features.height_radius)?;
        let train = TrainConfig {
            epochs: kv.get_or("train.epochs", t.epochs)?,
            optimizer: kv.get_or("train.optimizer", t.optimizer)?,
            lr: kv.get_or("train.lr", t.lr)?,
            weight_decay: kv.get_or("train.weight_decay", t.weight_decay)?,
            seed: 0,
            hidden: kv.get_or("train.hidden", t.hidden)?,
            embed_dim: kv.get_or("train.embed_dim", t.embed_dim)?,
            grid_size: kv.get_or("sampling.grid_size", t.grid_size)?,
            n_max: kv.get_or("sampling.n_max", t.n_max)?,
            k_local: kv.get_or("sampling.k_local", t.k_local)?,
            features,
            loss,
            contrastive_global: kv.get_or("train.contrastive_global", t.contrastive_global)?,
            contrastive_local: kv.get_or("train.contrastive_local", t.contrastive_local)?,
            supcon_samples: kv.get_or("train.supcon_samples", t.supcon_samples)?,
            jobs: kv.get_or("train.jobs", t.jobs)?,
        };
        train.validate()?;
        if features.k_neighbors < 3 || !(features.height_radius > 0.0) {
            return Err(Error::Config("features need k_neighbors >= 3 and height_radius > 0".into()));
        }

        let fusion = FusionConfig {
            alpha: kv.get_or("fusion.alpha", d.fusion.alpha)?,
            grid: alpha_grid(kv.get_or("fusion.grid_steps", DEFAULT_GRID_STEPS)?),
        };
        fusion.validate().map_err(|e| Error::Config(e.to_string()))?;

        let registry_path: Option<PathBuf> = kv.get("verify.registry")?;
        let mut registry = match &registry_path {
            Some(p) => ConstraintRegistry::load(&existing(p)?, &taxonomy)?,
            None => ConstraintRegistry::default_for(&taxonomy),
        };
        let dbscan = DbscanParams {
            eps: kv.get_or("verify.eps", registry.default_dbscan.eps)?,
            min_samples: kv.get_or("verify.min_samples", registry.default_dbscan.min_samples)?,
        };
        dbscan.validate()?;
        registry.default_dbscan = dbscan;
        let tau_geo: f64 = kv.get_or("verify.tau_geo", DEFAULT_TAU_GEO)?;
        if !tau_geo.is_finite() {
            return Err(Error::Config(format!("verify.tau_geo must be finite, got {tau_geo}")));
        }

        let manifest: Option<PathBuf> = kv.get("data.manifest")?;
        if let Some(p) = &manifest {
            existing(p)?;
        }
        let synth_scenes = kv.get_or("data.scenes", d.synth_scenes)?;
        if manifest.is_none() && synth_scenes < 3 {
            return Err(Error::Config(format!("data.scenes must be at least 3, got {synth_scenes}")));
        }
        Ok(Self {
            taxonomy,
            taxonomy_path,
            train,
            fusion,
            tune_alpha: kv.get_or("fusion.tune", d.tune_alpha)?,
            registry,
            registry_path,
            tau_geo,
            seed: kv.get_or("seed", d.seed)?,
            manifest,
            synth_scenes,
            profile: BenchmarkProfile::from_config(&kv.subsection("synth"))?,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_key_values(&KeyValues::parse(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_key_values(&KeyValues::load(path)?)
    }

    /// Config from an explicit path, else `$CORRSEG_CONFIG`, else defaults.
    pub fn resolve(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::load(p),
            None => match std::env::var_os(CONFIG_ENV) {
                Some(p) if !p.is_empty() => Self::load(Path::new(&p)),
                _ => Ok(Self::default()),
            },
        }
    }

    /// Training settings of one branch, seeded from the run seed.
    pub fn branch_train(&self, branch: Branch) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(self.seed, &[SEED_TRAIN, branch.code() as u64]),
            ..self.train.clone()
        }
    }

    pub fn predict(&self) -> PredictConfig {
        PredictConfig::from(&self.train)
    }

    pub fn synth_seed(&self) -> u64 {
        derive_seed(self.seed, &[SEED_SYNTH])
    }
}

fn existing(path: &Path) -> Result<PathBuf> {
    if path.exists() {
        Ok(path.to_path_buf())
    } else {
        Err(Error::Config(format!("referenced file {} does not exist", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_method_constants() {
        let c = PipelineConfig::default();
        assert_eq!(c.train.grid_size, 0.25);
        assert_eq!(c.train.k_local, 120_000);
        assert_eq!(c.train.n_max, 4_000_000);
        assert_eq!(c.tau_geo, 0.4);
        assert_eq!(c.fusion.alpha, 0.5);
        assert_eq!(c.train.loss.lambda_proto, 0.1);
        assert_eq!(c.train.loss.lambda_supcon, 0.5);
        assert_eq!(c.train.loss.tau, 0.1);
        assert_eq!(PipelineConfig::parse("").unwrap(), c);
    }

    #[test]
    fn overrides_and_rejections() {
        let c = PipelineConfig::parse(
            "seed = 3\n[sampling]\nk_local = 4096\n[fusion]\nalpha = 0.3\ntune = false\n[synth]\nprofile = desk\n",
        )
        .unwrap();
        assert_eq!((c.seed, c.train.k_local, c.fusion.alpha, c.tune_alpha), (3, 4096, 0.3, false));
        assert_eq!(c.profile, BenchmarkProfile::desk());
        assert!(PipelineConfig::parse("sampling.gridsize = 1").is_err());
        assert!(PipelineConfig::parse("fusion.alpha = 2").is_err());
        assert!(PipelineConfig::parse("verify.registry = /nonexistent/reg.txt").is_err());
        assert!(PipelineConfig::parse("loss.class_weights = 1,2").is_err());
        assert!(PipelineConfig::parse("data.scenes = 2").is_err());
    }

    #[test]
    fn branch_seeds_differ() {
        let c = PipelineConfig::default();
        assert_ne!(c.branch_train(Branch::Global).seed, c.branch_train(Branch::Local).seed);
    }
}
