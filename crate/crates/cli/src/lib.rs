//! Command-line driver: every pipeline stage as a subcommand, plus
//! `pipeline` running them all in one invocation.
//!
//! Exit codes: 0 success, 1 domain error (bad data, failed gate), 2 usage
//! error.

pub mod config;
pub mod stages;

use std::io::Write as _;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use corrseg::config::KeyValues;
use corrseg::eval::{class_shares, default_groups, format_significant, shares_tsv, split_summary, split_table_tsv};
use corrseg::io::{read_scene, write_scene, Split};
use corrseg::sampling::grid_sample;
use corrseg::synth::{generate, make_benchmark, BenchmarkProfile, CorridorSpec};
use corrseg::trainer::{Branch, Checkpoint};

use crate::config::PipelineConfig;
use crate::stages::*;

#[derive(Debug, Parser)]
#[command(name = "corrseg", about = "Dual-branch point cloud segmentation for power-line corridors")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Pipeline config file (falls back to $CORRSEG_CONFIG)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed of every random choice; overrides the config
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for per-scene work
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic scene, or a benchmark with --scenes
    Synth {
        /// Corridor spec file (key = value); benchmark mode also reads `profile` and `span_jitter`
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Number of benchmark scenes; omit for a single scene
        #[arg(long)]
        scenes: Option<usize>,
        /// Scene file, or benchmark directory with --scenes
        #[arg(long)]
        out: PathBuf,
    },
    /// Split summary and class shares of a manifest, or one scene
    Stats {
        #[arg(long, conflicts_with = "input", required_unless_present = "input")]
        manifest: Option<PathBuf>,
        #[arg(long)]
        input: Option<PathBuf>,
        /// Write machine-readable tables here
        #[arg(long)]
        tsv: Option<PathBuf>,
    },
    /// Grid-downsample a scene
    Voxelize {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Voxel edge in meters; defaults to the config's grid size
        #[arg(long)]
        grid_size: Option<f64>,
        /// Write the point-to-voxel map, one index per line
        #[arg(long)]
        inverse: Option<PathBuf>,
    },
    /// Train one branch on a manifest split
    Train {
        #[arg(long)]
        branch: Branch,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "train")]
        split: Split,
        /// Checkpoint path
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch loss table
        #[arg(long)]
        loss_tsv: Option<PathBuf>,
    },
    /// Full-resolution probability fields from a checkpoint
    Predict {
        #[arg(long)]
        model: PathBuf,
        /// Single scene; writes --out
        #[arg(long, conflicts_with = "manifest", required_unless_present = "manifest")]
        input: Option<PathBuf>,
        #[arg(long, requires = "input")]
        out: Option<PathBuf>,
        /// Every scene of --split; writes <scene>.<branch>.prob into --out-dir
        #[arg(long, requires = "out_dir")]
        manifest: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Convex combination of a local and a global field
    Fuse {
        #[arg(long)]
        local: PathBuf,
        #[arg(long)]
        global: PathBuf,
        /// Local-branch weight; defaults to the config
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        /// Also write the preliminary labels
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Sweep the fusion weight over a validation split
    TuneAlpha {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "val")]
        split: Split,
        /// Directory holding <scene>.local.prob and <scene>.global.prob
        #[arg(long)]
        fields: PathBuf,
        #[arg(long)]
        tsv: Option<PathBuf>,
    },
    /// Geometric verification of a fused prediction
    Verify {
        /// Scene providing the coordinates
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        fused: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-cluster report
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        registry: Option<PathBuf>,
        #[arg(long)]
        tau_geo: Option<f64>,
    },
    /// IoU of stored predictions against ground truth
    Eval {
        /// Every scene of --split, reading <scene>.<stage>.labels or .prob from --dir
        #[arg(long, conflicts_with = "gt", required_unless_present = "gt", requires = "dir")]
        manifest: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        dir: Option<PathBuf>,
        #[arg(long, default_value = "verified")]
        stage: String,
        /// Single ground-truth scene
        #[arg(long, requires = "pred")]
        gt: Option<PathBuf>,
        /// Labels, probability field or labeled scene
        #[arg(long)]
        pred: Option<PathBuf>,
        #[arg(long)]
        tsv: Option<PathBuf>,
        /// Exit 1 when mIoU falls below this value
        #[arg(long)]
        min_miou: Option<f64>,
    },
    /// Train both branches, predict, fuse, verify and evaluate
    Pipeline {
        #[arg(long, default_value = "corrseg-run")]
        out: PathBuf,
        /// Use this benchmark instead of the config's data source
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
}

enum Failure {
    Usage(String),
    Domain(String),
}

impl From<corrseg::Error> for Failure {
    fn from(e: corrseg::Error) -> Self {
        Failure::Domain(e.to_string())
    }
}

type CmdResult = std::result::Result<(), Failure>;

/// Runs one invocation; `args[0]` is the program name.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.common.jobs.max(1)).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    match pool.install(|| dispatch(cli)) {
        Ok(()) => 0,
        Err(Failure::Usage(m)) => {
            eprintln!("usage error: {m}");
            2
        }
        Err(Failure::Domain(m)) => {
            eprintln!("error: {m}");
            1
        }
    }
}

fn load_config(common: &Common) -> std::result::Result<PipelineConfig, Failure> {
    if common.jobs == 0 {
        return Err(Failure::Usage("--jobs must be at least 1".into()));
    }
    let mut cfg = PipelineConfig::resolve(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn say(text: &str) {
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(text.as_bytes());
    if !text.ends_with('\n') {
        let _ = out.write_all(b"\n");
    }
}

fn dispatch(cli: Cli) -> CmdResult {
    let mut cfg = load_config(&cli.common)?;
    let tax = cfg.taxonomy.clone();
    match cli.command {
        Command::Synth { spec, scenes, out } => {
            let kv = match &spec {
                Some(p) => KeyValues::load(p)?,
                None => KeyValues::new(),
            };
            match scenes {
                Some(n) => {
                    let profile = BenchmarkProfile::from_config(&kv)?;
                    let seed = cli.common.seed.unwrap_or(cfg.seed);
                    let m = make_benchmark(n, &profile, seed, &out)?;
                    say(&format!(
                        "wrote {} scenes ({} train, {} val, {} test) and {}",
                        n,
                        m.count(Split::Train),
                        m.count(Split::Val),
                        m.count(Split::Test),
                        out.join("manifest.tsv").display()
                    ));
                }
                None => {
                    let mut spec = CorridorSpec::from_config(&kv)?;
                    if let Some(s) = cli.common.seed {
                        spec.seed = s;
                    }
                    let scene = generate(&spec)?;
                    write_scene(&out, &scene.cloud, tax.hash64())?;
                    write_text(&out.with_extension("components.tsv"), &components_tsv(&scene, &tax))?;
                    say(&format!("wrote {} points to {}", scene.cloud.len(), out.display()));
                }
            }
        }
        Command::Stats { manifest, input, tsv } => {
            let c = tax.num_classes();
            let groups = default_groups(&tax);
            let (table, scenes) = match (&manifest, &input) {
                (Some(m), _) => {
                    let bench = Benchmark::load(m)?;
                    let rows = split_summary(&bench.manifest, &bench.root, c)?;
                    let scenes = Split::ALL
                        .iter()
                        .map(|&s| bench.read_split(s))
                        .collect::<corrseg::Result<Vec<_>>>()?
                        .concat();
                    (Some(split_table_tsv(&rows)), scenes)
                }
                (None, Some(i)) => (None, vec![read_scene(i)?]),
                (None, None) => return Err(Failure::Usage("stats needs --manifest or --input".into())),
            };
            let shares = class_shares(&scenes, &groups, c)?;
            let mut text = String::new();
            if let Some(t) = &table {
                text += t;
                text.push('\n');
            }
            text += &shares_tsv(&shares);
            match &tsv {
                Some(p) => write_text(p, &text)?,
                None => {
                    if let Some(t) = &table {
                        say(t);
                    }
                    for s in &shares {
                        say(&format!("{:<24} {:>10} {:>8}%", s.name, s.count, format_significant(s.percent, 4)));
                    }
                }
            }
        }
        Command::Voxelize {
            input,
            out,
            grid_size,
            inverse,
        } => {
            let cloud = read_scene(&input)?;
            let s = grid_size.unwrap_or(cfg.train.grid_size);
            let r = grid_sample(&cloud, s)?;
            write_scene(&out, &r.sampled, tax.hash64())?;
            if let Some(p) = inverse {
                let text: String = r.inverse.iter().map(|i| format!("{i}\n")).collect();
                write_text(&p, &text)?;
            }
            say(&format!("{} points -> {} voxels at {s} m", cloud.len(), r.sampled.len()));
        }
        Command::Train {
            branch,
            manifest,
            split,
            out,
            loss_tsv,
        } => {
            let scenes = Benchmark::load(&manifest)?.read_split(split)?;
            let ckpt = train_stage(&cfg, &scenes, branch)?;
            ckpt.save(&out)?;
            if let Some(p) = loss_tsv {
                write_text(&p, &loss_curve_tsv(&ckpt))?;
            }
            say(&format!(
                "trained the {branch} branch for {} epochs, final loss {:.6}",
                ckpt.loss_curve.len(),
                ckpt.loss_curve.last().copied().unwrap_or(f64::NAN)
            ));
        }
        Command::Predict {
            model,
            input,
            out,
            manifest,
            split,
            out_dir,
        } => {
            let ckpt = Checkpoint::load(&model)?;
            match (input, manifest) {
                (Some(i), None) => {
                    let out = out.ok_or_else(|| Failure::Usage("--input needs --out".into()))?;
                    let cloud = read_scene(&i)?;
                    let field = corrseg::trainer::predict(&ckpt.params, &cloud, ckpt.params.branch, &cfg.predict())?;
                    corrseg::io::write_field(&out, &field)?;
                }
                (None, Some(m)) => {
                    let dir = out_dir.ok_or_else(|| Failure::Usage("--manifest needs --out-dir".into()))?;
                    let scenes = Benchmark::load(&m)?.read_split(split)?;
                    predict_stage(&cfg, &ckpt, &scenes, &dir)?;
                    say(&format!("predicted {} scenes", scenes.len()));
                }
                _ => return Err(Failure::Usage("predict needs exactly one of --input and --manifest".into())),
            }
        }
        Command::Fuse {
            local,
            global,
            alpha,
            out,
            labels,
        } => {
            fuse_files(&local, &global, alpha.unwrap_or(cfg.fusion.alpha), &out, labels.as_deref())?;
        }
        Command::TuneAlpha {
            manifest,
            split,
            fields,
            tsv,
        } => {
            let scenes = Benchmark::load(&manifest)?.read_split(split)?;
            let curve = tune_stage(&cfg, &scenes, &fields)?;
            if let Some(p) = tsv {
                write_text(&p, &curve.to_tsv())?;
            }
            say(&format!("best alpha {:.4} (mIoU {:.6})", curve.best_alpha, curve.best_miou));
        }
        Command::Verify {
            input,
            fused,
            out,
            report,
            registry,
            tau_geo,
        } => {
            if let Some(r) = registry {
                let default_dbscan = cfg.registry.default_dbscan;
                cfg.registry = corrseg::geoverify::ConstraintRegistry::load(&r, &tax)?;
                if cfg.registry.default_dbscan == corrseg::geoverify::DbscanParams::default() {
                    cfg.registry.default_dbscan = default_dbscan;
                }
            }
            if let Some(t) = tau_geo {
                cfg.tau_geo = t;
            }
            let cloud = read_scene(&input)?;
            let n = verify_files(&cfg, &cloud, &fused, &out, report.as_deref())?;
            say(&format!("relabeled {n} points"));
        }
        Command::Eval {
            manifest,
            split,
            dir,
            stage,
            gt,
            pred,
            tsv,
            min_miou,
        } => {
            let metrics = match (manifest, gt) {
                (Some(m), None) => {
                    let dir = dir.ok_or_else(|| Failure::Usage("--manifest needs --dir".into()))?;
                    let scenes = Benchmark::load(&m)?.read_split(split)?;
                    if scenes.is_empty() {
                        return Err(Failure::Domain(format!("split {split} is empty")));
                    }
                    eval_stage(&tax, &scenes, &dir, &stage)?
                }
                (None, Some(g)) => {
                    let pred = pred.ok_or_else(|| Failure::Usage("--gt needs --pred".into()))?;
                    let scene = read_scene(&g)?;
                    scene_metrics(&tax, &load_labels(&pred)?, scene.require_labels()?)?
                }
                _ => return Err(Failure::Usage("eval needs exactly one of --manifest and --gt".into())),
            };
            if let Some(p) = &tsv {
                write_text(p, &metrics.to_tsv(&tax))?;
            }
            say(&metrics.full.to_table(&tax, "IoU"));
            say(&format!("mIoU {:.4}  primary mIoU {:.4}", metrics.full.miou, metrics.primary.miou));
            if let Some(gate) = min_miou {
                if metrics.full.miou < gate {
                    return Err(Failure::Domain(format!(
                        "mIoU {:.4} is below the gate {gate:.4}",
                        metrics.full.miou
                    )));
                }
            }
        }
        Command::Pipeline { out, manifest } => {
            if let Some(m) = manifest {
                cfg.manifest = Some(m);
            }
            let summary = run_pipeline(&cfg, &out, &mut |m| eprintln!("{m}"))?;
            say(&summary.to_tsv());
        }
    }
    Ok(())
}

fn components_tsv(scene: &corrseg::synth::SynthScene, tax: &corrseg::Taxonomy) -> String {
    use std::fmt::Write as _;
    let mut s = String::from("class\tname\tkind\ttower\tpoints\torientation\tstart_x\tstart_y\tstart_z\tend_x\tend_y\tend_z\n");
    for c in &scene.components {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{:.4}\t{:.3}\t{:.3}\t{:.3}\t{:.3}\t{:.3}\t{:.3}",
            c.class,
            tax.name(c.class),
            c.kind,
            c.tower.map_or("-".to_string(), |t| t.to_string()),
            c.members.len(),
            c.orientation(),
            c.start[0],
            c.start[1],
            c.start[2],
            c.end[0],
            c.end[1],
            c.end[2]
        );
    }
    s
}
