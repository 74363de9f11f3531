//! Command-line front end. Library errors exit with 1, usage errors with 2.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::data::{generate_scene_pairs, iou_label, load_dataset, save_dataset, ScenePair, Tile, ViewSizes};
use crate::error::{Error, Result};
use crate::evaluator::{evaluate, rank_all, sha256_hex, DescriptorIndex, RetrievalReport, DEFAULT_KS};
use crate::gradcheck::{all_cases, run_cases, DEFAULT_SEEDS};
use crate::model::{checkpoint, param_count, siamese_flop_count, siamese_param_count, ModelConfig, SiameseConfig, SiamesePair};
use crate::trainer::{describe_pairs, resume, train, CheckpointMeta, TrainConfig};

/// Input sizes used for the reported parameter and FLOP counts.
pub const GROUND_HW: (usize, usize) = (128, 512);
pub const AERIAL_HW: (usize, usize) = (256, 256);
pub const CLASSIFIER_HW: (usize, usize) = (224, 224);

#[derive(Parser, Debug)]
#[command(name = "saig", version, about = "Cross-view geo-localization backbone")]
struct Cli {
    /// JSON training configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run single-threaded for bit-identical results.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum VariantArg {
    SaigS,
    SaigD,
}

impl VariantArg {
    fn config(self, hw: (usize, usize)) -> ModelConfig {
        match self {
            VariantArg::SaigS => ModelConfig::saig_s(hw),
            VariantArg::SaigD => ModelConfig::saig_d(hw),
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render synthetic pairs and write a dataset manifest.
    GenData {
        #[arg(long, default_value_t = 256)]
        n: usize,
        #[arg(long, default_value = "train")]
        split: String,
    },
    /// Train a Siamese model.
    Train {
        /// Dataset manifest; overrides the configuration.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from a training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Retrieve aerial tiles for every ground panorama of a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Count trainable parameters.
    Paramcount {
        #[arg(long, value_enum)]
        variant: VariantArg,
        /// Count a single branch with a classifier of this many classes.
        #[arg(long)]
        classes: Option<usize>,
    },
    /// Count multiply-accumulates of one Siamese forward pass.
    Flopcount {
        #[arg(long, value_enum)]
        variant: VariantArg,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long, default_value_t = DEFAULT_SEEDS)]
        seeds: usize,
    },
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    if cli.deterministic {
        // fails only if the pool already exists, which is equally single-use
        let _ = rayon::ThreadPoolBuilder::new().num_threads(1).build_global();
    }
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn train_config(cli: &Cli) -> Result<TrainConfig> {
    let mut cfg = match &cli.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn out_dir(cli: &Cli, default: &str) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData { n, split } => {
            let cfg = train_config(cli)?;
            let sizes = ViewSizes {
                ground_hw: cfg.ground_hw,
                aerial_hw: cfg.aerial_hw,
            };
            let dir = out_dir(cli, "data");
            let pairs = generate_scene_pairs(cfg.seed, *n, sizes)?;
            save_dataset(&pairs, split, &dir)?;
            println!("wrote {n} pairs to {}", dir.join("manifest.json").display());
        }
        Command::Train { data, resume: from } => {
            let dir = out_dir(cli, "run");
            let outcome = match from {
                Some(ckpt) => {
                    let meta = checkpoint::load::<CheckpointMeta>(ckpt)?.config;
                    let manifest = data
                        .clone()
                        .or(meta.train.data)
                        .ok_or_else(|| Error::contract("resume needs --data or a checkpoint that names its data"))?;
                    let (_, pairs) = load_dataset(&manifest)?;
                    resume(ckpt, &pairs, &dir)?
                }
                None => {
                    let mut cfg = train_config(cli)?;
                    if data.is_some() {
                        cfg.data = data.clone();
                    }
                    train(&cfg, &dir)?
                }
            };
            for r in outcome.log() {
                println!("{}", serde_json::to_string(r)?);
            }
        }
        Command::Eval { checkpoint, data } => {
            let report = run_eval(checkpoint, data, &out_dir(cli, "eval"))?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Paramcount { variant, classes } => {
            let count = match classes {
                Some(c) => param_count(&variant.config(CLASSIFIER_HW).with_classes(*c)),
                None => siamese_param_count(&variant.config(GROUND_HW), GROUND_HW, AERIAL_HW),
            };
            println!("{count} ({:.1}M)", count as f64 / 1e6);
        }
        Command::Flopcount { variant } => {
            let flops = siamese_flop_count(&variant.config(GROUND_HW), GROUND_HW, AERIAL_HW);
            println!("{flops} ({:.2} GFLOPs)", flops as f64 / 1e9);
        }
        Command::Gradcheck { seeds } => {
            let reports = run_cases(&all_cases(), *seeds)?;
            let mut failed = 0;
            for r in &reports {
                let verdict = if r.passed() { "ok" } else { "FAIL" };
                println!("{:32} max rel err {:.3e} (tol {:.0e}) {verdict}", r.name, r.max_rel_error, r.tolerance);
                failed += usize::from(!r.passed());
            }
            if failed > 0 {
                return Err(Error::Numeric {
                    location: "gradcheck".into(),
                    detail: format!("{failed} of {} cases exceeded tolerance", reports.len()),
                });
            }
        }
    }
    Ok(())
}

/// Loads either a training checkpoint or a bare model checkpoint.
fn load_model(path: &Path) -> Result<SiamesePair<f32>> {
    match checkpoint::load::<CheckpointMeta>(path) {
        Ok(file) => SiamesePair::from_named(&file.config.train.siamese(), &file.tensors),
        Err(Error::Json(_)) => {
            let file = checkpoint::load::<SiameseConfig>(path)?;
            SiamesePair::from_named(&file.config, &file.tensors)
        }
        Err(e) => Err(e),
    }
}

/// Ranks every aerial tile for every ground panorama, labels references by
/// tile overlap, and writes `report.json` and `index.bin` into `out`.
pub fn run_eval(checkpoint_path: &Path, manifest: &Path, out: &Path) -> Result<RetrievalReport> {
    let bytes = fs::read(checkpoint_path).map_err(|e| Error::io(checkpoint_path, e))?;
    let model = load_model(checkpoint_path)?;
    let (_, pairs) = load_dataset(manifest)?;
    let report = evaluate_pairs(&model, &pairs, out)?;
    let report = RetrievalReport {
        config_hash: Some(sha256_hex(&serde_json::to_vec(&model.config())?)),
        checkpoint_hash: Some(sha256_hex(&bytes)),
        ..report
    };
    let path = out.join("report.json");
    fs::write(&path, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(&path, e))?;
    Ok(report)
}

fn evaluate_pairs(model: &SiamesePair<f32>, pairs: &[ScenePair], out: &Path) -> Result<RetrievalReport> {
    let all: Vec<usize> = (0..pairs.len()).collect();
    let (queries, refs) = describe_pairs(model, pairs, &all)?;
    let ids: Vec<u64> = pairs.iter().map(|p| p.pair_id).collect();
    let index = DescriptorIndex::new(ids.clone(), &refs)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    index.save(&out.join("index.bin"))?;
    let tiles: Vec<(u64, Tile)> = pairs
        .iter()
        .map(|p| (p.pair_id, Tile::new(p.tile_origin, p.tile_size)))
        .collect();
    let labels = tiles
        .iter()
        .map(|(_, t)| iou_label(t, &tiles))
        .collect::<Result<Vec<_>>>()?;
    evaluate(&rank_all(&queries, &index)?, &labels, index.len(), &DEFAULT_KS)
}
