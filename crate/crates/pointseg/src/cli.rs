//! Command-line interface: scene generation, training, one-shot region
//! growing, tiled prediction, and evaluation.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics;
use crate::model;
use crate::rasterio::{self, Checkpoint, RasterFile};
use crate::regiongrow::{self, GrowParams};
use crate::synthdata::{self, SceneSpec};
use crate::trainer::{self, ConsistencyKind, Scene, TrainConfig};

#[derive(Parser)]
#[command(name = "pointseg", about = "Semantic segmentation from point annotations", version)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, ValueEnum)]
pub enum ConsistencyArg {
    Mse,
    Kl,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scenes (image, dense ground truth, point labels).
    Gen {
        /// JSON generation config
        #[arg(long)]
        config: PathBuf,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a directory of generated scenes.
    Train {
        /// JSON training config
        #[arg(long)]
        config: PathBuf,
        /// Directory holding image_*.crg and points_*.crg files
        #[arg(long)]
        data: PathBuf,
        /// Output directory for the checkpoint and log
        #[arg(long)]
        out: PathBuf,
        /// Override the config seed
        #[arg(long)]
        seed: Option<u64>,
        /// Override the region-growing confidence threshold
        #[arg(long)]
        tau: Option<f64>,
        /// Override the consistency-loss weight
        #[arg(long)]
        lambda_con: Option<f64>,
        /// Disable region growing (expanded labels stay at the points)
        #[arg(long)]
        no_rg: bool,
        /// Disable the expanded head and consistency term
        #[arg(long)]
        no_cr: bool,
        /// Disable the self-training finetune phase
        #[arg(long)]
        no_st: bool,
        /// Consistency discrepancy: mean squared error or KL divergence
        #[arg(long, value_enum)]
        consistency: Option<ConsistencyArg>,
        /// Softening temperature for the KL consistency variant
        #[arg(long)]
        temperature: Option<f64>,
    },
    /// Grow point labels over a probability map once, to a fixed point.
    Grow {
        /// Probability map raster (f64, one channel per class)
        #[arg(long)]
        prob: PathBuf,
        /// Point-label raster (u8, 0 = unlabeled)
        #[arg(long)]
        points: PathBuf,
        /// Confidence threshold in (0, 1]
        #[arg(long, default_value_t = 0.95)]
        tau: f64,
        /// Output label raster
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict labels and probabilities for an image with a trained model.
    Predict {
        /// Model checkpoint
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input image raster
        #[arg(long)]
        image: PathBuf,
        /// Output directory for labels.crg and prob.crg
        #[arg(long)]
        out: PathBuf,
        /// Tile size
        #[arg(long, default_value_t = 128)]
        patch: usize,
        /// Tile stride
        #[arg(long, default_value_t = 40)]
        stride: usize,
    },
    /// Score a prediction against dense ground truth.
    Eval {
        /// Predicted label raster
        #[arg(long)]
        pred: PathBuf,
        /// Ground-truth label raster (0 = ignore)
        #[arg(long)]
        gt: PathBuf,
        /// Number of classes
        #[arg(long)]
        k: usize,
        /// Output directory for metrics.csv and summary.json
        #[arg(long)]
        out: PathBuf,
    },
}

/// Config for the `gen` subcommand: scene geometry plus dataset size.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub height: usize,
    pub width: usize,
    pub k: usize,
    pub n_regions: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    pub n_scenes: usize,
    pub points_per_class: usize,
}

fn read_json_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn scene_paths(dir: &Path, id: usize) -> (PathBuf, PathBuf, PathBuf) {
    (
        dir.join(format!("image_{id:03}.crg")),
        dir.join(format!("gt_{id:03}.crg")),
        dir.join(format!("points_{id:03}.crg")),
    )
}

pub fn cmd_gen(config: &Path, out: &Path) -> Result<()> {
    let cfg: GenConfig = read_json_config(config)?;
    if cfg.n_scenes == 0 {
        return Err(Error::Config("n_scenes must be >= 1".into()));
    }
    if cfg.points_per_class == 0 {
        return Err(Error::Config("points_per_class must be >= 1".into()));
    }
    fs::create_dir_all(out)?;
    for i in 0..cfg.n_scenes {
        let spec = SceneSpec {
            height: cfg.height,
            width: cfg.width,
            k: cfg.k,
            n_regions: cfg.n_regions,
            noise_sigma: cfg.noise_sigma,
            seed: cfg.seed.wrapping_add(i as u64),
        };
        let (image, gt) = synthdata::gen_scene(&spec)?;
        let points = synthdata::sample_points(&gt, cfg.points_per_class, spec.seed ^ 0x5EED);
        let (image_path, gt_path, points_path) = scene_paths(out, i);
        rasterio::write_raster(&image_path, &RasterFile::from_raster(&image))?;
        rasterio::write_raster(&gt_path, &RasterFile::from_labels(&gt))?;
        rasterio::write_raster(&points_path, &RasterFile::from_labels(&points))?;
        println!(
            "scene {i}: {} {} {}",
            image_path.display(),
            gt_path.display(),
            points_path.display()
        );
    }
    Ok(())
}

/// Loads every `image_*.crg`/`points_*.crg` pair from a directory, in id
/// order. Dense ground truth is attached when present.
pub fn load_scenes(dir: &Path) -> Result<Vec<Scene>> {
    let mut scenes = Vec::new();
    for id in 0.. {
        let (image_path, gt_path, points_path) = scene_paths(dir, id);
        if !image_path.exists() {
            break;
        }
        if !points_path.exists() {
            return Err(Error::Data(format!("{} has no matching points file", image_path.display())));
        }
        let image = rasterio::read_raster(&image_path)?.into_raster()?;
        let points = rasterio::read_raster(&points_path)?.into_labels()?;
        let dense_gt = if gt_path.exists() {
            Some(rasterio::read_raster(&gt_path)?.into_labels()?)
        } else {
            None
        };
        scenes.push(Scene { image, points, dense_gt });
    }
    if scenes.is_empty() {
        return Err(Error::Data(format!("no scenes found in {}", dir.display())));
    }
    Ok(scenes)
}

#[allow(clippy::too_many_arguments)]
fn apply_overrides(
    cfg: &mut TrainConfig,
    seed: Option<u64>,
    tau: Option<f64>,
    lambda_con: Option<f64>,
    no_rg: bool,
    no_cr: bool,
    no_st: bool,
    consistency: Option<ConsistencyArg>,
    temperature: Option<f64>,
) -> Result<()> {
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(t) = tau {
        cfg.tau = t;
    }
    if let Some(l) = lambda_con {
        cfg.lambda_con = l;
    }
    if no_rg {
        cfg.enable_rg = false;
    }
    if no_cr {
        cfg.enable_cr = false;
    }
    if no_st {
        cfg.enable_st = false;
    }
    match consistency {
        Some(ConsistencyArg::Mse) => cfg.consistency = ConsistencyKind::Mse,
        Some(ConsistencyArg::Kl) => {
            cfg.consistency = ConsistencyKind::Kl { temperature: temperature.unwrap_or(1.0) }
        }
        None => {
            if let Some(t) = temperature {
                match cfg.consistency {
                    ConsistencyKind::Kl { .. } => {
                        cfg.consistency = ConsistencyKind::Kl { temperature: t }
                    }
                    ConsistencyKind::Mse => {
                        return Err(Error::Config(
                            "--temperature requires --consistency kl".into(),
                        ))
                    }
                }
            }
        }
    }
    Ok(())
}

pub fn cmd_train(config: &Path, data: &Path, out: &Path, cfg_overrides: impl FnOnce(&mut TrainConfig) -> Result<()>) -> Result<()> {
    let mut cfg: TrainConfig = read_json_config(config)?;
    cfg_overrides(&mut cfg)?;
    let scenes = load_scenes(data)?;
    let (params, log) = trainer::train(&cfg, &scenes)?;
    fs::create_dir_all(out)?;
    let mut log_file = fs::File::create(out.join("train_log.jsonl"))?;
    for rec in &log {
        let line = serde_json::to_string(rec)
            .map_err(|e| Error::Format(format!("log serialization: {e}")))?;
        writeln!(log_file, "{line}")?;
    }
    rasterio::write_checkpoint(&out.join("model.ckpt"), &Checkpoint::from_params(&params))?;
    println!(
        "trained {} iterations; wrote {} and {}",
        log.len(),
        out.join("model.ckpt").display(),
        out.join("train_log.jsonl").display()
    );
    Ok(())
}

pub fn cmd_grow(prob: &Path, points: &Path, tau: f64, out: &Path) -> Result<()> {
    let prob = rasterio::read_raster(prob)?.into_raster()?;
    prob.validate_probability(1e-5)?;
    let points = rasterio::read_raster(points)?.into_labels()?;
    let init = regiongrow::init_expanded(&points);
    let grown = regiongrow::grow(&init, &prob, GrowParams::new(tau)?)?;
    rasterio::write_raster(out, &RasterFile::from_labels(&grown))?;
    println!(
        "grew {} labeled pixels to {}",
        points.labeled_count(),
        grown.labeled_count()
    );
    Ok(())
}

pub fn cmd_predict(
    checkpoint: &Path,
    image: &Path,
    out: &Path,
    patch: usize,
    stride: usize,
) -> Result<()> {
    let params = rasterio::read_checkpoint(checkpoint)?.into_params()?;
    let image = rasterio::read_raster(image)?.into_raster()?;
    let patch = patch.min(image.height).min(image.width);
    let prob = model::predict(&params, &image, patch, stride)?;
    let labels = prob.argmax_labels();
    fs::create_dir_all(out)?;
    rasterio::write_raster(&out.join("labels.crg"), &RasterFile::from_labels(&labels))?;
    rasterio::write_raster(&out.join("prob.crg"), &RasterFile::from_raster(&prob))?;
    println!("wrote {} and {}", out.join("labels.crg").display(), out.join("prob.crg").display());
    Ok(())
}

pub fn cmd_eval(pred: &Path, gt: &Path, k: usize, out: &Path) -> Result<()> {
    let pred = rasterio::read_raster(pred)?.into_labels()?;
    let gt = rasterio::read_raster(gt)?.into_labels()?;
    let cm = metrics::confusion(&pred, &gt, k)?;
    let s = metrics::scores(&cm)?;
    fs::create_dir_all(out)?;
    let mut csv = String::from("class,f1,iou\n");
    for c in 0..k {
        if let (Some(f1), Some(iou)) = (s.f1[c], s.iou[c]) {
            csv.push_str(&format!("{},{f1:.6},{iou:.6}\n", c + 1));
        }
    }
    csv.push_str(&format!("mean,{:.6},{:.6}\n", s.mf1, s.miou));
    fs::write(out.join("metrics.csv"), csv)?;
    let summary = serde_json::json!({
        "mf1": s.mf1,
        "miou": s.miou,
        "oa": s.oa,
        "n_pixels": cm.total(),
    });
    fs::write(out.join("summary.json"), format!("{summary:#}\n"))?;
    println!("mF1 {:.4}  mIoU {:.4}  OA {:.4}", s.mf1, s.miou, s.oa);
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { config, out } => cmd_gen(&config, &out),
        Command::Train {
            config,
            data,
            out,
            seed,
            tau,
            lambda_con,
            no_rg,
            no_cr,
            no_st,
            consistency,
            temperature,
        } => cmd_train(&config, &data, &out, |cfg| {
            apply_overrides(cfg, seed, tau, lambda_con, no_rg, no_cr, no_st, consistency, temperature)
        }),
        Command::Grow { prob, points, tau, out } => cmd_grow(&prob, &points, tau, &out),
        Command::Predict { checkpoint, image, out, patch, stride } => {
            cmd_predict(&checkpoint, &image, &out, patch, stride)
        }
        Command::Eval { pred, gt, k, out } => cmd_eval(&pred, &gt, k, &out),
    }
}

/// Parses the process arguments, runs the subcommand, and returns the exit
/// code (0 success, 2 config, 3 data/format/io, 4 runtime).
pub fn main() -> i32 {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
