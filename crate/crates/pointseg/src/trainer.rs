//! The training loop: SGD with poly learning-rate decay, per-iteration region
//! growing, loss assembly for the ablation variants, and the self-training
//! finetune phase on frozen pseudo labels.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::grid::{self, LabelMatrix, PatchSpec, Raster};
use crate::losses::{self, LossWeights};
use crate::model::{self, ModelParams};
use crate::regiongrow::{self, GrowParams};

/// Which discrepancy the consistency term uses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ConsistencyKind {
    Mse,
    Kl { temperature: f64 },
}

/// All training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub tau: f64,
    pub lambda_con: f64,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub power: f64,
    pub max_iter: usize,
    pub finetune_iter: usize,
    pub patch: usize,
    pub batch: usize,
    pub stride: usize,
    pub k: usize,
    pub seed: u64,
    pub width: usize,
    pub depth: usize,
    pub consistency: ConsistencyKind,
    pub enable_rg: bool,
    pub enable_cr: bool,
    pub enable_st: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            tau: 0.95,
            lambda_con: 1.0,
            base_lr: 1e-3,
            weight_decay: 5e-5,
            power: 0.9,
            max_iter: 5000,
            finetune_iter: 5000,
            patch: 128,
            batch: 64,
            stride: 40,
            k: 4,
            seed: 0,
            width: 32,
            depth: 4,
            consistency: ConsistencyKind::Mse,
            enable_rg: true,
            enable_cr: true,
            enable_st: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Config(format!("tau must be in (0,1], got {}", self.tau)));
        }
        if self.lambda_con < 0.0 || self.base_lr < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config("rates must be >= 0".into()));
        }
        if self.power <= 0.0 {
            return Err(Error::Config("power must be > 0".into()));
        }
        if self.patch < 8 {
            return Err(Error::Config(format!("patch must be >= 8, got {}", self.patch)));
        }
        if self.batch < 1 {
            return Err(Error::Config("batch must be >= 1".into()));
        }
        if self.stride < 1 {
            return Err(Error::Config("stride must be >= 1".into()));
        }
        if self.k < 2 {
            return Err(Error::Config(format!("k must be >= 2, got {}", self.k)));
        }
        if self.width < 1 || self.depth < 1 {
            return Err(Error::Config("width and depth must be >= 1".into()));
        }
        if let ConsistencyKind::Kl { temperature } = self.consistency {
            if temperature <= 0.0 {
                return Err(Error::Config("temperature must be > 0".into()));
            }
        }
        Ok(())
    }
}

/// One training image with its sparse point annotations. Dense ground truth,
/// when carried, is for evaluation only and never touches the training loop.
#[derive(Debug, Clone)]
pub struct Scene {
    pub image: Raster,
    pub points: LabelMatrix,
    pub dense_gt: Option<LabelMatrix>,
}

/// Per-iteration log entry, serialized as one JSON line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub iter: usize,
    pub lr: f64,
    pub loss_seg: f64,
    pub loss_exp: f64,
    pub loss_con: f64,
    pub loss_total: f64,
    pub n_expanded: usize,
}

fn poly(base: f64, iter: usize, max_iter: usize, power: f64) -> f64 {
    if max_iter == 0 {
        return base;
    }
    base * (1.0 - iter as f64 / max_iter as f64).powf(power)
}

/// Poly learning-rate decay: base_lr * (1 - iter/max_iter)^power.
pub fn poly_lr(iter: usize, cfg: &TrainConfig) -> Result<f64> {
    if iter > cfg.max_iter {
        return Err(Error::Domain(format!(
            "schedule iteration {iter} exceeds max_iter {}",
            cfg.max_iter
        )));
    }
    Ok(poly(cfg.base_lr, iter, cfg.max_iter, cfg.power))
}

/// Gradients matching the layout of [`ModelParams`].
#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub backbone: Vec<(Tensor, Tensor)>,
    pub head_b: (Tensor, Tensor),
    pub head_e: (Tensor, Tensor),
}

impl ModelGrads {
    fn zeros_like(params: &ModelParams) -> Self {
        ModelGrads {
            backbone: params
                .backbone
                .iter()
                .map(|l| (Tensor::zeros(l.weight.shape.clone()), Tensor::zeros(l.bias.shape.clone())))
                .collect(),
            head_b: (
                Tensor::zeros(params.head_b.weight.shape.clone()),
                Tensor::zeros(params.head_b.bias.shape.clone()),
            ),
            head_e: (
                Tensor::zeros(params.head_e.weight.shape.clone()),
                Tensor::zeros(params.head_e.bias.shape.clone()),
            ),
        }
    }

    fn add_scaled(&mut self, other: &ModelGrads, s: f64) {
        fn axpy(dst: &mut Tensor, src: &Tensor, s: f64) {
            for (a, b) in dst.data.iter_mut().zip(&src.data) {
                *a += s * b;
            }
        }
        for ((dw, db), (sw, sb)) in self.backbone.iter_mut().zip(&other.backbone) {
            axpy(dw, sw, s);
            axpy(db, sb, s);
        }
        axpy(&mut self.head_b.0, &other.head_b.0, s);
        axpy(&mut self.head_b.1, &other.head_b.1, s);
        axpy(&mut self.head_e.0, &other.head_e.0, s);
        axpy(&mut self.head_e.1, &other.head_e.1, s);
    }

    fn is_finite(&self) -> bool {
        self.backbone.iter().all(|(w, b)| w.is_finite() && b.is_finite())
            && self.head_b.0.is_finite()
            && self.head_b.1.is_finite()
            && self.head_e.0.is_finite()
            && self.head_e.1.is_finite()
    }
}

/// One SGD update: p <- p - lr*(g + wd*p) for weights; biases skip the decay.
pub fn sgd_step(
    params: &mut ModelParams,
    grads: &ModelGrads,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if !grads.is_finite() {
        return Err(Error::Numeric("non-finite gradient in SGD step".into()));
    }
    fn update(p: &mut Tensor, g: &Tensor, lr: f64, wd: f64) {
        for (pv, gv) in p.data.iter_mut().zip(&g.data) {
            *pv -= lr * (gv + wd * *pv);
        }
    }
    for (layer, (gw, gb)) in params.backbone.iter_mut().zip(&grads.backbone) {
        update(&mut layer.weight, gw, lr, weight_decay);
        update(&mut layer.bias, gb, lr, 0.0);
    }
    update(&mut params.head_b.weight, &grads.head_b.0, lr, weight_decay);
    update(&mut params.head_b.bias, &grads.head_b.1, lr, 0.0);
    update(&mut params.head_e.weight, &grads.head_e.0, lr, weight_decay);
    update(&mut params.head_e.bias, &grads.head_e.1, lr, 0.0);
    if !params.all_finite() {
        return Err(Error::Numeric("non-finite parameter after SGD step".into()));
    }
    Ok(())
}

/// One batch element: an image patch, its point labels, and (during finetune)
/// a dense pseudo-label patch replacing the grown labels.
#[derive(Debug, Clone)]
pub struct BatchElement {
    pub patch: Raster,
    pub y: LabelMatrix,
    pub e_override: Option<LabelMatrix>,
}

struct ElementOutput {
    grads: ModelGrads,
    seg: f64,
    exp: f64,
    con: f64,
    total: f64,
    n_expanded: usize,
}

fn tensor_as_raster(t: &Tensor) -> Raster {
    Raster {
        height: t.shape[0],
        width: t.shape[1],
        channels: t.shape[2],
        data: t.data.clone(),
    }
}

fn element_pass(params: &ModelParams, el: &BatchElement, cfg: &TrainConfig) -> Result<ElementOutput> {
    if el.y.labeled_count() == 0 {
        return Err(Error::Data("sampler contract violation: batch element without labels".into()));
    }
    let mut tape = Tape::new();
    let nodes = params.register(&mut tape);
    let x = tape.leaf(model::raster_to_tensor(&el.patch));
    let (lb, le) = model::forward(&mut tape, x, &nodes)?;
    let pb = tape.softmax(lb)?;
    let seg = losses::seg_loss(&mut tape, pb, &el.y)?;

    // expanded label matrix: frozen pseudo labels during finetune, region
    // growing during pre-training, plain points otherwise
    let expanded = if let Some(e) = &el.e_override {
        Some(e.clone())
    } else if cfg.enable_rg {
        let pb_raster = tensor_as_raster(tape.value(pb));
        let init = regiongrow::init_expanded(&el.y);
        Some(regiongrow::grow(&init, &pb_raster, GrowParams::new(cfg.tau)?)?)
    } else if cfg.enable_cr {
        Some(el.y.clone())
    } else {
        None
    };

    let weights = LossWeights::new(cfg.lambda_con)?;
    let (exp_node, con_node) = match &expanded {
        Some(e) if cfg.enable_cr => {
            let pe = tape.softmax(le)?;
            let exp = losses::lovasz_softmax(&mut tape, pe, e)?;
            let con = match cfg.consistency {
                ConsistencyKind::Mse => losses::consistency_loss(&mut tape, pb, pe)?,
                ConsistencyKind::Kl { temperature } => {
                    losses::kl_consistency_loss(&mut tape, pb, pe, temperature)?
                }
            };
            (Some(exp), Some(con))
        }
        // expansion loss applied to the base head directly when the expanded
        // classifier is disabled
        Some(e) => (Some(losses::lovasz_softmax(&mut tape, pb, e)?), None),
        None => (None, None),
    };
    let total = losses::full_loss(&mut tape, seg, exp_node, con_node, weights)?;
    let grad_map = tape.backward(total)?;

    let take = |id| {
        grad_map
            .get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(id).shape.clone()))
    };
    let grads = ModelGrads {
        backbone: nodes.backbone.iter().map(|&(w, b)| (take(w), take(b))).collect(),
        head_b: (take(nodes.head_b.0), take(nodes.head_b.1)),
        head_e: (take(nodes.head_e.0), take(nodes.head_e.1)),
    };
    Ok(ElementOutput {
        grads,
        seg: tape.value(seg).item(),
        exp: exp_node.map(|n| tape.value(n).item()).unwrap_or(0.0),
        con: con_node.map(|n| tape.value(n).item()).unwrap_or(0.0),
        total: tape.value(total).item(),
        n_expanded: expanded
            .as_ref()
            .map(|e| e.labeled_count())
            .unwrap_or_else(|| el.y.labeled_count()),
    })
}

/// One optimizer step over a batch. Per-element passes run in parallel;
/// gradients are averaged in fixed element order, so the update is
/// deterministic.
pub fn train_iteration(
    params: &mut ModelParams,
    batch: &[BatchElement],
    cfg: &TrainConfig,
    iter: usize,
    lr: f64,
) -> Result<TrainLogRecord> {
    let outputs: Vec<Result<ElementOutput>> =
        batch.par_iter().map(|el| element_pass(params, el, cfg)).collect();
    let mut acc = ModelGrads::zeros_like(params);
    let inv = 1.0 / batch.len() as f64;
    let (mut seg, mut exp, mut con, mut total, mut n_expanded) = (0.0, 0.0, 0.0, 0.0, 0usize);
    for out in outputs {
        let out = out?;
        acc.add_scaled(&out.grads, inv);
        seg += out.seg * inv;
        exp += out.exp * inv;
        con += out.con * inv;
        total += out.total * inv;
        n_expanded += out.n_expanded;
    }
    sgd_step(params, &acc, lr, cfg.weight_decay)?;
    Ok(TrainLogRecord {
        iter,
        lr,
        loss_seg: seg,
        loss_exp: exp,
        loss_con: con,
        loss_total: total,
        n_expanded,
    })
}

/// Dense pseudo labels from the averaged head probabilities, tiled over the
/// whole image. Labels are in [1, k]; ties break toward the lowest class.
pub fn pseudo_labels(params: &ModelParams, image: &Raster, cfg: &TrainConfig) -> Result<LabelMatrix> {
    let patch = cfg.patch.min(image.height).min(image.width);
    let prob = model::predict(params, image, patch, cfg.stride)?;
    Ok(prob.argmax_labels())
}

fn sample_patch(
    rng: &mut ChaCha8Rng,
    dataset: &[Scene],
    patch: usize,
) -> Result<(usize, PatchSpec)> {
    for _ in 0..1000 {
        let idx = rng.gen_range(0..dataset.len());
        let scene = &dataset[idx];
        if patch > scene.image.height || patch > scene.image.width {
            return Err(Error::Geometry(format!(
                "patch {patch} exceeds image {}x{}",
                scene.image.height, scene.image.width
            )));
        }
        let r = rng.gen_range(0..=scene.image.height - patch);
        let c = rng.gen_range(0..=scene.image.width - patch);
        let spec = PatchSpec::new(r, c, patch);
        if scene.points.crop(spec)?.labeled_count() > 0 {
            return Ok((idx, spec));
        }
    }
    Err(Error::Data("no patch with labeled points found in 1000 draws".into()))
}

fn draw_batch(
    rng: &mut ChaCha8Rng,
    dataset: &[Scene],
    cfg: &TrainConfig,
    pseudo: Option<&[LabelMatrix]>,
) -> Result<Vec<BatchElement>> {
    let mut batch = Vec::with_capacity(cfg.batch);
    for _ in 0..cfg.batch {
        let (idx, spec) = sample_patch(rng, dataset, cfg.patch)?;
        let scene = &dataset[idx];
        batch.push(BatchElement {
            patch: grid::crop(&scene.image, spec)?,
            y: scene.points.crop(spec)?,
            e_override: match pseudo {
                Some(ep) => Some(ep[idx].crop(spec)?),
                None => None,
            },
        });
    }
    Ok(batch)
}

/// Finetunes on dense pseudo labels computed once before the phase starts.
/// Region growing is disabled (the pseudo labels are already dense) and the
/// poly schedule restarts over `finetune_iter`.
pub fn finetune(
    params: &mut ModelParams,
    dataset: &[Scene],
    cfg: &TrainConfig,
    log: &mut Vec<TrainLogRecord>,
) -> Result<()> {
    if cfg.finetune_iter == 0 {
        return Ok(());
    }
    let pseudo: Vec<LabelMatrix> = dataset
        .iter()
        .map(|s| pseudo_labels(params, &s.image, cfg))
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(FINETUNE_SAMPLER_SALT));
    for j in 0..cfg.finetune_iter {
        let lr = poly(cfg.base_lr, j, cfg.finetune_iter, cfg.power);
        let batch = draw_batch(&mut rng, dataset, cfg, Some(&pseudo))?;
        let record = train_iteration(params, &batch, cfg, cfg.max_iter + j, lr)?;
        log.push(record);
    }
    Ok(())
}

const SAMPLER_SALT: u64 = 0x9E37_79B9_7F4A_7C15;
const FINETUNE_SAMPLER_SALT: u64 = 0xD1B5_4A32_D192_ED03;

/// Full training: initialization, `max_iter` pre-training iterations with the
/// configured ablation flags, then the self-training finetune phase.
/// Bitwise deterministic for a fixed `cfg.seed`.
pub fn train(cfg: &TrainConfig, dataset: &[Scene]) -> Result<(ModelParams, Vec<TrainLogRecord>)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Data("training dataset is empty".into()));
    }
    let in_channels = dataset[0].image.channels;
    for s in dataset {
        if s.image.channels != in_channels {
            return Err(Error::Data("scenes disagree on channel count".into()));
        }
        s.points.validate_classes(cfg.k).map_err(|e| Error::Data(e.to_string()))?;
    }
    let mut params = model::init_params(cfg.seed, cfg.k, cfg.width, cfg.depth, in_channels)?;
    let mut log = Vec::with_capacity(cfg.max_iter + cfg.finetune_iter);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(SAMPLER_SALT));
    for iter in 0..cfg.max_iter {
        let lr = poly_lr(iter, cfg)?;
        let batch = draw_batch(&mut rng, dataset, cfg, None)?;
        let record = train_iteration(&mut params, &batch, cfg, iter, lr)?;
        log.push(record);
    }
    if !cfg.enable_cr {
        // the expanded head was never trained; mirror the base head so the
        // averaged prediction equals the base classifier's output
        params.head_e = params.head_b.clone();
    }
    if cfg.enable_st {
        finetune(&mut params, dataset, cfg, &mut log)?;
        if !cfg.enable_cr {
            params.head_e = params.head_b.clone();
        }
    }
    Ok((params, log))
}
