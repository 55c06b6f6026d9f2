//! Two-head segmentation network: a shared stack of stride-1 3x3 conv + ReLU
//! layers feeding two independent 1x1-conv classifier heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};
use crate::grid::{self, Raster};

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    /// [3, 3, cin, cout]
    pub weight: Tensor,
    /// [cout]
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    /// [cin, k]
    pub weight: Tensor,
    /// [k]
    pub bias: Tensor,
}

/// All trainable weights: shared backbone plus the base and expanded heads.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub backbone: Vec<ConvLayer>,
    pub head_b: Head,
    pub head_e: Head,
    pub in_channels: usize,
    pub k: usize,
}

/// Tape node ids for one registration of the parameters.
pub struct ParamNodes {
    pub backbone: Vec<(NodeId, NodeId)>,
    pub head_b: (NodeId, NodeId),
    pub head_e: (NodeId, NodeId),
}

fn gaussian_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).unwrap();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Initializes weights from zero-mean Gaussians scaled by 1/sqrt(fan_in);
/// biases start at zero. Deterministic for a given seed.
pub fn init_params(
    seed: u64,
    k: usize,
    width: usize,
    depth: usize,
    in_channels: usize,
) -> Result<ModelParams> {
    if k < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {k}")));
    }
    if depth < 1 || width < 1 || in_channels < 1 {
        return Err(Error::Config("depth, width and in_channels must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut backbone = Vec::with_capacity(depth);
    let mut cin = in_channels;
    for _ in 0..depth {
        let std = 1.0 / ((9 * cin) as f64).sqrt();
        backbone.push(ConvLayer {
            weight: gaussian_tensor(&mut rng, vec![3, 3, cin, width], std),
            bias: Tensor::zeros(vec![width]),
        });
        cin = width;
    }
    let head_std = 1.0 / (width as f64).sqrt();
    let head_b = Head {
        weight: gaussian_tensor(&mut rng, vec![width, k], head_std),
        bias: Tensor::zeros(vec![k]),
    };
    let head_e = Head {
        weight: gaussian_tensor(&mut rng, vec![width, k], head_std),
        bias: Tensor::zeros(vec![k]),
    };
    Ok(ModelParams { backbone, head_b, head_e, in_channels, k })
}

impl ModelParams {
    /// Registers every parameter tensor on the tape.
    pub fn register(&self, tape: &mut Tape) -> ParamNodes {
        let backbone = self
            .backbone
            .iter()
            .map(|l| (tape.param(l.weight.clone()), tape.param(l.bias.clone())))
            .collect();
        let head_b = (tape.param(self.head_b.weight.clone()), tape.param(self.head_b.bias.clone()));
        let head_e = (tape.param(self.head_e.weight.clone()), tape.param(self.head_e.bias.clone()));
        ParamNodes { backbone, head_b, head_e }
    }

    pub fn all_finite(&self) -> bool {
        self.backbone.iter().all(|l| l.weight.is_finite() && l.bias.is_finite())
            && self.head_b.weight.is_finite()
            && self.head_b.bias.is_finite()
            && self.head_e.weight.is_finite()
            && self.head_e.bias.is_finite()
    }

    /// Named tensors in a fixed order, for checkpointing.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.backbone.iter().enumerate() {
            out.push((format!("backbone.{i}.weight"), &l.weight));
            out.push((format!("backbone.{i}.bias"), &l.bias));
        }
        out.push(("head_b.weight".into(), &self.head_b.weight));
        out.push(("head_b.bias".into(), &self.head_b.bias));
        out.push(("head_e.weight".into(), &self.head_e.weight));
        out.push(("head_e.bias".into(), &self.head_e.bias));
        out
    }

    /// Rebuilds params from named tensors (inverse of [`named_tensors`]).
    pub fn from_named_tensors(tensors: &[(String, Tensor)]) -> Result<ModelParams> {
        let find = |name: &str| -> Result<Tensor> {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::Format(format!("checkpoint missing tensor {name}")))
        };
        let mut backbone = Vec::new();
        let mut i = 0;
        while tensors.iter().any(|(n, _)| n == &format!("backbone.{i}.weight")) {
            backbone.push(ConvLayer {
                weight: find(&format!("backbone.{i}.weight"))?,
                bias: find(&format!("backbone.{i}.bias"))?,
            });
            i += 1;
        }
        if backbone.is_empty() {
            return Err(Error::Format("checkpoint has no backbone layers".into()));
        }
        let head_b = Head { weight: find("head_b.weight")?, bias: find("head_b.bias")? };
        let head_e = Head { weight: find("head_e.weight")?, bias: find("head_e.bias")? };
        if head_b.weight.shape != head_e.weight.shape {
            return Err(Error::Format("head shapes differ".into()));
        }
        let in_channels = backbone[0].weight.shape[2];
        let k = head_b.weight.shape[1];
        Ok(ModelParams { backbone, head_b, head_e, in_channels, k })
    }
}

/// Converts an image patch into an [H, W, C] tensor.
pub fn raster_to_tensor(r: &Raster) -> Tensor {
    Tensor { shape: vec![r.height, r.width, r.channels], data: r.data.clone() }
}

/// Runs the shared backbone and both heads on an input node.
/// Returns `(logits_b, logits_e)`, both [H, W, k].
pub fn forward(tape: &mut Tape, input: NodeId, nodes: &ParamNodes) -> Result<(NodeId, NodeId)> {
    let mut h = input;
    for (w, b) in &nodes.backbone {
        let c = tape.conv2d(h, *w, *b)?;
        h = tape.relu(c);
    }
    let logits_b = tape.conv1x1(h, nodes.head_b.0, nodes.head_b.1)?;
    let logits_e = tape.conv1x1(h, nodes.head_e.0, nodes.head_e.1)?;
    Ok((logits_b, logits_e))
}

fn tensor_to_raster(t: &Tensor) -> Raster {
    Raster {
        height: t.shape[0],
        width: t.shape[1],
        channels: t.shape[2],
        data: t.data.clone(),
    }
}

/// Averaged probability map of both heads for one patch.
pub fn forward_probabilities(params: &ModelParams, patch: &Raster) -> Result<Raster> {
    if patch.channels != params.in_channels {
        return Err(Error::Shape(format!(
            "patch has {} channels, model expects {}",
            patch.channels, params.in_channels
        )));
    }
    let mut tape = Tape::new();
    let nodes = params.register(&mut tape);
    let x = tape.leaf(raster_to_tensor(patch));
    let (lb, le) = forward(&mut tape, x, &nodes)?;
    let pb = tape.softmax(lb)?;
    let pe = tape.softmax(le)?;
    let sum = tape.add(pb, pe)?;
    let avg = tape.scale(sum, 0.5);
    Ok(tensor_to_raster(tape.value(avg)))
}

/// Tiled whole-image prediction: per tile the two heads' softmax outputs are
/// averaged, then overlapping tiles are stitched into one probability raster.
pub fn predict(
    params: &ModelParams,
    image: &Raster,
    patch: usize,
    stride: usize,
) -> Result<Raster> {
    let specs = grid::tile_positions(image.height, image.width, patch, stride)?;
    let mut tiles = Vec::with_capacity(specs.len());
    for spec in specs {
        let window = grid::crop(image, spec)?;
        let prob = forward_probabilities(params, &window)?;
        tiles.push((spec, prob));
    }
    grid::stitch(&tiles, image.height, image.width, params.k)
}
