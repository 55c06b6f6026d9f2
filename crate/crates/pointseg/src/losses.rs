//! The three training losses: point-supervised cross entropy for the base
//! head, the Lovász-Softmax expansion loss for the expanded head, and the
//! consistency penalty between the two probability maps, plus their weighted
//! combination.

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};
use crate::grid::{LabelMatrix, Raster};

/// Weighting of the consistency term in the full loss.
#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub lambda_con: f64,
}

impl LossWeights {
    pub fn new(lambda_con: f64) -> Result<Self> {
        if lambda_con < 0.0 {
            return Err(Error::Domain(format!("lambda_con must be >= 0, got {lambda_con}")));
        }
        Ok(LossWeights { lambda_con })
    }
}

/// Per-pixel per-class prediction errors over labeled pixels: `1 - p` at the
/// annotated class, `p` elsewhere. Unlabeled pixels carry zeros and are
/// excluded downstream.
#[derive(Debug, Clone)]
pub struct ErrorTensor {
    pub height: usize,
    pub width: usize,
    pub k: usize,
    pub data: Vec<f64>,
    pub labeled: Vec<bool>,
}

fn check_geometry(p: &Raster, e: &LabelMatrix) -> Result<()> {
    if p.height != e.height || p.width != e.width {
        return Err(Error::Shape(format!(
            "probability raster {}x{} does not match labels {}x{}",
            p.height, p.width, e.height, e.width
        )));
    }
    Ok(())
}

pub fn error_tensor(p_e: &Raster, e: &LabelMatrix) -> Result<ErrorTensor> {
    check_geometry(p_e, e)?;
    let k = p_e.channels;
    let mut data = vec![0.0; p_e.data.len()];
    let mut labeled = vec![false; e.labels.len()];
    for r in 0..e.height {
        for c in 0..e.width {
            let label = e.get(r, c);
            if label == 0 {
                continue;
            }
            labeled[r * e.width + c] = true;
            for ch in 0..k {
                let p = p_e.get(r, c, ch);
                let i = p_e.idx(r, c, ch);
                data[i] = if ch + 1 == label as usize { 1.0 - p } else { p };
            }
        }
    }
    Ok(ErrorTensor { height: p_e.height, width: p_e.width, k, data, labeled })
}

/// Jaccard index of class `c`: |pred=c ∩ target=c| / |pred=c ∪ target=c|,
/// defined as 1 when both sets are empty.
pub fn jaccard_index(pred: &LabelMatrix, target: &LabelMatrix, c: u8) -> Result<f64> {
    if pred.height != target.height || pred.width != target.width {
        return Err(Error::Shape("jaccard operands differ in geometry".into()));
    }
    let mut intersection = 0usize;
    let mut union = 0usize;
    for (p, t) in pred.labels.iter().zip(&target.labels) {
        let in_p = *p == c;
        let in_t = *t == c;
        if in_p && in_t {
            intersection += 1;
        }
        if in_p || in_t {
            union += 1;
        }
    }
    if union == 0 {
        Ok(1.0)
    } else {
        Ok(intersection as f64 / union as f64)
    }
}

/// Cross entropy of the base head over the annotated pixels only:
/// -(1/n_p) sum log p_b(i, y_i).
pub fn seg_loss(tape: &mut Tape, p_b: NodeId, y: &LabelMatrix) -> Result<NodeId> {
    let shape = tape.value(p_b).shape.clone();
    if shape.len() != 3 || shape[0] != y.height || shape[1] != y.width {
        return Err(Error::Shape(format!(
            "probability node {:?} does not match labels {}x{}",
            shape, y.height, y.width
        )));
    }
    let k = shape[2];
    y.validate_classes(k)?;
    let mut indices = Vec::new();
    for r in 0..y.height {
        for c in 0..y.width {
            let label = y.get(r, c);
            if label > 0 {
                indices.push((r * y.width + c) * k + label as usize - 1);
            }
        }
    }
    if indices.is_empty() {
        return Err(Error::EmptySupervision("seg_loss needs at least one labeled pixel".into()));
    }
    let n = indices.len() as f64;
    let picked = tape.gather(p_b, indices)?;
    let logs = tape.ln(picked);
    let total = tape.sum(logs);
    Ok(tape.scale(total, -1.0 / n))
}

/// Gradient vector of the Lovász extension of the Jaccard loss, given the
/// ground-truth indicator sorted by decreasing prediction error. Entry j is
/// the increase of the Jaccard loss when the j-th sorted error is admitted.
fn lovasz_grad(gt_sorted: &[f64]) -> Vec<f64> {
    let p = gt_sorted.len();
    let gts: f64 = gt_sorted.iter().sum();
    let mut inter = gts;
    let mut union = gts;
    let mut jaccard = Vec::with_capacity(p);
    for &g in gt_sorted {
        inter -= g;
        union += 1.0 - g;
        jaccard.push(1.0 - inter / union);
    }
    for j in (1..p).rev() {
        jaccard[j] -= jaccard[j - 1];
    }
    jaccard
}

/// Per-class Lovász-Softmax terms over the labeled pixels of `e`. Returns one
/// `(class, node)` pair per class present among the labeled pixels.
pub fn lovasz_class_terms(
    tape: &mut Tape,
    p_e: NodeId,
    e: &LabelMatrix,
) -> Result<Vec<(u8, NodeId)>> {
    let shape = tape.value(p_e).shape.clone();
    if shape.len() != 3 || shape[0] != e.height || shape[1] != e.width {
        return Err(Error::Shape(format!(
            "probability node {:?} does not match labels {}x{}",
            shape, e.height, e.width
        )));
    }
    let k = shape[2];
    e.validate_classes(k)?;
    let labeled: Vec<usize> = (0..e.labels.len()).filter(|&i| e.labels[i] != 0).collect();
    if labeled.is_empty() {
        return Err(Error::EmptySupervision("lovasz_softmax needs labeled pixels".into()));
    }
    let mut present: Vec<u8> = labeled.iter().map(|&i| e.labels[i]).collect();
    present.sort_unstable();
    present.dedup();

    let mut terms = Vec::with_capacity(present.len());
    for &class in &present {
        // error vector m_c over labeled pixels: 1 - p at the annotated class,
        // p elsewhere, built as sign*p + offset with constant tensors
        let n = labeled.len();
        let mut sign = Vec::with_capacity(n);
        let mut offset = Vec::with_capacity(n);
        let mut gather_idx = Vec::with_capacity(n);
        let mut gt = Vec::with_capacity(n);
        for &i in &labeled {
            gather_idx.push(i * k + class as usize - 1);
            if e.labels[i] == class {
                sign.push(-1.0);
                offset.push(1.0);
                gt.push(1.0);
            } else {
                sign.push(1.0);
                offset.push(0.0);
                gt.push(0.0);
            }
        }
        let probs = tape.gather(p_e, gather_idx)?;
        let sign_node = tape.leaf(Tensor::new(vec![n], sign)?);
        let offset_node = tape.leaf(Tensor::new(vec![n], offset)?);
        let signed = tape.mul(probs, sign_node)?;
        let errors = tape.add(signed, offset_node)?;
        let (sorted, perm) = tape.sort_desc(errors)?;
        let gt_sorted: Vec<f64> = perm.iter().map(|&i| gt[i]).collect();
        let grad = lovasz_grad(&gt_sorted);
        let grad_node = tape.leaf(Tensor::new(vec![n], grad)?);
        let weighted = tape.mul(sorted, grad_node)?;
        let term = tape.sum(weighted);
        terms.push((class, term));
    }
    Ok(terms)
}

/// Lovász-Softmax expansion loss: mean of the per-class Lovász extension
/// terms over the classes present among labeled pixels. Value in [0, 1].
pub fn lovasz_softmax(tape: &mut Tape, p_e: NodeId, e: &LabelMatrix) -> Result<NodeId> {
    let terms = lovasz_class_terms(tape, p_e, e)?;
    let n = terms.len() as f64;
    let mut acc = terms[0].1;
    for (_, t) in terms.iter().skip(1) {
        acc = tape.add(acc, *t)?;
    }
    Ok(tape.scale(acc, 1.0 / n))
}

/// Mean squared discrepancy between the two probability maps, averaged over
/// pixels (summed over channels).
pub fn consistency_loss(tape: &mut Tape, p_b: NodeId, p_e: NodeId) -> Result<NodeId> {
    let sa = tape.value(p_b).shape.clone();
    let sb = tape.value(p_e).shape.clone();
    if sa != sb || sa.len() != 3 {
        return Err(Error::Shape(format!("consistency operands {sa:?} vs {sb:?}")));
    }
    let n_pixels = (sa[0] * sa[1]) as f64;
    let diff = tape.sub(p_b, p_e)?;
    let sq = tape.square(diff);
    let total = tape.sum(sq);
    Ok(tape.scale(total, 1.0 / n_pixels))
}

/// KL-divergence consistency with temperature scaling: both maps are softened
/// by re-applying softmax to log-probabilities divided by `t`, then
/// KL(soft_b || soft_e) is averaged over pixels.
pub fn kl_consistency_loss(
    tape: &mut Tape,
    p_b: NodeId,
    p_e: NodeId,
    t: f64,
) -> Result<NodeId> {
    if t <= 0.0 {
        return Err(Error::Domain(format!("temperature must be positive, got {t}")));
    }
    let sa = tape.value(p_b).shape.clone();
    let sb = tape.value(p_e).shape.clone();
    if sa != sb || sa.len() != 3 {
        return Err(Error::Shape(format!("consistency operands {sa:?} vs {sb:?}")));
    }
    let n_pixels = (sa[0] * sa[1]) as f64;
    let soften = |tape: &mut Tape, p: NodeId| -> Result<NodeId> {
        let lp = tape.ln(p);
        let scaled = tape.scale(lp, 1.0 / t);
        tape.softmax(scaled)
    };
    let qb = soften(tape, p_b)?;
    let qe = soften(tape, p_e)?;
    let ln_b = tape.ln(qb);
    let ln_e = tape.ln(qe);
    let diff = tape.sub(ln_b, ln_e)?;
    let contrib = tape.mul(qb, diff)?;
    let total = tape.sum(contrib);
    Ok(tape.scale(total, 1.0 / n_pixels))
}

/// seg + exp + lambda_con * con.
pub fn full_loss(
    tape: &mut Tape,
    seg: NodeId,
    exp: Option<NodeId>,
    con: Option<NodeId>,
    w: LossWeights,
) -> Result<NodeId> {
    let mut acc = seg;
    if let Some(exp) = exp {
        acc = tape.add(acc, exp)?;
    }
    if let Some(con) = con {
        let weighted = tape.scale(con, w.lambda_con);
        acc = tape.add(acc, weighted)?;
    }
    Ok(acc)
}
