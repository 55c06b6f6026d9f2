//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records primitive applications in topological order; a single
//! backward sweep visits nodes in reverse and accumulates adjoints. Only the
//! primitives the model and losses need are provided, all in f64.

use crate::error::{Error, Result};

/// Probabilities are clamped to at least this before taking logs.
pub const LOG_CLAMP: f64 = 1e-12;

/// Dense tensor: flat f64 values with an explicit shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::Shape(format!(
                "tensor data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// The single value of a scalar tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    MatMul(NodeId, NodeId),
    /// 3x3 convolution, stride 1, zero padding 1, with bias.
    Conv2d { x: NodeId, w: NodeId, b: NodeId },
    /// Per-pixel linear map (1x1 convolution) with bias.
    Conv1x1 { x: NodeId, w: NodeId, b: NodeId },
    Relu(NodeId),
    /// Softmax over the last dimension.
    Softmax(NodeId),
    /// Natural log, input clamped below at LOG_CLAMP.
    Ln(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Square(NodeId),
    Gather(NodeId, Vec<usize>),
    /// Descending sort of a vector; perm[j] is the source index of output j.
    SortDesc(NodeId, Vec<usize>),
}

struct Node {
    value: Tensor,
    op: Op,
    is_param: bool,
}

/// Reverse-mode tape. Nodes are appended in topological order by construction.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by node id.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to the given node, if it received one.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: Tensor, op: Op, is_param: bool) -> NodeId {
        self.nodes.push(Node { value, op, is_param });
        NodeId(self.nodes.len() - 1)
    }

    /// Records a constant input (no gradient reported).
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Records a trainable parameter tensor.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn same_shape(&self, a: NodeId, b: NodeId) -> Result<()> {
        if self.value(a).shape != self.value(b).shape {
            return Err(Error::Shape(format!(
                "operand shapes {:?} and {:?} differ",
                self.value(a).shape,
                self.value(b).shape
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b)?;
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape.clone();
        Ok(self.push(Tensor { shape, data }, Op::Add(a, b), false))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b)?;
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape.clone();
        Ok(self.push(Tensor { shape, data }, Op::Mul(a, b), false))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let data = self.value(a).data.iter().map(|x| x * s).collect();
        let shape = self.value(a).shape.clone();
        self.push(Tensor { shape, data }, Op::Scale(a, s), false)
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> NodeId {
        let data = self.value(a).data.iter().map(|x| x + s).collect();
        let shape = self.value(a).shape.clone();
        self.push(Tensor { shape, data }, Op::AddScalar(a), false)
    }

    /// a - b.
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape.clone(), self.value(b).shape.clone());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape(format!("matmul shapes {sa:?} x {sb:?}")));
        }
        let (m, n, p) = (sa[0], sa[1], sb[1]);
        let mut data = vec![0.0; m * p];
        {
            let da = &self.value(a).data;
            let db = &self.value(b).data;
            for i in 0..m {
                for l in 0..n {
                    let ail = da[i * n + l];
                    for j in 0..p {
                        data[i * p + j] += ail * db[l * p + j];
                    }
                }
            }
        }
        Ok(self.push(Tensor { shape: vec![m, p], data }, Op::MatMul(a, b), false))
    }

    /// 3x3 stride-1 zero-padded convolution over an [H, W, Cin] tensor with
    /// weights [3, 3, Cin, Cout] and bias [Cout].
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let sx = self.value(x).shape.clone();
        let sw = self.value(w).shape.clone();
        let sb = self.value(b).shape.clone();
        if sx.len() != 3 || sw.len() != 4 || sw[0] != 3 || sw[1] != 3 || sw[2] != sx[2] {
            return Err(Error::Shape(format!("conv2d shapes x={sx:?} w={sw:?}")));
        }
        if sb != vec![sw[3]] {
            return Err(Error::Shape(format!("conv2d bias shape {sb:?}")));
        }
        let (h, wd, cin, cout) = (sx[0], sx[1], sx[2], sw[3]);
        let mut out = vec![0.0; h * wd * cout];
        {
            let dx = &self.value(x).data;
            let dw = &self.value(w).data;
            let db = &self.value(b).data;
            for r in 0..h {
                for c in 0..wd {
                    let obase = (r * wd + c) * cout;
                    out[obase..obase + cout].copy_from_slice(db);
                    for kr in 0..3usize {
                        let rr = r as isize + kr as isize - 1;
                        if rr < 0 || rr >= h as isize {
                            continue;
                        }
                        for kc in 0..3usize {
                            let cc = c as isize + kc as isize - 1;
                            if cc < 0 || cc >= wd as isize {
                                continue;
                            }
                            let xbase = (rr as usize * wd + cc as usize) * cin;
                            let wbase = (kr * 3 + kc) * cin * cout;
                            for i in 0..cin {
                                let xv = dx[xbase + i];
                                let wrow = wbase + i * cout;
                                for o in 0..cout {
                                    out[obase + o] += xv * dw[wrow + o];
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(self.push(
            Tensor { shape: vec![h, wd, cout], data: out },
            Op::Conv2d { x, w, b },
            false,
        ))
    }

    /// Per-pixel linear map: [H, W, Cin] x [Cin, Cout] + [Cout].
    pub fn conv1x1(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let sx = self.value(x).shape.clone();
        let sw = self.value(w).shape.clone();
        let sb = self.value(b).shape.clone();
        if sx.len() != 3 || sw.len() != 2 || sw[0] != sx[2] || sb != vec![sw[1]] {
            return Err(Error::Shape(format!("conv1x1 shapes x={sx:?} w={sw:?} b={sb:?}")));
        }
        let (h, wd, cin, cout) = (sx[0], sx[1], sx[2], sw[1]);
        let mut out = vec![0.0; h * wd * cout];
        {
            let dx = &self.value(x).data;
            let dw = &self.value(w).data;
            let db = &self.value(b).data;
            for p in 0..h * wd {
                let obase = p * cout;
                out[obase..obase + cout].copy_from_slice(db);
                for i in 0..cin {
                    let xv = dx[p * cin + i];
                    for o in 0..cout {
                        out[obase + o] += xv * dw[i * cout + o];
                    }
                }
            }
        }
        Ok(self.push(
            Tensor { shape: vec![h, wd, cout], data: out },
            Op::Conv1x1 { x, w, b },
            false,
        ))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let data = self.value(a).data.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let shape = self.value(a).shape.clone();
        self.push(Tensor { shape, data }, Op::Relu(a), false)
    }

    /// Softmax over the last dimension of the input.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.value(a).shape.clone();
        let ch = *shape.last().ok_or_else(|| Error::Shape("softmax on 0-d tensor".into()))?;
        if ch == 0 {
            return Err(Error::Shape("softmax over empty last dimension".into()));
        }
        let src = &self.value(a).data;
        let mut data = vec![0.0; src.len()];
        for p in 0..src.len() / ch {
            let base = p * ch;
            let row = &src[base..base + ch];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                data[base + j] = e;
                sum += e;
            }
            for j in 0..ch {
                data[base + j] /= sum;
            }
        }
        Ok(self.push(Tensor { shape, data }, Op::Softmax(a), false))
    }

    /// ln(max(x, LOG_CLAMP)).
    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let data = self.value(a).data.iter().map(|&x| x.max(LOG_CLAMP).ln()).collect();
        let shape = self.value(a).shape.clone();
        self.push(Tensor { shape, data }, Op::Ln(a), false)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), false)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).numel() as f64;
        let s: f64 = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s / n), Op::Mean(a), false)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let data = self.value(a).data.iter().map(|x| x * x).collect();
        let shape = self.value(a).shape.clone();
        self.push(Tensor { shape, data }, Op::Square(a), false)
    }

    /// Gathers flat indices into a vector.
    pub fn gather(&mut self, a: NodeId, indices: Vec<usize>) -> Result<NodeId> {
        let src = &self.value(a).data;
        let mut data = Vec::with_capacity(indices.len());
        for &i in &indices {
            if i >= src.len() {
                return Err(Error::Shape(format!("gather index {i} out of bounds {}", src.len())));
            }
            data.push(src[i]);
        }
        let n = data.len();
        Ok(self.push(Tensor { shape: vec![n], data }, Op::Gather(a, indices), false))
    }

    /// Sorts a vector in descending order. Returns the sorted node and the
    /// permutation (source index per output position). Ties keep source order,
    /// so the permutation is deterministic. The comparison is treated as
    /// locally constant: gradients are scattered back through the permutation.
    pub fn sort_desc(&mut self, a: NodeId) -> Result<(NodeId, Vec<usize>)> {
        let v = self.value(a);
        if v.shape.len() != 1 {
            return Err(Error::Shape(format!("sort_desc expects a vector, got {:?}", v.shape)));
        }
        let mut perm: Vec<usize> = (0..v.data.len()).collect();
        let data_ref = v.data.clone();
        perm.sort_by(|&i, &j| data_ref[j].partial_cmp(&data_ref[i]).unwrap().then(i.cmp(&j)));
        let data: Vec<f64> = perm.iter().map(|&i| data_ref[i]).collect();
        let n = data.len();
        let id = self.push(Tensor { shape: vec![n], data }, Op::SortDesc(a, perm.clone()), false);
        Ok((id, perm))
    }

    /// Reverse sweep from a scalar loss node. Returns gradients for every
    /// parameter node (non-parameter leaves are skipped).
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Domain(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    if node.is_param {
                        grads[idx] = Some(g);
                    }
                    continue;
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *a, &g.data);
                    self.accumulate(&mut grads, *b, &g.data);
                }
                Op::Mul(a, b) => {
                    let da: Vec<f64> = g
                        .data
                        .iter()
                        .zip(&self.value(*b).data)
                        .map(|(gi, bi)| gi * bi)
                        .collect();
                    let db: Vec<f64> = g
                        .data
                        .iter()
                        .zip(&self.value(*a).data)
                        .map(|(gi, ai)| gi * ai)
                        .collect();
                    self.accumulate(&mut grads, *a, &da);
                    self.accumulate(&mut grads, *b, &db);
                }
                Op::Scale(a, s) => {
                    let da: Vec<f64> = g.data.iter().map(|gi| gi * s).collect();
                    self.accumulate(&mut grads, *a, &da);
                }
                Op::AddScalar(a) => {
                    self.accumulate(&mut grads, *a, &g.data);
                }
                Op::MatMul(a, b) => {
                    let sa = &self.value(*a).shape;
                    let sb = &self.value(*b).shape;
                    let (m, n, p) = (sa[0], sa[1], sb[1]);
                    let da_src = &self.value(*a).data;
                    let db_src = &self.value(*b).data;
                    let mut da = vec![0.0; m * n];
                    let mut db = vec![0.0; n * p];
                    for i in 0..m {
                        for j in 0..p {
                            let gij = g.data[i * p + j];
                            for l in 0..n {
                                da[i * n + l] += gij * db_src[l * p + j];
                                db[l * p + j] += gij * da_src[i * n + l];
                            }
                        }
                    }
                    self.accumulate(&mut grads, *a, &da);
                    self.accumulate(&mut grads, *b, &db);
                }
                Op::Conv2d { x, w, b } => {
                    let sx = &self.value(*x).shape;
                    let sw = &self.value(*w).shape;
                    let (h, wd, cin, cout) = (sx[0], sx[1], sx[2], sw[3]);
                    let dx_src = &self.value(*x).data;
                    let dw_src = &self.value(*w).data;
                    let mut gx = vec![0.0; h * wd * cin];
                    let mut gw = vec![0.0; 9 * cin * cout];
                    let mut gb = vec![0.0; cout];
                    for r in 0..h {
                        for c in 0..wd {
                            let obase = (r * wd + c) * cout;
                            for o in 0..cout {
                                gb[o] += g.data[obase + o];
                            }
                            for kr in 0..3usize {
                                let rr = r as isize + kr as isize - 1;
                                if rr < 0 || rr >= h as isize {
                                    continue;
                                }
                                for kc in 0..3usize {
                                    let cc = c as isize + kc as isize - 1;
                                    if cc < 0 || cc >= wd as isize {
                                        continue;
                                    }
                                    let xbase = (rr as usize * wd + cc as usize) * cin;
                                    let wbase = (kr * 3 + kc) * cin * cout;
                                    for i in 0..cin {
                                        let xv = dx_src[xbase + i];
                                        let wrow = wbase + i * cout;
                                        let mut acc = 0.0;
                                        for o in 0..cout {
                                            let go = g.data[obase + o];
                                            gw[wrow + o] += xv * go;
                                            acc += dw_src[wrow + o] * go;
                                        }
                                        gx[xbase + i] += acc;
                                    }
                                }
                            }
                        }
                    }
                    self.accumulate(&mut grads, *x, &gx);
                    self.accumulate(&mut grads, *w, &gw);
                    self.accumulate(&mut grads, *b, &gb);
                }
                Op::Conv1x1 { x, w, b } => {
                    let sx = &self.value(*x).shape;
                    let sw = &self.value(*w).shape;
                    let (h, wd, cin, cout) = (sx[0], sx[1], sx[2], sw[1]);
                    let dx_src = &self.value(*x).data;
                    let dw_src = &self.value(*w).data;
                    let mut gx = vec![0.0; h * wd * cin];
                    let mut gw = vec![0.0; cin * cout];
                    let mut gb = vec![0.0; cout];
                    for p in 0..h * wd {
                        let obase = p * cout;
                        for o in 0..cout {
                            gb[o] += g.data[obase + o];
                        }
                        for i in 0..cin {
                            let xv = dx_src[p * cin + i];
                            let mut acc = 0.0;
                            for o in 0..cout {
                                let go = g.data[obase + o];
                                gw[i * cout + o] += xv * go;
                                acc += dw_src[i * cout + o] * go;
                            }
                            gx[p * cin + i] += acc;
                        }
                    }
                    self.accumulate(&mut grads, *x, &gx);
                    self.accumulate(&mut grads, *w, &gw);
                    self.accumulate(&mut grads, *b, &gb);
                }
                Op::Relu(a) => {
                    let da: Vec<f64> = g
                        .data
                        .iter()
                        .zip(&self.value(*a).data)
                        .map(|(gi, &xi)| if xi > 0.0 { *gi } else { 0.0 })
                        .collect();
                    self.accumulate(&mut grads, *a, &da);
                }
                Op::Softmax(a) => {
                    let out = &self.nodes[idx].value;
                    let ch = *out.shape.last().unwrap();
                    let mut da = vec![0.0; out.numel()];
                    for p in 0..out.numel() / ch {
                        let base = p * ch;
                        let mut dot = 0.0;
                        for j in 0..ch {
                            dot += g.data[base + j] * out.data[base + j];
                        }
                        for j in 0..ch {
                            da[base + j] = out.data[base + j] * (g.data[base + j] - dot);
                        }
                    }
                    self.accumulate(&mut grads, *a, &da);
                }
                Op::Ln(a) => {
                    let da: Vec<f64> = g
                        .data
                        .iter()
                        .zip(&self.value(*a).data)
                        .map(|(gi, &xi)| if xi >= LOG_CLAMP { gi / xi } else { 0.0 })
                        .collect();
                    self.accumulate(&mut grads, *a, &da);
                }
                Op::Sum(a) => {
                    let da = vec![g.data[0]; self.value(*a).numel()];
                    self.accumulate(&mut grads, *a, &da);
                }
                Op::Mean(a) => {
                    let n = self.value(*a).numel();
                    let da = vec![g.data[0] / n as f64; n];
                    self.accumulate(&mut grads, *a, &da);
                }
                Op::Square(a) => {
                    let da: Vec<f64> = g
                        .data
                        .iter()
                        .zip(&self.value(*a).data)
                        .map(|(gi, xi)| 2.0 * gi * xi)
                        .collect();
                    self.accumulate(&mut grads, *a, &da);
                }
                Op::Gather(a, indices) => {
                    let mut da = vec![0.0; self.value(*a).numel()];
                    for (j, &i) in indices.iter().enumerate() {
                        da[i] += g.data[j];
                    }
                    self.accumulate(&mut grads, *a, &da);
                }
                Op::SortDesc(a, perm) => {
                    let mut da = vec![0.0; self.value(*a).numel()];
                    for (j, &i) in perm.iter().enumerate() {
                        da[i] += g.data[j];
                    }
                    self.accumulate(&mut grads, *a, &da);
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, delta: &[f64]) {
        match &mut grads[id.0] {
            Some(t) => {
                for (a, b) in t.data.iter_mut().zip(delta) {
                    *a += b;
                }
            }
            None => {
                let shape = self.value(id).shape.clone();
                grads[id.0] = Some(Tensor { shape, data: delta.to_vec() });
            }
        }
    }
}

/// Central finite differences of a tensor-to-scalar function.
pub fn finite_diff_grad<F>(f: F, x: &Tensor, eps: f64) -> Tensor
where
    F: Fn(&Tensor) -> f64,
{
    let mut grad = Tensor::zeros(x.shape.clone());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data[i];
        probe.data[i] = orig + eps;
        let up = f(&probe);
        probe.data[i] = orig - eps;
        let down = f(&probe);
        probe.data[i] = orig;
        grad.data[i] = (up - down) / (2.0 * eps);
    }
    grad
}

/// Max relative error between two gradient tensors, with an absolute floor so
/// near-zero entries do not explode the ratio.
pub fn max_rel_error(a: &Tensor, b: &Tensor) -> f64 {
    a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softmax_symmetry() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        let s = t.softmax(x).unwrap();
        assert_eq!(t.value(s).data, vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_hand_value() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![1, 2], vec![1.0f64.ln(), 3.0f64.ln()]).unwrap());
        let s = t.softmax(x).unwrap();
        assert!((t.value(s).data[0] - 0.25).abs() < 1e-12);
        assert!((t.value(s).data[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariant() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![1, 3], vec![0.3, -1.2, 2.0]).unwrap());
        let y = t.leaf(Tensor::new(vec![1, 3], vec![0.3 + 7.5, -1.2 + 7.5, 2.0 + 7.5]).unwrap());
        let sx = t.softmax(x).unwrap();
        let sy = t.softmax(y).unwrap();
        for (a, b) in t.value(sx).data.iter().zip(&t.value(sy).data) {
            assert!((a - b).abs() < 1e-6);
        }
        let sum: f64 = t.value(sx).data.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }

    #[test]
    fn relu_values() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap());
        let y = t.relu(x);
        assert_eq!(t.value(y).data, vec![0.0, 2.0]);
    }

    #[test]
    fn backward_sum_is_ones() {
        let mut t = Tape::new();
        let x = t.param(Tensor::new(vec![2, 3], (0..6).map(|i| i as f64).collect()).unwrap());
        let s = t.sum(x);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data, vec![1.0; 6]);
    }

    #[test]
    fn backward_mean_square() {
        let mut t = Tape::new();
        let x = t.param(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let sq = t.square(x);
        let m = t.mean(sq);
        let g = t.backward(m).unwrap();
        let expect = [2.0 / 3.0, 4.0 / 3.0, 2.0];
        for (a, b) in g.get(x).unwrap().data.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_unused_param_has_no_grad() {
        let mut t = Tape::new();
        let x = t.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let p = t.param(Tensor::new(vec![2], vec![5.0, 6.0]).unwrap());
        let s = t.sum(x);
        let g = t.backward(s).unwrap();
        assert!(g.get(p).is_none());
        assert!(g.get(x).is_some());
    }

    #[test]
    fn backward_rejects_nonscalar_loss() {
        let mut t = Tape::new();
        let x = t.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        assert!(matches!(t.backward(x), Err(Error::Domain(_))));
    }

    #[test]
    fn finite_diff_sum_is_ones() {
        let x = Tensor::new(vec![4], vec![0.3, -1.0, 2.0, 0.0]).unwrap();
        let g = finite_diff_grad(|t| t.data.iter().sum(), &x, 1e-4);
        for v in &g.data {
            assert!((v - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn finite_diff_mean_square() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let g = finite_diff_grad(
            |t| t.data.iter().map(|v| v * v).sum::<f64>() / t.numel() as f64,
            &x,
            1e-4,
        );
        assert!((g.data[0] - 1.0).abs() < 1e-6);
        assert!((g.data[1] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn finite_diff_constant_is_zero() {
        let x = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let g = finite_diff_grad(|_| 42.0, &x, 1e-4);
        assert_eq!(g.data, vec![0.0; 3]);
    }

    #[test]
    fn sort_desc_records_permutation() {
        let mut t = Tape::new();
        let x = t.param(Tensor::new(vec![4], vec![0.2, 0.9, 0.1, 0.9]).unwrap());
        let (s, perm) = t.sort_desc(x).unwrap();
        assert_eq!(t.value(s).data, vec![0.9, 0.9, 0.2, 0.1]);
        assert_eq!(perm, vec![1, 3, 0, 2]);
        // weighted sum through the sort scatters correctly
        let w = t.leaf(Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let prod = t.mul(s, w).unwrap();
        let loss = t.sum(prod);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data, vec![3.0, 1.0, 4.0, 2.0]);
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        Tensor::new(shape, data).unwrap()
    }

    /// Gradient-checks every primitive through a composite scalar readout.
    #[test]
    fn primitive_gradient_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..20 {
            let x0 = rand_tensor(&mut rng, vec![3, 4, 2]);
            let build = |xv: &Tensor| -> (Tape, NodeId, NodeId) {
                let mut t = Tape::new();
                let x = t.param(xv.clone());
                let sm = t.softmax(x).unwrap();
                let lg = t.ln(sm);
                let sq = t.square(lg);
                let sc = t.scale(sq, 0.3);
                let sh = t.add_scalar(sc, 0.1);
                let pr = t.mul(sh, sm).unwrap();
                let r = t.relu(pr);
                let m = t.mean(r);
                (t, x, m)
            };
            let (t, x, loss) = build(&x0);
            let g = t.backward(loss).unwrap();
            let fd = finite_diff_grad(
                |xv| {
                    let (t, _, l) = build(xv);
                    t.value(l).item()
                },
                &x0,
                1e-5,
            );
            let err = max_rel_error(g.get(x).unwrap(), &fd);
            assert!(err < 1e-4, "trial {trial}: composite grad error {err}");
        }
    }

    #[test]
    fn conv_and_matmul_gradient_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        // conv2d wrt both input and weights
        let x0 = rand_tensor(&mut rng, vec![4, 5, 2]);
        let w0 = rand_tensor(&mut rng, vec![3, 3, 2, 3]);
        let b0 = rand_tensor(&mut rng, vec![3]);
        let run = |xv: &Tensor, wv: &Tensor, bv: &Tensor| -> (Tape, NodeId, NodeId, NodeId, NodeId) {
            let mut t = Tape::new();
            let x = t.param(xv.clone());
            let w = t.param(wv.clone());
            let b = t.param(bv.clone());
            let c = t.conv2d(x, w, b).unwrap();
            let r = t.relu(c);
            let m = t.mean(r);
            (t, x, w, b, m)
        };
        let (t, x, w, b, loss) = run(&x0, &w0, &b0);
        let g = t.backward(loss).unwrap();
        let eval = |xv: &Tensor, wv: &Tensor, bv: &Tensor| {
            let (t, _, _, _, l) = run(xv, wv, bv);
            t.value(l).item()
        };
        let fd_x = finite_diff_grad(|v| eval(v, &w0, &b0), &x0, 1e-5);
        let fd_w = finite_diff_grad(|v| eval(&x0, v, &b0), &w0, 1e-5);
        let fd_b = finite_diff_grad(|v| eval(&x0, &w0, v), &b0, 1e-5);
        assert!(max_rel_error(g.get(x).unwrap(), &fd_x) < 1e-4);
        assert!(max_rel_error(g.get(w).unwrap(), &fd_w) < 1e-4);
        assert!(max_rel_error(g.get(b).unwrap(), &fd_b) < 1e-4);

        // matmul
        let a0 = rand_tensor(&mut rng, vec![3, 4]);
        let m0 = rand_tensor(&mut rng, vec![4, 2]);
        let run2 = |av: &Tensor, mv: &Tensor| -> (Tape, NodeId, NodeId, NodeId) {
            let mut t = Tape::new();
            let a = t.param(av.clone());
            let m = t.param(mv.clone());
            let p = t.matmul(a, m).unwrap();
            let s = t.square(p);
            let l = t.sum(s);
            (t, a, m, l)
        };
        let (t, a, m, loss) = run2(&a0, &m0);
        let g = t.backward(loss).unwrap();
        let fd_a = finite_diff_grad(|v| { let (t, _, _, l) = run2(v, &m0); t.value(l).item() }, &a0, 1e-5);
        let fd_m = finite_diff_grad(|v| { let (t, _, _, l) = run2(&a0, v); t.value(l).item() }, &m0, 1e-5);
        assert!(max_rel_error(g.get(a).unwrap(), &fd_a) < 1e-4);
        assert!(max_rel_error(g.get(m).unwrap(), &fd_m) < 1e-4);
    }

    #[test]
    fn backward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = rand_tensor(&mut rng, vec![4, 4, 3]);
        let run = || {
            let mut t = Tape::new();
            let x = t.param(x0.clone());
            let s = t.softmax(x).unwrap();
            let l = t.ln(s);
            let m = t.mean(l);
            let g = t.backward(m).unwrap();
            g.get(x).unwrap().data.clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shape_mismatch_is_loud() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let b = t.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        assert!(matches!(t.add(a, b), Err(Error::Shape(_))));
        assert!(matches!(t.mul(a, b), Err(Error::Shape(_))));
        assert!(matches!(t.matmul(a, b), Err(Error::Shape(_))));
    }
}
