//! Recording tape and reverse-mode differentiation.
//!
//! Every operation appends one node holding the op kind, the input node ids,
//! and a copy of the forward values. Insertion order is a topological order of
//! the graph, so [`Tape::backward`] is a single reverse sweep that visits each
//! node once. Nodes are never removed; a tape lives for one forward/backward
//! round (one training episode, one planner unroll) and is then dropped.
//!
//! Tensors must be registered on the tape before they can feed an operation:
//! [`Tape::param`] marks a differentiable leaf, [`Tape::constant`] an input
//! that needs no gradient. All ops are plain sequential loops, so the same
//! inputs always produce bitwise-identical outputs and gradients.

use crate::tensor::{NodeId, Tensor, TensorError};

/// Smallest total mass [`Tape::normalize`] accepts before reporting a
/// numerical failure instead of dividing.
const NORMALIZE_MIN_TOTAL: f64 = 1e-300;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Scale(NodeId, f64),
    Conv2d { input: NodeId, kernel: NodeId },
    MaxOverGroup { input: NodeId, winners: Vec<usize> },
    FullyConnected { input: NodeId, weights: NodeId, bias: NodeId },
    Softmax { input: NodeId, axis: usize },
    LogSoftmax { input: NodeId, axis: usize },
    ReduceSum { input: NodeId, axes: Vec<usize> },
    SelectChannels { input: NodeId, channels: Vec<usize> },
    Concat { inputs: Vec<NodeId>, axis: usize },
    BroadcastHw { input: NodeId },
    Normalize { input: NodeId, total: f64 },
    Reshape { input: NodeId },
    AdjointKernel { input: NodeId, group: usize },
}

#[derive(Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    values: Vec<f64>,
    /// Whether a gradient can flow into this node (leaf, or any input requires).
    requires: bool,
}

/// Gradients produced by one [`Tape::backward`] call, addressed by node id.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `tensor`. Nodes the loss never
    /// reached (including off-path leaves) get an all-zero gradient.
    pub fn of(&self, tensor: &Tensor) -> Tensor {
        match tensor.node_id() {
            Some(id) => self.by_id(id),
            None => Tensor::zeros(tensor.shape()),
        }
    }

    /// Gradient for a node id, zero-filled when the node is off-path.
    pub fn by_id(&self, id: NodeId) -> Tensor {
        match self.grads.get(id) {
            Some(Some(g)) => Tensor::new(&self.shapes[id], g.clone()).expect("gradient shape"),
            _ => {
                let shape = self.shapes.get(id).map(|s| s.as_slice()).unwrap_or(&[]);
                Tensor::zeros(shape)
            }
        }
    }

    /// Raw gradient buffer, `None` when the loss never reached the node.
    pub fn raw(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id).and_then(|g| g.as_deref())
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaves: Vec<NodeId>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Node ids of all registered parameters.
    pub fn leaves(&self) -> &[NodeId] {
        &self.leaves
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, values: Vec<f64>, requires: bool) -> Tensor {
        debug_assert!(values.iter().all(|v| v.is_finite()), "non-finite forward value");
        let id = self.nodes.len();
        self.nodes.push(Node { op, shape: shape.clone(), values: values.clone(), requires });
        let mut t = Tensor::new(&shape, values).expect("node shape");
        t.node = Some(id);
        t
    }

    /// Registers a differentiable leaf (a parameter) and returns its handle.
    pub fn param(&mut self, tensor: &Tensor) -> Tensor {
        let t = self.push(Op::Leaf, tensor.shape().to_vec(), tensor.data().to_vec(), true);
        self.leaves.push(t.node_id().expect("fresh node"));
        t
    }

    /// Registers a non-differentiable input (observations, maps, targets).
    pub fn constant(&mut self, tensor: &Tensor) -> Tensor {
        self.push(Op::Constant, tensor.shape().to_vec(), tensor.data().to_vec(), false)
    }

    /// Convenience constant from shape and values.
    pub fn constant_from(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Tensor, TensorError> {
        let t = Tensor::new(shape, data)?;
        Ok(self.constant(&t))
    }

    fn id_of(&self, t: &Tensor) -> Result<NodeId, TensorError> {
        let id = t
            .node_id()
            .ok_or_else(|| TensorError::Config("tensor is not registered on a tape".into()))?;
        if id >= self.nodes.len() {
            return Err(TensorError::Config(format!("node id {} is not on this tape", id)));
        }
        if self.nodes[id].shape != t.shape() {
            return Err(TensorError::Config(format!(
                "tensor shape {:?} does not match its node {:?} (wrong tape?)",
                t.shape(),
                self.nodes[id].shape
            )));
        }
        Ok(id)
    }

    fn requires(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires)
    }

    // ── Pointwise ───────────────────────────────────────────────────────────

    /// Elementwise sum of two equal-shape tensors.
    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        let (ia, ib) = (self.id_of(a)?, self.id_of(b)?);
        if a.shape() != b.shape() {
            return Err(TensorError::Shape(format!(
                "add: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let values = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        let req = self.requires(&[ia, ib]);
        Ok(self.push(Op::Add(ia, ib), a.shape().to_vec(), values, req))
    }

    /// Elementwise product of two equal-shape tensors.
    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        let (ia, ib) = (self.id_of(a)?, self.id_of(b)?);
        if a.shape() != b.shape() {
            return Err(TensorError::Shape(format!(
                "mul: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let values = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        let req = self.requires(&[ia, ib]);
        Ok(self.push(Op::Mul(ia, ib), a.shape().to_vec(), values, req))
    }

    pub fn relu(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        let ia = self.id_of(a)?;
        let values = a.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let req = self.requires(&[ia]);
        Ok(self.push(Op::Relu(ia), a.shape().to_vec(), values, req))
    }

    pub fn sigmoid(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        let ia = self.id_of(a)?;
        let values = a.data().iter().map(|&x| stable_sigmoid(x)).collect();
        let req = self.requires(&[ia]);
        Ok(self.push(Op::Sigmoid(ia), a.shape().to_vec(), values, req))
    }

    pub fn tanh(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        let ia = self.id_of(a)?;
        let values = a.data().iter().map(|&x| x.tanh()).collect();
        let req = self.requires(&[ia]);
        Ok(self.push(Op::Tanh(ia), a.shape().to_vec(), values, req))
    }

    /// Multiplies every entry by a fixed scalar (not a graph input).
    pub fn scale(&mut self, a: &Tensor, factor: f64) -> Result<Tensor, TensorError> {
        let ia = self.id_of(a)?;
        if !factor.is_finite() {
            return Err(TensorError::Config(format!("scale by non-finite {}", factor)));
        }
        let values = a.data().iter().map(|&x| x * factor).collect();
        let req = self.requires(&[ia]);
        Ok(self.push(Op::Scale(ia, factor), a.shape().to_vec(), values, req))
    }

    // ── Structured ops ──────────────────────────────────────────────────────

    /// 2-D convolution with odd square kernels and zero "same" padding.
    ///
    /// `input` is `[H, W, Cin]`, `kernel` is `[k, k, Cin, Cout]`, output is
    /// `[H, W, Cout]`:
    ///
    /// `out[y, x, co] = Σ_{dy, dx, ci} input[y+dy-r, x+dx-r, ci] · kernel[dy, dx, ci, co]`
    ///
    /// with `r = k/2` and out-of-grid taps reading zero.
    pub fn conv2d(&mut self, input: &Tensor, kernel: &Tensor) -> Result<Tensor, TensorError> {
        let (ii, ik) = (self.id_of(input)?, self.id_of(kernel)?);
        let (h, w, cin) = rank3(input, "conv2d input")?;
        let ks = kernel.shape();
        if ks.len() != 4 || ks[0] != ks[1] {
            return Err(TensorError::Shape(format!(
                "conv2d kernel must be [k,k,Cin,Cout], got {:?}",
                ks
            )));
        }
        let (k, kci, cout) = (ks[0], ks[2], ks[3]);
        if k % 2 == 0 {
            return Err(TensorError::Config(format!("conv2d kernel size {} must be odd", k)));
        }
        if kci != cin {
            return Err(TensorError::Shape(format!(
                "conv2d: input has {} channels, kernel expects {}",
                cin, kci
            )));
        }
        let r = k / 2;
        let (inp, ker) = (input.data(), kernel.data());
        let mut out = vec![0.0; h * w * cout];
        for y in 0..h {
            for x in 0..w {
                for dy in 0..k {
                    let yi = y + dy;
                    if yi < r || yi - r >= h {
                        continue;
                    }
                    let yi = yi - r;
                    for dx in 0..k {
                        let xi = x + dx;
                        if xi < r || xi - r >= w {
                            continue;
                        }
                        let xi = xi - r;
                        let in_base = (yi * w + xi) * cin;
                        let k_base = (dy * k + dx) * cin * cout;
                        let out_base = (y * w + x) * cout;
                        for ci in 0..cin {
                            let v = inp[in_base + ci];
                            if v == 0.0 {
                                continue;
                            }
                            let kb = k_base + ci * cout;
                            for co in 0..cout {
                                out[out_base + co] += v * ker[kb + co];
                            }
                        }
                    }
                }
            }
        }
        let req = self.requires(&[ii, ik]);
        Ok(self.push(Op::Conv2d { input: ii, kernel: ik }, vec![h, w, cout], out, req))
    }

    /// Channel-group maximum: input `[H, W, G·C]`, output `[H, W, C]` where
    /// `out[y, x, c] = max_j input[y, x, c·G + j]`. Ties go to the lowest
    /// channel, which is also where the gradient is routed.
    pub fn max_over_group(&mut self, input: &Tensor, group: usize) -> Result<Tensor, TensorError> {
        let ii = self.id_of(input)?;
        let (h, w, ctot) = rank3(input, "max_over_group input")?;
        if group == 0 || ctot % group != 0 {
            return Err(TensorError::Config(format!(
                "max_over_group: {} channels do not split into groups of {}",
                ctot, group
            )));
        }
        let c = ctot / group;
        let inp = input.data();
        let mut out = vec![0.0; h * w * c];
        let mut winners = vec![0usize; h * w * c];
        for cell in 0..h * w {
            let in_base = cell * ctot;
            let out_base = cell * c;
            for cc in 0..c {
                let mut best = inp[in_base + cc * group];
                let mut best_j = 0;
                for j in 1..group {
                    let v = inp[in_base + cc * group + j];
                    if v > best {
                        best = v;
                        best_j = j;
                    }
                }
                out[out_base + cc] = best;
                winners[out_base + cc] = cc * group + best_j;
            }
        }
        let req = self.requires(&[ii]);
        Ok(self.push(Op::MaxOverGroup { input: ii, winners }, vec![h, w, c], out, req))
    }

    /// Dense layer: `out[m] = bias[m] + Σ_n input[n] · weights[n, m]`.
    pub fn fully_connected(
        &mut self,
        input: &Tensor,
        weights: &Tensor,
        bias: &Tensor,
    ) -> Result<Tensor, TensorError> {
        let (ii, iw, ib) = (self.id_of(input)?, self.id_of(weights)?, self.id_of(bias)?);
        if input.rank() != 1 || weights.rank() != 2 || bias.rank() != 1 {
            return Err(TensorError::Shape(format!(
                "fully_connected wants [n], [n,m], [m]; got {:?}, {:?}, {:?}",
                input.shape(),
                weights.shape(),
                bias.shape()
            )));
        }
        let (n, m) = (weights.shape()[0], weights.shape()[1]);
        if input.shape()[0] != n || bias.shape()[0] != m {
            return Err(TensorError::Shape(format!(
                "fully_connected: input {} vs weights {:?} vs bias {}",
                input.shape()[0],
                weights.shape(),
                bias.shape()[0]
            )));
        }
        let (x, wdat, b) = (input.data(), weights.data(), bias.data());
        let mut out = b.to_vec();
        for i in 0..n {
            let xv = x[i];
            if xv == 0.0 {
                continue;
            }
            let row = &wdat[i * m..(i + 1) * m];
            for (o, wv) in out.iter_mut().zip(row) {
                *o += xv * wv;
            }
        }
        let req = self.requires(&[ii, iw, ib]);
        Ok(self.push(Op::FullyConnected { input: ii, weights: iw, bias: ib }, vec![m], out, req))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, input: &Tensor, axis: usize) -> Result<Tensor, TensorError> {
        let ii = self.id_of(input)?;
        let lanes = LaneIter::new(input.shape(), axis, "softmax")?;
        let inp = input.data();
        let mut out = vec![0.0; inp.len()];
        lanes.for_each(|lane| {
            let m = lane.iter().map(|&i| inp[i]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for &i in &lane {
                let e = (inp[i] - m).exp();
                out[i] = e;
                total += e;
            }
            for &i in &lane {
                out[i] /= total;
            }
        });
        let req = self.requires(&[ii]);
        Ok(self.push(Op::Softmax { input: ii, axis }, input.shape().to_vec(), out, req))
    }

    /// Log-softmax along `axis`; stays finite where composing `softmax` with a
    /// logarithm would underflow.
    pub fn log_softmax(&mut self, input: &Tensor, axis: usize) -> Result<Tensor, TensorError> {
        let ii = self.id_of(input)?;
        let lanes = LaneIter::new(input.shape(), axis, "log_softmax")?;
        let inp = input.data();
        let mut out = vec![0.0; inp.len()];
        lanes.for_each(|lane| {
            let m = lane.iter().map(|&i| inp[i]).fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = lane.iter().map(|&i| (inp[i] - m).exp()).sum();
            let log_total = total.ln();
            for &i in &lane {
                out[i] = inp[i] - m - log_total;
            }
        });
        let req = self.requires(&[ii]);
        Ok(self.push(Op::LogSoftmax { input: ii, axis }, input.shape().to_vec(), out, req))
    }

    /// Sums away the given axes; the result keeps the remaining axes in order.
    /// Summing away every axis (or passing all axes of a rank-n tensor) yields
    /// a rank-0 scalar. An empty axis list copies the input.
    pub fn reduce_sum(&mut self, input: &Tensor, axes: &[usize]) -> Result<Tensor, TensorError> {
        let ii = self.id_of(input)?;
        let rank = input.rank();
        let mut drop = vec![false; rank];
        for &a in axes {
            if a >= rank {
                return Err(TensorError::Config(format!(
                    "reduce_sum axis {} out of range for rank {}",
                    a, rank
                )));
            }
            drop[a] = true;
        }
        let out_shape: Vec<usize> = input
            .shape()
            .iter()
            .zip(&drop)
            .filter(|(_, &d)| !d)
            .map(|(&s, _)| s)
            .collect();
        let out_len = out_shape.iter().product();
        let mut out = vec![0.0; out_len];
        let inp = input.data();
        let map = ReduceMap::new(input.shape(), &drop);
        for (i, &v) in inp.iter().enumerate() {
            out[map.out_offset(i)] += v;
        }
        let req = self.requires(&[ii]);
        Ok(self.push(Op::ReduceSum { input: ii, axes: axes.to_vec() }, out_shape, out, req))
    }

    /// Gathers channels of a `[H, W, C]` tensor in the given order.
    pub fn select_channels(
        &mut self,
        input: &Tensor,
        channels: &[usize],
    ) -> Result<Tensor, TensorError> {
        let ii = self.id_of(input)?;
        let (h, w, c) = rank3(input, "select_channels input")?;
        for &ch in channels {
            if ch >= c {
                return Err(TensorError::Config(format!(
                    "select_channels: channel {} out of {}",
                    ch, c
                )));
            }
        }
        let inp = input.data();
        let cn = channels.len();
        let mut out = vec![0.0; h * w * cn];
        for cell in 0..h * w {
            let in_base = cell * c;
            let out_base = cell * cn;
            for (j, &ch) in channels.iter().enumerate() {
                out[out_base + j] = inp[in_base + ch];
            }
        }
        let req = self.requires(&[ii]);
        Ok(self.push(
            Op::SelectChannels { input: ii, channels: channels.to_vec() },
            vec![h, w, cn],
            out,
            req,
        ))
    }

    /// Concatenates tensors along `axis`. All other dimensions must agree.
    pub fn concat(&mut self, parts: &[&Tensor], axis: usize) -> Result<Tensor, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::Config("concat of zero tensors".into()));
        }
        let ids =
            parts.iter().map(|t| self.id_of(t)).collect::<Result<Vec<_>, TensorError>>()?;
        let rank = parts[0].rank();
        if axis >= rank {
            return Err(TensorError::Config(format!(
                "concat axis {} out of range for rank {}",
                axis, rank
            )));
        }
        let mut out_shape = parts[0].shape().to_vec();
        let mut axis_total = 0;
        for t in parts {
            if t.rank() != rank {
                return Err(TensorError::Shape("concat: rank mismatch".into()));
            }
            for d in 0..rank {
                if d != axis && t.shape()[d] != out_shape[d] {
                    return Err(TensorError::Shape(format!(
                        "concat: {:?} vs {:?} along axis {}",
                        t.shape(),
                        out_shape,
                        axis
                    )));
                }
            }
            axis_total += t.shape()[axis];
        }
        out_shape[axis] = axis_total;
        let inner: usize = out_shape[axis + 1..].iter().product();
        let outer: usize = out_shape[..axis].iter().product();
        let out_block = axis_total * inner;
        let mut out = vec![0.0; outer * out_block];
        let mut prefix = 0;
        for t in parts {
            let block = t.shape()[axis] * inner;
            let dat = t.data();
            for o in 0..outer {
                let src = &dat[o * block..(o + 1) * block];
                let dst = o * out_block + prefix * inner;
                out[dst..dst + block].copy_from_slice(src);
            }
            prefix += t.shape()[axis];
        }
        let req = self.requires(&ids);
        Ok(self.push(Op::Concat { inputs: ids, axis }, out_shape, out, req))
    }

    /// Tiles a `[C]` vector over an `H × W` grid, producing `[H, W, C]`.
    pub fn broadcast_hw(&mut self, input: &Tensor, h: usize, w: usize) -> Result<Tensor, TensorError> {
        let ii = self.id_of(input)?;
        if input.rank() != 1 {
            return Err(TensorError::Shape(format!(
                "broadcast_hw wants a vector, got {:?}",
                input.shape()
            )));
        }
        let c = input.shape()[0];
        let mut out = vec![0.0; h * w * c];
        for cell in 0..h * w {
            out[cell * c..(cell + 1) * c].copy_from_slice(input.data());
        }
        let req = self.requires(&[ii]);
        Ok(self.push(Op::BroadcastHw { input: ii }, vec![h, w, c], out, req))
    }

    /// Divides every entry by the sum of all entries. Fails when the total is
    /// too small to divide by; callers that need a fallback (belief resets)
    /// check the mass before calling.
    pub fn normalize(&mut self, input: &Tensor) -> Result<Tensor, TensorError> {
        let ii = self.id_of(input)?;
        let total: f64 = input.data().iter().sum();
        if !total.is_finite() || total.abs() < NORMALIZE_MIN_TOTAL {
            return Err(TensorError::Numeric(format!(
                "normalize: total mass {} is not usable",
                total
            )));
        }
        let values = input.data().iter().map(|&v| v / total).collect();
        let req = self.requires(&[ii]);
        Ok(self.push(Op::Normalize { input: ii, total }, input.shape().to_vec(), values, req))
    }

    /// Reinterprets the values under a new shape with the same element count.
    pub fn reshape(&mut self, input: &Tensor, shape: &[usize]) -> Result<Tensor, TensorError> {
        let ii = self.id_of(input)?;
        let expected: usize = shape.iter().product();
        if expected != input.len() {
            return Err(TensorError::Shape(format!(
                "reshape {:?} -> {:?} changes element count",
                input.shape(),
                shape
            )));
        }
        let req = self.requires(&[ii]);
        Ok(self.push(Op::Reshape { input: ii }, shape.to_vec(), input.data().to_vec(), req))
    }

    /// Rewires a `[k, k, C, C·G]` convolution kernel into its adjoint: spatial
    /// taps flipped, channel roles transposed within each group:
    ///
    /// `out[a, b, j, i·G + u] = in[k-1-a, k-1-b, i, j·G + u]`
    ///
    /// Convolving with the result propagates values in the exact reverse
    /// direction of convolving with the original kernel (the transformation is
    /// its own inverse).
    pub fn adjoint_kernel(&mut self, kernel: &Tensor, group: usize) -> Result<Tensor, TensorError> {
        let ik = self.id_of(kernel)?;
        let ks = kernel.shape();
        if ks.len() != 4 || ks[0] != ks[1] {
            return Err(TensorError::Shape(format!(
                "adjoint_kernel wants [k,k,C,C*G], got {:?}",
                ks
            )));
        }
        let (k, c, cout) = (ks[0], ks[2], ks[3]);
        if group == 0 || cout != c * group {
            return Err(TensorError::Shape(format!(
                "adjoint_kernel: {} output channels are not {} groups of {}",
                cout, c, group
            )));
        }
        let values = adjoint_permute(kernel.data(), k, c, group);
        let req = self.requires(&[ik]);
        Ok(self.push(Op::AdjointKernel { input: ik, group }, ks.to_vec(), values, req))
    }

    // ── Backward ────────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Returns gradients for every node the
    /// loss reaches; leaves it does not reach read back as zeros.
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients, TensorError> {
        let root = self.id_of(loss)?;
        if loss.len() != 1 {
            return Err(TensorError::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[root] = Some(vec![1.0]);
        for id in (0..=root).rev() {
            if grads[id].is_none() || !self.nodes[id].requires {
                continue;
            }
            let grad = grads[id].take().expect("checked above");
            self.accumulate(id, &grad, &mut grads);
            grads[id] = Some(grad);
        }
        let shapes = self.nodes.iter().map(|nd| nd.shape.clone()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, id: NodeId, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        // Local helper: get-or-init the gradient buffer of an input node, but
        // only when a gradient can actually flow into it.
        macro_rules! buf {
            ($nid:expr) => {{
                let nid = $nid;
                if self.nodes[nid].requires {
                    Some(grads[nid].get_or_insert_with(|| vec![0.0; self.nodes[nid].values.len()]))
                } else {
                    None
                }
            }};
        }
        match &self.nodes[id].op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                if let Some(ga) = buf!(*a) {
                    for (o, &gv) in ga.iter_mut().zip(g) {
                        *o += gv;
                    }
                }
                if let Some(gb) = buf!(*b) {
                    for (o, &gv) in gb.iter_mut().zip(g) {
                        *o += gv;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.nodes[a].requires {
                    let bv = self.nodes[b].values.clone();
                    let ga = grads[a].get_or_insert_with(|| vec![0.0; bv.len()]);
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                }
                if self.nodes[b].requires {
                    let av = self.nodes[a].values.clone();
                    let gb = grads[b].get_or_insert_with(|| vec![0.0; av.len()]);
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                }
            }
            Op::Relu(a) => {
                let xa = *a;
                if self.nodes[xa].requires {
                    let xv = self.nodes[xa].values.clone();
                    let ga = grads[xa].get_or_insert_with(|| vec![0.0; xv.len()]);
                    for i in 0..g.len() {
                        if xv[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                let xa = *a;
                if self.nodes[xa].requires {
                    let yv = self.nodes[id].values.clone();
                    let ga = grads[xa].get_or_insert_with(|| vec![0.0; yv.len()]);
                    for i in 0..g.len() {
                        ga[i] += g[i] * yv[i] * (1.0 - yv[i]);
                    }
                }
            }
            Op::Tanh(a) => {
                let xa = *a;
                if self.nodes[xa].requires {
                    let yv = self.nodes[id].values.clone();
                    let ga = grads[xa].get_or_insert_with(|| vec![0.0; yv.len()]);
                    for i in 0..g.len() {
                        ga[i] += g[i] * (1.0 - yv[i] * yv[i]);
                    }
                }
            }
            Op::Scale(a, f) => {
                let (xa, f) = (*a, *f);
                if let Some(ga) = buf!(xa) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * f;
                    }
                }
            }
            Op::Conv2d { input, kernel } => {
                self.conv2d_backward(*input, *kernel, g, grads);
            }
            Op::MaxOverGroup { input, winners } => {
                let (xa, winners) = (*input, winners.clone());
                if self.nodes[xa].requires {
                    let shape = self.nodes[id].shape.clone();
                    let c = shape[2];
                    let in_c = self.nodes[xa].shape[2];
                    let ga = grads[xa]
                        .get_or_insert_with(|| vec![0.0; self.nodes[xa].values.len()]);
                    for cell in 0..shape[0] * shape[1] {
                        for cc in 0..c {
                            ga[cell * in_c + winners[cell * c + cc]] += g[cell * c + cc];
                        }
                    }
                }
            }
            Op::FullyConnected { input, weights, bias } => {
                let (xi, wi, bi) = (*input, *weights, *bias);
                let m = self.nodes[id].values.len();
                let n = self.nodes[xi].values.len();
                if self.nodes[xi].requires {
                    let wv = self.nodes[wi].values.clone();
                    let gx = grads[xi].get_or_insert_with(|| vec![0.0; n]);
                    for i in 0..n {
                        let row = &wv[i * m..(i + 1) * m];
                        let mut acc = 0.0;
                        for j in 0..m {
                            acc += g[j] * row[j];
                        }
                        gx[i] += acc;
                    }
                }
                if self.nodes[wi].requires {
                    let xv = self.nodes[xi].values.clone();
                    let gw = grads[wi].get_or_insert_with(|| vec![0.0; n * m]);
                    for i in 0..n {
                        let xi_v = xv[i];
                        if xi_v == 0.0 {
                            continue;
                        }
                        let row = &mut gw[i * m..(i + 1) * m];
                        for j in 0..m {
                            row[j] += xi_v * g[j];
                        }
                    }
                }
                if let Some(gb) = buf!(bi) {
                    for j in 0..m {
                        gb[j] += g[j];
                    }
                }
            }
            Op::Softmax { input, axis } => {
                let (xa, axis) = (*input, *axis);
                if self.nodes[xa].requires {
                    let yv = self.nodes[id].values.clone();
                    let shape = self.nodes[id].shape.clone();
                    let lanes = LaneIter::new(&shape, axis, "softmax").expect("validated");
                    let ga = grads[xa].get_or_insert_with(|| vec![0.0; yv.len()]);
                    lanes.for_each(|lane| {
                        let dot: f64 = lane.iter().map(|&i| g[i] * yv[i]).sum();
                        for &i in &lane {
                            ga[i] += yv[i] * (g[i] - dot);
                        }
                    });
                }
            }
            Op::LogSoftmax { input, axis } => {
                let (xa, axis) = (*input, *axis);
                if self.nodes[xa].requires {
                    let yv = self.nodes[id].values.clone();
                    let shape = self.nodes[id].shape.clone();
                    let lanes = LaneIter::new(&shape, axis, "log_softmax").expect("validated");
                    let ga = grads[xa].get_or_insert_with(|| vec![0.0; yv.len()]);
                    lanes.for_each(|lane| {
                        let gsum: f64 = lane.iter().map(|&i| g[i]).sum();
                        for &i in &lane {
                            ga[i] += g[i] - yv[i].exp() * gsum;
                        }
                    });
                }
            }
            Op::ReduceSum { input, axes } => {
                let (xa, axes) = (*input, axes.clone());
                if self.nodes[xa].requires {
                    let in_shape = self.nodes[xa].shape.clone();
                    let mut drop = vec![false; in_shape.len()];
                    for &a in &axes {
                        drop[a] = true;
                    }
                    let map = ReduceMap::new(&in_shape, &drop);
                    let ga = grads[xa]
                        .get_or_insert_with(|| vec![0.0; self.nodes[xa].values.len()]);
                    for i in 0..ga.len() {
                        ga[i] += g[map.out_offset(i)];
                    }
                }
            }
            Op::SelectChannels { input, channels } => {
                let (xa, channels) = (*input, channels.clone());
                if self.nodes[xa].requires {
                    let in_c = self.nodes[xa].shape[2];
                    let cn = channels.len();
                    let cells = self.nodes[id].values.len() / cn;
                    let ga = grads[xa]
                        .get_or_insert_with(|| vec![0.0; self.nodes[xa].values.len()]);
                    for cell in 0..cells {
                        for (j, &ch) in channels.iter().enumerate() {
                            ga[cell * in_c + ch] += g[cell * cn + j];
                        }
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let (ids, axis) = (inputs.clone(), *axis);
                let out_shape = self.nodes[id].shape.clone();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let outer: usize = out_shape[..axis].iter().product();
                let out_block = out_shape[axis] * inner;
                let mut prefix = 0;
                for nid in ids {
                    let part_axis = self.nodes[nid].shape[axis];
                    let block = part_axis * inner;
                    if self.nodes[nid].requires {
                        let gp = grads[nid]
                            .get_or_insert_with(|| vec![0.0; self.nodes[nid].values.len()]);
                        for o in 0..outer {
                            let src = o * out_block + prefix * inner;
                            for i in 0..block {
                                gp[o * block + i] += g[src + i];
                            }
                        }
                    }
                    prefix += part_axis;
                }
            }
            Op::BroadcastHw { input } => {
                let xa = *input;
                if self.nodes[xa].requires {
                    let c = self.nodes[xa].values.len();
                    let cells = self.nodes[id].values.len() / c;
                    let ga = grads[xa].get_or_insert_with(|| vec![0.0; c]);
                    for cell in 0..cells {
                        for j in 0..c {
                            ga[j] += g[cell * c + j];
                        }
                    }
                }
            }
            Op::Normalize { input, total } => {
                let (xa, total) = (*input, *total);
                if self.nodes[xa].requires {
                    let yv = self.nodes[id].values.clone();
                    let dot: f64 = g.iter().zip(&yv).map(|(gv, yv)| gv * yv).sum();
                    let ga = grads[xa].get_or_insert_with(|| vec![0.0; yv.len()]);
                    for i in 0..g.len() {
                        ga[i] += (g[i] - dot) / total;
                    }
                }
            }
            Op::Reshape { input } => {
                if let Some(ga) = buf!(*input) {
                    for (o, &gv) in ga.iter_mut().zip(g) {
                        *o += gv;
                    }
                }
            }
            Op::AdjointKernel { input, group } => {
                let (xa, group) = (*input, *group);
                if self.nodes[xa].requires {
                    let k = self.nodes[xa].shape[0];
                    let c = self.nodes[xa].shape[2];
                    // The permutation inverts itself, so the input gradient is
                    // the adjoint of the output gradient.
                    let back = adjoint_permute(g, k, c, group);
                    let ga = grads[xa].get_or_insert_with(|| vec![0.0; back.len()]);
                    for (o, bv) in ga.iter_mut().zip(back) {
                        *o += bv;
                    }
                }
            }
        }
    }

    fn conv2d_backward(
        &self,
        input: NodeId,
        kernel: NodeId,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let in_shape = self.nodes[input].shape.clone();
        let k_shape = self.nodes[kernel].shape.clone();
        let (h, w, cin) = (in_shape[0], in_shape[1], in_shape[2]);
        let (k, cout) = (k_shape[0], k_shape[3]);
        let r = k / 2;
        let need_in = self.nodes[input].requires;
        let need_k = self.nodes[kernel].requires;
        let inp = self.nodes[input].values.clone();
        let ker = self.nodes[kernel].values.clone();
        let mut gi = if need_in { vec![0.0; inp.len()] } else { Vec::new() };
        let mut gk = if need_k { vec![0.0; ker.len()] } else { Vec::new() };
        for y in 0..h {
            for x in 0..w {
                let out_base = (y * w + x) * cout;
                for dy in 0..k {
                    let yi = y + dy;
                    if yi < r || yi - r >= h {
                        continue;
                    }
                    let yi = yi - r;
                    for dx in 0..k {
                        let xi = x + dx;
                        if xi < r || xi - r >= w {
                            continue;
                        }
                        let xi = xi - r;
                        let in_base = (yi * w + xi) * cin;
                        let k_base = (dy * k + dx) * cin * cout;
                        for ci in 0..cin {
                            let kb = k_base + ci * cout;
                            if need_in {
                                let mut acc = 0.0;
                                for co in 0..cout {
                                    acc += g[out_base + co] * ker[kb + co];
                                }
                                gi[in_base + ci] += acc;
                            }
                            if need_k {
                                let v = inp[in_base + ci];
                                if v != 0.0 {
                                    for co in 0..cout {
                                        gk[kb + co] += v * g[out_base + co];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        if need_in {
            let ga = grads[input].get_or_insert_with(|| vec![0.0; inp.len()]);
            for (o, v) in ga.iter_mut().zip(gi) {
                *o += v;
            }
        }
        if need_k {
            let ga = grads[kernel].get_or_insert_with(|| vec![0.0; ker.len()]);
            for (o, v) in ga.iter_mut().zip(gk) {
                *o += v;
            }
        }
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn rank3(t: &Tensor, what: &str) -> Result<(usize, usize, usize), TensorError> {
    if t.rank() != 3 {
        return Err(TensorError::Shape(format!(
            "{} must be rank 3 [H,W,C], got {:?}",
            what,
            t.shape()
        )));
    }
    Ok((t.shape()[0], t.shape()[1], t.shape()[2]))
}

fn adjoint_permute(data: &[f64], k: usize, c: usize, group: usize) -> Vec<f64> {
    let cout = c * group;
    let mut out = vec![0.0; data.len()];
    for a in 0..k {
        for b in 0..k {
            let src_base = ((k - 1 - a) * k + (k - 1 - b)) * c * cout;
            let dst_base = (a * k + b) * c * cout;
            for j in 0..c {
                for i in 0..c {
                    for u in 0..group {
                        out[dst_base + j * cout + i * group + u] =
                            data[src_base + i * cout + j * group + u];
                    }
                }
            }
        }
    }
    out
}

/// Iterates the index sets ("lanes") that run along one axis of a shape.
struct LaneIter {
    outer: usize,
    lane: usize,
    inner: usize,
}

impl LaneIter {
    fn new(shape: &[usize], axis: usize, what: &str) -> Result<Self, TensorError> {
        if axis >= shape.len() {
            return Err(TensorError::Config(format!(
                "{} axis {} out of range for shape {:?}",
                what, axis, shape
            )));
        }
        Ok(LaneIter {
            outer: shape[..axis].iter().product(),
            lane: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        })
    }

    fn for_each(&self, mut f: impl FnMut(Vec<usize>)) {
        for o in 0..self.outer {
            for i in 0..self.inner {
                let lane: Vec<usize> =
                    (0..self.lane).map(|j| (o * self.lane + j) * self.inner + i).collect();
                f(lane);
            }
        }
    }
}

/// Maps flat input offsets to flat output offsets for an axis-dropping sum.
struct ReduceMap {
    in_shape: Vec<usize>,
    keep_stride: Vec<usize>, // per input axis: stride in output, 0 if dropped
}

impl ReduceMap {
    fn new(in_shape: &[usize], drop: &[bool]) -> Self {
        let mut keep_stride = vec![0usize; in_shape.len()];
        let mut stride = 1;
        for d in (0..in_shape.len()).rev() {
            if !drop[d] {
                keep_stride[d] = stride;
                stride *= in_shape[d];
            }
        }
        ReduceMap { in_shape: in_shape.to_vec(), keep_stride }
    }

    fn out_offset(&self, mut flat: usize) -> usize {
        let mut out = 0;
        for d in (0..self.in_shape.len()).rev() {
            let ix = flat % self.in_shape[d];
            flat /= self.in_shape[d];
            out += ix * self.keep_stride[d];
        }
        out
    }
}
