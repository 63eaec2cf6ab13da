//! Reverse-mode differentiation over a fixed, closed operation set.
//!
//! A [`Graph`] is a tape of operation records in topological order (inputs
//! are always pushed before their consumers, so construction order is
//! evaluation order). Pushing a node validates shapes only; values are
//! produced by [`Graph::eval_forward`] and gradients by [`Graph::backward`],
//! which walks the tape in reverse from the scalar terminal (the last node).
//!
//! The tape is rebuildable but also re-runnable: leaf payloads can be swapped
//! with [`Graph::set_leaf`] and the same topology evaluated again, reusing
//! every internal buffer. The training loop exploits this to run thousands of
//! steps without reallocating.
//!
//! Everything is f64; gradient checks at tolerance 1e-4 are unreliable in
//! 32-bit.

use crate::tensor::Tensor;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("node {node}: shape mismatch: {detail}")]
    ShapeMismatch { node: usize, detail: String },
    #[error("node {node}: invalid input id")]
    BadInput { node: usize },
    #[error("terminal node is not scalar")]
    TerminalNotScalar,
    #[error("forward pass has not been run")]
    ForwardNotRun,
    #[error("node {node}: expected a leaf")]
    NotALeaf { node: usize },
    #[error("node {node}: leaf payload length {got}, shape wants {want}")]
    LeafLength { node: usize, got: usize, want: usize },
    #[error("node {node}: leaf does not require grad")]
    NoGrad { node: usize },
    #[error("empty graph")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf { data: Vec<f64>, requires_grad: bool },
    Add,
    Sub,
    Mul,
    MatMul,
    Conv2d { stride: usize, pad: usize },
    ConvT2d { stride: usize, pad: usize },
    Relu,
    Exp,
    Tanh,
    SumAxes { axes: Vec<usize> },
    Mean,
    SpatialSoftmax,
    GaussianRender { h: usize, w: usize, sigmas: Vec<f64> },
    ConcatCh,
    Scale { c: f64 },
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Coordinates skipped because the finite-difference probe straddled a
    /// ReLU kink (activation sign pattern differed between the two sides).
    pub excluded: usize,
    pub pass: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    values: Vec<Vec<f64>>,
    grads: Vec<Vec<f64>>,
    scratch: Vec<Vec<f64>>,
    evaluated: bool,
    backward_done: bool,
    relu_sig: u64,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Value of a node after [`Graph::eval_forward`].
    pub fn value(&self, id: NodeId) -> Result<&[f64], GraphError> {
        if !self.evaluated {
            return Err(GraphError::ForwardNotRun);
        }
        Ok(&self.values[id.0])
    }

    /// Gradient of the terminal with respect to a node, after
    /// [`Graph::backward`]. Zero for nodes that do not reach the terminal.
    pub fn grad(&self, id: NodeId) -> Result<&[f64], GraphError> {
        if !self.backward_done {
            return Err(GraphError::ForwardNotRun);
        }
        Ok(&self.grads[id.0])
    }

    // ---- construction ----

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, shape: Vec<usize>) -> NodeId {
        self.nodes.push(Node { op, inputs, shape });
        self.values.push(Vec::new());
        self.grads.push(Vec::new());
        self.scratch.push(Vec::new());
        self.evaluated = false;
        self.backward_done = false;
        NodeId(self.nodes.len() - 1)
    }

    fn check_input(&self, id: NodeId) -> Result<(), GraphError> {
        if id.0 >= self.nodes.len() {
            return Err(GraphError::BadInput { node: self.nodes.len() });
        }
        Ok(())
    }

    fn mismatch(&self, detail: String) -> GraphError {
        GraphError::ShapeMismatch { node: self.nodes.len(), detail }
    }

    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        self.push(
            Op::Leaf { data: t.data.clone(), requires_grad: t.requires_grad },
            vec![],
            t.shape.clone(),
        )
    }

    /// Constant leaf that never receives a gradient.
    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<NodeId, GraphError> {
        let want: usize = shape.iter().product();
        if want != data.len() {
            return Err(self.mismatch(format!("constant data length {} vs shape {:?}", data.len(), shape)));
        }
        Ok(self.push(Op::Leaf { data, requires_grad: false }, vec![], shape.to_vec()))
    }

    fn binary_same_shape(&mut self, op: Op, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.check_input(a)?;
        self.check_input(b)?;
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa != sb {
            return Err(self.mismatch(format!("{sa:?} vs {sb:?}")));
        }
        let shape = sa.clone();
        Ok(self.push(op, vec![a, b], shape))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.binary_same_shape(Op::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.binary_same_shape(Op::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.binary_same_shape(Op::Mul, a, b)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.check_input(a)?;
        self.check_input(b)?;
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(self.mismatch(format!("matmul {sa:?} x {sb:?}")));
        }
        let shape = vec![sa[0], sb[1]];
        Ok(self.push(Op::MatMul, vec![a, b], shape))
    }

    /// 2D convolution, kernel `[Co, Ci, kh, kw]`, bias `[Co]`, zero padding.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId, GraphError> {
        self.check_input(x)?;
        self.check_input(w)?;
        self.check_input(b)?;
        let (sx, sw, sb) = (&self.nodes[x.0].shape, &self.nodes[w.0].shape, &self.nodes[b.0].shape);
        if !(stride == 1 || stride == 2) {
            return Err(self.mismatch(format!("conv2d stride {stride} not in {{1, 2}}")));
        }
        if sx.len() != 3 || sw.len() != 4 || sb.len() != 1 {
            return Err(self.mismatch(format!("conv2d ranks {sx:?} {sw:?} {sb:?}")));
        }
        if sw[1] != sx[0] || sb[0] != sw[0] {
            return Err(self.mismatch(format!("conv2d channels {sx:?} {sw:?} {sb:?}")));
        }
        let (h, w_) = (sx[1], sx[2]);
        let (kh, kw) = (sw[2], sw[3]);
        if h + 2 * pad < kh || w_ + 2 * pad < kw {
            return Err(self.mismatch(format!("conv2d kernel {kh}x{kw} exceeds padded input")));
        }
        // floor semantics: unaligned border columns are simply not visited
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w_ + 2 * pad - kw) / stride + 1;
        let shape = vec![sw[0], oh, ow];
        Ok(self.push(Op::Conv2d { stride, pad }, vec![x, w, b], shape))
    }

    /// Transposed 2D convolution, kernel `[Ci, Co, kh, kw]`, bias `[Co]`.
    pub fn conv_t2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId, GraphError> {
        self.check_input(x)?;
        self.check_input(w)?;
        self.check_input(b)?;
        let (sx, sw, sb) = (&self.nodes[x.0].shape, &self.nodes[w.0].shape, &self.nodes[b.0].shape);
        if !(stride == 1 || stride == 2) {
            return Err(self.mismatch(format!("conv_t2d stride {stride} not in {{1, 2}}")));
        }
        if sx.len() != 3 || sw.len() != 4 || sb.len() != 1 {
            return Err(self.mismatch(format!("conv_t2d ranks {sx:?} {sw:?} {sb:?}")));
        }
        if sw[0] != sx[0] || sb[0] != sw[1] {
            return Err(self.mismatch(format!("conv_t2d channels {sx:?} {sw:?} {sb:?}")));
        }
        let (hi, wi) = (sx[1], sx[2]);
        let (kh, kw) = (sw[2], sw[3]);
        let oh = (hi - 1) * stride + kh;
        let ow = (wi - 1) * stride + kw;
        if oh < 2 * pad || ow < 2 * pad {
            return Err(self.mismatch(format!("conv_t2d padding {pad} exceeds output")));
        }
        let shape = vec![sw[1], oh - 2 * pad, ow - 2 * pad];
        Ok(self.push(Op::ConvT2d { stride, pad }, vec![x, w, b], shape))
    }

    fn unary(&mut self, op: Op, x: NodeId) -> Result<NodeId, GraphError> {
        self.check_input(x)?;
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(op, vec![x], shape))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.unary(Op::Relu, x)
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.unary(Op::Exp, x)
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.unary(Op::Tanh, x)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId, GraphError> {
        self.unary(Op::Scale { c }, x)
    }

    /// Sum over the given axes (removed from the shape; all axes -> scalar).
    pub fn sum_axes(&mut self, x: NodeId, axes: &[usize]) -> Result<NodeId, GraphError> {
        self.check_input(x)?;
        let sx = &self.nodes[x.0].shape;
        let rank = sx.len();
        let mut seen = vec![false; rank];
        for &a in axes {
            if a >= rank || seen[a] {
                return Err(self.mismatch(format!("sum_axes axes {axes:?} on rank {rank}")));
            }
            seen[a] = true;
        }
        let shape: Vec<usize> =
            sx.iter().enumerate().filter(|(d, _)| !seen[*d]).map(|(_, &e)| e).collect();
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        Ok(self.push(Op::SumAxes { axes }, vec![x], shape))
    }

    /// Mean over all elements (scalar output).
    pub fn mean(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.check_input(x)?;
        Ok(self.push(Op::Mean, vec![x], vec![]))
    }

    /// Per-map softmax over the spatial extent of a `[K, H, W]` stack.
    pub fn spatial_softmax(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.check_input(x)?;
        let sx = &self.nodes[x.0].shape;
        if sx.len() != 3 {
            return Err(self.mismatch(format!("spatial_softmax wants [K, H, W], got {sx:?}")));
        }
        let shape = sx.clone();
        Ok(self.push(Op::SpatialSoftmax, vec![x], shape))
    }

    /// Gaussian maps `exp(-((x - xs_k)^2 + (y - ys_k)^2) / (2 sigma_k^2))` on
    /// an `h` x `w` lattice. Differentiable in the coordinates; the sigmas are
    /// baked-in constants (swap them with [`Graph::set_render_sigmas`]).
    pub fn gaussian_render(
        &mut self,
        xs: NodeId,
        ys: NodeId,
        h: usize,
        w: usize,
        sigmas: &[f64],
    ) -> Result<NodeId, GraphError> {
        self.check_input(xs)?;
        self.check_input(ys)?;
        let (sx, sy) = (&self.nodes[xs.0].shape, &self.nodes[ys.0].shape);
        let k = sigmas.len();
        if sx.len() != 1 || sy.len() != 1 || sx[0] != k || sy[0] != k {
            return Err(self.mismatch(format!("gaussian_render coords {sx:?}/{sy:?} vs {k} sigmas")));
        }
        if h == 0 || w == 0 || k == 0 {
            return Err(self.mismatch("gaussian_render empty lattice or stack".into()));
        }
        if sigmas.iter().any(|&s| !(s > 0.0)) {
            return Err(self.mismatch(format!("gaussian_render sigmas must be positive: {sigmas:?}")));
        }
        Ok(self.push(Op::GaussianRender { h, w, sigmas: sigmas.to_vec() }, vec![xs, ys], vec![k, h, w]))
    }

    /// Concatenate two `[C, H, W]` stacks along the channel axis.
    pub fn concat_ch(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.check_input(a)?;
        self.check_input(b)?;
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 3 || sb.len() != 3 || sa[1] != sb[1] || sa[2] != sb[2] {
            return Err(self.mismatch(format!("concat_ch {sa:?} vs {sb:?}")));
        }
        let shape = vec![sa[0] + sb[0], sa[1], sa[2]];
        Ok(self.push(Op::ConcatCh, vec![a, b], shape))
    }

    // ---- leaf mutation ----

    /// Replace a leaf's payload; topology and buffers are kept.
    pub fn set_leaf(&mut self, id: NodeId, data: &[f64]) -> Result<(), GraphError> {
        let want: usize = self.nodes[id.0].shape.iter().product();
        match &mut self.nodes[id.0].op {
            Op::Leaf { data: d, .. } => {
                if data.len() != want {
                    return Err(GraphError::LeafLength { node: id.0, got: data.len(), want });
                }
                d.copy_from_slice(data);
                self.evaluated = false;
                self.backward_done = false;
                Ok(())
            }
            _ => Err(GraphError::NotALeaf { node: id.0 }),
        }
    }

    /// Swap the constant sigmas of a render node (adaptive-sigma refreshes).
    pub fn set_render_sigmas(&mut self, id: NodeId, sigmas: &[f64]) -> Result<(), GraphError> {
        match &mut self.nodes[id.0].op {
            Op::GaussianRender { sigmas: s, .. } => {
                if sigmas.len() != s.len() || sigmas.iter().any(|&v| !(v > 0.0)) {
                    return Err(GraphError::ShapeMismatch {
                        node: id.0,
                        detail: format!("render sigmas {sigmas:?} vs arity {}", s.len()),
                    });
                }
                s.copy_from_slice(sigmas);
                self.evaluated = false;
                self.backward_done = false;
                Ok(())
            }
            _ => Err(GraphError::ShapeMismatch { node: id.0, detail: "not a render node".into() }),
        }
    }

    fn nudge_leaf(&mut self, id: NodeId, coord: usize, delta: f64) {
        if let Op::Leaf { data, .. } = &mut self.nodes[id.0].op {
            data[coord] += delta;
            self.evaluated = false;
            self.backward_done = false;
        }
    }

    // ---- forward ----

    /// Evaluate every node in order; returns the terminal's value.
    pub fn eval_forward(&mut self) -> Result<Tensor, GraphError> {
        if self.nodes.is_empty() {
            return Err(GraphError::Empty);
        }
        self.relu_sig = 0xcbf2_9ce4_8422_2325;
        for i in 0..self.nodes.len() {
            self.eval_node(i);
        }
        self.evaluated = true;
        self.backward_done = false;
        let last = self.nodes.len() - 1;
        Ok(Tensor::new(self.nodes[last].shape.clone(), self.values[last].clone())
            .expect("node shape/value agreement"))
    }

    fn eval_node(&mut self, i: usize) {
        let numel: usize = self.nodes[i].shape.iter().product();
        let mut out = std::mem::take(&mut self.values[i]);
        if out.len() != numel {
            out = vec![0.0; numel];
        }
        let mut scratch = std::mem::take(&mut self.scratch[i]);
        {
            let node = &self.nodes[i];
            let val = |id: &NodeId| -> &[f64] { &self.values[id.0] };
            match &node.op {
                Op::Leaf { data, .. } => out.copy_from_slice(data),
                Op::Add => {
                    let (a, b) = (val(&node.inputs[0]), val(&node.inputs[1]));
                    for j in 0..numel {
                        out[j] = a[j] + b[j];
                    }
                }
                Op::Sub => {
                    let (a, b) = (val(&node.inputs[0]), val(&node.inputs[1]));
                    for j in 0..numel {
                        out[j] = a[j] - b[j];
                    }
                }
                Op::Mul => {
                    let (a, b) = (val(&node.inputs[0]), val(&node.inputs[1]));
                    for j in 0..numel {
                        out[j] = a[j] * b[j];
                    }
                }
                Op::MatMul => {
                    let sa = &self.nodes[node.inputs[0].0].shape;
                    let (m, k) = (sa[0], sa[1]);
                    let n = node.shape[1];
                    out.fill(0.0);
                    mm_nn_acc(val(&node.inputs[0]), val(&node.inputs[1]), &mut out, m, k, n);
                }
                Op::Conv2d { stride, pad } => {
                    let sx = &self.nodes[node.inputs[0].0].shape;
                    let sw = &self.nodes[node.inputs[1].0].shape;
                    let (ci, h, w) = (sx[0], sx[1], sx[2]);
                    let (co, kh, kw) = (sw[0], sw[2], sw[3]);
                    let (oh, ow) = (node.shape[1], node.shape[2]);
                    let col_len = ci * kh * kw * oh * ow;
                    if scratch.len() != col_len {
                        scratch = vec![0.0; col_len];
                    }
                    im2col(val(&node.inputs[0]), ci, h, w, kh, kw, *stride, *pad, oh, ow, &mut scratch);
                    let bias = val(&node.inputs[2]);
                    for c in 0..co {
                        out[c * oh * ow..(c + 1) * oh * ow].fill(bias[c]);
                    }
                    mm_nn_acc(val(&node.inputs[1]), &scratch, &mut out, co, ci * kh * kw, oh * ow);
                }
                Op::ConvT2d { stride, pad } => {
                    let sx = &self.nodes[node.inputs[0].0].shape;
                    let sw = &self.nodes[node.inputs[1].0].shape;
                    let (ci, hi, wi) = (sx[0], sx[1], sx[2]);
                    let (co, kh, kw) = (sw[1], sw[2], sw[3]);
                    let (oh, ow) = (node.shape[1], node.shape[2]);
                    // scratch holds the permuted kernel followed by the column matrix
                    let wr_len = co * kh * kw * ci;
                    let col_len = co * kh * kw * hi * wi;
                    if scratch.len() != wr_len + col_len {
                        scratch = vec![0.0; wr_len + col_len];
                    }
                    let (wr, col) = scratch.split_at_mut(wr_len);
                    permute_convt_kernel(val(&node.inputs[1]), ci, co, kh, kw, wr);
                    col.fill(0.0);
                    mm_nn_acc(wr, val(&node.inputs[0]), col, co * kh * kw, ci, hi * wi);
                    let bias = val(&node.inputs[2]);
                    for c in 0..co {
                        out[c * oh * ow..(c + 1) * oh * ow].fill(bias[c]);
                    }
                    col2im_add(col, co, oh, ow, kh, kw, *stride, *pad, hi, wi, &mut out);
                }
                Op::Relu => {
                    let x = val(&node.inputs[0]);
                    let mut sig = self.relu_sig;
                    for j in 0..numel {
                        let pos = x[j] > 0.0;
                        out[j] = if pos { x[j] } else { 0.0 };
                        sig = (sig ^ (pos as u64 + 1)).wrapping_mul(0x0000_0100_0000_01b3);
                    }
                    self.relu_sig = sig;
                }
                Op::Exp => {
                    let x = val(&node.inputs[0]);
                    for j in 0..numel {
                        out[j] = x[j].exp();
                    }
                }
                Op::Tanh => {
                    let x = val(&node.inputs[0]);
                    for j in 0..numel {
                        out[j] = x[j].tanh();
                    }
                }
                Op::SumAxes { axes } => {
                    let x = val(&node.inputs[0]);
                    let in_shape = &self.nodes[node.inputs[0].0].shape;
                    out.fill(0.0);
                    for_each_reduced_index(in_shape, axes, |flat, oidx| {
                        out[oidx] += x[flat];
                    });
                }
                Op::Mean => {
                    let x = val(&node.inputs[0]);
                    out[0] = x.iter().sum::<f64>() / x.len() as f64;
                }
                Op::SpatialSoftmax => {
                    let x = val(&node.inputs[0]);
                    let (k, hw) = (node.shape[0], node.shape[1] * node.shape[2]);
                    for map in 0..k {
                        let xi = &x[map * hw..(map + 1) * hw];
                        let oi = &mut out[map * hw..(map + 1) * hw];
                        // subtract the max to keep exp in range
                        let m = xi.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let mut z = 0.0;
                        for j in 0..hw {
                            oi[j] = (xi[j] - m).exp();
                            z += oi[j];
                        }
                        for v in oi.iter_mut() {
                            *v /= z;
                        }
                    }
                }
                Op::GaussianRender { h, w, sigmas } => {
                    let (xs, ys) = (val(&node.inputs[0]), val(&node.inputs[1]));
                    for (k, &sigma) in sigmas.iter().enumerate() {
                        let inv = 1.0 / (2.0 * sigma * sigma);
                        let maps = &mut out[k * h * w..(k + 1) * h * w];
                        for y in 0..*h {
                            let dy2 = (y as f64 - ys[k]) * (y as f64 - ys[k]);
                            for x in 0..*w {
                                let dx = x as f64 - xs[k];
                                maps[y * w + x] = (-(dx * dx + dy2) * inv).exp();
                            }
                        }
                    }
                }
                Op::ConcatCh => {
                    let (a, b) = (val(&node.inputs[0]), val(&node.inputs[1]));
                    out[..a.len()].copy_from_slice(a);
                    out[a.len()..].copy_from_slice(b);
                }
                Op::Scale { c } => {
                    let x = val(&node.inputs[0]);
                    for j in 0..numel {
                        out[j] = c * x[j];
                    }
                }
            }
        }
        self.values[i] = out;
        self.scratch[i] = scratch;
    }

    // ---- backward ----

    /// Propagate gradients from the scalar terminal to every node; leaf
    /// gradients are then available through [`Graph::grad`].
    pub fn backward(&mut self) -> Result<(), GraphError> {
        if !self.evaluated {
            return Err(GraphError::ForwardNotRun);
        }
        let n = self.nodes.len();
        let last = n - 1;
        if !self.nodes[last].shape.is_empty() {
            return Err(GraphError::TerminalNotScalar);
        }

        // A node needs a gradient if any leaf below it requires one; skipping
        // the rest avoids, e.g., back-convolving into input images.
        let mut needs = vec![false; n];
        for i in 0..n {
            needs[i] = match &self.nodes[i].op {
                Op::Leaf { requires_grad, .. } => *requires_grad,
                _ => self.nodes[i].inputs.iter().any(|id| needs[id.0]),
            };
        }

        for i in 0..n {
            let numel: usize = self.nodes[i].shape.iter().product();
            if self.grads[i].len() != numel {
                self.grads[i] = vec![0.0; numel];
            } else {
                self.grads[i].fill(0.0);
            }
        }
        self.grads[last][0] = 1.0;

        for i in (0..n).rev() {
            if !needs[i] {
                continue;
            }
            self.backward_node(i, &needs);
        }
        self.backward_done = true;
        Ok(())
    }

    fn backward_node(&mut self, i: usize, needs: &[bool]) {
        let gout = std::mem::take(&mut self.grads[i]);
        let scratch = std::mem::take(&mut self.scratch[i]);
        {
            let node = &self.nodes[i];
            let inputs: Vec<NodeId> = node.inputs.clone();
            let numel = gout.len();
            match &node.op {
                Op::Leaf { .. } => {}
                Op::Add => {
                    for &inp in &inputs {
                        if needs[inp.0] {
                            let g = &mut self.grads[inp.0];
                            for j in 0..numel {
                                g[j] += gout[j];
                            }
                        }
                    }
                }
                Op::Sub => {
                    if needs[inputs[0].0] {
                        let g = &mut self.grads[inputs[0].0];
                        for j in 0..numel {
                            g[j] += gout[j];
                        }
                    }
                    if needs[inputs[1].0] {
                        let g = &mut self.grads[inputs[1].0];
                        for j in 0..numel {
                            g[j] -= gout[j];
                        }
                    }
                }
                Op::Mul => {
                    if needs[inputs[0].0] {
                        let b = self.values[inputs[1].0].clone();
                        let g = &mut self.grads[inputs[0].0];
                        for j in 0..numel {
                            g[j] += gout[j] * b[j];
                        }
                    }
                    if needs[inputs[1].0] {
                        let a = &self.values[inputs[0].0];
                        let g = &mut self.grads[inputs[1].0];
                        for j in 0..numel {
                            g[j] += gout[j] * a[j];
                        }
                    }
                }
                Op::MatMul => {
                    let sa = self.nodes[inputs[0].0].shape.clone();
                    let (m, k) = (sa[0], sa[1]);
                    let nn = self.nodes[i].shape[1];
                    if needs[inputs[0].0] {
                        // dA += g . B^T
                        let b = std::mem::take(&mut self.values[inputs[1].0]);
                        mm_nt_acc(&gout, &b, &mut self.grads[inputs[0].0], m, nn, k);
                        self.values[inputs[1].0] = b;
                    }
                    if needs[inputs[1].0] {
                        // dB += A^T . g
                        let a = std::mem::take(&mut self.values[inputs[0].0]);
                        mm_tn_acc(&a, &gout, &mut self.grads[inputs[1].0], k, m, nn);
                        self.values[inputs[0].0] = a;
                    }
                }
                Op::Conv2d { stride, pad } => {
                    let sx = self.nodes[inputs[0].0].shape.clone();
                    let sw = self.nodes[inputs[1].0].shape.clone();
                    let (ci, h, w) = (sx[0], sx[1], sx[2]);
                    let (co, kh, kw) = (sw[0], sw[2], sw[3]);
                    let (oh, ow) = (self.nodes[i].shape[1], self.nodes[i].shape[2]);
                    let (stride, pad) = (*stride, *pad);
                    // the forward column matrix is still in scratch
                    if needs[inputs[1].0] {
                        mm_nt_acc(&gout, &scratch, &mut self.grads[inputs[1].0], co, oh * ow, ci * kh * kw);
                    }
                    if needs[inputs[2].0] {
                        let g = &mut self.grads[inputs[2].0];
                        for c in 0..co {
                            g[c] += gout[c * oh * ow..(c + 1) * oh * ow].iter().sum::<f64>();
                        }
                    }
                    if needs[inputs[0].0] {
                        let wmat = std::mem::take(&mut self.values[inputs[1].0]);
                        let mut dcol = vec![0.0; ci * kh * kw * oh * ow];
                        mm_tn_acc(&wmat, &gout, &mut dcol, ci * kh * kw, co, oh * ow);
                        self.values[inputs[1].0] = wmat;
                        col2im_add(&dcol, ci, h, w, kh, kw, stride, pad, oh, ow, &mut self.grads[inputs[0].0]);
                    }
                }
                Op::ConvT2d { stride, pad } => {
                    let sx = self.nodes[inputs[0].0].shape.clone();
                    let sw = self.nodes[inputs[1].0].shape.clone();
                    let (ci, hi, wi) = (sx[0], sx[1], sx[2]);
                    let (co, kh, kw) = (sw[1], sw[2], sw[3]);
                    let (oh, ow) = (self.nodes[i].shape[1], self.nodes[i].shape[2]);
                    let (stride, pad) = (*stride, *pad);
                    let mut dcol = vec![0.0; co * kh * kw * hi * wi];
                    im2col(&gout, co, oh, ow, kh, kw, stride, pad, hi, wi, &mut dcol);
                    if needs[inputs[2].0] {
                        let g = &mut self.grads[inputs[2].0];
                        for c in 0..co {
                            g[c] += gout[c * oh * ow..(c + 1) * oh * ow].iter().sum::<f64>();
                        }
                    }
                    if needs[inputs[0].0] {
                        // wr (permuted kernel) is still at the front of scratch
                        let wr = &scratch[..co * kh * kw * ci];
                        mm_tn_acc(wr, &dcol, &mut self.grads[inputs[0].0], ci, co * kh * kw, hi * wi);
                    }
                    if needs[inputs[1].0] {
                        let x = std::mem::take(&mut self.values[inputs[0].0]);
                        let mut dwr = vec![0.0; co * kh * kw * ci];
                        mm_nt_acc(&dcol, &x, &mut dwr, co * kh * kw, hi * wi, ci);
                        self.values[inputs[0].0] = x;
                        // scatter the permuted layout back into [Ci, Co, kh, kw]
                        let g = &mut self.grads[inputs[1].0];
                        for c_out in 0..co {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let row = (c_out * kh + ky) * kw + kx;
                                    for c_in in 0..ci {
                                        g[((c_in * co + c_out) * kh + ky) * kw + kx] += dwr[row * ci + c_in];
                                    }
                                }
                            }
                        }
                    }
                }
                Op::Relu => {
                    if needs[inputs[0].0] {
                        let x = std::mem::take(&mut self.values[inputs[0].0]);
                        let g = &mut self.grads[inputs[0].0];
                        for j in 0..numel {
                            if x[j] > 0.0 {
                                g[j] += gout[j];
                            }
                        }
                        self.values[inputs[0].0] = x;
                    }
                }
                Op::Exp => {
                    if needs[inputs[0].0] {
                        let y = &self.values[i];
                        let g = &mut self.grads[inputs[0].0];
                        for j in 0..numel {
                            g[j] += gout[j] * y[j];
                        }
                    }
                }
                Op::Tanh => {
                    if needs[inputs[0].0] {
                        let y = &self.values[i];
                        let g = &mut self.grads[inputs[0].0];
                        for j in 0..numel {
                            g[j] += gout[j] * (1.0 - y[j] * y[j]);
                        }
                    }
                }
                Op::SumAxes { axes } => {
                    if needs[inputs[0].0] {
                        let in_shape = self.nodes[inputs[0].0].shape.clone();
                        let g = &mut self.grads[inputs[0].0];
                        for_each_reduced_index(&in_shape, axes, |flat, oidx| {
                            g[flat] += gout[oidx];
                        });
                    }
                }
                Op::Mean => {
                    if needs[inputs[0].0] {
                        let g = &mut self.grads[inputs[0].0];
                        let inv = gout[0] / g.len() as f64;
                        for v in g.iter_mut() {
                            *v += inv;
                        }
                    }
                }
                Op::SpatialSoftmax => {
                    if needs[inputs[0].0] {
                        let y = std::mem::take(&mut self.values[i]);
                        let (k, hw) = (self.nodes[i].shape[0], self.nodes[i].shape[1] * self.nodes[i].shape[2]);
                        let g = &mut self.grads[inputs[0].0];
                        for map in 0..k {
                            let yi = &y[map * hw..(map + 1) * hw];
                            let gi = &gout[map * hw..(map + 1) * hw];
                            let dot: f64 = (0..hw).map(|j| gi[j] * yi[j]).sum();
                            let go = &mut g[map * hw..(map + 1) * hw];
                            for j in 0..hw {
                                go[j] += yi[j] * (gi[j] - dot);
                            }
                        }
                        self.values[i] = y;
                    }
                }
                Op::GaussianRender { h, w, sigmas } => {
                    let (h, w) = (*h, *w);
                    let y = std::mem::take(&mut self.values[i]);
                    let xs = std::mem::take(&mut self.values[inputs[0].0]);
                    let ys = std::mem::take(&mut self.values[inputs[1].0]);
                    for (k, &sigma) in sigmas.iter().enumerate() {
                        let inv2 = 1.0 / (sigma * sigma);
                        let maps = &y[k * h * w..(k + 1) * h * w];
                        let gmap = &gout[k * h * w..(k + 1) * h * w];
                        let (mut gx, mut gy) = (0.0, 0.0);
                        for yy in 0..h {
                            for xx in 0..w {
                                let gv = gmap[yy * w + xx] * maps[yy * w + xx] * inv2;
                                gx += gv * (xx as f64 - xs[k]);
                                gy += gv * (yy as f64 - ys[k]);
                            }
                        }
                        if needs[inputs[0].0] {
                            self.grads[inputs[0].0][k] += gx;
                        }
                        if needs[inputs[1].0] {
                            self.grads[inputs[1].0][k] += gy;
                        }
                    }
                    self.values[inputs[1].0] = ys;
                    self.values[inputs[0].0] = xs;
                    self.values[i] = y;
                }
                Op::ConcatCh => {
                    let na = self.grads[inputs[0].0].len();
                    if needs[inputs[0].0] {
                        let g = &mut self.grads[inputs[0].0];
                        for j in 0..na {
                            g[j] += gout[j];
                        }
                    }
                    if needs[inputs[1].0] {
                        let g = &mut self.grads[inputs[1].0];
                        for j in 0..g.len() {
                            g[j] += gout[na + j];
                        }
                    }
                }
                Op::Scale { c } => {
                    if needs[inputs[0].0] {
                        let g = &mut self.grads[inputs[0].0];
                        for j in 0..numel {
                            g[j] += c * gout[j];
                        }
                    }
                }
            }
        }
        self.scratch[i] = scratch;
        self.grads[i] = gout;
    }

    // ---- gradient checking ----

    /// Central-difference check of the terminal's gradient with respect to
    /// one leaf. Coordinates whose probes straddle a ReLU kink are excluded
    /// from the verdict and counted in the report.
    pub fn grad_check(
        &mut self,
        leaf: NodeId,
        step: f64,
        tol: f64,
    ) -> Result<GradCheckReport, GraphError> {
        assert!(step > 0.0, "finite-difference step must be positive");
        match &self.nodes[leaf.0].op {
            Op::Leaf { requires_grad, .. } => {
                if !requires_grad {
                    return Err(GraphError::NoGrad { node: leaf.0 });
                }
            }
            _ => return Err(GraphError::NotALeaf { node: leaf.0 }),
        }
        self.eval_forward()?;
        self.backward()?;
        let analytic = self.grads[leaf.0].clone();

        let mut max_rel = 0.0f64;
        let mut excluded = 0usize;
        let last = self.nodes.len() - 1;
        for j in 0..analytic.len() {
            self.nudge_leaf(leaf, j, step);
            self.eval_forward()?;
            let f_plus = self.values[last][0];
            let sig_plus = self.relu_sig;
            self.nudge_leaf(leaf, j, -2.0 * step);
            self.eval_forward()?;
            let f_minus = self.values[last][0];
            let sig_minus = self.relu_sig;
            self.nudge_leaf(leaf, j, step);
            if sig_plus != sig_minus {
                excluded += 1;
                continue;
            }
            let numeric = (f_plus - f_minus) / (2.0 * step);
            let rel = (analytic[j] - numeric).abs() / (analytic[j].abs() + numeric.abs()).max(1e-6);
            max_rel = max_rel.max(rel);
        }
        let checked = analytic.len() - excluded;
        Ok(GradCheckReport { max_rel_err: max_rel, checked, excluded, pass: max_rel < tol })
    }
}

// ---- matmul kernels ----
// Row-major, accumulate into C. The axpy inner loops auto-vectorize.

/// C[M, N] += A[M, K] . B[K, N]
pub(crate) fn mm_nn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

/// C[M, N] += A[M, K] . B^T, with B stored [N, K]
fn mm_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for p in 0..k {
                acc += arow[p] * brow[p];
            }
            c[i * n + j] += acc;
        }
    }
}

/// C[M, N] += A^T . B, with A stored [K, M]
fn mm_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

// ---- convolution plumbing ----

/// Gather sliding windows of `src` `[C, H, W]` into `col` `[C*kh*kw, oh*ow]`,
/// zero-filling out-of-frame taps. Window origin of site (oy, ox) is
/// (oy*stride - pad, ox*stride - pad).
fn im2col(
    src: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    col: &mut [f64],
) {
    let sites = oh * ow;
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &mut col[((ci * kh + ky) * kw + kx) * sites..((ci * kh + ky) * kw + kx + 1) * sites];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let srow = &src[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        dst[ox] = if ix < 0 || ix >= w as isize { 0.0 } else { srow[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Scatter-add of `col` back onto `dst` `[C, H, W]`; exact adjoint of
/// [`im2col`] with the same geometry.
fn col2im_add(
    col: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    dst: &mut [f64],
) {
    let sites = oh * ow;
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &col[((ci * kh + ky) * kw + kx) * sites..((ci * kh + ky) * kw + kx + 1) * sites];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let drow = &mut dst[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    let srow = &row[oy * ow..(oy + 1) * ow];
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            drow[ix as usize] += srow[ox];
                        }
                    }
                }
            }
        }
    }
}

/// [Ci, Co, kh, kw] -> [Co*kh*kw, Ci]
fn permute_convt_kernel(w: &[f64], ci: usize, co: usize, kh: usize, kw: usize, wr: &mut [f64]) {
    for c_in in 0..ci {
        for c_out in 0..co {
            for ky in 0..kh {
                for kx in 0..kw {
                    wr[((c_out * kh + ky) * kw + kx) * ci + c_in] =
                        w[((c_in * co + c_out) * kh + ky) * kw + kx];
                }
            }
        }
    }
}

/// Walk all flat indices of `shape`, yielding each with its flat index in the
/// shape with `axes` removed.
fn for_each_reduced_index(shape: &[usize], axes: &[usize], mut f: impl FnMut(usize, usize)) {
    let rank = shape.len();
    let mut summed = vec![false; rank];
    for &a in axes {
        summed[a] = true;
    }
    // stride of every input dim within the reduced output
    let mut ostride = vec![0usize; rank];
    let mut acc = 1;
    for d in (0..rank).rev() {
        if !summed[d] {
            ostride[d] = acc;
            acc *= shape[d];
        }
    }
    let numel: usize = shape.iter().product();
    let mut midx = vec![0usize; rank];
    let mut oidx = 0usize;
    for flat in 0..numel {
        f(flat, oidx);
        for d in (0..rank).rev() {
            midx[d] += 1;
            oidx += ostride[d];
            if midx[d] < shape[d] {
                break;
            }
            oidx -= ostride[d] * shape[d];
            midx[d] = 0;
        }
    }
}
