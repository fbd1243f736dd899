//! Define-by-run reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every operation applied to its nodes in insertion
//! order, so inputs always precede the nodes that consume them. After the
//! forward pass a single scalar node is handed to [`Graph::backward`], which
//! walks the tape in reverse and fills in `grad` on every node that requires
//! one. A graph can be differentiated once; build a fresh one per forward pass.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} does not hold {len} values")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("{op} expects {expected} input(s), got {got}")]
    Arity {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward requested before any forward pass")]
    NoForward,
    #[error("graph was already consumed by a backward pass")]
    Consumed,
    #[error("node {0} does not belong to this graph")]
    UnknownNode(usize),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Dense row-major array of reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) || shape.iter().product::<usize>() != values.len() {
            return Err(AutodiffError::InvalidShape {
                shape,
                len: values.len(),
            });
        }
        Ok(Self {
            shape,
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n]).expect("zeros: dimensions must be positive")
    }

    pub fn scalar(value: f64) -> Self {
        Self::new(vec![1], vec![value]).expect("scalar shape is valid")
    }

    /// Marks the tensor as a trainable leaf.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.values.len() == 1
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Gathers rows (first-axis slices) in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let row_len: usize = self.shape[1..].iter().product();
        let mut values = Vec::with_capacity(rows.len() * row_len);
        for &r in rows {
            values.extend_from_slice(&self.values[r * row_len..(r + 1) * row_len]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Self::new(shape, values).expect("row selection keeps row length")
    }
}

/// Handle to a node inside a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds understood by [`Graph::apply`].
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    /// `[m,k] x [k,n] -> [m,n]`
    MatMul,
    /// Elementwise add of equal shapes, or a rank-1 bias added across the last axis.
    Add,
    Sub,
    /// Elementwise product of equal shapes.
    Mul,
    Relu,
    Tanh,
    /// NHWC input `[n,h,w,cin]`, kernel `[3,3,cin,cout]`, stride 1, zero same-padding.
    Conv2d3x3,
    /// 2x2 max pooling with stride 2 over NHWC; odd trailing rows/columns are dropped.
    MaxPool2x2,
    /// Mean over all entries, producing a scalar.
    Mean,
    /// Mean softmax cross-entropy of `[b,k]` logits against integer labels.
    SoftmaxCrossEntropy(Vec<usize>),
    MulScalar(f64),
    AddScalar(f64),
    Reshape(Vec<usize>),
    Log,
    Exp,
    Square,
    Clamp { lo: f64, hi: f64 },
    /// Elementwise minimum of equal shapes; ties route the gradient to the first input.
    Minimum,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Relu => "relu",
            Op::Tanh => "tanh",
            Op::Conv2d3x3 => "conv2d_3x3",
            Op::MaxPool2x2 => "maxpool_2x2",
            Op::Mean => "mean",
            Op::SoftmaxCrossEntropy(_) => "softmax_cross_entropy",
            Op::MulScalar(_) => "mul_scalar",
            Op::AddScalar(_) => "add_scalar",
            Op::Reshape(_) => "reshape",
            Op::Log => "log",
            Op::Exp => "exp",
            Op::Square => "square",
            Op::Clamp { .. } => "clamp",
            Op::Minimum => "minimum",
        }
    }

    fn arity(&self) -> usize {
        match self {
            Op::MatMul | Op::Add | Op::Sub | Op::Mul | Op::Conv2d3x3 | Op::Minimum => 2,
            _ => 1,
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Option<Op>,
    inputs: Vec<NodeId>,
    value: Tensor,
    // Forward-pass byproducts needed by backward (softmax probabilities, pool argmax).
    saved: Vec<f64>,
    saved_idx: Vec<usize>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts a leaf. Gradients are tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Result<NodeId> {
        if self.consumed {
            return Err(AutodiffError::Consumed);
        }
        if !tensor.is_finite() {
            return Err(AutodiffError::NonFinite("input"));
        }
        let mut value = tensor;
        value.grad = None;
        Ok(self.push(None, Vec::new(), value, Vec::new(), Vec::new()))
    }

    /// Inserts a leaf that never receives a gradient.
    pub fn constant(&mut self, mut tensor: Tensor) -> Result<NodeId> {
        tensor.requires_grad = false;
        self.leaf(tensor)
    }

    pub fn tensor(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value.values
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].value.shape
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].value.grad.as_deref()
    }

    fn push(
        &mut self,
        op: Option<Op>,
        inputs: Vec<NodeId>,
        value: Tensor,
        saved: Vec<f64>,
        saved_idx: Vec<usize>,
    ) -> NodeId {
        self.nodes.push(Node {
            op,
            inputs,
            value,
            saved,
            saved_idx,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn check(&self, id: NodeId) -> Result<&Tensor> {
        self.nodes
            .get(id.0)
            .map(|n| &n.value)
            .ok_or(AutodiffError::UnknownNode(id.0))
    }

    /// Applies `op` to `inputs` and appends the result to the tape.
    pub fn apply(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        if self.consumed {
            return Err(AutodiffError::Consumed);
        }
        if inputs.len() != op.arity() {
            return Err(AutodiffError::Arity {
                op: op.name(),
                expected: op.arity(),
                got: inputs.len(),
            });
        }
        for &id in inputs {
            self.check(id)?;
        }
        let a = &self.nodes[inputs[0].0].value;
        let b = inputs.get(1).map(|id| &self.nodes[id.0].value);
        let requires_grad = a.requires_grad || b.is_some_and(|b| b.requires_grad);
        let (shape, values, saved, saved_idx) = forward(&op, a, b)?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(AutodiffError::NonFinite(op.name()));
        }
        let mut value = Tensor::new(shape, values)?;
        value.requires_grad = requires_grad;
        Ok(self.push(Some(op), inputs.to_vec(), value, saved, saved_idx))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::MatMul, &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Mul, &[a, b])
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Relu, &[x])
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Tanh, &[x])
    }

    pub fn conv2d_3x3(&mut self, x: NodeId, kernel: NodeId) -> Result<NodeId> {
        self.apply(Op::Conv2d3x3, &[x, kernel])
    }

    pub fn maxpool_2x2(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::MaxPool2x2, &[x])
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Mean, &[x])
    }

    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        self.apply(Op::SoftmaxCrossEntropy(labels.to_vec()), &[logits])
    }

    pub fn mul_scalar(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.apply(Op::MulScalar(c), &[x])
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.apply(Op::AddScalar(c), &[x])
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        self.apply(Op::Reshape(shape), &[x])
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Log, &[x])
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Exp, &[x])
    }

    pub fn square(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Square, &[x])
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        self.apply(Op::Clamp { lo, hi }, &[x])
    }

    pub fn minimum(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Minimum, &[a, b])
    }

    /// Back-propagates from the scalar `loss`, populating `grad` on every
    /// node that requires one. Consumes the graph.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.consumed {
            return Err(AutodiffError::Consumed);
        }
        if self.nodes.is_empty() {
            return Err(AutodiffError::NoForward);
        }
        let loss_tensor = self.check(loss)?;
        if !loss_tensor.is_scalar() {
            return Err(AutodiffError::NonScalarLoss(loss_tensor.shape.clone()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if let Some(op) = &node.op {
                if node.value.requires_grad {
                    backward_op(op, node, &self.nodes, &g, &mut grads);
                }
            }
            grads[idx] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if node.value.requires_grad {
                node.value.grad = Some(g.unwrap_or_else(|| vec![0.0; node.value.len()]));
            }
        }
        Ok(())
    }
}

type Forward = (Vec<usize>, Vec<f64>, Vec<f64>, Vec<usize>);

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(AutodiffError::ShapeMismatch {
            op,
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    Ok(())
}

fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Forward {
    (
        a.shape.clone(),
        a.values.iter().map(|&x| f(x)).collect(),
        Vec::new(),
        Vec::new(),
    )
}

fn nhwc(op: &'static str, t: &Tensor) -> Result<[usize; 4]> {
    match t.shape[..] {
        [n, h, w, c] => Ok([n, h, w, c]),
        _ => Err(AutodiffError::ShapeMismatch {
            op,
            lhs: t.shape.clone(),
            rhs: vec![],
        }),
    }
}

fn forward(op: &Op, a: &Tensor, b: Option<&Tensor>) -> Result<Forward> {
    let none = (Vec::new(), Vec::new());
    Ok(match op {
        Op::MatMul => {
            let b = b.expect("arity checked");
            let (m, k, n) = match (&a.shape[..], &b.shape[..]) {
                ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
                _ => {
                    return Err(AutodiffError::ShapeMismatch {
                        op: "matmul",
                        lhs: a.shape.clone(),
                        rhs: b.shape.clone(),
                    })
                }
            };
            (vec![m, n], matmul(&a.values, &b.values, m, k, n), none.0, none.1)
        }
        Op::Add => {
            let b = b.expect("arity checked");
            if a.shape == b.shape {
                let v = a.values.iter().zip(&b.values).map(|(x, y)| x + y).collect();
                (a.shape.clone(), v, none.0, none.1)
            } else if a.shape.len() >= 2 && b.shape.len() == 1 && a.shape.last() == b.shape.first()
            {
                let n = b.values.len();
                let v = a
                    .values
                    .iter()
                    .enumerate()
                    .map(|(i, x)| x + b.values[i % n])
                    .collect();
                (a.shape.clone(), v, none.0, none.1)
            } else {
                return Err(AutodiffError::ShapeMismatch {
                    op: "add",
                    lhs: a.shape.clone(),
                    rhs: b.shape.clone(),
                });
            }
        }
        Op::Sub => {
            let b = b.expect("arity checked");
            same_shape("sub", a, b)?;
            let v = a.values.iter().zip(&b.values).map(|(x, y)| x - y).collect();
            (a.shape.clone(), v, none.0, none.1)
        }
        Op::Mul => {
            let b = b.expect("arity checked");
            same_shape("mul", a, b)?;
            let v = a.values.iter().zip(&b.values).map(|(x, y)| x * y).collect();
            (a.shape.clone(), v, none.0, none.1)
        }
        Op::Minimum => {
            let b = b.expect("arity checked");
            same_shape("minimum", a, b)?;
            let v = a.values.iter().zip(&b.values).map(|(x, y)| x.min(*y)).collect();
            (a.shape.clone(), v, none.0, none.1)
        }
        Op::Relu => map(a, |x| x.max(0.0)),
        Op::Tanh => map(a, f64::tanh),
        Op::Log => map(a, f64::ln),
        Op::Exp => map(a, f64::exp),
        Op::Square => map(a, |x| x * x),
        Op::MulScalar(c) => map(a, |x| x * c),
        Op::AddScalar(c) => map(a, |x| x + c),
        Op::Clamp { lo, hi } => map(a, |x| x.clamp(*lo, *hi)),
        Op::Mean => {
            let mean = a.values.iter().sum::<f64>() / a.values.len() as f64;
            (vec![1], vec![mean], none.0, none.1)
        }
        Op::Reshape(shape) => {
            if shape.contains(&0) || shape.iter().product::<usize>() != a.len() {
                return Err(AutodiffError::ShapeMismatch {
                    op: "reshape",
                    lhs: a.shape.clone(),
                    rhs: shape.clone(),
                });
            }
            (shape.clone(), a.values.clone(), none.0, none.1)
        }
        Op::SoftmaxCrossEntropy(labels) => {
            let (rows, k) = match a.shape[..] {
                [r, k] if r == labels.len() => (r, k),
                _ => {
                    return Err(AutodiffError::ShapeMismatch {
                        op: "softmax_cross_entropy",
                        lhs: a.shape.clone(),
                        rhs: vec![labels.len()],
                    })
                }
            };
            let mut probs = Vec::with_capacity(a.len());
            let mut total = 0.0;
            for (row, &label) in a.values.chunks(k).zip(labels) {
                if label >= k {
                    return Err(AutodiffError::LabelOutOfRange { label, classes: k });
                }
                let lse = log_sum_exp(row);
                total += lse - row[label];
                probs.extend(row.iter().map(|&z| (z - lse).exp()));
            }
            (vec![1], vec![total / rows as f64], probs, none.1)
        }
        Op::Conv2d3x3 => {
            let b = b.expect("arity checked");
            let [n, h, w, cin] = nhwc("conv2d_3x3", a)?;
            let cout = match b.shape[..] {
                [3, 3, c, co] if c == cin => co,
                _ => {
                    return Err(AutodiffError::ShapeMismatch {
                        op: "conv2d_3x3",
                        lhs: a.shape.clone(),
                        rhs: b.shape.clone(),
                    })
                }
            };
            let mut out = vec![0.0; n * h * w * cout];
            for_each_tap(n, h, w, |o, i, tap| {
                let x = &a.values[i * cin..(i + 1) * cin];
                let y = &mut out[o * cout..(o + 1) * cout];
                for (ci, &xv) in x.iter().enumerate() {
                    let krow = &b.values[(tap * cin + ci) * cout..(tap * cin + ci + 1) * cout];
                    for (yv, &kv) in y.iter_mut().zip(krow) {
                        *yv += xv * kv;
                    }
                }
            });
            (vec![n, h, w, cout], out, none.0, none.1)
        }
        Op::MaxPool2x2 => {
            let [n, h, w, c] = nhwc("maxpool_2x2", a)?;
            let (oh, ow) = (h / 2, w / 2);
            if oh == 0 || ow == 0 {
                return Err(AutodiffError::ShapeMismatch {
                    op: "maxpool_2x2",
                    lhs: a.shape.clone(),
                    rhs: vec![2, 2],
                });
            }
            let mut out = Vec::with_capacity(n * oh * ow * c);
            let mut arg = Vec::with_capacity(n * oh * ow * c);
            for b in 0..n {
                for y in 0..oh {
                    for x in 0..ow {
                        for ch in 0..c {
                            let mut best = usize::MAX;
                            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                let i = ((b * h + 2 * y + dy) * w + 2 * x + dx) * c + ch;
                                if best == usize::MAX || a.values[i] > a.values[best] {
                                    best = i;
                                }
                            }
                            out.push(a.values[best]);
                            arg.push(best);
                        }
                    }
                }
            }
            (vec![n, oh, ow, c], out, none.0, arg)
        }
    })
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln()
}

fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Calls `f(out_pixel, in_pixel, tap)` for every in-bounds 3x3 neighbour,
/// where pixels are flat `(n, y, x)` indices and `tap = ky * 3 + kx`.
fn for_each_tap(n: usize, h: usize, w: usize, mut f: impl FnMut(usize, usize, usize)) {
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let o = (b * h + y) * w + x;
                for ky in 0..3 {
                    let iy = y as isize + ky as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = x as isize + kx as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let i = (b * h + iy as usize) * w + ix as usize;
                        f(o, i, ky * 3 + kx);
                    }
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: NodeId, delta: Vec<f64>) {
    if !nodes[id.0].value.requires_grad {
        return;
    }
    match &mut grads[id.0] {
        Some(g) => g.iter_mut().zip(delta).for_each(|(g, d)| *g += d),
        slot @ None => *slot = Some(delta),
    }
}

fn backward_op(op: &Op, node: &Node, nodes: &[Node], g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let a_id = node.inputs[0];
    let a = &nodes[a_id.0].value;
    let b_id = node.inputs.get(1).copied();
    let out = &node.value.values;
    let elementwise = |f: &dyn Fn(usize) -> f64| -> Vec<f64> { (0..g.len()).map(|i| g[i] * f(i)).collect() };
    match op {
        Op::MatMul => {
            let b_id = b_id.expect("binary op");
            let b = &nodes[b_id.0].value;
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
            if a.requires_grad {
                // dA = G · Bᵀ
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for p in 0..k {
                        let brow = &b.values[p * n..(p + 1) * n];
                        da[i * k + p] = g[i * n..(i + 1) * n].iter().zip(brow).map(|(x, y)| x * y).sum();
                    }
                }
                accumulate(grads, nodes, a_id, da);
            }
            if b.requires_grad {
                // dB = Aᵀ · G
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let av = a.values[i * k + p];
                        for (d, &gv) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                            *d += av * gv;
                        }
                    }
                }
                accumulate(grads, nodes, b_id, db);
            }
        }
        Op::Add => {
            let b_id = b_id.expect("binary op");
            let b = &nodes[b_id.0].value;
            accumulate(grads, nodes, a_id, g.to_vec());
            if b.shape == a.shape {
                accumulate(grads, nodes, b_id, g.to_vec());
            } else {
                let n = b.len();
                let mut db = vec![0.0; n];
                for (i, &gv) in g.iter().enumerate() {
                    db[i % n] += gv;
                }
                accumulate(grads, nodes, b_id, db);
            }
        }
        Op::Sub => {
            let b_id = b_id.expect("binary op");
            accumulate(grads, nodes, a_id, g.to_vec());
            accumulate(grads, nodes, b_id, g.iter().map(|x| -x).collect());
        }
        Op::Mul => {
            let b_id = b_id.expect("binary op");
            let b = &nodes[b_id.0].value;
            accumulate(grads, nodes, a_id, elementwise(&|i| b.values[i]));
            accumulate(grads, nodes, b_id, elementwise(&|i| a.values[i]));
        }
        Op::Minimum => {
            let b_id = b_id.expect("binary op");
            let b = &nodes[b_id.0].value;
            let first = |i: usize| a.values[i] <= b.values[i];
            accumulate(grads, nodes, a_id, elementwise(&|i| if first(i) { 1.0 } else { 0.0 }));
            accumulate(grads, nodes, b_id, elementwise(&|i| if first(i) { 0.0 } else { 1.0 }));
        }
        Op::Relu => {
            let d = elementwise(&|i| if a.values[i] > 0.0 { 1.0 } else { 0.0 });
            accumulate(grads, nodes, a_id, d);
        }
        Op::Tanh => accumulate(grads, nodes, a_id, elementwise(&|i| 1.0 - out[i] * out[i])),
        Op::Log => accumulate(grads, nodes, a_id, elementwise(&|i| 1.0 / a.values[i])),
        Op::Exp => accumulate(grads, nodes, a_id, elementwise(&|i| out[i])),
        Op::Square => accumulate(grads, nodes, a_id, elementwise(&|i| 2.0 * a.values[i])),
        Op::MulScalar(c) => accumulate(grads, nodes, a_id, elementwise(&|_| *c)),
        Op::AddScalar(_) | Op::Reshape(_) => accumulate(grads, nodes, a_id, g.to_vec()),
        Op::Clamp { lo, hi } => {
            let d = elementwise(&|i| {
                let x = a.values[i];
                if x >= *lo && x <= *hi {
                    1.0
                } else {
                    0.0
                }
            });
            accumulate(grads, nodes, a_id, d);
        }
        Op::Mean => {
            let scale = g[0] / a.len() as f64;
            accumulate(grads, nodes, a_id, vec![scale; a.len()]);
        }
        Op::SoftmaxCrossEntropy(labels) => {
            let k = a.shape[1];
            let scale = g[0] / labels.len() as f64;
            let mut d: Vec<f64> = node.saved.iter().map(|p| p * scale).collect();
            for (r, &label) in labels.iter().enumerate() {
                d[r * k + label] -= scale;
            }
            accumulate(grads, nodes, a_id, d);
        }
        Op::Conv2d3x3 => {
            let b_id = b_id.expect("binary op");
            let kernel = &nodes[b_id.0].value;
            let [n, h, w, cin] = [a.shape[0], a.shape[1], a.shape[2], a.shape[3]];
            let cout = kernel.shape[3];
            let mut dx = vec![0.0; a.len()];
            let mut dk = vec![0.0; kernel.len()];
            for_each_tap(n, h, w, |o, i, tap| {
                let gy = &g[o * cout..(o + 1) * cout];
                for ci in 0..cin {
                    let kbase = (tap * cin + ci) * cout;
                    let krow = &kernel.values[kbase..kbase + cout];
                    dx[i * cin + ci] += gy.iter().zip(krow).map(|(x, y)| x * y).sum::<f64>();
                    let xv = a.values[i * cin + ci];
                    for (d, &gv) in dk[kbase..kbase + cout].iter_mut().zip(gy) {
                        *d += xv * gv;
                    }
                }
            });
            accumulate(grads, nodes, a_id, dx);
            accumulate(grads, nodes, b_id, dk);
        }
        Op::MaxPool2x2 => {
            let mut dx = vec![0.0; a.len()];
            for (&src, &gv) in node.saved_idx.iter().zip(g) {
                dx[src] += gv;
            }
            accumulate(grads, nodes, a_id, dx);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul_returns_input() {
        let mut g = Graph::new();
        let eye = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let x = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0])).unwrap();
        let y = g.matmul(eye, x).unwrap();
        assert_eq!(g.value(y), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(g.shape(y), &[2, 3]);
    }

    #[test]
    fn relu_clips_negatives() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[-1.0, 0.0, 2.0])).unwrap();
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn uniform_logits_give_log_k() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 3], &[0.0, 0.0, 0.0])).unwrap();
        let y = g.softmax_cross_entropy(x, &[1]).unwrap();
        assert!((g.value(y)[0] - 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn square_gradient_at_three() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0).with_grad()).unwrap();
        let y = g.square(x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn mean_relu_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[-1.0, 2.0]).with_grad()).unwrap();
        let r = g.relu(x).unwrap();
        let m = g.mean(r).unwrap();
        g.backward(m).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 0.5]);
    }

    #[test]
    fn pure_additions_give_unit_gradients() {
        let mut g = Graph::new();
        let leaves: Vec<_> = (0..5)
            .map(|i| g.leaf(Tensor::scalar(i as f64).with_grad()).unwrap())
            .collect();
        let mut acc = leaves[0];
        for &l in &leaves[1..] {
            acc = g.add(acc, l).unwrap();
        }
        g.backward(acc).unwrap();
        for &l in &leaves {
            assert_eq!(g.grad(l).unwrap(), &[1.0]);
        }
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![2, 3])).unwrap();
        let b = g.constant(Tensor::zeros(vec![2, 3])).unwrap();
        let err = g.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("[2, 3] vs [2, 3]"));
    }

    #[test]
    fn non_finite_input_rejected() {
        let mut g = Graph::new();
        let err = g.leaf(t(&[2], &[1.0, f64::NAN])).unwrap_err();
        assert_eq!(err, AutodiffError::NonFinite("input"));
        let x = g.constant(t(&[1], &[0.0])).unwrap();
        assert_eq!(g.log(x).unwrap_err(), AutodiffError::NonFinite("log"));
    }

    #[test]
    fn backward_preconditions() {
        let mut g = Graph::new();
        let fake = {
            let mut other = Graph::new();
            other.constant(Tensor::scalar(1.0)).unwrap()
        };
        assert_eq!(g.backward(fake).unwrap_err(), AutodiffError::NoForward);

        let x = g.leaf(t(&[2], &[1.0, 2.0]).with_grad()).unwrap();
        let y = g.square(x).unwrap();
        assert!(matches!(g.backward(y), Err(AutodiffError::NonScalarLoss(_))));
        let m = g.mean(y).unwrap();
        g.backward(m).unwrap();
        assert_eq!(g.backward(m).unwrap_err(), AutodiffError::Consumed);
        assert_eq!(g.square(x).unwrap_err(), AutodiffError::Consumed);
    }

    #[test]
    fn bias_broadcasts_across_rows_only() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).with_grad()).unwrap();
        let b = g.leaf(t(&[2], &[10.0, 20.0]).with_grad()).unwrap();
        let y = g.add(x, b).unwrap();
        assert_eq!(g.value(y), &[11.0, 22.0, 13.0, 24.0]);
        let m = g.mean(y).unwrap();
        g.backward(m).unwrap();
        assert_eq!(g.grad(b).unwrap(), &[0.5, 0.5]);

        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(vec![2, 2])).unwrap();
        let c = g.constant(Tensor::zeros(vec![3])).unwrap();
        assert!(g.add(x, c).is_err());
    }

    #[test]
    fn conv_with_center_tap_is_pointwise() {
        let mut kernel = vec![0.0; 9];
        kernel[4] = 2.0;
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2, 2, 1], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let k = g.constant(t(&[3, 3, 1, 1], &kernel)).unwrap();
        let y = g.conv2d_3x3(x, k).unwrap();
        assert_eq!(g.value(y), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn conv_same_padding_sums_neighbours() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 3, 3, 1], vec![1.0; 9]).unwrap()).unwrap();
        let k = g.constant(Tensor::new(vec![3, 3, 1, 1], vec![1.0; 9]).unwrap()).unwrap();
        let y = g.conv2d_3x3(x, k).unwrap();
        assert_eq!(g.value(y), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn maxpool_picks_window_max() {
        let mut g = Graph::new();
        let x = g
            .constant(t(&[1, 2, 4, 1], &[1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 7.0, 1.0]))
            .unwrap();
        let y = g.maxpool_2x2(x).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 2, 1]);
        assert_eq!(g.value(y), &[5.0, 7.0]);
    }

    #[test]
    fn gradient_shapes_match_tensors() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![3, 4], vec![0.1; 12]).unwrap().with_grad()).unwrap();
        let w = g.leaf(Tensor::new(vec![4, 2], vec![0.2; 8]).unwrap().with_grad()).unwrap();
        let y = g.matmul(x, w).unwrap();
        let l = g.softmax_cross_entropy(y, &[0, 1, 1]).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().len(), 12);
        assert_eq!(g.grad(w).unwrap().len(), 8);
    }
}
