//! Wengert tape: every primitive appends a node; `backward` replays the list
//! in reverse, which is a reverse topological order by construction.

use std::cell::{Cell, Ref, RefCell};
use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::kernels::{self, matmul_acc, matmul_at_acc, matmul_bt_acc};
use crate::tensor::Tensor;
use crate::var::Var;

/// Sparse linear map over the leading (position) axis of a `[positions × channels]`
/// tensor. Row `o` lists `(input position, weight)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct ResampleMap {
    pub in_len: usize,
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl ResampleMap {
    pub fn out_len(&self) -> usize {
        self.rows.len()
    }
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    MatMulBt { a: usize, b: usize, m: usize, k: usize, n: usize },
    MatMulAt { a: usize, b: usize, m: usize, k: usize, n: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, factor: f64 },
    Relu { a: usize },
    Gelu { a: usize },
    Tanh { a: usize },
    Softmax { a: usize, outer: usize, len: usize, inner: usize },
    LogSoftmax { a: usize, outer: usize, len: usize, inner: usize },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        outer: usize,
        len: usize,
        inner: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Sum { a: usize },
    Mean { a: usize },
    Reshape { a: usize },
    Gather { a: usize, index: Rc<[usize]> },
    Concat { parts: Vec<usize>, outer: usize, widths: Vec<usize> },
    Resample { a: usize, map: Rc<ResampleMap>, channels: usize },
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::MatMulBt { .. } => "matmul_bt",
            Op::MatMulAt { .. } => "matmul_at",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Relu { .. } => "relu",
            Op::Gelu { .. } => "gelu",
            Op::Tanh { .. } => "tanh",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Reshape { .. } => "reshape",
            Op::Gather { .. } => "gather",
            Op::Concat { .. } => "concat",
            Op::Resample { .. } => "resample",
        }
    }
}

/// Names of every differentiable primitive, in a fixed order.
pub const PRIMITIVES: &[&str] = &[
    "matmul",
    "matmul_bt",
    "matmul_at",
    "add",
    "sub",
    "mul",
    "scale",
    "relu",
    "gelu",
    "tanh",
    "softmax",
    "log_softmax",
    "layer_norm",
    "sum",
    "mean",
    "reshape",
    "gather",
    "concat",
    "resample",
];

pub(crate) struct Node {
    pub(crate) shape: Vec<usize>,
    pub(crate) value: Vec<f64>,
    pub(crate) op: Op,
    pub(crate) needs_grad: bool,
    pub(crate) is_param: bool,
}

/// Records primitive operations for one forward pass and replays them once
/// in reverse to produce gradients.
pub struct GradTape {
    pub(crate) nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
    seed: u64,
    fault: Cell<Option<&'static str>>,
}

impl Default for GradTape {
    fn default() -> Self {
        Self::new()
    }
}

impl GradTape {
    pub fn new() -> Self {
        Self::with_seed(0)
    }

    pub fn with_seed(seed: u64) -> Self {
        Self { nodes: RefCell::new(Vec::new()), consumed: Cell::new(false), seed, fault: Cell::new(None) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of recorded (non-leaf) operations.
    pub fn op_count(&self) -> usize {
        self.nodes.borrow().iter().filter(|n| !matches!(n.op, Op::Leaf)).count()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.borrow().len()
    }

    /// Negates the backward rule of the named primitive. Test fixture for
    /// checking that gradient checks detect a broken rule.
    pub fn inject_sign_flip(&self, primitive: &str) -> Result<()> {
        let name = PRIMITIVES
            .iter()
            .find(|p| **p == primitive)
            .ok_or_else(|| TensorError::Usage(format!("unknown primitive {primitive:?}")))?;
        self.fault.set(Some(name));
        Ok(())
    }

    /// Leaf that takes part in differentiation iff `t.requires_grad()`.
    pub fn leaf(&self, t: &Tensor) -> Var<'_> {
        self.push_leaf(t.shape().to_vec(), t.values().to_vec(), t.requires_grad())
    }

    /// Leaf that always receives a gradient.
    pub fn param(&self, t: &Tensor) -> Var<'_> {
        self.push_leaf(t.shape().to_vec(), t.values().to_vec(), true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        let shape = t.shape().to_vec();
        self.push_leaf(shape, t.into_values(), false)
    }

    fn push_leaf(&self, shape: Vec<usize>, value: Vec<f64>, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { shape, value, op: Op::Leaf, needs_grad, is_param: needs_grad });
        Var::new(self, nodes.len() - 1)
    }

    pub(crate) fn push(&self, shape: Vec<usize>, value: Vec<f64>, op: Op, inputs: &[usize]) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = inputs.iter().any(|&i| nodes[i].needs_grad);
        nodes.push(Node { shape, value, op, needs_grad, is_param: false });
        Var::new(self, nodes.len() - 1)
    }

    pub(crate) fn nodes(&self) -> Ref<'_, Vec<Node>> {
        self.nodes.borrow()
    }

    /// Reverse-mode sweep from a scalar `loss`. Every gradient-requiring leaf
    /// receives a buffer; leaves the loss does not depend on get exact zeros.
    /// A tape may be swept once.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape(), self) {
            return Err(TensorError::Contract("loss was recorded on a different tape".into()));
        }
        if self.consumed.get() {
            return Err(TensorError::Usage("backward already ran on this tape".into()));
        }
        let nodes = self.nodes.borrow();
        let root = loss.id();
        if nodes[root].value.len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[root].shape
            )));
        }
        self.consumed.set(true);

        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[root].needs_grad {
            grads[root] = Some(vec![1.0]);
        }
        let fault = self.fault.get();
        for id in (0..=root).rev() {
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) || !node.needs_grad {
                continue;
            }
            let Some(mut g) = grads[id].take() else { continue };
            if fault == Some(node.op.name()) {
                g.iter_mut().for_each(|v| *v = -*v);
            }
            propagate(&nodes, id, &g, &mut grads);
            // Non-leaf buffers are no longer needed once propagated.
        }

        let mut out: Vec<Option<Vec<f64>>> = Vec::with_capacity(nodes.len());
        for (id, node) in nodes.iter().enumerate() {
            if node.is_param {
                out.push(Some(grads[id].take().unwrap_or_else(|| vec![0.0; node.value.len()])));
            } else {
                out.push(None);
            }
        }
        Ok(Gradients { grads: out })
    }
}

/// Gradients of a scalar loss with respect to the leaves of one tape.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient for a gradient-requiring leaf, `None` for anything else.
    pub fn wrt(&self, v: Var<'_>) -> Option<&[f64]> {
        self.grads.get(v.id()).and_then(|g| g.as_deref())
    }

    /// Writes the gradient into the tensor's grad slot (zeros when the leaf did
    /// not reach the loss).
    pub fn write_into(&self, v: Var<'_>, t: &mut Tensor) -> Result<()> {
        let g = self
            .wrt(v)
            .ok_or_else(|| TensorError::Contract("variable is not a gradient-requiring leaf".into()))?;
        t.set_grad(g.to_vec())
    }
}

fn acc(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

/// Accumulates `src`, broadcast cyclically, into the gradient of a possibly
/// smaller operand.
fn acc_broadcast(dst: &mut [f64], src: &[f64], sign: f64) {
    let n = dst.len();
    if n == src.len() {
        for (d, s) in dst.iter_mut().zip(src) {
            *d += sign * s;
        }
    } else {
        for (i, s) in src.iter().enumerate() {
            dst[i % n] += sign * s;
        }
    }
}

fn propagate(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let len_of = |i: usize| nodes[i].value.len();
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul { a, b, m, k, n } => {
            if nodes[a].needs_grad {
                // da = g · bᵀ
                let da = acc(&mut grads[a], m * k);
                matmul_bt_acc(g, &nodes[b].value, da, m, n, k);
            }
            if nodes[b].needs_grad {
                // db = aᵀ · g
                let db = acc(&mut grads[b], k * n);
                matmul_at_acc(&nodes[a].value, g, db, k, m, n);
            }
        }
        &Op::MatMulBt { a, b, m, k, n } => {
            if nodes[a].needs_grad {
                // da = g · b
                let da = acc(&mut grads[a], m * k);
                matmul_acc(g, &nodes[b].value, da, m, n, k);
            }
            if nodes[b].needs_grad {
                // db = gᵀ · a
                let db = acc(&mut grads[b], n * k);
                matmul_at_acc(g, &nodes[a].value, db, n, m, k);
            }
        }
        &Op::MatMulAt { a, b, m, k, n } => {
            if nodes[a].needs_grad {
                // a is [k, m]; da = b · gᵀ
                let da = acc(&mut grads[a], k * m);
                matmul_bt_acc(&nodes[b].value, g, da, k, n, m);
            }
            if nodes[b].needs_grad {
                // db = a · g
                let db = acc(&mut grads[b], k * n);
                matmul_acc(&nodes[a].value, g, db, k, m, n);
            }
        }
        &Op::Add { a, b } | &Op::Sub { a, b } => {
            let sign_b = if matches!(node.op, Op::Sub { .. }) { -1.0 } else { 1.0 };
            if nodes[a].needs_grad {
                acc_broadcast(acc(&mut grads[a], len_of(a)), g, 1.0);
            }
            if nodes[b].needs_grad {
                acc_broadcast(acc(&mut grads[b], len_of(b)), g, sign_b);
            }
        }
        &Op::Mul { a, b } => {
            let (va, vb) = (&nodes[a].value, &nodes[b].value);
            let n = g.len();
            if nodes[a].needs_grad {
                let lb = vb.len();
                let prod: Vec<f64> = (0..n).map(|i| g[i] * vb[i % lb]).collect();
                acc_broadcast(acc(&mut grads[a], va.len()), &prod, 1.0);
            }
            if nodes[b].needs_grad {
                let la = va.len();
                let prod: Vec<f64> = (0..n).map(|i| g[i] * va[i % la]).collect();
                acc_broadcast(acc(&mut grads[b], vb.len()), &prod, 1.0);
            }
        }
        &Op::Scale { a, factor } => {
            if nodes[a].needs_grad {
                let da = acc(&mut grads[a], len_of(a));
                for (d, gv) in da.iter_mut().zip(g) {
                    *d += factor * gv;
                }
            }
        }
        &Op::Relu { a } => {
            if nodes[a].needs_grad {
                let x = &nodes[a].value;
                let da = acc(&mut grads[a], x.len());
                for i in 0..x.len() {
                    if x[i] > 0.0 {
                        da[i] += g[i];
                    }
                }
            }
        }
        &Op::Gelu { a } => {
            if nodes[a].needs_grad {
                let x = &nodes[a].value;
                let da = acc(&mut grads[a], x.len());
                for i in 0..x.len() {
                    da[i] += g[i] * kernels::gelu_grad(x[i]);
                }
            }
        }
        &Op::Tanh { a } => {
            if nodes[a].needs_grad {
                let y = &node.value;
                let da = acc(&mut grads[a], y.len());
                for i in 0..y.len() {
                    da[i] += g[i] * (1.0 - y[i] * y[i]);
                }
            }
        }
        &Op::Softmax { a, outer, len, inner } => {
            if nodes[a].needs_grad {
                let y = &node.value;
                let da = acc(&mut grads[a], y.len());
                for o in 0..outer {
                    for r in 0..inner {
                        let at = |t: usize| o * len * inner + t * inner + r;
                        let dot: f64 = (0..len).map(|t| g[at(t)] * y[at(t)]).sum();
                        for t in 0..len {
                            da[at(t)] += y[at(t)] * (g[at(t)] - dot);
                        }
                    }
                }
            }
        }
        &Op::LogSoftmax { a, outer, len, inner } => {
            if nodes[a].needs_grad {
                let y = &node.value;
                let da = acc(&mut grads[a], y.len());
                for o in 0..outer {
                    for r in 0..inner {
                        let at = |t: usize| o * len * inner + t * inner + r;
                        let gsum: f64 = (0..len).map(|t| g[at(t)]).sum();
                        for t in 0..len {
                            da[at(t)] += g[at(t)] - y[at(t)].exp() * gsum;
                        }
                    }
                }
            }
        }
        Op::LayerNorm { x, gamma, beta, outer, len, inner, xhat, inv_std } => {
            let (x, gamma, beta, outer, len, inner) = (*x, *gamma, *beta, *outer, *len, *inner);
            let gam = &nodes[gamma].value;
            if nodes[gamma].needs_grad {
                let dg = acc(&mut grads[gamma], len);
                for (i, (gv, xh)) in g.iter().zip(xhat).enumerate() {
                    dg[(i / inner) % len] += gv * xh;
                }
            }
            if nodes[beta].needs_grad {
                let db = acc(&mut grads[beta], len);
                for (i, gv) in g.iter().enumerate() {
                    db[(i / inner) % len] += gv;
                }
            }
            if nodes[x].needs_grad {
                let dx = acc(&mut grads[x], g.len());
                let nf = len as f64;
                let mut dxhat = vec![0.0; len];
                for o in 0..outer {
                    for r in 0..inner {
                        let at = |t: usize| o * len * inner + t * inner + r;
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for t in 0..len {
                            dxhat[t] = g[at(t)] * gam[t];
                            s1 += dxhat[t];
                            s2 += dxhat[t] * xhat[at(t)];
                        }
                        let is = inv_std[o * inner + r];
                        for t in 0..len {
                            dx[at(t)] += is / nf * (nf * dxhat[t] - s1 - xhat[at(t)] * s2);
                        }
                    }
                }
            }
        }
        &Op::Sum { a } => {
            if nodes[a].needs_grad {
                let da = acc(&mut grads[a], len_of(a));
                da.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        &Op::Mean { a } => {
            if nodes[a].needs_grad {
                let n = len_of(a);
                let da = acc(&mut grads[a], n);
                let s = g[0] / n as f64;
                da.iter_mut().for_each(|d| *d += s);
            }
        }
        &Op::Reshape { a } => {
            if nodes[a].needs_grad {
                let da = acc(&mut grads[a], len_of(a));
                for (d, gv) in da.iter_mut().zip(g) {
                    *d += gv;
                }
            }
        }
        Op::Gather { a, index } => {
            let a = *a;
            if nodes[a].needs_grad {
                let da = acc(&mut grads[a], len_of(a));
                for (gv, &src) in g.iter().zip(index.iter()) {
                    da[src] += gv;
                }
            }
        }
        Op::Concat { parts, outer, widths } => {
            let total: usize = widths.iter().sum();
            let mut offset = 0;
            for (&p, &w) in parts.iter().zip(widths) {
                if nodes[p].needs_grad {
                    let dp = acc(&mut grads[p], outer * w);
                    for o in 0..*outer {
                        let src = &g[o * total + offset..o * total + offset + w];
                        for (d, s) in dp[o * w..(o + 1) * w].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                offset += w;
            }
        }
        Op::Resample { a, map, channels } => {
            let (a, c) = (*a, *channels);
            if nodes[a].needs_grad {
                let da = acc(&mut grads[a], map.in_len * c);
                for (o, row) in map.rows.iter().enumerate() {
                    let grow = &g[o * c..(o + 1) * c];
                    for &(i, w) in row {
                        for (d, gv) in da[i * c..(i + 1) * c].iter_mut().zip(grow) {
                            *d += w * gv;
                        }
                    }
                }
            }
        }
    }
}
