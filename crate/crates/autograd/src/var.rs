use std::rc::Rc;

use crate::error::{shape_err, Result, TensorError};
use crate::kernels::{self, axis_extents};
use crate::tape::{GradTape, Op, ResampleMap};
use crate::tensor::{check_shape, Tensor};

/// Handle to a value recorded on a [`GradTape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t GradTape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// `true` when `short` (ignoring leading unit dims) equals the trailing dims of `long`.
fn is_trailing(short: &[usize], long: &[usize]) -> bool {
    let first = short.iter().position(|&d| d != 1).unwrap_or(short.len());
    let short = &short[first..];
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

impl<'t> Var<'t> {
    pub(crate) fn new(tape: &'t GradTape, id: usize) -> Self {
        Self { tape, id }
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t GradTape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes()[self.id].shape.clone()
    }

    pub fn len(&self) -> usize {
        self.tape.nodes()[self.id].value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rows and columns of a rank-2 value.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape()[..] {
            [r, c] => Ok((r, c)),
            ref s => Err(shape_err(format!("expected a matrix, got shape {s:?}"))),
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.tape.nodes()[self.id].value.clone()
    }

    pub fn value(&self) -> Tensor {
        let nodes = self.tape.nodes();
        let n = &nodes[self.id];
        Tensor::new(&n.shape, n.value.clone()).expect("recorded shapes are valid")
    }

    /// First element; the value of a scalar.
    pub fn item(&self) -> f64 {
        self.tape.nodes()[self.id].value[0]
    }

    fn check_tape(&self, other: &Var<'_>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(TensorError::Usage("operands live on different tapes".into()))
        }
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let (shape, value) = {
            let nodes = self.tape.nodes();
            let n = &nodes[self.id];
            (n.shape.clone(), n.value.iter().map(|&x| f(x)).collect())
        };
        self.tape.push(shape, value, op, &[self.id])
    }

    fn binary(&self, other: Var<'t>, kind: &str, f: impl Fn(f64, f64) -> f64) -> Result<Var<'t>> {
        self.check_tape(&other)?;
        let (shape, value) = {
            let nodes = self.tape.nodes();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            let shape = if a.shape == b.shape || is_trailing(&b.shape, &a.shape) {
                a.shape.clone()
            } else if is_trailing(&a.shape, &b.shape) {
                b.shape.clone()
            } else {
                return Err(shape_err(format!(
                    "{kind}: cannot broadcast {:?} with {:?}",
                    a.shape, b.shape
                )));
            };
            let n: usize = shape.iter().product();
            let (la, lb) = (a.value.len(), b.value.len());
            let value = (0..n).map(|i| f(a.value[i % la], b.value[i % lb])).collect();
            (shape, value)
        };
        let (a, b) = (self.id, other.id);
        let op = match kind {
            "add" => Op::Add { a, b },
            "sub" => Op::Sub { a, b },
            _ => Op::Mul { a, b },
        };
        Ok(self.tape.push(shape, value, op, &[a, b]))
    }

    /// Elementwise sum; the smaller operand is broadcast over leading dims.
    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |x, y| x + y)
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |x, y| x - y)
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |x, y| x * y)
    }

    pub fn scale(&self, factor: f64) -> Var<'t> {
        self.unary(Op::Scale { a: self.id, factor }, |x| factor * x)
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(Op::Relu { a: self.id }, |x| if x > 0.0 { x } else { 0.0 })
    }

    /// Tanh-approximation GeLU (see [`kernels::GELU_SQRT_2_OVER_PI`]).
    pub fn gelu(&self) -> Var<'t> {
        self.unary(Op::Gelu { a: self.id }, kernels::gelu)
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(Op::Tanh { a: self.id }, f64::tanh)
    }

    /// `[m,k] · [k,n]`
    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.check_tape(&other)?;
        let (sa, sb) = (self.shape(), other.shape());
        let (m, k, n) = match (&sa[..], &sb[..]) {
            (&[m, k], &[k2, n]) if k == k2 => (m, k, n),
            _ => return Err(shape_err(format!("matmul: {sa:?} × {sb:?}"))),
        };
        let mut out = vec![0.0; m * n];
        {
            let nodes = self.tape.nodes();
            kernels::matmul_acc(&nodes[self.id].value, &nodes[other.id].value, &mut out, m, k, n);
        }
        Ok(self.tape.push(vec![m, n], out, Op::MatMul { a: self.id, b: other.id, m, k, n }, &[self.id, other.id]))
    }

    /// `[m,k] · [n,k]ᵀ`
    pub fn matmul_bt(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.check_tape(&other)?;
        let (sa, sb) = (self.shape(), other.shape());
        let (m, k, n) = match (&sa[..], &sb[..]) {
            (&[m, k], &[n, k2]) if k == k2 => (m, k, n),
            _ => return Err(shape_err(format!("matmul_bt: {sa:?} × {sb:?}ᵀ"))),
        };
        let mut out = vec![0.0; m * n];
        {
            let nodes = self.tape.nodes();
            kernels::matmul_bt_acc(&nodes[self.id].value, &nodes[other.id].value, &mut out, m, k, n);
        }
        Ok(self.tape.push(vec![m, n], out, Op::MatMulBt { a: self.id, b: other.id, m, k, n }, &[self.id, other.id]))
    }

    /// `[k,m]ᵀ · [k,n]`
    pub fn matmul_at(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.check_tape(&other)?;
        let (sa, sb) = (self.shape(), other.shape());
        let (m, k, n) = match (&sa[..], &sb[..]) {
            (&[k, m], &[k2, n]) if k == k2 => (m, k, n),
            _ => return Err(shape_err(format!("matmul_at: {sa:?}ᵀ × {sb:?}"))),
        };
        let mut out = vec![0.0; m * n];
        {
            let nodes = self.tape.nodes();
            kernels::matmul_at_acc(&nodes[self.id].value, &nodes[other.id].value, &mut out, m, k, n);
        }
        Ok(self.tape.push(vec![m, n], out, Op::MatMulAt { a: self.id, b: other.id, m, k, n }, &[self.id, other.id]))
    }

    fn axis_check(&self, axis: usize) -> Result<(usize, usize, usize)> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(shape_err(format!("axis {axis} out of range for shape {shape:?}")));
        }
        Ok(axis_extents(&shape, axis))
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Var<'t>> {
        let (outer, len, inner) = self.axis_check(axis)?;
        let value = kernels::softmax_forward(&self.tape.nodes()[self.id].value, outer, len, inner);
        Ok(self.tape.push(self.shape(), value, Op::Softmax { a: self.id, outer, len, inner }, &[self.id]))
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Var<'t>> {
        let (outer, len, inner) = self.axis_check(axis)?;
        let value = kernels::log_softmax_forward(&self.tape.nodes()[self.id].value, outer, len, inner);
        Ok(self.tape.push(self.shape(), value, Op::LogSoftmax { a: self.id, outer, len, inner }, &[self.id]))
    }

    /// Normalizes each slice along `axis` to zero mean and unit (biased)
    /// variance, then applies `gamma`/`beta` indexed by position along `axis`.
    pub fn layer_norm(&self, gamma: Var<'t>, beta: Var<'t>, axis: usize, eps: f64) -> Result<Var<'t>> {
        self.check_tape(&gamma)?;
        self.check_tape(&beta)?;
        let (outer, len, inner) = self.axis_check(axis)?;
        if gamma.len() != len || beta.len() != len {
            return Err(shape_err(format!(
                "layer_norm: gamma/beta lengths {}/{} for axis of size {len}",
                gamma.len(),
                beta.len()
            )));
        }
        if eps <= 0.0 {
            return Err(TensorError::Contract(format!("layer_norm eps must be positive, got {eps}")));
        }
        let (out, xhat, inv_std) = {
            let nodes = self.tape.nodes();
            let x = &nodes[self.id].value;
            let (g, b) = (&nodes[gamma.id].value, &nodes[beta.id].value);
            let mut out = vec![0.0; x.len()];
            let mut xhat = vec![0.0; x.len()];
            let mut inv_std = vec![0.0; outer * inner];
            let nf = len as f64;
            for o in 0..outer {
                for r in 0..inner {
                    let at = |t: usize| o * len * inner + t * inner + r;
                    let mean = (0..len).map(|t| x[at(t)]).sum::<f64>() / nf;
                    let var = (0..len).map(|t| (x[at(t)] - mean).powi(2)).sum::<f64>() / nf;
                    let is = 1.0 / (var + eps).sqrt();
                    inv_std[o * inner + r] = is;
                    for t in 0..len {
                        let h = (x[at(t)] - mean) * is;
                        xhat[at(t)] = h;
                        out[at(t)] = h * g[t] + b[t];
                    }
                }
            }
            (out, xhat, inv_std)
        };
        let op = Op::LayerNorm { x: self.id, gamma: gamma.id, beta: beta.id, outer, len, inner, xhat, inv_std };
        Ok(self.tape.push(self.shape(), out, op, &[self.id, gamma.id, beta.id]))
    }

    pub fn sum(&self) -> Var<'t> {
        let s = self.tape.nodes()[self.id].value.iter().sum();
        self.tape.push(vec![1], vec![s], Op::Sum { a: self.id }, &[self.id])
    }

    pub fn mean(&self) -> Var<'t> {
        let s = {
            let nodes = self.tape.nodes();
            let v = &nodes[self.id].value;
            v.iter().sum::<f64>() / v.len() as f64
        };
        self.tape.push(vec![1], vec![s], Op::Mean { a: self.id }, &[self.id])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let n = check_shape(shape)?;
        if n != self.len() {
            return Err(shape_err(format!("cannot reshape {:?} into {shape:?}", self.shape())));
        }
        let value = self.to_vec();
        Ok(self.tape.push(shape.to_vec(), value, Op::Reshape { a: self.id }, &[self.id]))
    }

    /// `out[i] = self[index[i]]` over the flat buffers, reshaped to `shape`.
    pub fn gather(&self, shape: &[usize], index: Rc<[usize]>) -> Result<Var<'t>> {
        let n = check_shape(shape)?;
        if n != index.len() {
            return Err(shape_err(format!("gather: {} indices for shape {shape:?}", index.len())));
        }
        let value = {
            let nodes = self.tape.nodes();
            let src = &nodes[self.id].value;
            if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
                return Err(shape_err(format!("gather index {bad} out of range {}", src.len())));
            }
            index.iter().map(|&i| src[i]).collect()
        };
        Ok(self.tape.push(shape.to_vec(), value, Op::Gather { a: self.id, index }, &[self.id]))
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let (r, c) = self.dims2()?;
        let index: Rc<[usize]> = (0..r * c).map(|i| (i % r) * c + i / r).collect();
        self.gather(&[c, r], index)
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Var<'t>> {
        let (r, c) = self.dims2()?;
        if start >= end || end > r {
            return Err(shape_err(format!("row slice {start}..{end} of {r} rows")));
        }
        let index: Rc<[usize]> = (start * c..end * c).collect();
        self.gather(&[end - start, c], index)
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Var<'t>> {
        let (r, c) = self.dims2()?;
        if start >= end || end > c {
            return Err(shape_err(format!("column slice {start}..{end} of {c} columns")));
        }
        let w = end - start;
        let index: Rc<[usize]> = (0..r * w).map(|i| (i / w) * c + start + i % w).collect();
        self.gather(&[r, w], index)
    }

    /// Repeats a vector (any shape with `n` values) as `rows` identical rows.
    pub fn broadcast_rows(&self, rows: usize) -> Result<Var<'t>> {
        let n = self.len();
        let index: Rc<[usize]> = (0..rows * n).map(|i| i % n).collect();
        self.gather(&[rows, n], index)
    }

    /// Applies a sparse linear map over the rows of `[in_len × channels]`.
    pub fn resample(&self, map: Rc<ResampleMap>) -> Result<Var<'t>> {
        let (r, c) = self.dims2()?;
        if r != map.in_len {
            return Err(shape_err(format!("resample expects {} rows, got {r}", map.in_len)));
        }
        let out_len = map.out_len();
        check_shape(&[out_len])?;
        let value = {
            let nodes = self.tape.nodes();
            let x = &nodes[self.id].value;
            let mut out = vec![0.0; out_len * c];
            for (o, row) in map.rows.iter().enumerate() {
                let orow = &mut out[o * c..(o + 1) * c];
                for &(i, w) in row {
                    for (ov, xv) in orow.iter_mut().zip(&x[i * c..(i + 1) * c]) {
                        *ov += w * xv;
                    }
                }
            }
            out
        };
        Ok(self.tape.push(vec![out_len, c], value, Op::Resample { a: self.id, map, channels: c }, &[self.id]))
    }
}

/// Concatenates along `axis`; all other dims must agree.
pub fn concat<'t>(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
    let first = parts.first().ok_or_else(|| shape_err("concat of zero tensors"))?;
    let tape = first.tape;
    let base = first.shape();
    if axis >= base.len() {
        return Err(shape_err(format!("concat axis {axis} out of range for {base:?}")));
    }
    let outer: usize = base[..axis].iter().product();
    let inner: usize = base[axis + 1..].iter().product();
    let mut widths = Vec::with_capacity(parts.len());
    let mut axis_total = 0;
    for p in parts {
        first.check_tape(p)?;
        let s = p.shape();
        if s.len() != base.len() || s[..axis] != base[..axis] || s[axis + 1..] != base[axis + 1..] {
            return Err(shape_err(format!("concat: {s:?} incompatible with {base:?} on axis {axis}")));
        }
        widths.push(s[axis] * inner);
        axis_total += s[axis];
    }
    let total: usize = widths.iter().sum();
    let value = {
        let nodes = tape.nodes();
        let mut out = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&nodes[p.id].value[o * w..(o + 1) * w]);
            }
        }
        out
    };
    let mut shape = base.clone();
    shape[axis] = axis_total;
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    Ok(tape.push(shape, value, Op::Concat { parts: ids.clone(), outer, widths }, &ids))
}
