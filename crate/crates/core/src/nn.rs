//! Building blocks shared by the encoders, the alignment module and the
//! aggregator. Spatial maps are `[h·w × c]` matrices in row-major pixel order.

use std::rc::Rc;

use sbanet_autograd::{concat, Tensor, Var};

use crate::error::{config_err, CoreError, Result};
use crate::grid;
use crate::params::{Ctx, ParamId, ParamStore};

pub const LN_EPS: f64 = 1e-5;
/// Added to the logits of padding tokens.
pub const MASK_LOGIT: f64 = -1e9;

/// A visual feature map with its spatial extent.
#[derive(Debug, Clone, Copy)]
pub struct Feat<'t> {
    pub x: Var<'t>,
    pub h: usize,
    pub w: usize,
}

impl<'t> Feat<'t> {
    pub fn new(x: Var<'t>, h: usize, w: usize) -> Result<Self> {
        let (n, _) = x.dims2()?;
        if n != h * w {
            return config_err(format!("feature map has {n} rows, expected {h}×{w}"));
        }
        Ok(Self { x, h, w })
    }

    pub fn channels(&self) -> usize {
        self.x.shape()[1]
    }

    pub fn with(&self, x: Var<'t>) -> Self {
        Self { x, h: self.h, w: self.w }
    }

    /// Resamples to `oh×ow` (pooling to shrink, bilinear to grow).
    pub fn resize(&self, oh: usize, ow: usize) -> Result<Self> {
        match grid::resize_map(self.h, self.w, oh, ow)? {
            None => Ok(*self),
            Some(map) => Ok(Self { x: self.x.resample(map)?, h: oh, w: ow }),
        }
    }
}

/// Token features `[l × d]`; rows at and beyond `valid` are padding.
#[derive(Debug, Clone, Copy)]
pub struct TextFeat<'t> {
    pub x: Var<'t>,
    pub valid: usize,
}

impl<'t> TextFeat<'t> {
    pub fn len(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.shape()[1]
    }

    pub fn with(&self, x: Var<'t>) -> Self {
        Self { x, valid: self.valid }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inp: usize,
    pub out: usize,
}

impl Linear {
    /// Weights and bias uniform in `±1/√inp`.
    pub fn new(store: &mut ParamStore, name: &str, inp: usize, out: usize) -> Self {
        let bound = 1.0 / (inp as f64).sqrt();
        let weight = store.uniform(format!("{name}.weight"), &[out, inp], bound);
        let bias = store.uniform(format!("{name}.bias"), &[out], bound);
        Self { weight, bias, inp, out }
    }

    /// `x·Wᵀ + b` for each row of `x`.
    pub fn fwd<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        Ok(x.matmul_bt(ctx.var(self.weight))?.add(ctx.var(self.bias))?)
    }
}

/// Normalization over the channel (last) axis.
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.full(format!("{name}.gamma"), &[dim], 1.0);
        let beta = store.full(format!("{name}.beta"), &[dim], 0.0);
        Self { gamma, beta, dim }
    }

    pub fn fwd<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let axis = x.shape().len() - 1;
        Ok(x.layer_norm(ctx.var(self.gamma), ctx.var(self.beta), axis, LN_EPS)?)
    }
}

/// 1×1 depth-wise convolution: a per-channel scale and bias.
#[derive(Debug, Clone, Copy)]
pub struct Depthwise {
    pub scale: ParamId,
    pub bias: ParamId,
    pub channels: usize,
}

impl Depthwise {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let scale = store.uniform(format!("{name}.scale"), &[channels], 1.0);
        let bias = store.uniform(format!("{name}.bias"), &[channels], 1.0);
        Self { scale, bias, channels }
    }

    pub fn fwd<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let c = *x.shape().last().expect("rank ≥ 1");
        if c != self.channels {
            return Err(CoreError::Tensor(sbanet_autograd::TensorError::Shape(format!(
                "depthwise over {} channels applied to {c}",
                self.channels
            ))));
        }
        Ok(x.mul(ctx.var(self.scale))?.add(ctx.var(self.bias))?)
    }
}

/// LN → linear → GeLU → linear.
#[derive(Debug, Clone, Copy)]
pub struct Mlp2 {
    pub norm: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp2 {
    pub fn new(store: &mut ParamStore, name: &str, inp: usize, hidden: usize, out: usize) -> Self {
        Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), inp),
            fc1: Linear::new(store, &format!("{name}.fc1"), inp, hidden),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, out),
        }
    }

    pub fn fwd<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.fc1.fwd(ctx, self.norm.fwd(ctx, x)?)?.gelu();
        self.fc2.fwd(ctx, h)
    }
}

/// Additive key mask: zero for the first `valid` keys, [`MASK_LOGIT`] after.
pub fn key_mask(nk: usize, valid: usize) -> Tensor {
    Tensor::from_fn(&[nk], |j| if j < valid { 0.0 } else { MASK_LOGIT })
}

/// Multi-head scaled dot-product attention. Each head attends with
/// `softmax(q_h·k_hᵀ/√scale_dim)`; keys at index ≥ `valid` are masked out.
/// Returns the concatenated head outputs and the per-head weight matrices.
pub fn attention_weights<'t>(
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    heads: usize,
    scale_dim: usize,
    valid: Option<usize>,
) -> Result<(Var<'t>, Vec<Var<'t>>)> {
    let ((nq, dk), (nk, dk2), (nv, dv)) = (q.dims2()?, k.dims2()?, v.dims2()?);
    if dk != dk2 || nk != nv {
        return Err(CoreError::Tensor(sbanet_autograd::TensorError::Shape(format!(
            "attention: q {:?}, k {:?}, v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        ))));
    }
    if heads == 0 || dk % heads != 0 || dv % heads != 0 {
        return config_err(format!("{heads} heads do not divide key width {dk} and value width {dv}"));
    }
    if scale_dim == 0 {
        return config_err("attention scale dimension must be positive");
    }
    let mask = match valid {
        Some(0) => return Err(CoreError::Contract("attention over zero valid keys".into())),
        Some(n) if n < nk => Some(q.tape().constant(key_mask(nk, n))),
        _ => None,
    };
    let inv = 1.0 / (scale_dim as f64).sqrt();
    let (hk, hv) = (dk / heads, dv / heads);
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (q.slice_cols(h * hk, (h + 1) * hk)?, k.slice_cols(h * hk, (h + 1) * hk)?, v.slice_cols(h * hv, (h + 1) * hv)?)
        };
        let mut logits = qh.matmul_bt(kh)?.scale(inv);
        if let Some(m) = mask {
            logits = logits.add(m)?;
        }
        let p = logits.softmax(1)?;
        outs.push(p.matmul(vh)?);
        weights.push(p);
    }
    debug_assert_eq!(outs[0].shape()[0], nq);
    let out = if heads == 1 { outs[0] } else { concat(&outs, 1)? };
    Ok((out, weights))
}

pub fn attention<'t>(
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    heads: usize,
    scale_dim: usize,
    valid: Option<usize>,
) -> Result<Var<'t>> {
    attention_weights(q, k, v, heads, scale_dim, valid).map(|(o, _)| o)
}

/// Adaptive average pooling of `f` into `g×g` bins for each `g` in `group`.
pub fn pyramid_pool<'t>(f: &Feat<'t>, group: &[usize]) -> Result<Vec<Feat<'t>>> {
    group
        .iter()
        .map(|&g| {
            if g == 0 || g > f.h.min(f.w) {
                return config_err(format!("pyramid bin count {g} exceeds the {}×{} map", f.h, f.w));
            }
            if g == f.h && g == f.w {
                return Ok(*f);
            }
            Ok(Feat { x: f.x.resample(grid::pool_map(f.h, f.w, g, g)?)?, h: g, w: g })
        })
        .collect()
}

pub fn upsample_bilinear<'t>(f: &Feat<'t>, oh: usize, ow: usize) -> Result<Feat<'t>> {
    if oh == f.h && ow == f.w {
        return Ok(*f);
    }
    Ok(Feat { x: f.x.resample(grid::bilinear_map(f.h, f.w, oh, ow)?)?, h: oh, w: ow })
}

/// Pixel-word alignment: visual positions attend over valid text tokens and
/// the result modulates a projection of the visual features.
#[derive(Debug, Clone, Copy)]
pub struct Pwam {
    pub query: Linear,
    pub query_norm: LayerNorm,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub out_norm: LayerNorm,
    pub visual: Linear,
    pub fuse: Linear,
    pub heads: usize,
}

impl Pwam {
    pub fn new(store: &mut ParamStore, name: &str, c: usize, d: usize, heads: usize) -> Self {
        Self {
            query: Linear::new(store, &format!("{name}.query"), c, c),
            query_norm: LayerNorm::new(store, &format!("{name}.query_norm"), c),
            key: Linear::new(store, &format!("{name}.key"), d, c),
            value: Linear::new(store, &format!("{name}.value"), d, c),
            out: Linear::new(store, &format!("{name}.out"), c, c),
            out_norm: LayerNorm::new(store, &format!("{name}.out_norm"), c),
            visual: Linear::new(store, &format!("{name}.visual"), c, c),
            fuse: Linear::new(store, &format!("{name}.fuse"), c, c),
            heads,
        }
    }

    /// Language features attended at every position, before the fusion.
    pub fn attend<'t>(&self, ctx: &Ctx<'t>, v: Var<'t>, text: &TextFeat<'t>) -> Result<Var<'t>> {
        if text.valid == 0 {
            return Err(CoreError::Contract("pixel-word alignment needs at least one valid token".into()));
        }
        let c = self.query.out;
        let q = self.query_norm.fwd(ctx, self.query.fwd(ctx, v)?)?;
        let k = self.key.fwd(ctx, text.x)?;
        let val = self.value.fwd(ctx, text.x)?;
        attention(q, k, val, self.heads, c / self.heads.max(1), Some(text.valid))
    }

    pub fn fwd<'t>(&self, ctx: &Ctx<'t>, v: Var<'t>, text: &TextFeat<'t>) -> Result<Var<'t>> {
        let a = self.attend(ctx, v, text)?;
        let a = self.out_norm.fwd(ctx, self.out.fwd(ctx, a)?)?;
        let vp = self.visual.fwd(ctx, v)?.gelu();
        Ok(self.fuse.fwd(ctx, vp.mul(a)?)?.relu())
    }
}

/// `tanh(W₂·relu(W₁·y)) ⊙ y`
#[derive(Debug, Clone, Copy)]
pub struct Gate {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Gate {
    pub fn new(store: &mut ParamStore, name: &str, c: usize) -> Self {
        Self { fc1: Linear::new(store, &format!("{name}.fc1"), c, c), fc2: Linear::new(store, &format!("{name}.fc2"), c, c) }
    }

    pub fn fwd<'t>(&self, ctx: &Ctx<'t>, y: Var<'t>) -> Result<Var<'t>> {
        let g = self.fc2.fwd(ctx, self.fc1.fwd(ctx, y)?.relu())?.tanh();
        Ok(g.mul(y)?)
    }
}

/// Column mean of the first `n` rows of a matrix, as `[1 × c]`.
pub fn mean_rows<'t>(x: Var<'t>, n: usize) -> Result<Var<'t>> {
    let (r, _) = x.dims2()?;
    if n == 0 || n > r {
        return Err(CoreError::Contract(format!("mean over {n} of {r} rows")));
    }
    let w = x.tape().constant(Tensor::full(&[1, n], 1.0 / n as f64));
    let rows = if n == r { x } else { x.slice_rows(0, n)? };
    Ok(w.matmul(rows)?)
}

/// Gathers `x[index]` for a fixed index list; shared helper for layout maps.
pub fn gather_rows<'t>(x: Var<'t>, rows: &[usize]) -> Result<Var<'t>> {
    let (_, c) = x.dims2()?;
    let index: Rc<[usize]> = rows.iter().flat_map(|&r| r * c..(r + 1) * c).collect();
    Ok(x.gather(&[rows.len(), c], index)?)
}
