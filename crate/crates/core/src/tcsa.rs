//! Text-conditioned channel and spatial aggregation across the four stages.
//!
//! Every stage is normalized, resampled to a common grid and concatenated
//! with broadcast text guidance into `F_C` (`[m × c_c]`). Channel attention
//! mixes each stage's channels against the channels of `F_C`; spatial
//! attention then mixes positions with multi-head weights computed from
//! `F_C`. Both add their output back at the stage's native resolution.

use std::ops::Range;

use sbanet_autograd::{concat, Tensor, Var};

use crate::error::{config_err, CoreError, Result};
use crate::nn::{attention_weights, mean_rows, Depthwise, Feat, LayerNorm, Mlp2, TextFeat};
use crate::params::{Ctx, ParamStore};

#[derive(Debug, Clone, PartialEq)]
pub struct TcsaSpec {
    pub channels: Vec<usize>,
    pub text_dim: usize,
    pub guidance: usize,
    pub heads: usize,
    /// Common grid side lengths.
    pub grid: (usize, usize),
    pub channel: bool,
    pub spatial: bool,
    pub text: bool,
}

impl TcsaSpec {
    pub fn concat_width(&self) -> usize {
        self.channels.iter().sum::<usize>() + self.guidance
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ChannelAttn {
    pub query: Depthwise,
    pub key: Depthwise,
    pub value: Depthwise,
    pub post: Depthwise,
}

#[derive(Debug, Clone, Copy)]
pub struct SpatialAttn {
    pub query: Depthwise,
    pub key: Depthwise,
    pub value: Depthwise,
    pub post: Depthwise,
}

/// `F_C` with the channel range each source occupies.
#[derive(Debug, Clone)]
pub struct ConcatFeatures<'t> {
    pub fc: Var<'t>,
    pub grid: (usize, usize),
    /// Normalized stages on the grid, `[m × c_i]`.
    pub blocks: Vec<Var<'t>>,
    /// Stage ranges in order, then the guidance range.
    pub ranges: Vec<Range<usize>>,
}

/// Channel ranges of the stages and the guidance block inside `F_C`.
pub fn provenance(channels: &[usize], guidance: usize) -> Vec<Range<usize>> {
    let mut start = 0;
    let mut out = Vec::with_capacity(channels.len() + 1);
    for &c in channels.iter().chain(std::iter::once(&guidance)) {
        out.push(start..start + c);
        start += c;
    }
    out
}

#[derive(Debug, Clone)]
pub struct Tcsa {
    pub spec: TcsaSpec,
    pub recap: Mlp2,
    pub norms: Vec<LayerNorm>,
    pub chan: Vec<ChannelAttn>,
    pub spat: Vec<SpatialAttn>,
}

impl Tcsa {
    pub fn new(store: &mut ParamStore, spec: &TcsaSpec) -> Result<Self> {
        let cc = spec.concat_width();
        if spec.heads == 0 || !cc.is_multiple_of(spec.heads) {
            return config_err(format!("{} heads do not divide the concatenated width {cc}", spec.heads));
        }
        if let Some(c) = spec.channels.iter().find(|&&c| c % spec.heads != 0) {
            return config_err(format!("{} heads do not divide stage width {c}", spec.heads));
        }
        let recap = Mlp2::new(store, "tcsa.recap", spec.text_dim, spec.guidance, spec.guidance);
        let norms =
            spec.channels.iter().enumerate().map(|(i, &c)| LayerNorm::new(store, &format!("tcsa.norm{}", i + 1), c)).collect();
        let dw = |store: &mut ParamStore, kind: &str, i: usize, part: &str, c: usize| {
            Depthwise::new(store, &format!("tcsa.{kind}{}.{part}", i + 1), c)
        };
        let mut chan = Vec::new();
        let mut spat = Vec::new();
        for (i, &c) in spec.channels.iter().enumerate() {
            if spec.channel {
                chan.push(ChannelAttn {
                    query: dw(store, "channel", i, "query", c),
                    key: dw(store, "channel", i, "key", cc),
                    value: dw(store, "channel", i, "value", cc),
                    post: dw(store, "channel", i, "post", c),
                });
            }
        }
        for (i, &c) in spec.channels.iter().enumerate() {
            if spec.spatial {
                spat.push(SpatialAttn {
                    query: dw(store, "spatial", i, "query", cc),
                    key: dw(store, "spatial", i, "key", cc),
                    value: dw(store, "spatial", i, "value", c),
                    post: dw(store, "spatial", i, "post", c),
                });
            }
        }
        Ok(Self { spec: spec.clone(), recap, norms, chan, spat })
    }

    /// Mean of the valid tokens mapped to the guidance width, `[1 × d_g]`.
    pub fn recap_text<'t>(&self, ctx: &Ctx<'t>, text: &TextFeat<'t>) -> Result<Var<'t>> {
        if text.valid == 0 {
            return Err(CoreError::Contract("text recap needs at least one valid token".into()));
        }
        self.recap.fwd(ctx, mean_rows(text.x, text.valid)?)
    }

    /// Guidance used in `F_C`: the recap, or zeros with text disabled.
    pub fn guidance<'t>(&self, ctx: &Ctx<'t>, text: &TextFeat<'t>) -> Result<Var<'t>> {
        if self.spec.text {
            self.recap_text(ctx, text)
        } else {
            Ok(ctx.constant(Tensor::zeros(&[1, self.spec.guidance])))
        }
    }

    pub fn build_concat<'t>(&self, ctx: &Ctx<'t>, stages: &[Feat<'t>], guidance: Var<'t>) -> Result<ConcatFeatures<'t>> {
        let (gh, gw) = self.spec.grid;
        if stages.len() != self.spec.channels.len() {
            return config_err(format!("aggregator expects {} stages, got {}", self.spec.channels.len(), stages.len()));
        }
        if let Some(finest) = stages.first() {
            if gh > finest.h || gw > finest.w {
                return config_err(format!("common grid {gh}×{gw} exceeds the finest stage {}×{}", finest.h, finest.w));
            }
        }
        let mut blocks = Vec::with_capacity(stages.len());
        for (s, norm) in stages.iter().zip(&self.norms) {
            if s.channels() != norm.dim {
                return config_err(format!("stage has {} channels, expected {}", s.channels(), norm.dim));
            }
            let x = s.with(norm.fwd(ctx, s.x)?);
            blocks.push(x.resize(gh, gw)?.x);
        }
        let mut parts = blocks.clone();
        parts.push(guidance.broadcast_rows(gh * gw)?);
        let fc = concat(&parts, 1)?;
        Ok(ConcatFeatures { fc, grid: (gh, gw), blocks, ranges: provenance(&self.spec.channels, self.spec.guidance) })
    }

    /// Channel attention output on the grid for stage `i`, before the
    /// residual, together with the `[c_i × c_c]` weights.
    pub fn channel_delta<'t>(&self, ctx: &Ctx<'t>, i: usize, stage: Var<'t>, fc: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let a = self.chan.get(i).ok_or_else(|| CoreError::Config("channel attention is disabled".into()))?;
        let (m, _) = stage.dims2()?;
        let (mc, cc) = fc.dims2()?;
        if m != mc {
            return Err(CoreError::Tensor(sbanet_autograd::TensorError::Shape(format!(
                "stage has {m} positions, concatenated features {mc}"
            ))));
        }
        let q = a.query.fwd(ctx, stage)?;
        let k = a.key.fwd(ctx, fc)?;
        let v = a.value.fwd(ctx, fc)?;
        let p = q.matmul_at(k)?.scale(1.0 / (cc as f64).sqrt()).softmax(1)?;
        let out = v.matmul_bt(p)?;
        Ok((a.post.fwd(ctx, out)?, p))
    }

    /// Spatial attention output on the grid for stage `i`, before the
    /// residual, together with the per-head `[m × m]` weights.
    pub fn spatial_delta<'t>(&self, ctx: &Ctx<'t>, i: usize, stage: Var<'t>, fc: Var<'t>) -> Result<(Var<'t>, Vec<Var<'t>>)> {
        let a = self.spat.get(i).ok_or_else(|| CoreError::Config("spatial attention is disabled".into()))?;
        let (_, cc) = fc.dims2()?;
        let q = a.query.fwd(ctx, fc)?;
        let k = a.key.fwd(ctx, fc)?;
        let v = a.value.fwd(ctx, stage)?;
        let heads = self.spec.heads;
        let (out, w) = attention_weights(q, k, v, heads, cc / heads, None)?;
        Ok((a.post.fwd(ctx, out)?, w))
    }

    fn add_back<'t>(stage: &Feat<'t>, delta: Var<'t>, grid: (usize, usize)) -> Result<Feat<'t>> {
        let d = Feat { x: delta, h: grid.0, w: grid.1 }.resize(stage.h, stage.w)?;
        Ok(stage.with(stage.x.add(d.x)?))
    }

    /// Enhanced stages at their native resolutions.
    pub fn fwd<'t>(&self, ctx: &Ctx<'t>, stages: &[Feat<'t>], text: &TextFeat<'t>) -> Result<Vec<Feat<'t>>> {
        let mut out = stages.to_vec();
        if !self.spec.channel && !self.spec.spatial {
            return Ok(out);
        }
        let guidance = self.guidance(ctx, text)?;
        let mut cat = self.build_concat(ctx, &out, guidance)?;
        if self.spec.channel {
            for (i, f) in out.iter_mut().enumerate() {
                let (delta, _) = self.channel_delta(ctx, i, cat.blocks[i], cat.fc)?;
                *f = Self::add_back(f, delta, cat.grid)?;
            }
            if self.spec.spatial {
                cat = self.build_concat(ctx, &out, guidance)?;
            }
        }
        if self.spec.spatial {
            for (i, f) in out.iter_mut().enumerate() {
                let (delta, _) = self.spatial_delta(ctx, i, cat.blocks[i], cat.fc)?;
                *f = Self::add_back(f, delta, cat.grid)?;
            }
        }
        Ok(out)
    }
}
