//! Small randomly initialized stand-ins for the hierarchical image encoder
//! and the sentence encoder.

use std::rc::Rc;

use sbanet_autograd::{Tensor, Var};

use crate::error::{config_err, CoreError, Result};
use crate::grid::space_to_depth_index;
use crate::nn::{attention, Feat, LayerNorm, Linear, Mlp2, TextFeat};
use crate::params::{Ctx, ParamId, ParamStore};

pub const STAGES: usize = 4;

/// Four stages: normalized patch embedding at stride `s`, then normalized
/// 2×2 patch merging. Each stage ends with a residual channel-mixing block.
#[derive(Debug, Clone)]
pub struct VisualEncoder {
    pub stride: usize,
    pub channels: [usize; STAGES],
    pub embed: Linear,
    pub embed_norm: LayerNorm,
    pub merge_norms: Vec<LayerNorm>,
    pub merges: Vec<Linear>,
    pub mix: Vec<Mlp2>,
}

/// `[C, 2C, 4C, 8C]`
pub fn channel_plan(base: usize) -> [usize; STAGES] {
    [base, 2 * base, 4 * base, 8 * base]
}

impl VisualEncoder {
    pub fn new(store: &mut ParamStore, stride: usize, base: usize) -> Self {
        let channels = channel_plan(base);
        let embed = Linear::new(store, "visual.embed", stride * stride * 3, channels[0]);
        let embed_norm = LayerNorm::new(store, "visual.embed_norm", channels[0]);
        let merge_norms = (1..STAGES)
            .map(|i| LayerNorm::new(store, &format!("visual.merge{}.norm", i + 1), 4 * channels[i - 1]))
            .collect();
        let merges = (1..STAGES)
            .map(|i| Linear::new(store, &format!("visual.merge{}", i + 1), 4 * channels[i - 1], channels[i]))
            .collect();
        let mix = (0..STAGES)
            .map(|i| Mlp2::new(store, &format!("visual.mix{}", i + 1), channels[i], channels[i], channels[i]))
            .collect();
        Self { stride, channels, embed, embed_norm, merge_norms, merges, mix }
    }

    /// Side lengths must be multiples of this.
    pub fn required_multiple(&self) -> usize {
        self.stride << (STAGES - 1)
    }

    pub fn check_image(&self, h: usize, w: usize) -> Result<()> {
        let m = self.required_multiple();
        if h == 0 || w == 0 || !h.is_multiple_of(m) || !w.is_multiple_of(m) {
            return config_err(format!("image {h}×{w} must have sides divisible by {m}"));
        }
        Ok(())
    }

    /// Stage `i` (0-based). Stage 0 takes the `[H·W × 3]` image.
    pub fn stage<'t>(&self, ctx: &Ctx<'t>, i: usize, input: &Feat<'t>) -> Result<Feat<'t>> {
        let s = if i == 0 { self.stride } else { 2 };
        let c = input.channels();
        if !input.h.is_multiple_of(s) || !input.w.is_multiple_of(s) {
            return config_err(format!("stage {} input {}×{} not divisible by {s}", i + 1, input.h, input.w));
        }
        let (oh, ow) = (input.h / s, input.w / s);
        let patches = input.x.gather(&[oh * ow, s * s * c], space_to_depth_index(input.h, input.w, c, s))?;
        let x = if i == 0 {
            self.embed_norm.fwd(ctx, self.embed.fwd(ctx, patches)?)?
        } else {
            self.merges[i - 1].fwd(ctx, self.merge_norms[i - 1].fwd(ctx, patches)?)?
        };
        let x = x.add(self.mix[i].fwd(ctx, x)?)?;
        Ok(Feat { x, h: oh, w: ow })
    }

    /// All four stages without any cross-modal interaction.
    pub fn encode<'t>(&self, ctx: &Ctx<'t>, image: &Feat<'t>) -> Result<Vec<Feat<'t>>> {
        self.check_image(image.h, image.w)?;
        let mut out: Vec<Feat<'t>> = Vec::with_capacity(STAGES);
        for i in 0..STAGES {
            let f = self.stage(ctx, i, out.last().unwrap_or(image))?;
            out.push(f);
        }
        Ok(out)
    }
}

/// Token embedding, learned positions and one pre-norm transformer block.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub vocab: usize,
    pub max_len: usize,
    pub dim: usize,
    pub embed: ParamId,
    pub pos: ParamId,
    pub norm: LayerNorm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub mlp: Mlp2,
}

impl TextEncoder {
    pub fn new(store: &mut ParamStore, vocab: usize, max_len: usize, dim: usize) -> Self {
        let embed = store.uniform("text.embed", &[vocab, dim], 1.0);
        let pos = store.uniform("text.pos", &[max_len, dim], 1.0 / (dim as f64).sqrt());
        Self {
            vocab,
            max_len,
            dim,
            embed,
            pos,
            norm: LayerNorm::new(store, "text.norm", dim),
            query: Linear::new(store, "text.query", dim, dim),
            key: Linear::new(store, "text.key", dim, dim),
            value: Linear::new(store, "text.value", dim, dim),
            out: Linear::new(store, "text.out", dim, dim),
            mlp: Mlp2::new(store, "text.mlp", dim, dim, dim),
        }
    }

    /// Encodes `ids` (padded with id 0 up to the maximum length) of which the
    /// first `valid` are real tokens.
    pub fn encode<'t>(&self, ctx: &Ctx<'t>, ids: &[usize], valid: usize) -> Result<TextFeat<'t>> {
        if valid == 0 {
            return Err(CoreError::Contract("cannot encode an empty token sequence".into()));
        }
        if valid > self.max_len || ids.len() > self.max_len || valid > ids.len() {
            return config_err(format!(
                "token sequence of {} ids ({valid} valid) exceeds the maximum length {}",
                ids.len(),
                self.max_len
            ));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= self.vocab) {
            return Err(CoreError::Data(format!("token id {bad} outside vocabulary of {}", self.vocab)));
        }
        let (l, d) = (self.max_len, self.dim);
        let index: Rc<[usize]> =
            (0..l).map(|t| ids.get(t).copied().unwrap_or(0)).flat_map(|id| id * d..(id + 1) * d).collect();
        let x = ctx.var(self.embed).gather(&[l, d], index)?.add(ctx.var(self.pos))?;
        let h = self.norm.fwd(ctx, x)?;
        let (q, k, v) = (self.query.fwd(ctx, h)?, self.key.fwd(ctx, h)?, self.value.fwd(ctx, h)?);
        let x = x.add(self.out.fwd(ctx, attention(q, k, v, 1, d, Some(valid))?)?)?;
        let x = x.add(self.mlp.fwd(ctx, x)?)?;
        Ok(TextFeat { x, valid })
    }
}

/// `[H × W × 3]` (or `[H·W × 3]`) image tensor as a stage-0 feature map.
pub fn image_feat<'t>(ctx: &Ctx<'t>, image: &Tensor, h: usize, w: usize) -> Result<Feat<'t>> {
    let x: Var<'t> = ctx.constant(image.reshape(&[h * w, 3])?);
    Feat::new(x, h, w)
}
