//! Bidirectional alignment: learnable query tokens summarize a stage's
//! visual content and update the text features, which in turn steer a
//! pyramid of pixel-word alignments over the visual map.

use serde::{Deserialize, Serialize};
use sbanet_autograd::{concat, Var};

use crate::error::{config_err, CoreError, Result};
use crate::nn::{attention_weights, pyramid_pool, upsample_bilinear, Feat, Gate, LayerNorm, Linear, Mlp2, Pwam, TextFeat};
use crate::params::{Ctx, ParamId, ParamStore};

/// How the text features are refreshed at each stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TextUpdate {
    /// Learnable query tokens with position embedding.
    Learnable,
    /// Learnable query tokens, no position embedding.
    LearnableNoPe,
    /// Text tokens attend to themselves.
    SelfAttn,
    /// Text tokens attend to every visual position.
    CrossAttn,
}

/// Learnable tokens attending over a stage's pixels.
#[derive(Debug, Clone)]
pub struct QueryUpdate {
    pub tokens: ParamId,
    pub pos: Option<ParamId>,
    pub m: usize,
    pub cq: usize,
    pub query: Linear,
    pub kv_norm: LayerNorm,
    pub key: Linear,
    pub value: Linear,
    pub mlp: Mlp2,
    pub norm: LayerNorm,
}

impl QueryUpdate {
    pub fn new(store: &mut ParamStore, name: &str, m: usize, c: usize, cq: usize, with_pos: bool) -> Self {
        let bound = 1.0 / (cq as f64).sqrt();
        let tokens = store.uniform(format!("{name}.tokens"), &[m, cq], bound);
        let pos = with_pos.then(|| store.uniform(format!("{name}.pos"), &[m, cq], bound));
        Self {
            tokens,
            pos,
            m,
            cq,
            query: Linear::new(store, &format!("{name}.query"), cq, cq),
            kv_norm: LayerNorm::new(store, &format!("{name}.kv_norm"), c),
            key: Linear::new(store, &format!("{name}.key"), c, cq),
            value: Linear::new(store, &format!("{name}.value"), c, cq),
            mlp: Mlp2::new(store, &format!("{name}.mlp"), cq, cq, cq),
            norm: LayerNorm::new(store, &format!("{name}.norm"), cq),
        }
    }

    /// Attended tokens before the MLP, and the attention weights `[M × h·w]`.
    pub fn attend<'t>(&self, ctx: &Ctx<'t>, fv: &Feat<'t>) -> Result<(Var<'t>, Var<'t>)> {
        if fv.h * fv.w == 0 {
            return Err(CoreError::Contract("query update over an empty feature map".into()));
        }
        let mut q = ctx.var(self.tokens);
        if let Some(pos) = self.pos {
            q = q.add(ctx.var(pos))?;
        }
        let q = self.query.fwd(ctx, q)?;
        let kv = self.kv_norm.fwd(ctx, fv.x)?;
        let (k, v) = (self.key.fwd(ctx, kv)?, self.value.fwd(ctx, kv)?);
        let (out, w) = attention_weights(q, k, v, 1, self.cq, None)?;
        Ok((out, w[0]))
    }

    /// `LQ' = LN(a + MLP(a))` with `a` the attended tokens.
    pub fn fwd<'t>(&self, ctx: &Ctx<'t>, fv: &Feat<'t>) -> Result<Var<'t>> {
        let (a, _) = self.attend(ctx, fv)?;
        self.norm.fwd(ctx, a.add(self.mlp.fwd(ctx, a)?)?)
    }
}

/// Text tokens query a key source (query tokens, the text itself or the
/// pixels) in a shared width-`d` space; the result is projected back to
/// token-major `[l × d]` maps.
#[derive(Debug, Clone)]
pub struct QueryTextAlign {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub norm: LayerNorm,
    pub scale_dim: usize,
}

impl QueryTextAlign {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, src: usize) -> Self {
        Self {
            query: Linear::new(store, &format!("{name}.query"), d, d),
            key: Linear::new(store, &format!("{name}.key"), src, d),
            value: Linear::new(store, &format!("{name}.value"), src, d),
            out: Linear::new(store, &format!("{name}.out"), d, d),
            norm: LayerNorm::new(store, &format!("{name}.norm"), d),
            scale_dim: src,
        }
    }

    /// Returns `R` and the attention weights `[l × n_src]`.
    pub fn fwd_weights<'t>(
        &self,
        ctx: &Ctx<'t>,
        text: &TextFeat<'t>,
        src: Var<'t>,
        src_valid: Option<usize>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        if text.valid == 0 {
            return Err(CoreError::Contract("query-text alignment needs at least one valid token".into()));
        }
        let (_, w) = src.dims2()?;
        if w != self.key.inp {
            return config_err(format!("alignment key source has width {w}, expected {}", self.key.inp));
        }
        let q = self.query.fwd(ctx, text.x)?.gelu();
        let k = self.key.fwd(ctx, src)?.gelu();
        let v = self.value.fwd(ctx, src)?.gelu();
        let (r, p) = attention_weights(q, k, v, 1, self.scale_dim, src_valid)?;
        Ok((self.norm.fwd(ctx, self.out.fwd(ctx, r)?)?, p[0]))
    }

    pub fn fwd<'t>(&self, ctx: &Ctx<'t>, text: &TextFeat<'t>, src: Var<'t>, src_valid: Option<usize>) -> Result<Var<'t>> {
        self.fwd_weights(ctx, text, src, src_valid).map(|(r, _)| r)
    }
}

/// `F' = relu(W_f · (relu(W_l · F) ⊙ R))`
#[derive(Debug, Clone, Copy)]
pub struct LinguisticUpdate {
    pub lang: Linear,
    pub fin: Linear,
}

impl LinguisticUpdate {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self { lang: Linear::new(store, &format!("{name}.lang"), d, d), fin: Linear::new(store, &format!("{name}.final"), d, d) }
    }

    pub fn fwd<'t>(&self, ctx: &Ctx<'t>, text: &TextFeat<'t>, r: Var<'t>) -> Result<TextFeat<'t>> {
        if r.shape() != text.x.shape() {
            return Err(CoreError::Tensor(sbanet_autograd::TensorError::Shape(format!(
                "alignment maps {:?} do not match text {:?}",
                r.shape(),
                text.x.shape()
            ))));
        }
        let l = self.lang.fwd(ctx, text.x)?.relu();
        Ok(text.with(self.fin.fwd(ctx, l.mul(r)?)?.relu()))
    }
}

/// Pool at several bin counts, align each sub-scale with the text, then
/// upsample, concatenate and fuse back to `c` channels.
#[derive(Debug, Clone)]
pub struct DynamicSelect {
    pub group: Vec<usize>,
    pub convs: Vec<(Linear, LayerNorm)>,
    pub pwams: Vec<Pwam>,
    pub mlp: Mlp2,
}

impl DynamicSelect {
    pub fn new(store: &mut ParamStore, name: &str, group: &[usize], c: usize, d: usize, heads: usize) -> Result<Self> {
        if group.is_empty() {
            return config_err("pyramid group is empty");
        }
        let mut convs = Vec::new();
        let mut pwams = Vec::new();
        for &g in group {
            convs.push((
                Linear::new(store, &format!("{name}.pool{g}.conv"), c, c),
                LayerNorm::new(store, &format!("{name}.pool{g}.norm"), c),
            ));
            pwams.push(Pwam::new(store, &format!("{name}.pool{g}.pwam"), c, d, heads));
        }
        let mlp = Mlp2::new(store, &format!("{name}.fuse"), c * group.len(), c, c);
        Ok(Self { group: group.to_vec(), convs, pwams, mlp })
    }

    pub fn fwd<'t>(&self, ctx: &Ctx<'t>, fv: &Feat<'t>, text: &TextFeat<'t>) -> Result<Feat<'t>> {
        let pooled = pyramid_pool(fv, &self.group)?;
        let mut ups = Vec::with_capacity(pooled.len());
        for ((p, (conv, norm)), pwam) in pooled.iter().zip(&self.convs).zip(&self.pwams) {
            let x = norm.fwd(ctx, conv.fwd(ctx, p.x)?)?;
            let cross = p.with(pwam.fwd(ctx, x, text)?);
            ups.push(upsample_bilinear(&cross, fv.h, fv.w)?.x);
        }
        let cat = if ups.len() == 1 { ups[0] } else { concat(&ups, 1)? };
        Ok(fv.with(self.mlp.fwd(ctx, cat)?))
    }
}

#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum TextUpdater {
    Queries { update: QueryUpdate, align: QueryTextAlign, ling: LinguisticUpdate },
    SelfAttn { align: QueryTextAlign, ling: LinguisticUpdate },
    CrossAttn { align: QueryTextAlign, ling: LinguisticUpdate },
}

#[derive(Debug, Clone)]
pub enum VisualUpdate {
    Pwam(Pwam),
    Dynamic(DynamicSelect),
}

/// Shape of one stage's alignment block.
#[derive(Debug, Clone, PartialEq)]
pub struct StageSpec {
    pub channels: usize,
    pub text_dim: usize,
    pub queries: usize,
    pub pwam_heads: usize,
    pub text_update: Option<TextUpdate>,
    /// Feasible pyramid bins; `None` for a single full-resolution alignment.
    pub group: Option<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct BamStage {
    pub text: Option<TextUpdater>,
    pub visual: VisualUpdate,
    pub gate: Gate,
}

/// Result of one stage: aligned visual map, refreshed text, gated residual.
#[derive(Debug, Clone, Copy)]
pub struct StageOutput<'t> {
    pub visual: Feat<'t>,
    pub text: TextFeat<'t>,
    pub residual: Var<'t>,
}

impl BamStage {
    pub fn new(store: &mut ParamStore, name: &str, spec: &StageSpec) -> Result<Self> {
        let (c, d) = (spec.channels, spec.text_dim);
        let text = spec.text_update.map(|kind| match kind {
            TextUpdate::Learnable | TextUpdate::LearnableNoPe => {
                let with_pos = kind == TextUpdate::Learnable;
                TextUpdater::Queries {
                    update: QueryUpdate::new(store, &format!("{name}.lq"), spec.queries, c, c, with_pos),
                    align: QueryTextAlign::new(store, &format!("{name}.align"), d, c),
                    ling: LinguisticUpdate::new(store, &format!("{name}.ling"), d),
                }
            }
            TextUpdate::SelfAttn => TextUpdater::SelfAttn {
                align: QueryTextAlign::new(store, &format!("{name}.align"), d, d),
                ling: LinguisticUpdate::new(store, &format!("{name}.ling"), d),
            },
            TextUpdate::CrossAttn => TextUpdater::CrossAttn {
                align: QueryTextAlign::new(store, &format!("{name}.align"), d, c),
                ling: LinguisticUpdate::new(store, &format!("{name}.ling"), d),
            },
        });
        let visual = match &spec.group {
            Some(g) => VisualUpdate::Dynamic(DynamicSelect::new(store, &format!("{name}.dfs"), g, c, d, spec.pwam_heads)?),
            None => VisualUpdate::Pwam(Pwam::new(store, &format!("{name}.pwam"), c, d, spec.pwam_heads)),
        };
        let gate = Gate::new(store, &format!("{name}.gate"), c);
        Ok(Self { text, visual, gate })
    }

    /// Text refresh for this stage; identity when the stage has none.
    pub fn update_text<'t>(&self, ctx: &Ctx<'t>, fv: &Feat<'t>, text: &TextFeat<'t>) -> Result<TextFeat<'t>> {
        match &self.text {
            None => Ok(*text),
            Some(TextUpdater::Queries { update, align, ling }) => {
                let lq = update.fwd(ctx, fv)?;
                let r = align.fwd(ctx, text, lq, None)?;
                ling.fwd(ctx, text, r)
            }
            Some(TextUpdater::SelfAttn { align, ling }) => {
                let r = align.fwd(ctx, text, text.x, Some(text.valid))?;
                ling.fwd(ctx, text, r)
            }
            Some(TextUpdater::CrossAttn { align, ling }) => {
                let r = align.fwd(ctx, text, fv.x, None)?;
                ling.fwd(ctx, text, r)
            }
        }
    }

    pub fn update_visual<'t>(&self, ctx: &Ctx<'t>, fv: &Feat<'t>, text: &TextFeat<'t>) -> Result<Feat<'t>> {
        match &self.visual {
            VisualUpdate::Pwam(p) => Ok(fv.with(p.fwd(ctx, fv.x, text)?)),
            VisualUpdate::Dynamic(dfs) => dfs.fwd(ctx, fv, text),
        }
    }

    pub fn fwd<'t>(&self, ctx: &Ctx<'t>, fv: &Feat<'t>, text: &TextFeat<'t>) -> Result<StageOutput<'t>> {
        let text = self.update_text(ctx, fv, text)?;
        let visual = self.update_visual(ctx, fv, &text)?;
        let residual = self.gate.fwd(ctx, visual.x)?;
        Ok(StageOutput { visual, text, residual })
    }
}
