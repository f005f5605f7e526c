//! End-to-end network: encoders interleaved with alignment stages, the
//! aggregator, and a top-down decoder producing two-class logits per pixel.

use std::rc::Rc;

use sbanet_autograd::{concat, Tensor, Var};

use crate::bam::BamStage;
use crate::config::ModelConfig;
use crate::encoders::{image_feat, TextEncoder, VisualEncoder, STAGES};
use crate::error::{config_err, CoreError, Result};
use crate::nn::{upsample_bilinear, Feat, LayerNorm, Linear};
use crate::params::{Ctx, ParamStore};
use crate::tcsa::Tcsa;

/// Top-down fusion: project the coarsest stage, then repeatedly upsample ×2,
/// concatenate the next finer stage and fuse with linear + LN + ReLU.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub proj: Linear,
    /// Fusion layers for stages 3, 2, 1.
    pub fuse: Vec<(Linear, LayerNorm)>,
    pub head: Linear,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, c: &[usize; STAGES]) -> Self {
        let proj = Linear::new(store, "decoder.proj", c[3], c[2]);
        let mut fuse = Vec::new();
        let mut width = c[2];
        for i in (0..STAGES - 1).rev() {
            let out = if i == 0 { c[0] } else { c[i - 1] };
            let inp = width + c[i];
            fuse.push((
                Linear::new(store, &format!("decoder.fuse{}", i + 1), inp, out),
                LayerNorm::new(store, &format!("decoder.fuse{}.norm", i + 1), out),
            ));
            width = out;
        }
        let head = Linear::new(store, "decoder.head", width, 2);
        Self { proj, fuse, head }
    }

    /// Input widths of the fusion layers, coarse to fine.
    pub fn fusion_widths(&self) -> Vec<(usize, usize)> {
        self.fuse.iter().map(|(l, _)| (l.inp, l.out)).collect()
    }

    /// Logits `[out_h·out_w × 2]`.
    pub fn fwd<'t>(&self, ctx: &Ctx<'t>, stages: &[Feat<'t>], out_h: usize, out_w: usize) -> Result<Var<'t>> {
        if stages.len() != STAGES {
            return config_err(format!("decoder expects {STAGES} stages, got {}", stages.len()));
        }
        let top = &stages[STAGES - 1];
        let mut x = top.with(self.proj.fwd(ctx, top.x)?);
        for (k, (lin, norm)) in self.fuse.iter().enumerate() {
            let s = &stages[STAGES - 2 - k];
            let up = upsample_bilinear(&x, s.h, s.w)?;
            let cat = concat(&[up.x, s.x], 1)?;
            x = s.with(norm.fwd(ctx, lin.fwd(ctx, cat)?)?.relu());
        }
        let logits = x.with(self.head.fwd(ctx, x.x)?);
        Ok(upsample_bilinear(&logits, out_h, out_w)?.x)
    }
}

/// Architecture description; parameters live in a separate [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub visual: VisualEncoder,
    pub text: TextEncoder,
    pub stages: Vec<BamStage>,
    pub tcsa: Option<Tcsa>,
    pub decoder: Decoder,
}

/// Intermediate results of a forward pass.
#[derive(Debug, Clone)]
pub struct Trace<'t> {
    /// Per-stage output of the alignment block.
    pub aligned: Vec<Feat<'t>>,
    /// Stage features plus gated residual, as handed to the aggregator.
    pub stages: Vec<Feat<'t>>,
    pub enhanced: Vec<Feat<'t>>,
    pub logits: Var<'t>,
}

impl Model {
    /// Builds the architecture and a freshly initialized parameter store
    /// seeded from `cfg.seed`.
    pub fn build(cfg: &ModelConfig) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new(cfg.seed);
        let model = Self::register(cfg, &mut store)?;
        Ok((model, store))
    }

    /// Registers all parameters of `cfg` into `store`.
    pub fn register(cfg: &ModelConfig, store: &mut ParamStore) -> Result<Self> {
        cfg.validate()?;
        let visual = VisualEncoder::new(store, cfg.patch_stride, cfg.base_channels);
        let text = TextEncoder::new(store, cfg.vocab_size, cfg.max_len, cfg.text_dim);
        let stages = (0..STAGES)
            .map(|i| BamStage::new(store, &format!("bam{}", i + 1), &cfg.stage_spec(i)))
            .collect::<Result<Vec<_>>>()?;
        let tcsa = cfg.tcsa_spec().map(|s| Tcsa::new(store, &s)).transpose()?;
        let decoder = Decoder::new(store, &cfg.channels());
        Ok(Self { cfg: cfg.clone(), visual, text, stages, tcsa, decoder })
    }

    /// Rebuilds the architecture for `cfg` over loaded parameters, checking
    /// that names and shapes match registration exactly.
    pub fn attach(cfg: &ModelConfig, store: &ParamStore) -> Result<Self> {
        let (model, fresh) = Self::build(cfg)?;
        if fresh.len() != store.len() {
            return Err(CoreError::Data(format!("expected {} parameter tensors, found {}", fresh.len(), store.len())));
        }
        for ((n0, t0), (n1, t1)) in fresh.iter().zip(store.iter()) {
            if n0 != n1 || t0.shape() != t1.shape() {
                return Err(CoreError::Data(format!(
                    "parameter mismatch: expected {n0} {:?}, found {n1} {:?}",
                    t0.shape(),
                    t1.shape()
                )));
            }
        }
        Ok(model)
    }

    pub fn trace<'t>(&self, ctx: &Ctx<'t>, image: &Tensor, ids: &[usize], valid: usize) -> Result<Trace<'t>> {
        let side = self.cfg.image_size;
        if image.len() != side * side * 3 {
            return config_err(format!("image has {} values, expected {side}×{side}×3", image.len()));
        }
        let mut input = image_feat(ctx, image, side, side)?;
        let mut text = self.text.encode(ctx, ids, valid)?;
        let mut aligned = Vec::with_capacity(STAGES);
        let mut stages = Vec::with_capacity(STAGES);
        for (i, stage) in self.stages.iter().enumerate() {
            let fv = self.visual.stage(ctx, i, &input)?;
            let out = stage.fwd(ctx, &fv, &text)?;
            text = out.text;
            input = fv.with(fv.x.add(out.residual)?);
            aligned.push(out.visual);
            stages.push(input);
        }
        let enhanced = match &self.tcsa {
            Some(t) => t.fwd(ctx, &stages, &text)?,
            None => stages.clone(),
        };
        let logits = self.decoder.fwd(ctx, &enhanced, side, side)?;
        Ok(Trace { aligned, stages, enhanced, logits })
    }

    /// Per-pixel logits `[H·W × 2]`.
    pub fn forward<'t>(&self, ctx: &Ctx<'t>, image: &Tensor, ids: &[usize], valid: usize) -> Result<Var<'t>> {
        self.trace(ctx, image, ids, valid).map(|t| t.logits)
    }
}

/// Mean over pixels of `−log softmax(logits)[class]`.
pub fn ce_loss<'t>(logits: Var<'t>, mask: &[u8]) -> Result<Var<'t>> {
    let (n, k) = logits.dims2()?;
    if k != 2 || n != mask.len() {
        return Err(CoreError::Tensor(sbanet_autograd::TensorError::Shape(format!(
            "logits {:?} against a mask of {} pixels",
            logits.shape(),
            mask.len()
        ))));
    }
    if let Some(bad) = mask.iter().find(|&&m| m > 1) {
        return Err(CoreError::Data(format!("mask value {bad} is not binary")));
    }
    let index: Rc<[usize]> = mask.iter().enumerate().map(|(p, &m)| 2 * p + m as usize).collect();
    let picked = logits.log_softmax(1)?.gather(&[n], index)?;
    Ok(picked.mean().scale(-1.0))
}

/// Per-pixel argmax of `[N × 2]` logits; ties go to background.
pub fn predict_mask(logits: &[f64]) -> Vec<u8> {
    logits.chunks_exact(2).map(|p| u8::from(p[1] > p[0])).collect()
}

/// Logits whose argmax reproduces `mask` with the given margin.
pub fn mask_logits(mask: &[u8], margin: f64) -> Vec<f64> {
    mask.iter().flat_map(|&m| if m == 1 { [0.0, margin] } else { [margin, 0.0] }).collect()
}
