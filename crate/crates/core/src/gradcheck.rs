//! Registry of finite-difference checks over primitives, blocks and the
//! full model at small dimensions.

use sbanet_autograd::suite::{check_primitive, CaseRng};
use sbanet_autograd::{check_gradients, CheckOptions, CheckReport, GradTape, Tensor, TensorError, Var, PRIMITIVES};

use crate::bam::{BamStage, DynamicSelect, LinguisticUpdate, QueryTextAlign, QueryUpdate, StageSpec, TextUpdate};
use crate::config::ModelConfig;
use crate::data::{generate_sample, SceneSpec};
use crate::encoders::{TextEncoder, VisualEncoder};
use crate::error::{CoreError, Result};
use crate::model::{ce_loss, Decoder, Model};
use crate::nn::{attention, Feat, Gate, Mlp2, Pwam, TextFeat};
use crate::params::{Ctx, ParamStore};
use crate::tcsa::{Tcsa, TcsaSpec};

pub const MODULES: [&str; 4] = ["tensor", "bam", "tcsa", "model"];

#[derive(Debug, Clone, Copy)]
pub struct GradcheckOptions {
    pub step: f64,
    pub tol: f64,
    /// Relative-error denominator floor for block checks.
    pub floor: f64,
    /// Coordinates probed per tensor in block checks.
    pub coords: usize,
    pub seed: u64,
    pub sign_flip: Option<&'static str>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self { step: 1e-5, tol: 1e-4, floor: 1e-5, coords: 4, seed: 0, sign_flip: None }
    }
}

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub module: &'static str,
    pub name: String,
    pub report: CheckReport,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.report.passed()
    }

    pub fn line(&self) -> String {
        format!(
            "{:<6} {:<7} {:<28} max_rel_err={:.3e} tol={:.0e} coords={}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.module,
            self.name,
            self.report.max_rel_err,
            self.report.tol,
            self.report.checked
        )
    }
}

type Block = Box<dyn for<'t> Fn(&Ctx<'t>, &[Var<'t>]) -> Result<Var<'t>>>;

/// Parameters plus extra inputs feeding one block.
struct BlockCase {
    name: &'static str,
    store: ParamStore,
    inputs: Vec<Tensor>,
    block: Block,
}

fn to_tensor_err(e: CoreError) -> TensorError {
    match e {
        CoreError::Tensor(t) => t,
        other => TensorError::Contract(other.to_string()),
    }
}

fn scalar_fn<F>(f: F) -> F
where
    F: for<'t> Fn(&'t GradTape, &[Var<'t>]) -> sbanet_autograd::Result<Var<'t>>,
{
    f
}

impl BlockCase {
    fn check(self, module: &'static str, opts: &GradcheckOptions) -> Result<CheckResult> {
        let np = self.store.len();
        let mut all: Vec<Tensor> = self.store.tensors().to_vec();
        all.extend(self.inputs);
        let mut rng = CaseRng::new(opts.seed ^ 0xB10C);
        let probe = {
            let tape = GradTape::new();
            let ctx = Ctx::frozen(&tape, &self.store);
            let vars: Vec<Var<'_>> = all[np..].iter().map(|t| tape.constant(t.clone())).collect();
            (self.block)(&ctx, &vars)?.shape()
        };
        let weights = rng.tensor_off_zero(&probe);
        let block = self.block;
        let f = scalar_fn(move |tape, vars| {
            let ctx = Ctx::from_vars(tape, &vars[..np]);
            let out = block(&ctx, &vars[np..]).map_err(to_tensor_err)?;
            out.mul(tape.constant(weights.clone()))?.sum().reshape(&[1])
        });
        let copts = CheckOptions {
            step: opts.step,
            tol: opts.tol,
            floor: opts.floor,
            max_coords_per_input: Some(opts.coords),
            seed: opts.seed,
            sign_flip: opts.sign_flip,
        };
        let report = check_gradients(f, &all, &copts)?;
        Ok(CheckResult { module, name: self.name.to_string(), report })
    }
}

const C: usize = 8;
const D: usize = 8;
const L: usize = 5;
const VALID: usize = 3;

fn feat<'t>(x: Var<'t>, side: usize) -> Feat<'t> {
    Feat { x, h: side, w: side }
}

fn text(x: Var<'_>) -> TextFeat<'_> {
    TextFeat { x, valid: VALID }
}

fn bam_cases(seed: u64) -> Result<Vec<BlockCase>> {
    let mut rng = CaseRng::new(seed ^ 0xBA);
    let mut cases = Vec::new();
    let mut new_store = || ParamStore::new(rng.next_u64());
    let mut inputs = CaseRng::new(seed ^ 0x1F);

    let mut s = new_store();
    let m = Mlp2::new(&mut s, "mlp", C, C, C);
    cases.push(BlockCase {
        name: "mlp2",
        store: s,
        inputs: vec![inputs.tensor(&[6, C])],
        block: Box::new(move |ctx, v| m.fwd(ctx, v[0])),
    });

    cases.push(BlockCase {
        name: "attention",
        store: new_store(),
        inputs: vec![inputs.tensor(&[4, C]), inputs.tensor(&[L, C]), inputs.tensor(&[L, 6])],
        block: Box::new(|_, v| attention(v[0], v[1], v[2], 2, C / 2, Some(VALID))),
    });

    let mut s = new_store();
    let p = Pwam::new(&mut s, "pwam", C, D, 1);
    cases.push(BlockCase {
        name: "pwam",
        store: s,
        inputs: vec![inputs.tensor(&[16, C]), inputs.tensor(&[L, D])],
        block: Box::new(move |ctx, v| p.fwd(ctx, v[0], &text(v[1]))),
    });

    let mut s = new_store();
    let g = Gate::new(&mut s, "gate", C);
    cases.push(BlockCase {
        name: "language_gate",
        store: s,
        inputs: vec![inputs.tensor(&[16, C])],
        block: Box::new(move |ctx, v| g.fwd(ctx, v[0])),
    });

    let mut s = new_store();
    let q = QueryUpdate::new(&mut s, "lq", 3, C, C, true);
    cases.push(BlockCase {
        name: "update_query_tokens",
        store: s,
        inputs: vec![inputs.tensor(&[16, C])],
        block: Box::new(move |ctx, v| q.fwd(ctx, &feat(v[0], 4))),
    });

    let mut s = new_store();
    let a = QueryTextAlign::new(&mut s, "align", D, C);
    cases.push(BlockCase {
        name: "query_text_align",
        store: s,
        inputs: vec![inputs.tensor(&[L, D]), inputs.tensor(&[3, C])],
        block: Box::new(move |ctx, v| a.fwd(ctx, &text(v[0]), v[1], None)),
    });

    let mut s = new_store();
    let u = LinguisticUpdate::new(&mut s, "ling", D);
    cases.push(BlockCase {
        name: "update_linguistic",
        store: s,
        inputs: vec![inputs.tensor(&[L, D]), inputs.tensor(&[L, D])],
        block: Box::new(move |ctx, v| Ok(u.fwd(ctx, &text(v[0]), v[1])?.x)),
    });

    let mut s = new_store();
    let dfs = DynamicSelect::new(&mut s, "dfs", &[1, 2, 3], C, D, 1)?;
    cases.push(BlockCase {
        name: "dynamic_feature_select",
        store: s,
        inputs: vec![inputs.tensor(&[16, C]), inputs.tensor(&[L, D])],
        block: Box::new(move |ctx, v| Ok(dfs.fwd(ctx, &feat(v[0], 4), &text(v[1]))?.x)),
    });

    let mut s = new_store();
    let spec = StageSpec {
        channels: C,
        text_dim: D,
        queries: 2,
        pwam_heads: 1,
        text_update: Some(TextUpdate::Learnable),
        group: Some(vec![1, 2]),
    };
    let stage = BamStage::new(&mut s, "bam", &spec)?;
    cases.push(BlockCase {
        name: "bam_forward",
        store: s,
        inputs: vec![inputs.tensor(&[16, C]), inputs.tensor(&[L, D])],
        block: Box::new(move |ctx, v| {
            let out = stage.fwd(ctx, &feat(v[0], 4), &text(v[1]))?;
            // All three outputs contribute.
            let t = out.text.x.reshape(&[L * D / C, C])?;
            Ok(sbanet_autograd::concat(&[out.visual.x, out.residual, t], 0)?)
        }),
    });
    Ok(cases)
}

fn tcsa_spec() -> TcsaSpec {
    TcsaSpec { channels: vec![4, 8, 8, 16], text_dim: D, guidance: 4, heads: 4, grid: (2, 2), channel: true, spatial: true, text: true }
}

const TCSA_SIDES: [usize; 4] = [4, 2, 1, 1];

fn tcsa_cases(seed: u64) -> Result<Vec<BlockCase>> {
    let mut inputs = CaseRng::new(seed ^ 0x7C);
    let spec = tcsa_spec();
    let mut cases = Vec::new();
    let stage_inputs = |rng: &mut CaseRng| -> Vec<Tensor> {
        spec.channels.iter().zip(TCSA_SIDES).map(|(&c, s)| rng.tensor(&[s * s, c])).collect()
    };

    let mut s = ParamStore::new(seed ^ 1);
    let t = Tcsa::new(&mut s, &spec)?;
    cases.push(BlockCase {
        name: "recap_text",
        store: s,
        inputs: vec![inputs.tensor(&[L, D])],
        block: Box::new(move |ctx, v| t.recap_text(ctx, &text(v[0]))),
    });

    let mut s = ParamStore::new(seed ^ 2);
    let t = Tcsa::new(&mut s, &spec)?;
    let mut ins = stage_inputs(&mut inputs);
    ins.push(inputs.tensor(&[L, D]));
    let t2 = t.clone();
    cases.push(BlockCase {
        name: "channel_attention",
        store: s.clone(),
        inputs: ins.clone(),
        block: Box::new(move |ctx, v| {
            let stages: Vec<Feat<'_>> = v[..4].iter().zip(TCSA_SIDES).map(|(&x, s)| feat(x, s)).collect();
            let g = t.guidance(ctx, &text(v[4]))?;
            let cat = t.build_concat(ctx, &stages, g)?;
            Ok(t.channel_delta(ctx, 3, cat.blocks[3], cat.fc)?.0)
        }),
    });
    let t3 = t2.clone();
    cases.push(BlockCase {
        name: "spatial_attention",
        store: s.clone(),
        inputs: ins.clone(),
        block: Box::new(move |ctx, v| {
            let stages: Vec<Feat<'_>> = v[..4].iter().zip(TCSA_SIDES).map(|(&x, s)| feat(x, s)).collect();
            let g = t2.guidance(ctx, &text(v[4]))?;
            let cat = t2.build_concat(ctx, &stages, g)?;
            Ok(t2.spatial_delta(ctx, 0, cat.blocks[0], cat.fc)?.0)
        }),
    });
    cases.push(BlockCase {
        name: "tcsa_forward",
        store: s,
        inputs: ins,
        block: Box::new(move |ctx, v| {
            let stages: Vec<Feat<'_>> = v[..4].iter().zip(TCSA_SIDES).map(|(&x, s)| feat(x, s)).collect();
            let out = t3.fwd(ctx, &stages, &text(v[4]))?;
            let flat: Vec<Var<'_>> = out.iter().map(|f| f.x.reshape(&[f.x.len() / 4, 4])).collect::<sbanet_autograd::Result<_>>()?;
            Ok(sbanet_autograd::concat(&flat, 0)?)
        }),
    });
    Ok(cases)
}

/// Small configuration used for whole-model checks.
pub fn check_config() -> ModelConfig {
    ModelConfig {
        image_size: 32,
        patch_stride: 4,
        base_channels: 4,
        text_dim: 8,
        max_len: 8,
        num_queries: 2,
        pyramid_group: vec![1, 2],
        guidance_dim: 8,
        tcsa_heads: 4,
        ..ModelConfig::default()
    }
}

fn model_cases(seed: u64) -> Result<Vec<BlockCase>> {
    let mut inputs = CaseRng::new(seed ^ 0x3D);
    let cfg = check_config();
    let mut cases = Vec::new();

    let mut s = ParamStore::new(seed ^ 3);
    let enc = VisualEncoder::new(&mut s, 2, 4);
    cases.push(BlockCase {
        name: "encode_image",
        store: s,
        inputs: vec![inputs.tensor(&[16 * 16, 3])],
        block: Box::new(move |ctx, v| {
            let st = enc.encode(ctx, &feat(v[0], 16))?;
            let flat: Vec<Var<'_>> = st.iter().map(|f| f.x.reshape(&[f.x.len() / 4, 4])).collect::<sbanet_autograd::Result<_>>()?;
            Ok(sbanet_autograd::concat(&flat, 0)?)
        }),
    });

    let mut s = ParamStore::new(seed ^ 4);
    let te = TextEncoder::new(&mut s, 10, L, D);
    cases.push(BlockCase {
        name: "encode_text",
        store: s,
        inputs: vec![],
        block: Box::new(move |ctx, _| Ok(te.encode(ctx, &[3, 1, 7, 0, 0], VALID)?.x)),
    });

    let mut s = ParamStore::new(seed ^ 5);
    let plan = [4, 8, 16, 32];
    let dec = Decoder::new(&mut s, &plan);
    let sides = [8, 4, 2, 1];
    cases.push(BlockCase {
        name: "decode",
        store: s,
        inputs: plan.iter().zip(sides).map(|(&c, side)| inputs.tensor(&[side * side, c])).collect(),
        block: Box::new(move |ctx, v| {
            let stages: Vec<Feat<'_>> = v.iter().zip(sides).map(|(&x, s)| feat(x, s)).collect();
            dec.fwd(ctx, &stages, 32, 32)
        }),
    });

    let (model, store) = Model::build(&ModelConfig { seed, ..cfg.clone() })?;
    let sample = generate_sample(seed, 0, &SceneSpec { size: 32, min_side: 7, max_side: 11, max_len: cfg.max_len, ..SceneSpec::default() })?;
    let image = sample.image();
    let ids = sample.ids();
    let (mask, valid) = (sample.mask.clone(), sample.valid);
    cases.push(BlockCase {
        name: "model_forward_ce_loss",
        store,
        inputs: vec![],
        block: Box::new(move |ctx, _| {
            let logits = model.forward(ctx, &image, &ids, valid)?;
            ce_loss(logits, &mask)?.reshape(&[1]).map_err(Into::into)
        }),
    });
    Ok(cases)
}

/// Runs every check registered under `module` (`"all"` for everything).
pub fn run(module: &str, opts: &GradcheckOptions) -> Result<Vec<CheckResult>> {
    let wanted: Vec<&'static str> = match module {
        "all" => MODULES.to_vec(),
        m => match MODULES.iter().find(|x| **x == m) {
            Some(x) => vec![*x],
            None => {
                return Err(CoreError::Config(format!(
                    "unknown gradcheck module {m:?}; expected one of all, {}",
                    MODULES.join(", ")
                )))
            }
        },
    };
    let mut out = Vec::new();
    for module in wanted {
        match module {
            "tensor" => {
                let copts = CheckOptions { step: 1e-6, tol: opts.tol, sign_flip: opts.sign_flip, ..CheckOptions::default() };
                for name in PRIMITIVES {
                    let mut worst: Option<CheckReport> = None;
                    let mut checked = 0;
                    for seed in 0..10 {
                        let r = check_primitive(name, opts.seed.wrapping_add(seed), &copts)?;
                        checked += r.checked;
                        if worst.as_ref().is_none_or(|w| r.max_rel_err > w.max_rel_err) {
                            worst = Some(r);
                        }
                    }
                    let mut report = worst.expect("ten seeds");
                    report.checked = checked;
                    out.push(CheckResult { module, name: name.to_string(), report });
                }
            }
            "bam" => {
                for c in bam_cases(opts.seed)? {
                    out.push(c.check(module, opts)?);
                }
            }
            "tcsa" => {
                for c in tcsa_cases(opts.seed)? {
                    out.push(c.check(module, opts)?);
                }
            }
            _ => {
                for c in model_cases(opts.seed)? {
                    out.push(c.check(module, opts)?);
                }
            }
        }
    }
    Ok(out)
}
