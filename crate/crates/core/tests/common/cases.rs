//! Seeded instances shared by the oracle, invariant and acceptance tests.
//! Each returns the worst discrepancy it observed.

use sbanet_autograd::suite::CaseRng;
use sbanet_autograd::{GradTape, Tensor};
use sbanet_core::bam::{DynamicSelect, LinguisticUpdate, QueryTextAlign, QueryUpdate};
use sbanet_core::nn::{attention_weights, Feat, Pwam, TextFeat};
use sbanet_core::tcsa::{Tcsa, TcsaSpec};
use sbanet_core::{Ctx, ParamStore};

use super::*;

pub fn pwam_error(seed: u64) -> f64 {
    let mut rng = CaseRng::new(seed);
    let (c, d, n, l) = (4 * rng.range(1, 2), rng.range(3, 6), rng.range(1, 9), rng.range(2, 6));
    let heads = if rng.unit() < 0.5 { 2 } else { 1 };
    let valid = rng.range(1, l);
    let mut store = ParamStore::new(seed);
    let block = Pwam::new(&mut store, "p", c, d, heads);
    scramble(&mut store, &mut rng);
    let (v, t) = (random_mat(&mut rng, n, c), random_mat(&mut rng, l, d));
    let tape = GradTape::new();
    let ctx = Ctx::frozen(&tape, &store);
    let out = block.fwd(&ctx, ctx.constant(tensor(&v)), &TextFeat { x: ctx.constant(tensor(&t)), valid }).unwrap();
    max_diff(&rows(&out.value()), &pwam(&v, &t, valid, heads, &store, "p"))
}

pub fn query_update_error(seed: u64) -> f64 {
    let mut rng = CaseRng::new(100 + seed);
    let (m, c, side) = (rng.range(1, 4), rng.range(2, 6), rng.range(1, 3));
    let with_pos = seed.is_multiple_of(2);
    let mut store = ParamStore::new(seed);
    let block = QueryUpdate::new(&mut store, "lq", m, c, c, with_pos);
    scramble(&mut store, &mut rng);
    let fv = random_mat(&mut rng, side * side, c);
    let tape = GradTape::new();
    let ctx = Ctx::frozen(&tape, &store);
    let out = block.fwd(&ctx, &Feat { x: ctx.constant(tensor(&fv)), h: side, w: side }).unwrap();
    max_diff(&rows(&out.value()), &query_update(&fv, &store, "lq", with_pos))
}

/// Alignment maps and the linguistic update built on them.
pub fn alignment_error(seed: u64) -> f64 {
    let mut rng = CaseRng::new(200 + seed);
    let (l, d, m, cq) = (rng.range(2, 6), rng.range(2, 6), rng.range(1, 4), rng.range(2, 6));
    let valid = rng.range(1, l);
    let mut store = ParamStore::new(seed);
    let align = QueryTextAlign::new(&mut store, "align", d, cq);
    let ling = LinguisticUpdate::new(&mut store, "ling", d);
    scramble(&mut store, &mut rng);
    let (t, lq) = (random_mat(&mut rng, l, d), random_mat(&mut rng, m, cq));
    let tape = GradTape::new();
    let ctx = Ctx::frozen(&tape, &store);
    let text = TextFeat { x: ctx.constant(tensor(&t)), valid };
    let r = align.fwd(&ctx, &text, ctx.constant(tensor(&lq)), None).unwrap();
    let want_r = query_text_align(&t, &lq, m, &store, "align");
    let updated = ling.fwd(&ctx, &text, r).unwrap();
    assert_eq!(updated.valid, valid);
    max_diff(&rows(&r.value()), &want_r).max(max_diff(&rows(&updated.x.value()), &linguistic_update(&t, &want_r, &store, "ling")))
}

pub fn dynamic_select_error(seed: u64) -> f64 {
    let mut rng = CaseRng::new(300 + seed);
    let (side, c, d, l) = (rng.range(2, 5), rng.range(2, 5), rng.range(2, 5), rng.range(2, 5));
    let valid = rng.range(1, l);
    let mut store = ParamStore::new(seed);
    let block = DynamicSelect::new(&mut store, "dfs", &[1, 2], c, d, 1).unwrap();
    scramble(&mut store, &mut rng);
    let (fv, t) = (random_mat(&mut rng, side * side, c), random_mat(&mut rng, l, d));
    let tape = GradTape::new();
    let ctx = Ctx::frozen(&tape, &store);
    let out = block
        .fwd(&ctx, &Feat { x: ctx.constant(tensor(&fv)), h: side, w: side }, &TextFeat { x: ctx.constant(tensor(&t)), valid })
        .unwrap();
    max_diff(&rows(&out.x.value()), &dynamic_select(&fv, side, side, &t, valid, &[1, 2], &store, "dfs"))
}

fn tcsa_case(rng: &mut CaseRng, seed: u64, m: usize) -> (ParamStore, Tcsa, Vec<Mat>, Mat) {
    let channels: Vec<usize> = (0..4).map(|_| 2 * rng.range(1, 3)).collect();
    let spec = TcsaSpec { channels: channels.clone(), text_dim: 4, guidance: 2, heads: 2, grid: (1, m), channel: true, spatial: true, text: true };
    let mut store = ParamStore::new(seed);
    let t = Tcsa::new(&mut store, &spec).unwrap();
    scramble(&mut store, rng);
    let blocks: Vec<Mat> = channels.iter().map(|&c| random_mat(rng, m, c)).collect();
    let fc = random_mat(rng, m, spec.concat_width());
    (store, t, blocks, fc)
}

/// Channel attention over `m` grid positions.
pub fn channel_attention_error(seed: u64, m: usize) -> f64 {
    let mut rng = CaseRng::new(400 + seed + 1000 * m as u64);
    let (store, t, blocks, fc) = tcsa_case(&mut rng, seed, m);
    let tape = GradTape::new();
    let ctx = Ctx::frozen(&tape, &store);
    let i = rng.range(0, 3);
    let (got, p) = t.channel_delta(&ctx, i, ctx.constant(tensor(&blocks[i])), ctx.constant(tensor(&fc))).unwrap();
    assert_eq!(p.shape(), vec![blocks[i][0].len(), fc[0].len()]);
    max_diff(&rows(&got.value()), &channel_attention(&blocks[i], &fc, &store, &format!("tcsa.channel{}", i + 1)))
}

/// Two-head spatial attention over `m` grid positions.
pub fn spatial_attention_error(seed: u64, m: usize) -> f64 {
    let mut rng = CaseRng::new(500 + seed + 1000 * m as u64);
    let (store, t, blocks, fc) = tcsa_case(&mut rng, seed, m);
    let tape = GradTape::new();
    let ctx = Ctx::frozen(&tape, &store);
    let i = rng.range(0, 3);
    let (got, w) = t.spatial_delta(&ctx, i, ctx.constant(tensor(&blocks[i])), ctx.constant(tensor(&fc))).unwrap();
    assert_eq!(w.len(), 2);
    max_diff(&rows(&got.value()), &spatial_attention(&blocks[i], &fc, 2, &store, &format!("tcsa.spatial{}", i + 1)))
}

#[derive(Debug, Clone, Copy, Default)]
pub struct AttentionStats {
    /// Largest `|Σ row − 1|` over all heads and rows.
    pub row_sum_err: f64,
    /// Largest weight placed on a masked key.
    pub masked_weight: f64,
    /// Largest distance of an output coordinate outside the valid values' range.
    pub hull_excess: f64,
}

/// Random masked multi-head attention with large logits.
pub fn attention_case(seed: u64) -> AttentionStats {
    let mut rng = CaseRng::new(seed);
    let (nq, nk, heads, width) = (rng.range(1, 4), rng.range(1, 6), rng.range(1, 2), rng.range(1, 3));
    let dk = heads * width;
    let valid = if rng.unit() < 0.5 { rng.range(1, nk) } else { nk };
    let tape = GradTape::new();
    let q = tape.constant(Tensor::from_fn(&[nq, dk], |_| rng.uniform(-4.0, 4.0)));
    let k = tape.constant(Tensor::from_fn(&[nk, dk], |_| rng.uniform(-4.0, 4.0)));
    let vt = Tensor::from_fn(&[nk, dk], |_| rng.uniform(-4.0, 4.0));
    let (out, ws) = attention_weights(q, k, tape.constant(vt.clone()), heads, width, Some(valid)).unwrap();
    let mut s = AttentionStats::default();
    for w in &ws {
        for row in rows(&w.value()) {
            s.row_sum_err = s.row_sum_err.max((row.iter().sum::<f64>() - 1.0).abs());
            s.masked_weight = row[valid..].iter().fold(s.masked_weight, |a, &p| a.max(p));
        }
    }
    let vr = rows(&vt);
    for row in rows(&out.value()) {
        for (j, &o) in row.iter().enumerate() {
            let lo = vr[..valid].iter().map(|r| r[j]).fold(f64::INFINITY, f64::min);
            let hi = vr[..valid].iter().map(|r| r[j]).fold(f64::NEG_INFINITY, f64::max);
            s.hull_excess = s.hull_excess.max(lo - o).max(o - hi);
        }
    }
    s
}

/// Alignment with every query token (and its position) duplicated, against
/// the original token set.
pub fn duplicate_token_diff(seed: u64) -> f64 {
    let mut rng = CaseRng::new(seed);
    let (m, side) = (rng.range(1, 3), rng.range(1, 2));
    let (c, d, l) = (4, 4, 3);
    let mut one = ParamStore::new(seed);
    let (u1, a1) = (QueryUpdate::new(&mut one, "lq", m, c, c, true), QueryTextAlign::new(&mut one, "align", d, c));
    scramble(&mut one, &mut rng);
    let mut two = ParamStore::new(seed);
    let (u2, a2) = (QueryUpdate::new(&mut two, "lq", 2 * m, c, c, true), QueryTextAlign::new(&mut two, "align", d, c));
    for (name, t) in two.iter_mut() {
        let src = one.by_name(name).unwrap();
        *t = if name == "lq.tokens" || name == "lq.pos" {
            Tensor::new(t.shape(), src.values().iter().chain(src.values()).copied().collect()).unwrap()
        } else {
            src.clone()
        };
    }
    let (fv, text) = (random_mat(&mut rng, side * side, c), random_mat(&mut rng, l, d));
    let run = |store: &ParamStore, u: &QueryUpdate, a: &QueryTextAlign| {
        let tape = GradTape::new();
        let ctx = Ctx::frozen(&tape, store);
        let lq = u.fwd(&ctx, &Feat { x: ctx.constant(tensor(&fv)), h: side, w: side }).unwrap();
        rows(&a.fwd(&ctx, &TextFeat { x: ctx.constant(tensor(&text)), valid: l }, lq, None).unwrap().value())
    };
    max_diff(&run(&one, &u1, &a1), &run(&two, &u2, &a2))
}
