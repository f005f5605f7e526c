//! Straight-line scalar reference implementations. Matrices are row lists;
//! parameters are looked up by name so the oracles share nothing with the
//! tape-based code beyond the parameter values.
#![allow(dead_code)]

pub mod cases;

use sbanet_autograd::suite::CaseRng;
use sbanet_autograd::Tensor;
use sbanet_core::ParamStore;

pub type Mat = Vec<Vec<f64>>;

pub const EPS: f64 = 1e-5;

pub fn rows(t: &Tensor) -> Mat {
    let c = *t.shape().last().unwrap();
    t.values().chunks(c).map(|r| r.to_vec()).collect()
}

pub fn tensor(m: &Mat) -> Tensor {
    Tensor::from_rows(m).unwrap()
}

pub fn random_mat(rng: &mut CaseRng, r: usize, c: usize) -> Mat {
    (0..r).map(|_| (0..c).map(|_| rng.uniform(-1.0, 1.0)).collect()).collect()
}

/// Overwrites every parameter (norm gains included) with random values.
pub fn scramble(store: &mut ParamStore, rng: &mut CaseRng) {
    for (_, t) in store.iter_mut() {
        for v in t.values_mut() {
            *v = rng.uniform(-1.0, 1.0);
        }
    }
}

pub fn max_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.len(), b.len(), "row count");
    let mut worst: f64 = 0.0;
    for (x, y) in a.iter().zip(b) {
        assert_eq!(x.len(), y.len(), "column count");
        for (p, q) in x.iter().zip(y) {
            worst = worst.max((p - q).abs());
        }
    }
    worst
}

fn p<'a>(store: &'a ParamStore, name: &str) -> &'a [f64] {
    store.by_name(name).unwrap_or_else(|| panic!("no parameter {name}")).values()
}

pub fn linear(x: &Mat, store: &ParamStore, name: &str) -> Mat {
    let w = store.by_name(&format!("{name}.weight")).unwrap();
    let (out, inp) = (w.shape()[0], w.shape()[1]);
    let (w, b) = (w.values(), p(store, &format!("{name}.bias")));
    x.iter()
        .map(|row| {
            assert_eq!(row.len(), inp);
            (0..out)
                .map(|o| {
                    let mut s = b[o];
                    for i in 0..inp {
                        s += row[i] * w[o * inp + i];
                    }
                    s
                })
                .collect()
        })
        .collect()
}

pub fn layer_norm(x: &Mat, store: &ParamStore, name: &str) -> Mat {
    let g = p(store, &format!("{name}.gamma"));
    let b = p(store, &format!("{name}.beta"));
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + EPS).sqrt();
            row.iter().enumerate().map(|(j, v)| (v - mean) * inv * g[j] + b[j]).collect()
        })
        .collect()
}

pub fn depthwise(x: &Mat, store: &ParamStore, name: &str) -> Mat {
    let s = p(store, &format!("{name}.scale"));
    let b = p(store, &format!("{name}.bias"));
    x.iter().map(|row| row.iter().enumerate().map(|(j, v)| v * s[j] + b[j]).collect()).collect()
}

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

pub fn map(x: &Mat, f: impl Fn(f64) -> f64) -> Mat {
    x.iter().map(|r| r.iter().map(|&v| f(v)).collect()).collect()
}

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

pub fn hadamard(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).collect()).collect()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Per-head softmax attention restricted to the first `valid` keys.
pub fn attention(q: &Mat, k: &Mat, v: &Mat, heads: usize, scale_dim: usize, valid: usize) -> Mat {
    let (dk, dv) = (q[0].len() / heads, v[0].len() / heads);
    let mut out = vec![vec![0.0; v[0].len()]; q.len()];
    for h in 0..heads {
        for (i, qi) in q.iter().enumerate() {
            let logits: Vec<f64> = k[..valid]
                .iter()
                .map(|kj| (0..dk).map(|t| qi[h * dk + t] * kj[h * dk + t]).sum::<f64>() / (scale_dim as f64).sqrt())
                .collect();
            let w = softmax(&logits);
            for (j, wj) in w.iter().enumerate() {
                for t in 0..dv {
                    out[i][h * dv + t] += wj * v[j][h * dv + t];
                }
            }
        }
    }
    out
}

pub fn mlp2(x: &Mat, store: &ParamStore, name: &str) -> Mat {
    let h = linear(&layer_norm(x, store, &format!("{name}.norm")), store, &format!("{name}.fc1"));
    linear(&map(&h, gelu), store, &format!("{name}.fc2"))
}

pub fn pwam(v: &Mat, text: &Mat, valid: usize, heads: usize, store: &ParamStore, name: &str) -> Mat {
    let c = v[0].len();
    let q = layer_norm(&linear(v, store, &format!("{name}.query")), store, &format!("{name}.query_norm"));
    let k = linear(text, store, &format!("{name}.key"));
    let val = linear(text, store, &format!("{name}.value"));
    let a = attention(&q, &k, &val, heads, c / heads, valid);
    let a = layer_norm(&linear(&a, store, &format!("{name}.out")), store, &format!("{name}.out_norm"));
    let vp = map(&linear(v, store, &format!("{name}.visual")), gelu);
    map(&linear(&hadamard(&vp, &a), store, &format!("{name}.fuse")), relu)
}

pub fn gate(y: &Mat, store: &ParamStore, name: &str) -> Mat {
    let h = map(&linear(y, store, &format!("{name}.fc1")), relu);
    let g = map(&linear(&h, store, &format!("{name}.fc2")), f64::tanh);
    hadamard(&g, y)
}

/// Learnable tokens (plus optional positions) attend over the pixels.
pub fn query_update(fv: &Mat, store: &ParamStore, name: &str, with_pos: bool) -> Mat {
    let mut tokens = rows(store.by_name(&format!("{name}.tokens")).unwrap());
    if with_pos {
        tokens = add(&tokens, &rows(store.by_name(&format!("{name}.pos")).unwrap()));
    }
    let cq = tokens[0].len();
    let q = linear(&tokens, store, &format!("{name}.query"));
    let kv = layer_norm(fv, store, &format!("{name}.kv_norm"));
    let k = linear(&kv, store, &format!("{name}.key"));
    let v = linear(&kv, store, &format!("{name}.value"));
    let a = attention(&q, &k, &v, 1, cq, fv.len());
    layer_norm(&add(&a, &mlp2(&a, store, &format!("{name}.mlp"))), store, &format!("{name}.norm"))
}

/// Text tokens attend over `src`; output projected and normalized.
pub fn query_text_align(text: &Mat, src: &Mat, src_valid: usize, store: &ParamStore, name: &str) -> Mat {
    let q = map(&linear(text, store, &format!("{name}.query")), gelu);
    let k = map(&linear(src, store, &format!("{name}.key")), gelu);
    let v = map(&linear(src, store, &format!("{name}.value")), gelu);
    let r = attention(&q, &k, &v, 1, src[0].len(), src_valid);
    layer_norm(&linear(&r, store, &format!("{name}.out")), store, &format!("{name}.norm"))
}

pub fn linguistic_update(text: &Mat, r: &Mat, store: &ParamStore, name: &str) -> Mat {
    let l = map(&linear(text, store, &format!("{name}.lang")), relu);
    map(&linear(&hadamard(&l, r), store, &format!("{name}.final")), relu)
}

/// Adaptive average pooling of an `h×w` map into `g×g` bins.
pub fn pool(x: &Mat, h: usize, w: usize, g: usize) -> Mat {
    let c = x[0].len();
    let mut out = Vec::new();
    for by in 0..g {
        for bx in 0..g {
            let (y0, y1) = (by * h / g, (by + 1) * h / g);
            let (x0, x1) = (bx * w / g, (bx + 1) * w / g);
            let mut acc = vec![0.0; c];
            for y in y0..y1 {
                for xx in x0..x1 {
                    for ch in 0..c {
                        acc[ch] += x[y * w + xx][ch];
                    }
                }
            }
            let n = ((y1 - y0) * (x1 - x0)) as f64;
            out.push(acc.into_iter().map(|v| v / n).collect());
        }
    }
    out
}

fn source_coord(o: usize, n_in: usize, n_out: usize) -> (usize, usize, f64) {
    let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
    let i0 = (s.floor() as usize).min(n_in - 1);
    let i1 = (i0 + 1).min(n_in - 1);
    (i0, i1, s - i0 as f64)
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn bilinear(x: &Mat, h: usize, w: usize, oh: usize, ow: usize) -> Mat {
    let c = x[0].len();
    let mut out = Vec::new();
    for oy in 0..oh {
        let (y0, y1, fy) = source_coord(oy, h, oh);
        for ox in 0..ow {
            let (x0, x1, fx) = source_coord(ox, w, ow);
            out.push(
                (0..c)
                    .map(|ch| {
                        let a = x[y0 * w + x0][ch] * (1.0 - fx) + x[y0 * w + x1][ch] * fx;
                        let b = x[y1 * w + x0][ch] * (1.0 - fx) + x[y1 * w + x1][ch] * fx;
                        a * (1.0 - fy) + b * fy
                    })
                    .collect(),
            );
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn dynamic_select(fv: &Mat, h: usize, w: usize, text: &Mat, valid: usize, group: &[usize], store: &ParamStore, name: &str) -> Mat {
    let mut cat: Mat = vec![Vec::new(); h * w];
    for &g in group {
        let pooled = pool(fv, h, w, g);
        let x = layer_norm(&linear(&pooled, store, &format!("{name}.pool{g}.conv")), store, &format!("{name}.pool{g}.norm"));
        let cross = pwam(&x, text, valid, 1, store, &format!("{name}.pool{g}.pwam"));
        let up = bilinear(&cross, g, g, h, w);
        for (row, u) in cat.iter_mut().zip(up) {
            row.extend(u);
        }
    }
    mlp2(&cat, store, &format!("{name}.fuse"))
}

/// Attention across channels: `[c_i × c_c]` weights from `Qᵀ·K`.
pub fn channel_attention(stage: &Mat, fc: &Mat, store: &ParamStore, prefix: &str) -> Mat {
    let q = depthwise(stage, store, &format!("{prefix}.query"));
    let k = depthwise(fc, store, &format!("{prefix}.key"));
    let v = depthwise(fc, store, &format!("{prefix}.value"));
    let (m, ci, cc) = (stage.len(), stage[0].len(), fc[0].len());
    let mut out = vec![vec![0.0; ci]; m];
    for j in 0..ci {
        let logits: Vec<f64> =
            (0..cc).map(|kk| (0..m).map(|pp| q[pp][j] * k[pp][kk]).sum::<f64>() / (cc as f64).sqrt()).collect();
        let wts = softmax(&logits);
        for pp in 0..m {
            out[pp][j] = (0..cc).map(|kk| wts[kk] * v[pp][kk]).sum();
        }
    }
    depthwise(&out, store, &format!("{prefix}.post"))
}

/// Multi-head attention across positions with weights from `F_C`.
pub fn spatial_attention(stage: &Mat, fc: &Mat, heads: usize, store: &ParamStore, prefix: &str) -> Mat {
    let q = depthwise(fc, store, &format!("{prefix}.query"));
    let k = depthwise(fc, store, &format!("{prefix}.key"));
    let v = depthwise(stage, store, &format!("{prefix}.value"));
    let (m, ci, cc) = (stage.len(), stage[0].len(), fc[0].len());
    let (hk, hv) = (cc / heads, ci / heads);
    let mut out = vec![vec![0.0; ci]; m];
    for h in 0..heads {
        for i in 0..m {
            let logits: Vec<f64> = (0..m)
                .map(|j| (0..hk).map(|t| q[i][h * hk + t] * k[j][h * hk + t]).sum::<f64>() / (hk as f64).sqrt())
                .collect();
            let wts = softmax(&logits);
            for t in 0..hv {
                out[i][h * hv + t] = (0..m).map(|j| wts[j] * v[j][h * hv + t]).sum();
            }
        }
    }
    depthwise(&out, store, &format!("{prefix}.post"))
}

/// Whole-corpus pixel counting with no per-sample helper.
pub fn pixel_oracle(corpus: &[(Vec<u8>, Vec<u8>)], thresholds: &[f64]) -> (f64, f64, Vec<f64>) {
    let mut total_i = 0u64;
    let mut total_u = 0u64;
    let mut ious = Vec::new();
    for (p, g) in corpus {
        let mut i = 0u64;
        let mut u = 0u64;
        for k in 0..g.len() {
            let (a, b) = (p[k] == 1, g[k] == 1);
            if a && b {
                i += 1;
            }
            if a || b {
                u += 1;
            }
        }
        total_i += i;
        total_u += u;
        ious.push(if u == 0 { 1.0 } else { i as f64 / u as f64 });
    }
    let mut sum = 0.0;
    for v in &ious {
        sum += v;
    }
    let miou = sum / ious.len() as f64;
    let oiou = if total_u == 0 { 1.0 } else { total_i as f64 / total_u as f64 };
    let pr = thresholds
        .iter()
        .map(|t| {
            let mut hits = 0;
            for v in &ious {
                if v > t {
                    hits += 1;
                }
            }
            hits as f64 / ious.len() as f64
        })
        .collect();
    (oiou, miou, pr)
}
