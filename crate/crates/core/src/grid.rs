//! Index maps between spatial layouts of `[h·w × c]` feature matrices.

use std::rc::Rc;

use sbanet_autograd::ResampleMap;

use crate::error::{config_err, Result};

/// Bin `b` of `g` over `n` cells covers `[⌊b·n/g⌋, ⌊(b+1)·n/g⌋)`.
pub fn pool_bins(n: usize, g: usize) -> Vec<(usize, usize)> {
    (0..g).map(|b| (b * n / g, (b + 1) * n / g)).collect()
}

/// Adaptive average pooling from `h×w` to `oh×ow`.
pub fn pool_map(h: usize, w: usize, oh: usize, ow: usize) -> Result<Rc<ResampleMap>> {
    if oh == 0 || ow == 0 || oh > h || ow > w {
        return config_err(format!("cannot pool a {h}×{w} map into {oh}×{ow} bins"));
    }
    let (ry, rx) = (pool_bins(h, oh), pool_bins(w, ow));
    let mut rows = Vec::with_capacity(oh * ow);
    for &(y0, y1) in &ry {
        for &(x0, x1) in &rx {
            let wgt = 1.0 / ((y1 - y0) * (x1 - x0)) as f64;
            rows.push((y0..y1).flat_map(|y| (x0..x1).map(move |x| (y * w + x, wgt))).collect());
        }
    }
    Ok(Rc::new(ResampleMap { in_len: h * w, rows }))
}

/// Sample taps along one axis with half-pixel centers, clamped at the border.
fn linear_taps(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    let ratio = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * ratio - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let frac = src - i0 as f64;
            if i1 == i0 || frac == 0.0 {
                vec![(i0, 1.0)]
            } else {
                vec![(i0, 1.0 - frac), (i1, frac)]
            }
        })
        .collect()
}

/// Bilinear resampling (half-pixel centers, no corner alignment).
pub fn bilinear_map(h: usize, w: usize, oh: usize, ow: usize) -> Result<Rc<ResampleMap>> {
    if h == 0 || w == 0 || oh == 0 || ow == 0 {
        return config_err(format!("cannot resample {h}×{w} to {oh}×{ow}"));
    }
    let (ty, tx) = (linear_taps(h, oh), linear_taps(w, ow));
    let mut rows = Vec::with_capacity(oh * ow);
    for ys in &ty {
        for xs in &tx {
            rows.push(ys.iter().flat_map(|&(y, wy)| xs.iter().map(move |&(x, wx)| (y * w + x, wy * wx))).collect());
        }
    }
    Ok(Rc::new(ResampleMap { in_len: h * w, rows }))
}

/// Pools when shrinking, interpolates when growing; `None` for same size.
pub fn resize_map(h: usize, w: usize, oh: usize, ow: usize) -> Result<Option<Rc<ResampleMap>>> {
    match (oh.cmp(&h), ow.cmp(&w)) {
        (std::cmp::Ordering::Equal, std::cmp::Ordering::Equal) => Ok(None),
        (std::cmp::Ordering::Greater, _) | (_, std::cmp::Ordering::Greater) => bilinear_map(h, w, oh, ow).map(Some),
        _ => pool_map(h, w, oh, ow).map(Some),
    }
}

/// Gathers non-overlapping `s×s` patches of an `h×w×c` map into rows of
/// length `s·s·c`, ordered `(dy, dx, channel)`.
pub fn space_to_depth_index(h: usize, w: usize, c: usize, s: usize) -> Rc<[usize]> {
    let (oh, ow) = (h / s, w / s);
    let mut idx = Vec::with_capacity(oh * ow * s * s * c);
    for py in 0..oh {
        for px in 0..ow {
            for dy in 0..s {
                for dx in 0..s {
                    let base = ((py * s + dy) * w + px * s + dx) * c;
                    idx.extend(base..base + c);
                }
            }
        }
    }
    idx.into()
}
