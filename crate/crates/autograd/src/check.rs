//! Central finite-difference verification of recorded gradients.

use crate::error::{Result, TensorError};
use crate::tape::GradTape;
use crate::tensor::Tensor;
use crate::var::Var;

#[derive(Debug, Clone, Copy)]
pub struct CheckOptions {
    /// Central-difference half step; must lie in `[1e-7, 1e-3]`.
    pub step: f64,
    pub tol: f64,
    /// Denominator floor of the relative error. Gradients smaller than this
    /// are effectively compared in absolute terms.
    pub floor: f64,
    /// Probe at most this many coordinates of each input (all when `None`).
    pub max_coords_per_input: Option<usize>,
    pub seed: u64,
    /// Primitive whose backward rule is negated on the analytic pass
    /// (mutation fixture; `None` in normal use).
    pub sign_flip: Option<&'static str>,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self { step: 1e-5, tol: 1e-5, floor: 1e-8, max_coords_per_input: None, seed: 0, sign_flip: None }
    }
}

/// Largest disagreement found between autodiff and finite differences.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub max_rel_err: f64,
    pub tol: f64,
    pub checked: usize,
    /// `(input, coordinate, analytic, numeric)` at the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

/// `|a − n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_floored(analytic, numeric, 1e-8)
}

pub fn relative_error_floored(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn splitmix(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn pick_coords(len: usize, cap: Option<usize>, state: &mut u64) -> Vec<usize> {
    match cap {
        Some(k) if k < len => {
            let mut idx: Vec<usize> = (0..len).collect();
            for i in 0..k {
                let j = i + (splitmix(state) % (len - i) as u64) as usize;
                idx.swap(i, j);
            }
            let mut chosen = idx[..k].to_vec();
            chosen.sort_unstable();
            chosen
        }
        _ => (0..len).collect(),
    }
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: for<'t> Fn(&'t GradTape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = GradTape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&tape, &vars)?;
    if out.len() != 1 {
        return Err(TensorError::Contract(format!("checked function must return a scalar, got {:?}", out.shape())));
    }
    let v = out.item();
    if !v.is_finite() {
        return Err(TensorError::Eval(format!("checked function returned {v}")));
    }
    Ok(v)
}

/// Compares the tape gradient of a scalar function of several inputs with
/// central differences at (optionally sampled) coordinates of every input.
pub fn check_gradients<F>(f: F, inputs: &[Tensor], opts: &CheckOptions) -> Result<CheckReport>
where
    F: for<'t> Fn(&'t GradTape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if !(1e-7..=1e-3).contains(&opts.step) {
        return Err(TensorError::Contract(format!("finite-difference step {} outside [1e-7, 1e-3]", opts.step)));
    }
    let analytic: Vec<Vec<f64>> = {
        let tape = GradTape::new();
        if let Some(p) = opts.sign_flip {
            tape.inject_sign_flip(p)?;
        }
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.param(t)).collect();
        let out = f(&tape, &vars)?;
        if !out.item().is_finite() {
            return Err(TensorError::Eval(format!("checked function returned {}", out.item())));
        }
        let grads = tape.backward(out)?;
        vars.iter().map(|v| grads.wrt(*v).expect("param leaf").to_vec()).collect()
    };

    let mut state = opts.seed;
    let mut report = CheckReport { max_rel_err: 0.0, tol: opts.tol, checked: 0, worst: None };
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        for c in pick_coords(input.len(), opts.max_coords_per_input, &mut state) {
            let x0 = input.values()[c];
            probe[k].values_mut()[c] = x0 + opts.step;
            let up = eval_scalar(&f, &probe)?;
            probe[k].values_mut()[c] = x0 - opts.step;
            let down = eval_scalar(&f, &probe)?;
            probe[k].values_mut()[c] = x0;
            let numeric = (up - down) / (2.0 * opts.step);
            let a = analytic[k][c];
            let err = relative_error_floored(a, numeric, opts.floor);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((k, c, a, numeric));
            }
        }
    }
    Ok(report)
}

/// Single-input form of [`check_gradients`] probing every coordinate.
pub fn finite_diff_check<F>(f: F, x: &Tensor, step: f64, tol: f64) -> Result<CheckReport>
where
    F: for<'t> Fn(&'t GradTape, Var<'t>) -> Result<Var<'t>>,
{
    let opts = CheckOptions { step, tol, ..CheckOptions::default() };
    check_gradients(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), &opts)
}
