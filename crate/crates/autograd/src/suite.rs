//! Randomized gradient checks, one per differentiable primitive.

use std::rc::Rc;

use crate::check::{check_gradients, CheckOptions, CheckReport};
use crate::error::{Result, TensorError};
use crate::tape::{GradTape, ResampleMap, PRIMITIVES};
use crate::tensor::Tensor;
use crate::var::{concat, Var};

/// Deterministic generator for test inputs (SplitMix64).
#[derive(Debug, Clone)]
pub struct CaseRng(u64);

impl CaseRng {
    pub fn new(seed: u64) -> Self {
        Self(seed ^ 0x5DEE_CE66_D1CE_4E5B)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)`.
    pub fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }

    /// Uniform integer in `lo..=hi`.
    pub fn range(&mut self, lo: usize, hi: usize) -> usize {
        lo + (self.next_u64() % (hi - lo + 1) as u64) as usize
    }

    pub fn tensor(&mut self, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| self.uniform(-1.0, 1.0))
    }

    /// Values bounded away from zero, for kinked functions.
    pub fn tensor_off_zero(&mut self, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| {
            let mag = self.uniform(0.25, 1.0);
            if self.unit() < 0.5 {
                -mag
            } else {
                mag
            }
        })
    }
}

type Loss = Box<dyn for<'t> Fn(&'t GradTape, &[Var<'t>]) -> Result<Var<'t>>>;

/// Random inputs plus a scalar-valued function exercising one primitive.
pub struct PrimitiveCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub loss: Loss,
}

/// Contracts `out` against fixed random weights so every output coordinate
/// contributes to the gradient. The contraction avoids the primitive under
/// test so that a corrupted rule cannot cancel against itself.
fn weighted<'t>(tape: &'t GradTape, name: &str, out: Var<'t>, weights: &[f64]) -> Result<Var<'t>> {
    if matches!(name, "mul" | "sum") {
        let n = out.len();
        let w = tape.constant(Tensor::new(&[n, 1], weights.to_vec())?);
        out.reshape(&[1, n])?.matmul(w)
    } else {
        let w = tape.constant(Tensor::new(&out.shape(), weights.to_vec())?);
        Ok(out.mul(w)?.sum())
    }
}

fn case(name: &'static str, inputs: Vec<Tensor>, out_len: usize, rng: &mut CaseRng, f: Loss) -> PrimitiveCase {
    let weights = rng.tensor_off_zero(&[out_len]).into_values();
    let loss: Loss = Box::new(move |tape, vars| {
        let out = f(tape, vars)?;
        weighted(tape, name, out, &weights)
    });
    PrimitiveCase { name, inputs, loss }
}

fn small_shape(rng: &mut CaseRng, rank: usize) -> Vec<usize> {
    (0..rank).map(|_| rng.range(1, 4)).collect()
}

/// Builds the randomized case for `name` from `seed`.
pub fn primitive_case(name: &str, seed: u64) -> Result<PrimitiveCase> {
    let mut rng = CaseRng::new(seed.wrapping_mul(31).wrapping_add(name.len() as u64));
    let (m, k, n) = (rng.range(1, 5), rng.range(1, 5), rng.range(1, 5));
    let c = match name {
        "matmul" => {
            let ins = vec![rng.tensor(&[m, k]), rng.tensor(&[k, n])];
            case("matmul", ins, m * n, &mut rng, Box::new(|_, v| v[0].matmul(v[1])))
        }
        "matmul_bt" => {
            let ins = vec![rng.tensor(&[m, k]), rng.tensor(&[n, k])];
            case("matmul_bt", ins, m * n, &mut rng, Box::new(|_, v| v[0].matmul_bt(v[1])))
        }
        "matmul_at" => {
            let ins = vec![rng.tensor(&[k, m]), rng.tensor(&[k, n])];
            case("matmul_at", ins, m * n, &mut rng, Box::new(|_, v| v[0].matmul_at(v[1])))
        }
        "add" | "sub" | "mul" => {
            let shape = small_shape(&mut rng, 3);
            let other = if rng.unit() < 0.5 { shape.clone() } else { shape[1..].to_vec() };
            let ins = vec![rng.tensor(&shape), rng.tensor(&other)];
            let len = shape.iter().product();
            let f: Loss = match name {
                "add" => Box::new(|_, v| v[0].add(v[1])),
                "sub" => Box::new(|_, v| v[0].sub(v[1])),
                _ => Box::new(|_, v| v[0].mul(v[1])),
            };
            let name = PRIMITIVES.iter().find(|p| **p == name).expect("known");
            case(name, ins, len, &mut rng, f)
        }
        "scale" => {
            let factor = rng.uniform(-2.0, 2.0);
            let ins = vec![rng.tensor(&[m, n])];
            case("scale", ins, m * n, &mut rng, Box::new(move |_, v| Ok(v[0].scale(factor))))
        }
        "relu" => {
            let ins = vec![rng.tensor_off_zero(&[m, n])];
            case("relu", ins, m * n, &mut rng, Box::new(|_, v| Ok(v[0].relu())))
        }
        "gelu" => {
            // Stay clear of the stationary point near -0.75 where the
            // derivative vanishes and relative errors are meaningless.
            let ins = vec![Tensor::from_fn(&[m, n], |_| {
                let x = rng.uniform(-3.0, 2.6);
                if x > -0.95 { x + 0.4 } else { x }
            })];
            case("gelu", ins, m * n, &mut rng, Box::new(|_, v| Ok(v[0].gelu())))
        }
        "tanh" => {
            let ins = vec![Tensor::from_fn(&[m, n], |_| rng.uniform(-2.0, 2.0))];
            case("tanh", ins, m * n, &mut rng, Box::new(|_, v| Ok(v[0].tanh())))
        }
        "softmax" | "log_softmax" => {
            let shape = small_shape(&mut rng, 3);
            let axis = rng.range(0, 2);
            let ins = vec![Tensor::from_fn(&shape, |_| rng.uniform(-3.0, 3.0))];
            let len = shape.iter().product();
            if name == "softmax" {
                case("softmax", ins, len, &mut rng, Box::new(move |_, v| v[0].softmax(axis)))
            } else {
                case("log_softmax", ins, len, &mut rng, Box::new(move |_, v| v[0].log_softmax(axis)))
            }
        }
        "layer_norm" => {
            let mut shape = small_shape(&mut rng, 3);
            let axis = rng.range(0, 2);
            // Two-element slices normalize to ±1 and have near-zero gradients.
            shape[axis] = rng.range(3, 5);
            let ins = vec![rng.tensor(&shape), rng.tensor(&[shape[axis]]), rng.tensor(&[shape[axis]])];
            let len = shape.iter().product();
            case("layer_norm", ins, len, &mut rng, Box::new(move |_, v| v[0].layer_norm(v[1], v[2], axis, 1e-5)))
        }
        "sum" => {
            let ins = vec![rng.tensor(&[m, n])];
            case("sum", ins, 1, &mut rng, Box::new(|_, v| Ok(v[0].mul(v[0])?.sum())))
        }
        "mean" => {
            let ins = vec![rng.tensor(&[m, n])];
            case("mean", ins, 1, &mut rng, Box::new(|_, v| Ok(v[0].mul(v[0])?.mean())))
        }
        "reshape" => {
            let ins = vec![rng.tensor(&[m, n])];
            case("reshape", ins, m * n, &mut rng, Box::new(move |_, v| v[0].reshape(&[n, m])))
        }
        "gather" => {
            let src = m * n;
            let out = rng.range(1, 8);
            let index: Rc<[usize]> = (0..out).map(|_| rng.range(0, src - 1)).collect();
            let ins = vec![rng.tensor(&[m, n])];
            case("gather", ins, out, &mut rng, Box::new(move |_, v| v[0].gather(&[out], index.clone())))
        }
        "concat" => {
            let base = small_shape(&mut rng, 3);
            let axis = rng.range(0, 2);
            let mut other = base.clone();
            other[axis] = rng.range(1, 3);
            let ins = vec![rng.tensor(&base), rng.tensor(&other)];
            let len = base.iter().product::<usize>() + other.iter().product::<usize>();
            case("concat", ins, len, &mut rng, Box::new(move |_, v| concat(&[v[0], v[1]], axis)))
        }
        "resample" => {
            let (rows_in, rows_out, ch) = (rng.range(1, 6), rng.range(1, 6), rng.range(1, 4));
            let rows = (0..rows_out)
                .map(|_| (0..rng.range(1, 3)).map(|_| (rng.range(0, rows_in - 1), rng.uniform(-1.0, 1.0))).collect())
                .collect();
            let map = Rc::new(ResampleMap { in_len: rows_in, rows });
            let ins = vec![rng.tensor(&[rows_in, ch])];
            case("resample", ins, rows_out * ch, &mut rng, Box::new(move |_, v| v[0].resample(map.clone())))
        }
        other => return Err(TensorError::Usage(format!("no gradient case for primitive {other:?}"))),
    };
    Ok(c)
}

/// Runs the randomized gradient check for one primitive.
pub fn check_primitive(name: &str, seed: u64, opts: &CheckOptions) -> Result<CheckReport> {
    let c = primitive_case(name, seed)?;
    check_gradients(c.loss, &c.inputs, opts)
}
