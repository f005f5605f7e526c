//! Raw slice kernels used by the forward and backward rules.

/// Tanh-approximation GeLU constants: sqrt(2/pi) and the cubic coefficient.
pub const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
pub const GELU_CUBIC: f64 = 0.044_715;

/// `c[m,n] += a[m,k] · b[k,n]`
pub fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m,n] += a[m,k] · b[n,k]ᵀ`
pub fn matmul_bt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                s += x * y;
            }
            c[i * n + j] += s;
        }
    }
}

/// `c[m,n] += a[k,m]ᵀ · b[k,n]`
pub fn matmul_at_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

pub fn gelu(x: f64) -> f64 {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    let du = GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Splits a shape around `axis` into (outer, axis length, inner) extents.
pub fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn softmax_forward(x: &[f64], outer: usize, len: usize, inner: usize) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for o in 0..outer {
        for r in 0..inner {
            let at = |t: usize| o * len * inner + t * inner + r;
            let mut max = f64::NEG_INFINITY;
            for t in 0..len {
                max = max.max(x[at(t)]);
            }
            let mut sum = 0.0;
            for t in 0..len {
                let e = (x[at(t)] - max).exp();
                y[at(t)] = e;
                sum += e;
            }
            for t in 0..len {
                y[at(t)] /= sum;
            }
        }
    }
    y
}

pub fn log_softmax_forward(x: &[f64], outer: usize, len: usize, inner: usize) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for o in 0..outer {
        for r in 0..inner {
            let at = |t: usize| o * len * inner + t * inner + r;
            let mut max = f64::NEG_INFINITY;
            for t in 0..len {
                max = max.max(x[at(t)]);
            }
            let mut sum = 0.0;
            for t in 0..len {
                sum += (x[at(t)] - max).exp();
            }
            let lse = sum.ln();
            for t in 0..len {
                y[at(t)] = x[at(t)] - max - lse;
            }
        }
    }
    y
}
