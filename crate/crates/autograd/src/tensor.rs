use std::fmt;

use crate::codec::ByteReader;
use crate::error::{shape_err, Result, TensorError};

/// Magic prefix of a serialized tensor record.
pub const TENSOR_MAGIC: &[u8; 4] = b"SBTN";

/// Dense row-major array of `f64` values with an optional gradient slot.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

pub(crate) fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.contains(&0) {
        return Err(shape_err(format!("dimensions must be positive, got {shape:?}")));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn new(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != values.len() {
            return Err(shape_err(format!(
                "shape {shape:?} holds {n} values but {} were given",
                values.len()
            )));
        }
        Ok(Self { shape: shape.to_vec(), values, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = check_shape(shape).expect("positive dimensions");
        Self { shape: shape.to_vec(), values: vec![value; n], requires_grad: false, grad: None }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(&[1], value)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = check_shape(shape).expect("positive dimensions");
        Self::new(shape, (0..n).map(&mut f).collect()).expect("length matches")
    }

    /// Row-major matrix from nested rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(shape_err("ragged rows"));
        }
        Self::new(&[r, c], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Mutable access for in-place parameter updates. The shape stays fixed.
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.values.len() {
            return Err(shape_err(format!(
                "gradient of length {} for tensor of length {}",
                grad.len(),
                self.values.len()
            )));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// New descriptor over the same values.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != self.values.len() {
            return Err(shape_err(format!("cannot reshape {:?} into {shape:?}", self.shape)));
        }
        Ok(Self { shape: shape.to_vec(), values: self.values.clone(), requires_grad: false, grad: None })
    }

    /// Element at a multi-index (row-major).
    pub fn at(&self, index: &[usize]) -> f64 {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            flat = flat * d + i;
        }
        self.values[flat]
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "shape mismatch in max_abs_diff");
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Byte length of the serialized record.
    pub fn encoded_len(&self) -> usize {
        4 + 4 + 4 * self.shape.len() + 8 * self.values.len()
    }

    /// Appends the `SBTN` record: magic, u32 rank, u32 dims, f64 values,
    /// all little-endian. The gradient slot is not serialized.
    pub fn encode_into(&self, out: &mut Vec<u8>) {
        out.reserve(self.encoded_len());
        out.extend_from_slice(TENSOR_MAGIC);
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &d in &self.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.encode_into(&mut out);
        out
    }

    pub fn decode_from(r: &mut ByteReader<'_>) -> Result<Self> {
        r.magic(TENSOR_MAGIC)?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            let at = r.position();
            let d = r.u32()? as usize;
            if d == 0 {
                return Err(TensorError::Format { offset: at, msg: "zero dimension".into() });
            }
            shape.push(d);
        }
        let n: usize = shape.iter().product();
        if r.remaining() < n.saturating_mul(8) {
            return Err(r.error(format!("truncated: {n} values declared")));
        }
        let values = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        Tensor::new(&shape, values)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let t = Self::decode_from(&mut r)?;
        if !r.is_empty() {
            return Err(r.error("trailing bytes after tensor record"));
        }
        Ok(t)
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.values.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("values", &preview)
            .field("requires_grad", &self.requires_grad)
            .finish()
    }
}
