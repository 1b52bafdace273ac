//! Dense row-major `f64` tensors.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};

/// A dense row-major array of 64-bit floats.
///
/// `shape.iter().product() == data.len()` always holds. Gradients are not
/// stored on the tensor itself: they live on the compute graph during a
/// backward pass and are accumulated into the [`ParameterStore`] afterwards.
///
/// [`ParameterStore`]: crate::params::ParameterStore
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(dim_err(
                "tensor",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Builds a 2-D tensor from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(dim_err("from_rows", "ragged rows"));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(&[rows.len(), cols], data)
    }

    /// Uniform samples in `[-bound, bound]`.
    pub fn uniform<R: Rng>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| rng.gen_range(-bound..=bound)).collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(dim_err("dims2", format!("expected rank 2, got {other:?}"))),
        }
    }

    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            [a, b, c] => Ok((*a, *b, *c)),
            other => Err(dim_err("dims3", format!("expected rank 3, got {other:?}"))),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(dim_err(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn at2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.shape[self.shape.len() - 1];
        &self.data[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if let Some(pos) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                op,
                detail: format!(
                    "non-finite value {} at flat index {pos} of shape {:?}",
                    self.data[pos], self.shape
                ),
            });
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

/// Plain `a[n×k] · b[k×m]` into a fresh buffer.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let out_row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * m..(p + 1) * m];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}
