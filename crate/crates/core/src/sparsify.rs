//! Top-k sparsification with error-feedback residuals and payload accounting.

use std::cmp::Ordering;
use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense parameter or gradient vector of fixed model dimension `s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientVector(Vec<f64>);

impl GradientVector {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn norm2(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &GradientVector) {
        debug_assert_eq!(self.len(), other.len());
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += alpha * b;
        }
    }

    pub fn add(&self, other: &GradientVector) -> GradientVector {
        debug_assert_eq!(self.len(), other.len());
        GradientVector(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    pub fn sub(&self, other: &GradientVector) -> GradientVector {
        debug_assert_eq!(self.len(), other.len());
        GradientVector(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    pub fn scale(&mut self, alpha: f64) {
        self.0.iter_mut().for_each(|v| *v *= alpha);
    }

    pub fn fill_zero(&mut self) {
        self.0.iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn max_abs_diff(&self, other: &GradientVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl Index<usize> for GradientVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl IndexMut<usize> for GradientVector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

impl From<Vec<f64>> for GradientVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

/// Sparse update: strictly increasing indices with aligned values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseUpdate {
    dim: usize,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseUpdate {
    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Sparse view of a full dense vector (every slot selected).
    pub fn dense(x: &GradientVector) -> Self {
        Self {
            dim: x.len(),
            indices: (0..x.len()).collect(),
            values: x.as_slice().to_vec(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn norm2(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    pub fn densify(&self) -> GradientVector {
        let mut out = GradientVector::zeros(self.dim);
        for (&i, &v) in self.indices.iter().zip(&self.values) {
            out[i] = v;
        }
        out
    }

    /// `target += alpha * self` on the selected slots only.
    pub fn add_scaled_into(&self, alpha: f64, target: &mut GradientVector) {
        for (&i, &v) in self.indices.iter().zip(&self.values) {
            target[i] += alpha * v;
        }
    }
}

/// Number of bits used to encode one index into a vector of length `s`.
pub fn index_bits(s: usize) -> u32 {
    if s <= 1 {
        0
    } else {
        usize::BITS - (s - 1).leading_zeros()
    }
}

/// Bits per transmitted element: value width plus index width.
pub fn element_bits(s: usize, u: u32) -> f64 {
    (u + index_bits(s)) as f64
}

/// Upload size of a top-k update: `k * (u + ceil(log2 s))` bits.
pub fn payload_bits(k: usize, s: usize, u: u32) -> f64 {
    k as f64 * element_bits(s, u)
}

/// Keep the `k` entries of largest magnitude; ties go to the lower index.
pub fn top_k(x: &GradientVector, k: usize) -> Result<SparseUpdate> {
    let s = x.len();
    if k > s {
        return Err(Error::param(format!("k = {k} exceeds dimension {s}")));
    }
    if k == 0 {
        return Ok(SparseUpdate::empty(s));
    }
    if k == s {
        return Ok(SparseUpdate::dense(x));
    }
    let v = x.as_slice();
    // total order: larger magnitude first, then lower index
    let order = |a: &usize, b: &usize| -> Ordering {
        v[*b]
            .abs()
            .partial_cmp(&v[*a].abs())
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(b))
    };
    let mut idx: Vec<usize> = (0..s).collect();
    idx.select_nth_unstable_by(k - 1, order);
    idx.truncate(k);
    idx.sort_unstable();
    let values = idx.iter().map(|&i| v[i]).collect();
    Ok(SparseUpdate {
        dim: s,
        indices: idx,
        values,
    })
}

/// Error-feedback residual `x - densify(sp)`; exactly zero on the selected slots.
pub fn residual(x: &GradientVector, sp: &SparseUpdate) -> GradientVector {
    let mut out = x.clone();
    for &i in sp.indices() {
        out[i] = 0.0;
    }
    out
}
