//! Dense row-major tensors, matricization and mode-k products.
//!
//! Everything here is `f64`. Matrices are plain two-mode [`Tensor`]s.

mod linalg;
mod tucker;

pub use linalg::{leading_left_vectors, qr_orthonormal, solve_spd, svd, Svd};
pub use tucker::{
    hosvd, tucker_decompose, tucker_decompose_traced, tucker_reconstruct, TuckerFactors,
    TuckerOptions,
};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("invalid shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        assert!(
            !shape.is_empty() && shape.iter().all(|&d| d > 0),
            "invalid shape {shape:?}"
        );
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().enumerate().for_each(|(i, x)| *x = f(i));
        t
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(self.strides())
            .map(|(&i, s)| i * s)
            .sum()
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    /// Same data under a new shape.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} to {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| x * s).collect(),
        }
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        })
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) -> Result<()> {
        self.check_same_shape(other)?;
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a += alpha * b);
        Ok(())
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn check_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    /// Largest absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Relative Frobenius error `|self - other| / |other|`.
    pub fn relative_error(&self, reference: &Tensor) -> f64 {
        let diff = self.sub(reference).expect("shape mismatch").frobenius_norm();
        let base = reference.frobenius_norm();
        if base == 0.0 {
            diff
        } else {
            diff / base
        }
    }

    fn require_matrix(&self, what: &str) -> Result<()> {
        if self.ndim() != 2 {
            return Err(Error::Shape(format!(
                "{what} expects a matrix, got shape {:?}",
                self.shape
            )));
        }
        Ok(())
    }

    pub fn transpose(&self) -> Result<Self> {
        self.require_matrix("transpose")?;
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::matrix(c, r, out)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Self> {
        self.require_matrix("matmul")?;
        other.require_matrix("matmul")?;
        if self.cols() != other.rows() {
            return Err(Error::Shape(format!(
                "matmul {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = vec![0.0; self.rows() * other.cols()];
        gemm(
            self.rows(),
            self.cols(),
            other.cols(),
            &self.data,
            &other.data,
            &mut out,
        );
        Self::matrix(self.rows(), other.cols(), out)
    }

    /// Column `j` of a matrix.
    pub fn column(&self, j: usize) -> Vec<f64> {
        let c = self.cols();
        (0..self.rows()).map(|i| self.data[i * c + j]).collect()
    }
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// `out += a (m x k) * b (k x n)`, all row-major.
pub fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a^T * b` where `a` is (k x m) and `b` is (k x n).
pub fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a * b^T` where `a` is (m x k) and `b` is (n x k).
pub fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

/// Mode-`mode` matricization: rows indexed by `shape[mode]`, columns by the
/// remaining modes in their original order (row-major).
pub fn unfold(t: &Tensor, mode: usize) -> Result<Tensor> {
    let nd = t.ndim();
    if mode >= nd {
        return Err(Error::Index(format!("mode {mode} out of range for rank {nd}")));
    }
    let shape = t.shape();
    let outer: usize = shape[..mode].iter().product();
    let dim = shape[mode];
    let inner: usize = shape[mode + 1..].iter().product();
    let cols = outer * inner;
    let mut out = vec![0.0; dim * cols];
    for o in 0..outer {
        for i in 0..dim {
            let src = &t.data[(o * dim + i) * inner..(o * dim + i + 1) * inner];
            let dst = &mut out[i * cols + o * inner..i * cols + (o + 1) * inner];
            dst.copy_from_slice(src);
        }
    }
    Tensor::matrix(dim, cols, out)
}

/// Inverse of [`unfold`].
pub fn fold(m: &Tensor, mode: usize, shape: &[usize]) -> Result<Tensor> {
    if mode >= shape.len() {
        return Err(Error::Index(format!(
            "mode {mode} out of range for rank {}",
            shape.len()
        )));
    }
    let outer: usize = shape[..mode].iter().product();
    let dim = shape[mode];
    let inner: usize = shape[mode + 1..].iter().product();
    let cols = outer * inner;
    if m.ndim() != 2 || m.rows() != dim || m.cols() != cols {
        return Err(Error::Shape(format!(
            "cannot fold {:?} into {shape:?} along mode {mode}",
            m.shape()
        )));
    }
    let mut out = vec![0.0; dim * cols];
    for o in 0..outer {
        for i in 0..dim {
            let src = &m.data[i * cols + o * inner..i * cols + (o + 1) * inner];
            out[(o * dim + i) * inner..(o * dim + i + 1) * inner].copy_from_slice(src);
        }
    }
    Tensor::new(shape.to_vec(), out)
}

/// `t ×_mode m`: contracts mode `mode` of `t` against the columns of `m`.
pub fn mode_k_product(t: &Tensor, m: &Tensor, mode: usize) -> Result<Tensor> {
    if mode >= t.ndim() {
        return Err(Error::Index(format!(
            "mode {mode} out of range for rank {}",
            t.ndim()
        )));
    }
    if m.ndim() != 2 || m.cols() != t.shape()[mode] {
        return Err(Error::Shape(format!(
            "mode-{mode} product of {:?} with matrix {:?}",
            t.shape(),
            m.shape()
        )));
    }
    let unfolded = unfold(t, mode)?;
    let product = m.matmul(&unfolded)?;
    let mut shape = t.shape().to_vec();
    shape[mode] = m.rows();
    fold(&product, mode, &shape)
}
