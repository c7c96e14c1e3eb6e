//! Minimal dense-tensor kernels: storage, matmul, transpose, softmax,
//! elementwise ops, and seeded random initialization.
//!
//! All arithmetic is f64 with fixed summation order (ascending inner
//! index), so parallel and serial code paths produce identical bits.
//! `elem_width_bytes` is an accounting tag for the memory ledgers and
//! never affects arithmetic.

use thiserror::Error;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid shape: {0}")]
    InvalidShape(String),
}

/// Row-major dense f64 tensor with an accounting-only element width tag.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    elem_width_bytes: u8,
}

impl DenseTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::InvalidShape(format!(
                "zero-sized dimension in {shape:?}"
            )));
        }
        if n != data.len() {
            return Err(TensorError::InvalidShape(format!(
                "shape {shape:?} wants {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data, elem_width_bytes: 8 })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        assert!(shape.iter().all(|&d| d > 0), "zero-sized dimension");
        Self { shape, data: vec![0.0; n], elem_width_bytes: 8 }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn with_elem_width(mut self, bytes: u8) -> Self {
        assert!(matches!(bytes, 2 | 4 | 8), "element width must be 2, 4, or 8");
        self.elem_width_bytes = bytes;
        self
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn elem_width_bytes(&self) -> u8 {
        self.elem_width_bytes
    }

    pub fn bytes(&self) -> u64 {
        self.data.len() as u64 * self.elem_width_bytes as u64
    }

    fn rows_cols(&self) -> (usize, usize) {
        assert_eq!(self.shape.len(), 2, "expected a matrix, got {:?}", self.shape);
        (self.shape[0], self.shape[1])
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        let (_, cols) = self.rows_cols();
        self.data[r * cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let (_, cols) = self.rows_cols();
        self.data[r * cols + c] = v;
    }

    /// `[M,K] x [K,N] -> [M,N]` with ascending-k summation per output
    /// element, so the result is identical whether rows are computed in
    /// parallel or serially.
    pub fn matmul(&self, rhs: &DenseTensor) -> Result<DenseTensor, TensorError> {
        let (m, k) = self.rows_cols();
        let (k2, n) = rhs.rows_cols();
        if k != k2 {
            return Err(TensorError::ShapeMismatch(format!(
                "matmul inner dims: {:?} x {:?}",
                self.shape, rhs.shape
            )));
        }
        let mut out = vec![0.0; m * n];
        matmul_rows(&mut out, &self.data, &rhs.data, k, n);
        Ok(DenseTensor { shape: vec![m, n], data: out, elem_width_bytes: 8 })
    }

    /// Sequential matmul, always available. Used as the comparison lane
    /// in benches; produces the same bits as [`DenseTensor::matmul`].
    pub fn matmul_seq(&self, rhs: &DenseTensor) -> Result<DenseTensor, TensorError> {
        let (m, k) = self.rows_cols();
        let (k2, n) = rhs.rows_cols();
        if k != k2 {
            return Err(TensorError::ShapeMismatch(format!(
                "matmul inner dims: {:?} x {:?}",
                self.shape, rhs.shape
            )));
        }
        let mut out = vec![0.0; m * n];
        for (row_out, row_a) in out.chunks_mut(n).zip(self.data.chunks(k)) {
            matmul_one_row(row_out, row_a, &rhs.data, n);
        }
        Ok(DenseTensor { shape: vec![m, n], data: out, elem_width_bytes: 8 })
    }

    pub fn transpose(&self) -> DenseTensor {
        let (m, n) = self.rows_cols();
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            for c in 0..n {
                out[c * m + r] = self.data[r * n + c];
            }
        }
        DenseTensor { shape: vec![n, m], data: out, elem_width_bytes: 8 }
    }

    pub fn add(&self, rhs: &DenseTensor) -> Result<DenseTensor, TensorError> {
        if self.shape != rhs.shape {
            return Err(TensorError::ShapeMismatch(format!(
                "add: {:?} vs {:?}",
                self.shape, rhs.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(DenseTensor { shape: self.shape.clone(), data, elem_width_bytes: 8 })
    }

    pub fn add_assign(&mut self, rhs: &DenseTensor) -> Result<(), TensorError> {
        if self.shape != rhs.shape {
            return Err(TensorError::ShapeMismatch(format!(
                "add_assign: {:?} vs {:?}",
                self.shape, rhs.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, s: f64) -> DenseTensor {
        DenseTensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * s).collect(),
            elem_width_bytes: 8,
        }
    }

    /// Numerically stable (max-subtracted) row softmax.
    pub fn softmax_rows(&self) -> DenseTensor {
        let (m, n) = self.rows_cols();
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &self.data[r * n..(r + 1) * n];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let dst = &mut out[r * n..(r + 1) * n];
            let mut sum = 0.0;
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = (v - max).exp();
                sum += *d;
            }
            for d in dst.iter_mut() {
                *d /= sum;
            }
        }
        DenseTensor { shape: vec![m, n], data: out, elem_width_bytes: 8 }
    }

    /// Copies rows `[r0, r1)` and columns `[c0, c1)` into a new matrix.
    pub fn slice_block(&self, rows: (usize, usize), cols: (usize, usize)) -> DenseTensor {
        let (m, n) = self.rows_cols();
        let (r0, r1) = rows;
        let (c0, c1) = cols;
        assert!(r0 < r1 && r1 <= m && c0 < c1 && c1 <= n, "block out of range");
        let mut data = Vec::with_capacity((r1 - r0) * (c1 - c0));
        for r in r0..r1 {
            data.extend_from_slice(&self.data[r * n + c0..r * n + c1]);
        }
        DenseTensor { shape: vec![r1 - r0, c1 - c0], data, elem_width_bytes: 8 }
    }

    /// Writes `block` into rows/cols starting at `(r0, c0)`.
    pub fn put_block(&mut self, r0: usize, c0: usize, block: &DenseTensor) {
        let (m, n) = self.rows_cols();
        let (bm, bn) = block.rows_cols();
        assert!(r0 + bm <= m && c0 + bn <= n, "block out of range");
        for r in 0..bm {
            self.data[(r0 + r) * n + c0..(r0 + r) * n + c0 + bn]
                .copy_from_slice(&block.data[r * bn..(r + 1) * bn]);
        }
    }

    /// Concatenates equal-width matrices along rows, in argument order.
    pub fn concat_rows(blocks: &[DenseTensor]) -> Result<DenseTensor, TensorError> {
        let first = blocks
            .first()
            .ok_or_else(|| TensorError::InvalidShape("concat of zero blocks".into()))?;
        let (_, n) = first.rows_cols();
        let mut data = Vec::new();
        let mut m = 0;
        for b in blocks {
            let (bm, bn) = b.rows_cols();
            if bn != n {
                return Err(TensorError::ShapeMismatch(format!(
                    "concat_rows: width {bn} vs {n}"
                )));
            }
            m += bm;
            data.extend_from_slice(&b.data);
        }
        Ok(DenseTensor { shape: vec![m, n], data, elem_width_bytes: 8 })
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<DenseTensor, TensorError> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(TensorError::InvalidShape(format!(
                "reshape {:?} -> {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn max_abs_diff(&self, rhs: &DenseTensor) -> f64 {
        assert_eq!(self.shape, rhs.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&rhs.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn random_uniform(rng: &mut Rng, shape: Vec<usize>, lo: f64, hi: f64) -> DenseTensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| lo + (hi - lo) * rng.next_f64()).collect();
        DenseTensor { shape, data, elem_width_bytes: 8 }
    }
}

fn matmul_one_row(row_out: &mut [f64], row_a: &[f64], b: &[f64], n: usize) {
    for (k, &a) in row_a.iter().enumerate() {
        let brow = &b[k * n..(k + 1) * n];
        for (o, &bv) in row_out.iter_mut().zip(brow) {
            *o += a * bv;
        }
    }
}

#[cfg(feature = "parallel")]
fn matmul_rows(out: &mut [f64], a: &[f64], b: &[f64], k: usize, n: usize) {
    out.par_chunks_mut(n)
        .zip(a.par_chunks(k))
        .for_each(|(row_out, row_a)| matmul_one_row(row_out, row_a, b, n));
}

#[cfg(not(feature = "parallel"))]
fn matmul_rows(out: &mut [f64], a: &[f64], b: &[f64], k: usize, n: usize) {
    for (row_out, row_a) in out.chunks_mut(n).zip(a.chunks(k)) {
        matmul_one_row(row_out, row_a, b, n);
    }
}

/// SplitMix64. Identical seed, identical stream.
#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E3779B97F4A7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1) with 53 bits of mantissa.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Derives an independent child stream, for fanning one config seed
    /// out to multiple consumers.
    pub fn split(&mut self) -> Rng {
        Rng::new(self.next_u64())
    }
}
