//! Dense row-major matrices, a seekable random stream and a central-difference
//! gradient oracle.
//!
//! Every product accumulates each output cell left to right over the shared
//! dimension, starting from `0.0`, so results are bit-identical to the naive
//! triple loop regardless of how rows are spread over threads.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, CsmfError, Result};

/// Rows below this many output cells are multiplied on the calling thread.
const PAR_MIN_CELLS: usize = 1 << 14;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return shape_err(format!("{} values for a {rows}x{cols} matrix", data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return shape_err("ragged rows");
            }
            data.extend_from_slice(r);
        }
        Ok(Self { rows: rows.len(), cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }
}

fn for_each_out_row<F>(out: &mut Matrix, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    let cols = out.cols.max(1);
    if out.data.len() >= PAR_MIN_CELLS {
        out.data.par_chunks_mut(cols).enumerate().for_each(|(i, row)| f(i, row));
    } else {
        out.data.chunks_mut(cols).enumerate().for_each(|(i, row)| f(i, row));
    }
}

/// `a × b`. Each output cell is summed over `k` in ascending order, the
/// same order as [`dot`]; zero entries of `a` are skipped.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return shape_err(format!(
            "matmul {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        ));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    if b.cols == 0 {
        return Ok(out);
    }
    for_each_out_row(&mut out, |i, row| {
        let ar = a.row(i);
        for (k, &aik) in ar.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let br = b.row(k);
            for (o, &bkj) in row.iter_mut().zip(br) {
                *o += aik * bkj;
            }
        }
    });
    Ok(out)
}

/// `a × bᵀ`; both operands are read row-wise.
pub fn matmul_bt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return shape_err(format!(
            "matmul_bt {}x{} by ({}x{})ᵀ",
            a.rows, a.cols, b.rows, b.cols
        ));
    }
    let mut out = Matrix::zeros(a.rows, b.rows);
    if b.rows == 0 {
        return Ok(out);
    }
    for_each_out_row(&mut out, |i, row| {
        let ar = a.row(i);
        for (j, o) in row.iter_mut().enumerate() {
            *o = dot(ar, b.row(j));
        }
    });
    Ok(out)
}

/// `aᵀ × b`.
pub fn matmul_at(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return shape_err(format!(
            "matmul_at ({}x{})ᵀ by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        ));
    }
    let mut out = Matrix::zeros(a.cols, b.cols);
    if b.cols == 0 {
        return Ok(out);
    }
    let at = a.transpose();
    for_each_out_row(&mut out, |i, row| {
        for (k, &aki) in at.row(i).iter().enumerate() {
            if aki == 0.0 {
                continue;
            }
            for (o, &bkj) in row.iter_mut().zip(b.row(k)) {
                *o += aki * bkj;
            }
        }
    });
    Ok(out)
}

/// Left-to-right dot product.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Seekable deterministic random stream.
///
/// Every draw consumes exactly 128 bits of ChaCha8 keystream, so the stream
/// can be repositioned from `(seed, position)` without replaying it.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    position: u64,
    core: ChaCha8Rng,
}

/// Serializable position of an [`RngStream`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngPosition {
    pub seed: u64,
    pub position: u64,
}

const WORDS_PER_DRAW: u128 = 4;

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self { seed, position: 0, core: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Independent stream derived from this seed and a label.
    pub fn derive(seed: u64, label: &str) -> Self {
        // FNV-1a over the label, folded into the seed.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in label.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        Self::new(seed ^ h.rotate_left(17))
    }

    pub fn at(pos: RngPosition) -> Self {
        let mut s = Self::new(pos.seed);
        s.seek(pos.position);
        s
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn position(&self) -> u64 {
        self.position
    }

    pub fn snapshot(&self) -> RngPosition {
        RngPosition { seed: self.seed, position: self.position }
    }

    pub fn seek(&mut self, position: u64) {
        self.core.set_word_pos(u128::from(position) * WORDS_PER_DRAW);
        self.position = position;
    }

    fn raw(&mut self) -> (u64, u64) {
        let a = self.core.next_u64();
        let b = self.core.next_u64();
        self.position += 1;
        (a, b)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.raw().0
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.raw().0 >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((u128::from(self.raw().0) * n as u128) >> 64) as usize
    }

    /// Standard normal draw (Box-Muller, cosine branch).
    pub fn normal(&mut self) -> f64 {
        let (a, b) = self.raw();
        let u1 = ((a >> 11) as f64 + 1.0) * (1.0 / ((1u64 << 53) as f64 + 1.0));
        let u2 = (b >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// Matrix with i.i.d. `N(0, scale²)` entries, drawn row-major.
pub fn gaussian_init(rng: &mut RngStream, rows: usize, cols: usize, scale: f64) -> Result<Matrix> {
    if !(scale > 0.0) || !scale.is_finite() {
        return config_err(format!("init scale must be positive, got {scale}"));
    }
    let data = (0..rows * cols).map(|_| rng.normal() * scale).collect();
    Matrix::from_vec(rows, cols, data)
}

/// Central-difference gradient of `f` at `x`.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(eps > 0.0) {
        return config_err(format!("eps must be positive, got {eps}"));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let hi = f(&probe);
        probe[i] = orig - eps;
        let lo = f(&probe);
        probe[i] = orig;
        if !hi.is_finite() || !lo.is_finite() {
            return Err(CsmfError::Numeric(format!("non-finite objective at coordinate {i}")));
        }
        grad.push((hi - lo) / (2.0 * eps));
    }
    Ok(grad)
}
