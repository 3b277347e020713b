//! Dense row-major `f64` tensors and the kernels the autodiff graph is built on.
//!
//! Every kernel accumulates each output entry in a fixed index order that does
//! not depend on the size of the other operand. Appending columns to a prompt
//! therefore never changes the bits of the columns that were already there,
//! which the causality and masking tests rely on.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    /// Rank-2 tensor from row-major data. Panics on a length mismatch.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length");
        Self {
            shape: vec![rows, cols],
            data,
        }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self::matrix(rows.len(), cols, data)
    }

    pub fn scalar(v: f64) -> Self {
        Self::matrix(1, 1, vec![v])
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows of a rank-2 tensor; rank-1 tensors are treated as column vectors.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            _ => self.shape[0],
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.same_shape(other, op)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub(crate) fn same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.rows() != other.rows() || self.cols() != other.cols() {
            return Err(Error::Shape {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|v| v * c)
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::matrix(c, r, out)
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows()).map(|i| self.get(i, j)).collect()
    }
}

/// `C ← op(A) · op(B)` through the cache-blocked SIMD kernel, writing a
/// strided `m×n` block of `c`. Each output entry accumulates over the inner
/// index in the same order whatever the block size, so a column of the
/// product never depends on other columns.
#[allow(clippy::too_many_arguments)]
fn gemm_into(
    (m, k, n): (usize, usize, usize),
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    rsc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            c[i * rsc..i * rsc + n].fill(0.0);
        }
        return;
    }
    assert!((m - 1) * rsa + (k - 1) * csa < a.len(), "gemm: A view out of bounds");
    assert!((k - 1) * rsb + (n - 1) * csb < b.len(), "gemm: B view out of bounds");
    assert!((m - 1) * rsc + n - 1 < c.len(), "gemm: C view out of bounds");
    // SAFETY: the asserts above keep all three strided views inside their
    // slices, and `c` is borrowed mutably so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            0.0,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

fn gemm(dims: (usize, usize, usize), a: &[f64], sa: (usize, usize), b: &[f64], sb: (usize, usize)) -> Vec<f64> {
    let mut out = vec![0.0; dims.0 * dims.2];
    gemm_into(dims, a, sa, b, sb, &mut out, dims.2);
    out
}

fn shape_check(op: &'static str, inner_a: usize, inner_b: usize, a: &Tensor, b: &Tensor) -> Result<()> {
    if inner_a != inner_b {
        return Err(Error::Shape {
            op,
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    Ok(())
}

/// `a · b`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = (a.rows(), a.cols());
    let n = b.cols();
    shape_check("matmul", k, b.rows(), a, b)?;
    let out = gemm((m, k, n), &a.data, (k, 1), &b.data, (n, 1));
    Ok(Tensor::matrix(m, n, out))
}

/// `aᵀ · b`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k, m) = (a.rows(), a.cols());
    let n = b.cols();
    shape_check("matmul_tn", k, b.rows(), a, b)?;
    let out = gemm((m, k, n), &a.data, (1, m), &b.data, (n, 1));
    Ok(Tensor::matrix(m, n, out))
}

/// `a · bᵀ`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = (a.rows(), a.cols());
    let n = b.rows();
    shape_check("matmul_nt", k, b.cols(), a, b)?;
    let out = gemm((m, k, n), &a.data, (k, 1), &b.data, (1, k));
    Ok(Tensor::matrix(m, n, out))
}

/// Which rows each column of a score matrix may attend to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ColumnMask {
    /// Every row participates.
    Full,
    /// Column `j` sees rows `j - lookback ..= j` (clamped at 0).
    Causal { lookback: usize },
}

impl ColumnMask {
    #[inline]
    pub fn range(self, j: usize, rows: usize) -> (usize, usize) {
        match self {
            ColumnMask::Full => (0, rows),
            ColumnMask::Causal { lookback } => (j.saturating_sub(lookback), (j + 1).min(rows)),
        }
    }
}

/// Column-wise softmax with max subtraction. Masked entries are exactly zero.
pub fn softmax_cols(z: &Tensor, mask: ColumnMask) -> Tensor {
    let (r, c) = (z.rows(), z.cols());
    let mut out = vec![0.0; r * c];
    for j in 0..c {
        let (lo, hi) = mask.range(j, r);
        if lo >= hi {
            continue;
        }
        let mut mx = f64::NEG_INFINITY;
        for i in lo..hi {
            mx = mx.max(z.data[i * c + j]);
        }
        let mut s = 0.0;
        for i in lo..hi {
            let e = (z.data[i * c + j] - mx).exp();
            out[i * c + j] = e;
            s += e;
        }
        for i in lo..hi {
            out[i * c + j] /= s;
        }
    }
    Tensor::matrix(r, c, out)
}

#[inline]
pub fn softplus_scalar(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid_scalar(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn relu(z: &Tensor) -> Tensor {
    z.map(|v| v.max(0.0))
}

pub fn softplus(z: &Tensor) -> Tensor {
    z.map(softplus_scalar)
}

pub fn log(z: &Tensor) -> Result<Tensor> {
    if let Some(&bad) = z.data.iter().find(|&&v| v <= 0.0 || v.is_nan()) {
        return Err(Error::Domain {
            op: "log",
            detail: format!("non-positive input {bad}"),
        });
    }
    Ok(z.map(f64::ln))
}

/// Column tile width of the banded products.
const BAND_TILE: usize = 32;

fn first_row(mask: ColumnMask, c0: usize) -> usize {
    match mask {
        ColumnMask::Full => 0,
        ColumnMask::Causal { lookback } => c0.saturating_sub(lookback),
    }
}

fn square_check(op: &'static str, s: &Tensor) -> Result<()> {
    if s.rows() != s.cols() {
        return Err(Error::Shape {
            op,
            lhs: s.shape.clone(),
            rhs: vec![s.cols(), s.cols()],
        });
    }
    Ok(())
}

fn tiles(n: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n).step_by(BAND_TILE).map(move |c0| (c0, (c0 + BAND_TILE).min(n)))
}

/// `aᵀ · b` evaluated on the entries admitted by `mask`; the rest are 0.
/// Used for attention scores `(W_K Z)ᵀ (W_Q Z)`.
pub fn band_matmul_tn(a: &Tensor, b: &Tensor, mask: ColumnMask) -> Result<Tensor> {
    let (k, n) = (a.rows(), a.cols());
    shape_check("band_matmul_tn", k, b.rows(), a, b)?;
    shape_check("band_matmul_tn", n, b.cols(), a, b)?;
    let mut out = vec![0.0; n * n];
    let hi_row = |c1: usize| if mask == ColumnMask::Full { n } else { c1 };
    for (c0, c1) in tiles(n) {
        let (p0, p1) = (first_row(mask, c0), hi_row(c1));
        gemm_into(
            (p1 - p0, k, c1 - c0),
            &a.data[p0..],
            (1, n),
            &b.data[c0..],
            (n, 1),
            &mut out[p0 * n + c0..],
            n,
        );
        for j in c0..c1 {
            let (lo, hi) = mask.range(j, n);
            for p in (p0..lo).chain(hi.max(p0)..p1) {
                out[p * n + j] = 0.0;
            }
        }
    }
    Ok(Tensor::matrix(n, n, out))
}

/// `a · s` for a square `s` that is zero outside `mask`. Used to apply
/// attention weights to values.
pub fn band_matmul(a: &Tensor, s: &Tensor, mask: ColumnMask) -> Result<Tensor> {
    square_check("band_matmul", s)?;
    let (m, n) = (a.rows(), a.cols());
    shape_check("band_matmul", n, s.rows(), a, s)?;
    let mut out = vec![0.0; m * n];
    for (c0, c1) in tiles(n) {
        let p0 = first_row(mask, c0);
        let p1 = if mask == ColumnMask::Full { n } else { c1 };
        gemm_into(
            (m, p1 - p0, c1 - c0),
            &a.data[p0..],
            (n, 1),
            &s.data[p0 * n + c0..],
            (n, 1),
            &mut out[c0..],
            n,
        );
    }
    Ok(Tensor::matrix(m, n, out))
}

/// `a · sᵀ` for a square `s` that is zero outside `mask`.
pub fn band_matmul_nt(a: &Tensor, s: &Tensor, mask: ColumnMask) -> Result<Tensor> {
    square_check("band_matmul_nt", s)?;
    let (m, n) = (a.rows(), a.cols());
    shape_check("band_matmul_nt", n, s.cols(), a, s)?;
    let mut out = vec![0.0; m * n];
    for (r0, r1) in tiles(n) {
        let (j0, j1) = match mask {
            ColumnMask::Full => (0, n),
            ColumnMask::Causal { lookback } => (r0, (r1 + lookback).min(n)),
        };
        gemm_into(
            (m, j1 - j0, r1 - r0),
            &a.data[j0..],
            (n, 1),
            &s.data[r0 * n + j0..],
            (1, n),
            &mut out[r0..],
            n,
        );
    }
    Ok(Tensor::matrix(m, n, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small_cases() {
        let id = Tensor::identity(2);
        let v = Tensor::from_rows(&[&[1.0], &[2.0]]);
        assert_eq!(matmul(&id, &v).unwrap(), v);

        let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let zero = Tensor::zeros(&[2, 1]);
        assert_eq!(matmul(&a, &zero).unwrap(), zero);

        let b = Tensor::from_rows(&[&[5.0], &[6.0]]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_shape_error() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &b), Err(Error::Shape { .. })));
    }

    #[test]
    fn transposed_products_agree_with_plain_matmul() {
        let a = Tensor::matrix(3, 2, vec![1.0, -2.0, 0.5, 4.0, 3.0, -1.0]);
        let b = Tensor::matrix(3, 4, (0..12).map(|i| i as f64 * 0.3 - 1.0).collect());
        let tn = matmul_tn(&a, &b).unwrap();
        assert_eq!(tn, matmul(&a.transpose(), &b).unwrap());
        let c = Tensor::matrix(4, 2, (0..8).map(|i| (i as f64).sin()).collect());
        let nt = matmul_nt(&a, &c).unwrap();
        let plain = matmul(&a, &c.transpose()).unwrap();
        for (x, y) in nt.data().iter().zip(plain.data()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn softmax_examples() {
        let z = Tensor::from_rows(&[&[0.0, 1000.0, 0.0], &[0.0, 1000.0, 3f64.ln()]]);
        let s = softmax_cols(&z, ColumnMask::Full);
        assert_eq!(s.column(0), vec![0.5, 0.5]);
        assert_eq!(s.column(1), vec![0.5, 0.5]);
        assert!((s.get(0, 2) - 0.25).abs() < 1e-15);
        assert!((s.get(1, 2) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn causal_mask_zeroes_future_and_stale_rows() {
        let z = Tensor::matrix(4, 4, (0..16).map(|i| (i as f64 * 0.7).cos()).collect());
        let s = softmax_cols(&z, ColumnMask::Causal { lookback: 1 });
        for j in 0..4 {
            let col = s.column(j);
            for (i, v) in col.iter().enumerate() {
                let visible = i <= j && i + 1 >= j;
                assert_eq!(*v > 0.0, visible, "entry ({i},{j})");
            }
            assert!((col.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn elementwise_examples() {
        assert!((softplus_scalar(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!((softplus_scalar(50.0) - 50.0).abs() < 1e-20);
        assert_eq!(relu(&Tensor::scalar(-1.0)).item(), 0.0);
        assert!(softplus_scalar(-800.0) >= 0.0);
        assert!(softplus_scalar(-30.0) > 0.0);
        assert!(matches!(log(&Tensor::scalar(0.0)), Err(Error::Domain { .. })));
    }

    #[test]
    fn band_kernels_match_dense_on_the_band() {
        let cases = [
            (7, ColumnMask::Causal { lookback: 2 }),
            (75, ColumnMask::Causal { lookback: 40 }),
            (75, ColumnMask::Causal { lookback: 5 }),
            (70, ColumnMask::Causal { lookback: 200 }),
            (40, ColumnMask::Full),
        ];
        for (n, mask) in cases {
            let a = Tensor::matrix(3, n, (0..3 * n).map(|i| (i as f64 * 0.41).sin()).collect());
            let b = Tensor::matrix(3, n, (0..3 * n).map(|i| (i as f64 * 0.23).cos()).collect());
            let dense = matmul_tn(&a, &b).unwrap();
            let band = band_matmul_tn(&a, &b, mask).unwrap();
            let mut s = Tensor::zeros(&[n, n]);
            for j in 0..n {
                let (lo, hi) = mask.range(j, n);
                for p in 0..n {
                    if (lo..hi).contains(&p) {
                        assert!((band.get(p, j) - dense.get(p, j)).abs() < 1e-13);
                        s.set(p, j, ((p * n + j) as f64).sqrt());
                    } else {
                        assert_eq!(band.get(p, j), 0.0, "{n} {mask:?} ({p},{j})");
                    }
                }
            }
            let via_dense = matmul(&a, &s).unwrap();
            let via_band = band_matmul(&a, &s, mask).unwrap();
            let nt_dense = matmul_nt(&a, &s).unwrap();
            let nt_band = band_matmul_nt(&a, &s, mask).unwrap();
            for i in 0..via_dense.len() {
                assert!((via_dense.data()[i] - via_band.data()[i]).abs() < 1e-9);
                assert!((nt_dense.data()[i] - nt_band.data()[i]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn gemm_columns_do_not_depend_on_width() {
        let a = Tensor::matrix(9, 13, (0..117).map(|i| (i as f64 * 0.77).sin()).collect());
        let b = Tensor::matrix(13, 21, (0..273).map(|i| (i as f64 * 0.19).cos()).collect());
        let full = matmul(&a, &b).unwrap();
        let narrow_b = Tensor::matrix(13, 5, (0..13).flat_map(|r| b.data()[r * 21..r * 21 + 5].to_vec()).collect());
        let narrow = matmul(&a, &narrow_b).unwrap();
        for i in 0..9 {
            for j in 0..5 {
                assert_eq!(full.get(i, j).to_bits(), narrow.get(i, j).to_bits());
            }
        }
    }
}
