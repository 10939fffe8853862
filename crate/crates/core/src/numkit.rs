//! Dense linear-algebra primitives.
//!
//! Everything here is `f64` and row-major. The centrepiece is
//! [`gram_truncated_svd`], which recovers the leading left singular vectors of
//! a tall matrix `M` (d × C, d ≫ C) from the eigendecomposition of its small
//! Gram matrix `G = MᵀM`, visiting `M` only through streamed row chunks. Peak
//! working memory is one chunk plus the C × C Gram matrix; `M` itself is never
//! materialized.

use std::borrow::Borrow;

use serde::{Deserialize, Serialize};

use crate::error::{CortisError, Result};

/// Default number of rows per streamed chunk.
pub const DEFAULT_CHUNK_ROWS: usize = 4096;

/// Default relative rank cutoff on singular values (σ_k > cutoff · σ_max).
pub const DEFAULT_RELATIVE_CUTOFF: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(CortisError::Dimension(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return Err(CortisError::Numeric(format!(
                "matrix entry ({}, {}) is {}",
                pos / cols.max(1),
                pos % cols.max(1),
                data[pos]
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix whose columns are the given equal-length vectors.
    pub fn from_columns(rows: usize, columns: &[Vec<f64>]) -> Result<Self> {
        let mut m = Self::zeros(rows, columns.len());
        for (j, col) in columns.iter().enumerate() {
            if col.len() != rows {
                return Err(CortisError::Dimension(format!(
                    "column {j} has length {}, expected {rows}",
                    col.len()
                )));
            }
            m.set_column(j, col);
        }
        if let Some(pos) = m.data.iter().position(|x| !x.is_finite()) {
            return Err(CortisError::Numeric(format!("column entry {pos} is not finite")));
        }
        Ok(m)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn set_column(&mut self, j: usize, values: &[f64]) {
        for (i, v) in values.iter().enumerate() {
            self.set(i, j, *v);
        }
    }

    /// Copies rows `start..end` into a new matrix.
    pub fn row_block(&self, start: usize, end: usize) -> DenseMatrix {
        let end = end.min(self.rows);
        DenseMatrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Keeps the first `n` columns.
    pub fn leading_columns(&self, n: usize) -> DenseMatrix {
        DenseMatrix::from_fn(self.rows, n.min(self.cols), |i, j| self.get(i, j))
    }

    pub fn transpose(&self) -> DenseMatrix {
        DenseMatrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != other.rows {
            return Err(CortisError::Dimension(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = DenseMatrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other`, without forming the transpose.
    pub fn t_matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.rows != other.rows {
            return Err(CortisError::Dimension(format!(
                "cannot form AᵀB with A {}x{} and B {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = DenseMatrix::zeros(self.cols, other.cols);
        for r in 0..self.rows {
            let a_row = self.row(r);
            let b_row = other.row(r);
            for (i, a) in a_row.iter().enumerate() {
                if *a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · x` for a vector `x`.
    pub fn mul_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(CortisError::Dimension(format!(
                "vector of length {} against {} columns",
                x.len(),
                self.cols
            )));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), x)).collect())
    }

    /// `selfᵀ · x` for a vector `x`.
    pub fn t_mul_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.rows {
            return Err(CortisError::Dimension(format!(
                "vector of length {} against {} rows",
                x.len(),
                self.rows
            )));
        }
        let mut out = vec![0.0; self.cols];
        for (i, xi) in x.iter().enumerate() {
            if *xi == 0.0 {
                continue;
            }
            for (o, a) in out.iter_mut().zip(self.row(i)) {
                *o += a * xi;
            }
        }
        Ok(out)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `‖UᵀU − I‖_max` for a matrix with (nominally) orthonormal columns.
pub fn orthonormality_error(u: &DenseMatrix) -> f64 {
    let gram = u.t_matmul(u).expect("UᵀU is always conformable");
    let mut worst = 0.0_f64;
    for i in 0..gram.rows() {
        for j in 0..gram.cols() {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((gram.get(i, j) - target).abs());
        }
    }
    worst
}

/// A tall matrix that can be visited one row block at a time, possibly more
/// than once. Implementations must yield the same rows in the same order on
/// every visit.
pub trait RowChunks {
    fn cols(&self) -> usize;

    fn visit_chunks(&self, visit: &mut dyn FnMut(&DenseMatrix) -> Result<()>) -> Result<()>;
}

/// Streams an in-memory matrix in fixed-size row blocks.
pub struct ChunkedMatrix<'a> {
    matrix: &'a DenseMatrix,
    chunk_rows: usize,
}

impl<'a> ChunkedMatrix<'a> {
    pub fn new(matrix: &'a DenseMatrix, chunk_rows: usize) -> Self {
        Self {
            matrix,
            chunk_rows: chunk_rows.max(1),
        }
    }
}

impl RowChunks for ChunkedMatrix<'_> {
    fn cols(&self) -> usize {
        self.matrix.cols()
    }

    fn visit_chunks(&self, visit: &mut dyn FnMut(&DenseMatrix) -> Result<()>) -> Result<()> {
        let mut start = 0;
        while start < self.matrix.rows() {
            let end = (start + self.chunk_rows).min(self.matrix.rows());
            visit(&self.matrix.row_block(start, end))?;
            start = end;
        }
        Ok(())
    }
}

/// A list of pre-cut row blocks.
impl RowChunks for [DenseMatrix] {
    fn cols(&self) -> usize {
        self.first().map_or(0, DenseMatrix::cols)
    }

    fn visit_chunks(&self, visit: &mut dyn FnMut(&DenseMatrix) -> Result<()>) -> Result<()> {
        for chunk in self {
            visit(chunk)?;
        }
        Ok(())
    }
}

/// Accumulates `G = MᵀM` from row blocks of `M`.
pub fn gram_accumulate<I>(chunks: I) -> Result<DenseMatrix>
where
    I: IntoIterator,
    I::Item: Borrow<DenseMatrix>,
{
    let mut gram: Option<DenseMatrix> = None;
    for chunk in chunks {
        let chunk = chunk.borrow();
        let g = gram.get_or_insert_with(|| DenseMatrix::zeros(chunk.cols(), chunk.cols()));
        accumulate_into(g, chunk)?;
    }
    Ok(gram.unwrap_or_else(|| DenseMatrix::zeros(0, 0)))
}

fn accumulate_into(gram: &mut DenseMatrix, chunk: &DenseMatrix) -> Result<()> {
    let c = gram.cols();
    if chunk.cols() != c {
        return Err(CortisError::Dimension(format!(
            "chunk has {} columns, Gram matrix expects {c}",
            chunk.cols()
        )));
    }
    if !chunk.is_finite() {
        return Err(CortisError::Numeric("non-finite entry in streamed chunk".into()));
    }
    // Upper triangle only; mirrored at the end so G is exactly symmetric.
    for r in 0..chunk.rows() {
        let row = chunk.row(r);
        for i in 0..c {
            let a = row[i];
            if a == 0.0 {
                continue;
            }
            let g_row = &mut gram.data[i * c..(i + 1) * c];
            for j in i..c {
                g_row[j] += a * row[j];
            }
        }
    }
    for i in 0..c {
        for j in 0..i {
            gram.data[i * c + j] = gram.data[j * c + i];
        }
    }
    Ok(())
}

fn gram_of_source(source: &(impl RowChunks + ?Sized)) -> Result<DenseMatrix> {
    let c = source.cols();
    let mut gram = DenseMatrix::zeros(c, c);
    source.visit_chunks(&mut |chunk| accumulate_into(&mut gram, chunk))?;
    Ok(gram)
}

/// Eigenpairs of a symmetric matrix, eigenvalues in descending order.
#[derive(Debug, Clone)]
pub struct SymmetricEigen {
    pub values: Vec<f64>,
    /// Column `k` is the eigenvector for `values[k]`.
    pub vectors: DenseMatrix,
}

/// Cyclic Jacobi eigendecomposition.
///
/// Intended for the small Gram matrices produced here (C ≲ 1024). Only the
/// symmetric part of `a` is used.
pub fn symmetric_eigen(a: &DenseMatrix) -> Result<SymmetricEigen> {
    let n = a.rows();
    if a.cols() != n {
        return Err(CortisError::Dimension(format!(
            "eigendecomposition needs a square matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    if !a.is_finite() {
        return Err(CortisError::Numeric("non-finite entry in symmetric matrix".into()));
    }
    let mut m = DenseMatrix::from_fn(n, n, |i, j| 0.5 * (a.get(i, j) + a.get(j, i)));
    let mut v = DenseMatrix::identity(n);
    let fro: f64 = m.data.iter().map(|x| x * x).sum::<f64>().sqrt();

    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m.get(i, j) * m.get(i, j);
            }
        }
        if off.sqrt() <= 1e-17 * fro || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m.get(p, q);
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let app = m.get(p, p);
                let aqq = m.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m.get(k, p);
                    let mkq = m.get(k, q);
                    m.set(k, p, c * mkp - s * mkq);
                    m.set(k, q, s * mkp + c * mkq);
                }
                for k in 0..n {
                    let mpk = m.get(p, k);
                    let mqk = m.get(q, k);
                    m.set(p, k, c * mpk - s * mqk);
                    m.set(q, k, s * mpk + c * mqk);
                }
                m.set(p, q, 0.0);
                m.set(q, p, 0.0);
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| m.get(y, y).total_cmp(&m.get(x, x)).then(x.cmp(&y)));
    let values = order.iter().map(|&k| m.get(k, k)).collect();
    let vectors = DenseMatrix::from_fn(n, n, |i, j| v.get(i, order[j]));
    Ok(SymmetricEigen { values, vectors })
}

/// How small a singular value may be before its direction is discarded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Cutoff {
    /// Keep σ_k > c · σ_max.
    Relative(f64),
    /// Keep σ_k > c.
    Absolute(f64),
}

impl Default for Cutoff {
    fn default() -> Self {
        Cutoff::Relative(DEFAULT_RELATIVE_CUTOFF)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruncatedSvd {
    /// d × r, orthonormal columns.
    pub left_vectors: DenseMatrix,
    /// Descending, length r.
    pub singular_values: Vec<f64>,
}

impl TruncatedSvd {
    pub fn empty(rows: usize) -> Self {
        Self {
            left_vectors: DenseMatrix::zeros(rows, 0),
            singular_values: Vec::new(),
        }
    }

    pub fn rank(&self) -> usize {
        self.singular_values.len()
    }
}

/// Top-`rank` left singular vectors and values of a streamed tall matrix.
///
/// Forms `G = MᵀM` in one pass, eigendecomposes it, and recovers
/// `U = M V Λ^{-1/2}` in a second pass. Eigenvalues at or below the cutoff
/// are dropped, never inverted. The recovered columns get one Gram-Schmidt
/// polish, since eigenvector error in `V` is amplified by `Λ^{-1/2}`.
pub fn gram_truncated_svd(
    source: &(impl RowChunks + ?Sized),
    rank: usize,
    cutoff: Cutoff,
) -> Result<TruncatedSvd> {
    if rank == 0 {
        return Err(CortisError::Precondition("rank must be at least 1".into()));
    }
    let threshold = match cutoff {
        Cutoff::Relative(c) | Cutoff::Absolute(c) if !(c > 0.0) => {
            return Err(CortisError::Precondition(format!("cutoff must be positive, got {c}")));
        }
        Cutoff::Relative(c) => c,
        Cutoff::Absolute(c) => c,
    };

    let gram = gram_of_source(source)?;
    let eig = symmetric_eigen(&gram)?;
    let sigma_max = eig.values.first().copied().unwrap_or(0.0).max(0.0).sqrt();
    let sigma_floor = match cutoff {
        Cutoff::Relative(_) => threshold * sigma_max,
        Cutoff::Absolute(_) => threshold,
    };
    let lambda_floor = sigma_floor * sigma_floor;

    let kept: Vec<usize> = (0..eig.values.len())
        .filter(|&k| eig.values[k] > lambda_floor && eig.values[k] > 0.0)
        .take(rank)
        .collect();
    let r = kept.len();
    let c = gram.cols();

    let mut rows_seen = 0usize;
    let mut data = Vec::new();
    if r == 0 {
        source.visit_chunks(&mut |chunk| {
            rows_seen += chunk.rows();
            Ok(())
        })?;
        return Ok(TruncatedSvd::empty(rows_seen));
    }

    let singular_values: Vec<f64> = kept.iter().map(|&k| eig.values[k].sqrt()).collect();
    let recover = DenseMatrix::from_fn(c, r, |i, j| eig.vectors.get(i, kept[j]) / singular_values[j]);
    source.visit_chunks(&mut |chunk| {
        let block = chunk.matmul(&recover)?;
        rows_seen += block.rows();
        data.extend_from_slice(block.data());
        Ok(())
    })?;
    let mut u = DenseMatrix::new(rows_seen, r, data)?;
    reorthonormalize_in_place(&mut u);
    apply_sign_convention(&mut u);
    Ok(TruncatedSvd {
        left_vectors: u,
        singular_values,
    })
}

/// Two-pass modified Gram-Schmidt over columns, keeping every column.
fn reorthonormalize_in_place(u: &mut DenseMatrix) {
    let mut cols: Vec<Vec<f64>> = (0..u.cols()).map(|j| u.column(j)).collect();
    for j in 0..cols.len() {
        for _pass in 0..2 {
            for k in 0..j {
                let proj = dot(&cols[k], &cols[j]);
                let (head, tail) = cols.split_at_mut(j);
                for (x, q) in tail[0].iter_mut().zip(&head[k]) {
                    *x -= proj * q;
                }
            }
        }
        let n = norm(&cols[j]);
        if n > 0.0 {
            cols[j].iter_mut().for_each(|x| *x /= n);
        }
    }
    for (j, col) in cols.iter().enumerate() {
        u.set_column(j, col);
    }
}

/// Flips each column so its largest-magnitude entry is positive (first such
/// entry on ties).
pub fn apply_sign_convention(u: &mut DenseMatrix) {
    for j in 0..u.cols() {
        let mut best = 0usize;
        let mut best_abs = -1.0;
        for i in 0..u.rows() {
            let a = u.get(i, j).abs();
            if a > best_abs {
                best_abs = a;
                best = i;
            }
        }
        if u.rows() > 0 && u.get(best, j) < 0.0 {
            for i in 0..u.rows() {
                let x = u.get(i, j);
                u.set(i, j, -x);
            }
        }
    }
}

/// Orthonormal basis for the column space of `m`, in column order.
///
/// Columns whose residual after projecting out the earlier ones falls below
/// `1e-10` of the largest input column norm are treated as dependent and
/// dropped, so the output may have fewer columns than the input.
pub fn orthonormalize(m: &DenseMatrix) -> Result<DenseMatrix> {
    if !m.is_finite() {
        return Err(CortisError::Numeric("non-finite entry in orthonormalize input".into()));
    }
    if m.cols() > m.rows() {
        return Err(CortisError::Precondition(format!(
            "orthonormalize needs cols <= rows, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    let scale = (0..m.cols()).map(|j| norm(&m.column(j))).fold(0.0_f64, f64::max);
    let tol = 1e-10 * scale;
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for j in 0..m.cols() {
        let mut v = m.column(j);
        for _pass in 0..2 {
            for q in &basis {
                let proj = dot(q, &v);
                for (x, qi) in v.iter_mut().zip(q) {
                    *x -= proj * qi;
                }
            }
        }
        let n = norm(&v);
        if n > tol && n > 0.0 {
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
    }
    DenseMatrix::from_columns(m.rows(), &basis)
}

/// Solves `A x = b` for symmetric positive-definite `A` by Cholesky, for each
/// column of `b`.
pub fn solve_spd(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    let n = a.rows();
    if a.cols() != n || b.rows() != n {
        return Err(CortisError::Dimension(format!(
            "solve_spd with A {}x{} and b {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let mut l = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            if i == j {
                if !(s > 0.0) {
                    return Err(CortisError::Numeric(format!(
                        "matrix is not positive definite (pivot {i} = {s})"
                    )));
                }
                l.set(i, i, s.sqrt());
            } else {
                l.set(i, j, s / l.get(j, j));
            }
        }
    }
    let mut x = DenseMatrix::zeros(n, b.cols());
    for col in 0..b.cols() {
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut s = b.get(i, col);
            for k in 0..i {
                s -= l.get(i, k) * y[k];
            }
            y[i] = s / l.get(i, i);
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n {
                s -= l.get(k, i) * x.get(k, col);
            }
            x.set(i, col, s / l.get(i, i));
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg_matrix(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        DenseMatrix::from_fn(rows, cols, |_, _| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn rejects_non_finite_and_wrong_length() {
        assert!(matches!(
            DenseMatrix::new(2, 2, vec![1.0, f64::NAN, 0.0, 0.0]),
            Err(CortisError::Numeric(_))
        ));
        assert!(matches!(DenseMatrix::new(2, 2, vec![1.0]), Err(CortisError::Dimension(_))));
    }

    #[test]
    fn gram_of_identity_split_into_uneven_chunks() {
        let eye = DenseMatrix::identity(3);
        let chunks = vec![eye.row_block(0, 1), eye.row_block(1, 3)];
        assert_eq!(gram_accumulate(&chunks).unwrap(), DenseMatrix::identity(3));
    }

    #[test]
    fn gram_of_zero_matrix_is_zero() {
        let z = DenseMatrix::zeros(5, 2);
        assert_eq!(gram_accumulate([&z]).unwrap(), DenseMatrix::zeros(2, 2));
    }

    #[test]
    fn gram_rejects_column_mismatch() {
        let chunks = vec![DenseMatrix::zeros(2, 3), DenseMatrix::zeros(2, 4)];
        assert!(matches!(gram_accumulate(&chunks), Err(CortisError::Dimension(_))));
    }

    #[test]
    fn jacobi_diagonalizes() {
        let m = lcg_matrix(12, 7, 3);
        let g = m.t_matmul(&m).unwrap();
        let eig = symmetric_eigen(&g).unwrap();
        let gv = g.matmul(&eig.vectors).unwrap();
        for k in 0..7 {
            for i in 0..7 {
                assert!((gv.get(i, k) - eig.values[k] * eig.vectors.get(i, k)).abs() < 1e-12);
            }
        }
        assert!(eig.values.windows(2).all(|w| w[0] >= w[1]));
        assert!(orthonormality_error(&eig.vectors) < 1e-13);
    }

    #[test]
    fn diagonal_case_recovers_axes() {
        let mut m = DenseMatrix::zeros(5, 3);
        m.set(0, 0, 3.0);
        m.set(1, 1, 2.0);
        m.set(2, 2, 1.0);
        let svd = gram_truncated_svd(&ChunkedMatrix::new(&m, 2), 2, Cutoff::default()).unwrap();
        assert_eq!(svd.rank(), 2);
        assert!((svd.singular_values[0] - 3.0).abs() < 1e-12);
        assert!((svd.singular_values[1] - 2.0).abs() < 1e-12);
        for i in 0..5 {
            assert!((svd.left_vectors.get(i, 0) - if i == 0 { 1.0 } else { 0.0 }).abs() < 1e-12);
            assert!((svd.left_vectors.get(i, 1) - if i == 1 { 1.0 } else { 0.0 }).abs() < 1e-12);
        }
    }

    #[test]
    fn scaled_orthonormal_columns_top_two() {
        let q = orthonormalize(&lcg_matrix(30, 4, 9)).unwrap();
        let scales = [5.0, 4.0, 3.0, 2.0];
        let m = DenseMatrix::from_fn(30, 4, |i, j| q.get(i, j) * scales[j]);
        let svd = gram_truncated_svd(&ChunkedMatrix::new(&m, 7), 2, Cutoff::default()).unwrap();
        assert!((svd.singular_values[0] - 5.0).abs() < 1e-10);
        assert!((svd.singular_values[1] - 4.0).abs() < 1e-10);
        for j in 0..2 {
            let d = dot(&svd.left_vectors.column(j), &q.column(j)).abs();
            assert!((d - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn all_zero_input_gives_empty_result() {
        let z = DenseMatrix::zeros(6, 3);
        let svd = gram_truncated_svd(&ChunkedMatrix::new(&z, 4), 3, Cutoff::default()).unwrap();
        assert_eq!(svd.rank(), 0);
        assert_eq!(svd.left_vectors.rows(), 6);
    }

    #[test]
    fn rank_deficient_input_is_truncated() {
        let base = lcg_matrix(40, 3, 1);
        let mix = lcg_matrix(3, 6, 2);
        let m = base.matmul(&mix).unwrap();
        let svd = gram_truncated_svd(&ChunkedMatrix::new(&m, 16), 6, Cutoff::default()).unwrap();
        assert_eq!(svd.rank(), 3);
        assert!(orthonormality_error(&svd.left_vectors) < 1e-12);
    }

    #[test]
    fn sign_convention_makes_largest_entry_positive() {
        let m = DenseMatrix::new(3, 1, vec![0.1, -0.9, 0.3]).unwrap();
        let svd = gram_truncated_svd(&ChunkedMatrix::new(&m, 1), 1, Cutoff::default()).unwrap();
        assert!(svd.left_vectors.get(1, 0) > 0.0);
    }

    #[test]
    fn rejects_bad_rank_and_cutoff() {
        let m = DenseMatrix::identity(3);
        let src = ChunkedMatrix::new(&m, 2);
        assert!(gram_truncated_svd(&src, 0, Cutoff::default()).is_err());
        assert!(gram_truncated_svd(&src, 1, Cutoff::Absolute(0.0)).is_err());
    }

    #[test]
    fn orthonormalize_drops_dependent_columns() {
        let v = [1.0, 2.0, -2.0, 0.5];
        let m = DenseMatrix::from_fn(4, 2, |i, j| v[i] * (j + 1) as f64);
        let q = orthonormalize(&m).unwrap();
        assert_eq!(q.cols(), 1);
        let n = norm(&v);
        for i in 0..4 {
            assert!((q.get(i, 0) - v[i] / n).abs() < 1e-15);
        }
    }

    #[test]
    fn orthonormalize_keeps_orthonormal_input() {
        let q = orthonormalize(&lcg_matrix(10, 3, 4)).unwrap();
        let again = orthonormalize(&q).unwrap();
        for (a, b) in q.data().iter().zip(again.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn orthonormalize_random_is_orthonormal() {
        let q = orthonormalize(&lcg_matrix(20, 5, 11)).unwrap();
        assert_eq!(q.cols(), 5);
        assert!(orthonormality_error(&q) < 1e-10);
    }

    #[test]
    fn cholesky_solves() {
        let m = lcg_matrix(10, 4, 5);
        let a = m.t_matmul(&m).unwrap();
        let b = lcg_matrix(4, 2, 6);
        let x = solve_spd(&a, &b).unwrap();
        let ax = a.matmul(&x).unwrap();
        for (p, q) in ax.data().iter().zip(b.data()) {
            assert!((p - q).abs() < 1e-10);
        }
    }
}
