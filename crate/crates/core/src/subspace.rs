//! Gradient-snapshot memory, per-request bases, fixed-rank merging and the
//! orthogonal projection of weight deltas.
//!
//! Bases are stored sparsely: each one carries an explicit coordinate set
//! (normally the union of the saliency masks seen so far) and row vectors
//! only over that set. Bases with different coordinate sets are compared by
//! zero-extending into the union.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{CortisError, Result};
use crate::localize::SaliencyMask;
use crate::numkit::{self, dot, gram_truncated_svd, Cutoff, DenseMatrix, RowChunks};

/// Rows streamed per chunk when stacking bases or snapshots.
pub const STACK_CHUNK_ROWS: usize = numkit::DEFAULT_CHUNK_ROWS;

/// Sorted, duplicate-free set of parameter coordinates.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CoordSet(Vec<usize>);

impl CoordSet {
    pub fn new(mut coords: Vec<usize>) -> Self {
        coords.sort_unstable();
        coords.dedup();
        Self(coords)
    }

    pub fn full(dim: usize) -> Self {
        Self((0..dim).collect())
    }

    pub fn from_mask(mask: &SaliencyMask) -> Self {
        Self(mask.indices().to_vec())
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn position(&self, coord: usize) -> Option<usize> {
        self.0.binary_search(&coord).ok()
    }

    pub fn union(&self, other: &CoordSet) -> CoordSet {
        let (a, b) = (&self.0, &other.0);
        let mut out = Vec::with_capacity(a.len() + b.len());
        let (mut i, mut j) = (0, 0);
        while i < a.len() || j < b.len() {
            let next = match (a.get(i), b.get(j)) {
                (Some(x), Some(y)) => match x.cmp(y) {
                    Ordering::Less => {
                        i += 1;
                        *x
                    }
                    Ordering::Greater => {
                        j += 1;
                        *y
                    }
                    Ordering::Equal => {
                        i += 1;
                        j += 1;
                        *x
                    }
                },
                (Some(x), None) => {
                    i += 1;
                    *x
                }
                (None, Some(y)) => {
                    j += 1;
                    *y
                }
                (None, None) => unreachable!(),
            };
            out.push(next);
        }
        CoordSet(out)
    }

    pub fn is_superset_of(&self, other: &CoordSet) -> bool {
        other.0.iter().all(|c| self.position(*c).is_some())
    }

    /// Gathers `full[c]` for every coordinate `c` in the set.
    pub fn restrict(&self, full: &[f64]) -> Vec<f64> {
        self.0.iter().map(|&c| full[c]).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BasisLabel {
    Request(usize),
    Merged,
}

/// Orthonormal columns over a coordinate set, with singular values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubspaceBasis {
    pub label: BasisLabel,
    coords: CoordSet,
    /// |coords| × r.
    u: DenseMatrix,
    sigma: Vec<f64>,
}

impl SubspaceBasis {
    pub fn new(label: BasisLabel, coords: CoordSet, u: DenseMatrix, sigma: Vec<f64>) -> Result<Self> {
        if u.rows() != coords.len() || u.cols() != sigma.len() {
            return Err(CortisError::Dimension(format!(
                "basis matrix {}x{} with {} coordinates and {} singular values",
                u.rows(),
                u.cols(),
                coords.len(),
                sigma.len()
            )));
        }
        Ok(Self {
            label,
            coords,
            u,
            sigma,
        })
    }

    pub fn empty(label: BasisLabel) -> Self {
        Self {
            label,
            coords: CoordSet::default(),
            u: DenseMatrix::zeros(0, 0),
            sigma: Vec::new(),
        }
    }

    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigma.is_empty()
    }

    pub fn coords(&self) -> &CoordSet {
        &self.coords
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.u
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.sigma
    }

    /// Zero-extends the basis rows into `coords`, which must contain every
    /// coordinate this basis is defined on.
    pub fn embed(&self, coords: &CoordSet) -> Result<SubspaceBasis> {
        if !coords.is_superset_of(&self.coords) {
            return Err(CortisError::Dimension(
                "target coordinate set does not contain the basis coordinates".into(),
            ));
        }
        let r = self.rank();
        let mut u = DenseMatrix::zeros(coords.len(), r);
        for (row, &c) in self.coords.as_slice().iter().enumerate() {
            let target = coords.position(c).expect("superset checked");
            for k in 0..r {
                u.set(target, k, self.u.get(row, k));
            }
        }
        Ok(SubspaceBasis {
            label: self.label,
            coords: coords.clone(),
            u,
            sigma: self.sigma.clone(),
        })
    }

    /// `Uᵀ x` for a full-length parameter vector `x`.
    pub fn coefficients(&self, full: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; self.rank()];
        for (row, &coord) in self.coords.as_slice().iter().enumerate() {
            let x = full[coord];
            if x == 0.0 {
                continue;
            }
            for (k, ck) in c.iter_mut().enumerate() {
                *ck += self.u.get(row, k) * x;
            }
        }
        c
    }

    /// Removes the span of this basis from `v`, a vector over `self.coords`.
    fn deflate(&self, v: &mut [f64]) {
        for _pass in 0..2 {
            let c = self.u.t_mul_vec(v).expect("length matches coords");
            for (row, x) in v.iter_mut().enumerate() {
                let mut s = 0.0;
                for (k, ck) in c.iter().enumerate() {
                    s += self.u.get(row, k) * ck;
                }
                *x -= s;
            }
        }
    }
}

/// Gradient snapshots taken every `interval` optimizer steps during one
/// request, each deflated against the cumulative basis at capture time.
#[derive(Debug, Clone)]
pub struct SnapshotBuffer {
    pub request_index: usize,
    pub interval: usize,
    coords: CoordSet,
    cumulative: SubspaceBasis,
    snapshots: Vec<Vec<f64>>,
}

impl SnapshotBuffer {
    /// `coords` is widened to include the cumulative basis's coordinates if
    /// it does not already.
    pub fn new(request_index: usize, interval: usize, coords: CoordSet, cumulative: &SubspaceBasis) -> Result<Self> {
        if interval == 0 {
            return Err(CortisError::Precondition("snapshot interval must be >= 1".into()));
        }
        let coords = coords.union(cumulative.coords());
        let cumulative = cumulative.embed(&coords)?;
        Ok(Self {
            request_index,
            interval,
            coords,
            cumulative,
            snapshots: Vec::new(),
        })
    }

    pub fn coords(&self) -> &CoordSet {
        &self.coords
    }

    pub fn snapshots(&self) -> &[Vec<f64>] {
        &self.snapshots
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn is_capture_step(&self, step: usize) -> bool {
        step > 0 && step % self.interval == 0
    }

    /// Stores the deflated restriction of `grad` if `step` is a capture step.
    /// Returns whether a snapshot was taken.
    pub fn capture(&mut self, step: usize, grad: &[f64]) -> bool {
        if !self.is_capture_step(step) {
            return false;
        }
        let mut g = self.coords.restrict(grad);
        if !self.cumulative.is_empty() {
            self.cumulative.deflate(&mut g);
        }
        self.snapshots.push(g);
        true
    }
}

/// Row-chunk view of column vectors stacked side by side, with optional
/// per-column scaling.
struct ColumnStack<'a> {
    rows: usize,
    columns: Vec<(&'a DenseMatrix, usize, f64, &'a [Option<usize>])>,
    chunk_rows: usize,
}

impl RowChunks for ColumnStack<'_> {
    fn cols(&self) -> usize {
        self.columns.len()
    }

    fn visit_chunks(&self, visit: &mut dyn FnMut(&DenseMatrix) -> Result<()>) -> Result<()> {
        let mut start = 0;
        while start < self.rows {
            let end = (start + self.chunk_rows).min(self.rows);
            let block = DenseMatrix::from_fn(end - start, self.columns.len(), |i, j| {
                let (m, col, scale, rowmap) = self.columns[j];
                match rowmap[start + i] {
                    Some(r) => m.get(r, col) * scale,
                    None => 0.0,
                }
            });
            visit(&block)?;
            start = end;
        }
        Ok(())
    }
}

/// Truncated SVD of the stacked snapshots: the per-request basis `(U_i, Σ_i)`.
///
/// Returns an empty basis when every snapshot is zero (the request added no
/// new directions).
pub fn extract_basis(buffer: &SnapshotBuffer, rank: usize) -> Result<SubspaceBasis> {
    let label = BasisLabel::Request(buffer.request_index);
    if buffer.is_empty() {
        return Err(CortisError::Precondition("no snapshots were captured".into()));
    }
    let n = buffer.coords.len();
    let stacked = DenseMatrix::from_fn(n, buffer.len(), |i, j| buffer.snapshots[j][i]);
    let svd = gram_truncated_svd(
        &numkit::ChunkedMatrix::new(&stacked, STACK_CHUNK_ROWS),
        rank,
        Cutoff::default(),
    )?;
    if svd.rank() == 0 {
        return Ok(SubspaceBasis {
            label,
            coords: buffer.coords.clone(),
            u: DenseMatrix::zeros(n, 0),
            sigma: Vec::new(),
        });
    }
    SubspaceBasis::new(label, buffer.coords.clone(), svd.left_vectors, svd.singular_values)
}

/// Fixed-rank merge of per-request bases: rank-`r_merge` truncated SVD of the
/// energy-weighted stack `[U_1 Σ_1 | … | U_i Σ_i]` over the union of their
/// coordinate sets, streamed row-chunk by row-chunk.
pub fn merge(bases: &[SubspaceBasis], r_merge: usize) -> Result<SubspaceBasis> {
    let nonempty: Vec<&SubspaceBasis> = bases.iter().filter(|b| !b.is_empty()).collect();
    if nonempty.is_empty() {
        return Ok(SubspaceBasis::empty(BasisLabel::Merged));
    }
    let coords = nonempty
        .iter()
        .fold(CoordSet::default(), |acc, b| acc.union(b.coords()));
    let rowmaps: Vec<Vec<Option<usize>>> = nonempty
        .iter()
        .map(|b| coords.as_slice().iter().map(|&c| b.coords.position(c)).collect())
        .collect();
    let mut columns = Vec::new();
    for (b, rowmap) in nonempty.iter().zip(&rowmaps) {
        for (k, s) in b.sigma.iter().enumerate() {
            columns.push((&b.u, k, *s, rowmap.as_slice()));
        }
    }
    let stack = ColumnStack {
        rows: coords.len(),
        columns,
        chunk_rows: STACK_CHUNK_ROWS,
    };
    let svd = gram_truncated_svd(&stack, r_merge, Cutoff::default())?;
    SubspaceBasis::new(BasisLabel::Merged, coords, svd.left_vectors, svd.singular_values)
}

/// Projection of weight deltas onto the orthogonal complement of a merged
/// basis, restricted to a trainable mask.
///
/// The basis rows are restricted to the mask and re-orthonormalized once, so
/// the projected delta stays zero outside the mask while its inner product
/// with every basis column is zero. When the mask covers the basis
/// coordinates this is exactly `δ − U Uᵀ δ`.
#[derive(Debug, Clone)]
pub struct Projector {
    rows: Vec<usize>,
    q: DenseMatrix,
}

impl Projector {
    pub fn identity() -> Self {
        Self {
            rows: Vec::new(),
            q: DenseMatrix::zeros(0, 0),
        }
    }

    pub fn new(merged: &SubspaceBasis, mask: &SaliencyMask) -> Result<Self> {
        if merged.is_empty() {
            return Ok(Self::identity());
        }
        let mut rows = Vec::new();
        let mut basis_rows = Vec::new();
        for (row, &c) in merged.coords.as_slice().iter().enumerate() {
            if mask.contains(c) {
                rows.push(c);
                basis_rows.push(row);
            }
        }
        if rows.is_empty() {
            return Ok(Self::identity());
        }
        let w = DenseMatrix::from_fn(rows.len(), merged.rank(), |i, k| merged.u.get(basis_rows[i], k));
        let q = if w.cols() <= w.rows() {
            numkit::orthonormalize(&w)?
        } else {
            numkit::orthonormalize(&w.leading_columns(w.rows()))?
        };
        Ok(Self { rows, q })
    }

    pub fn is_identity(&self) -> bool {
        self.q.cols() == 0
    }

    pub fn rank(&self) -> usize {
        self.q.cols()
    }

    /// In-place `δ ← δ − Q Qᵀ δ`.
    pub fn apply(&self, delta: &mut [f64]) {
        if self.is_identity() {
            return;
        }
        let r = self.q.cols();
        let mut c = vec![0.0; r];
        for (i, &coord) in self.rows.iter().enumerate() {
            let x = delta[coord];
            if x != 0.0 {
                for (k, ck) in c.iter_mut().enumerate() {
                    *ck += self.q.get(i, k) * x;
                }
            }
        }
        for (i, &coord) in self.rows.iter().enumerate() {
            let row = self.q.row(i);
            delta[coord] -= dot(row, &c);
        }
    }
}

/// One-shot form of [`Projector::apply`].
pub fn project_delta(delta: &[f64], mask: &SaliencyMask, merged: &SubspaceBasis) -> Result<Vec<f64>> {
    let projector = Projector::new(merged, mask)?;
    let mut out = delta.to_vec();
    projector.apply(&mut out);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::orthonormality_error;

    fn pseudo(seed: u64, n: usize) -> Vec<f64> {
        let mut s = seed.wrapping_add(0x9E37_79B9_7F4A_7C15);
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
            })
            .collect()
    }

    fn basis_from_columns(label: BasisLabel, dim: usize, cols: &[Vec<f64>]) -> SubspaceBasis {
        let m = DenseMatrix::from_columns(dim, cols).unwrap();
        let q = numkit::orthonormalize(&m).unwrap();
        let sigma = vec![1.0; q.cols()];
        SubspaceBasis::new(label, CoordSet::full(dim), q, sigma).unwrap()
    }

    #[test]
    fn coordset_union_is_sorted() {
        let a = CoordSet::new(vec![5, 1, 3]);
        let b = CoordSet::new(vec![2, 3, 9]);
        assert_eq!(a.union(&b).as_slice(), &[1, 2, 3, 5, 9]);
    }

    #[test]
    fn capture_without_history_keeps_gradient() {
        let mut buf = SnapshotBuffer::new(1, 2, CoordSet::new(vec![0, 2]), &SubspaceBasis::empty(BasisLabel::Merged)).unwrap();
        assert!(!buf.capture(1, &[1.0, 2.0, 3.0]));
        assert!(buf.capture(2, &[1.0, 2.0, 3.0]));
        assert_eq!(buf.snapshots()[0], vec![1.0, 3.0]);
    }

    #[test]
    fn in_span_gradient_deflates_to_zero() {
        let dim = 12;
        let basis = basis_from_columns(BasisLabel::Merged, dim, &[pseudo(1, dim), pseudo(2, dim)]);
        let g: Vec<f64> = (0..dim)
            .map(|i| 3.0 * basis.matrix().get(i, 0) - 2.0 * basis.matrix().get(i, 1))
            .collect();
        let mut buf = SnapshotBuffer::new(2, 1, CoordSet::full(dim), &basis).unwrap();
        buf.capture(1, &g);
        let n: f64 = numkit::norm(&buf.snapshots()[0]);
        assert!(n < 1e-8 * numkit::norm(&g));
    }

    #[test]
    fn snapshot_count_matches_interval() {
        let mut buf = SnapshotBuffer::new(2, 15, CoordSet::full(3), &SubspaceBasis::empty(BasisLabel::Merged)).unwrap();
        let taken = (1..=1000).filter(|&s| buf.capture(s, &[1.0, 0.0, 0.0])).count();
        assert_eq!(taken, 66);
        assert_eq!(buf.len(), 66);
    }

    #[test]
    fn single_snapshot_basis_is_normalized_gradient() {
        let mut buf = SnapshotBuffer::new(1, 1, CoordSet::full(4), &SubspaceBasis::empty(BasisLabel::Merged)).unwrap();
        buf.capture(1, &[3.0, 0.0, -4.0, 0.0]);
        let b = extract_basis(&buf, 40).unwrap();
        assert_eq!(b.rank(), 1);
        assert!((b.singular_values()[0] - 5.0).abs() < 1e-12);
        let col = b.matrix().column(0);
        let expected = [-0.6, 0.0, 0.8, 0.0];
        for (a, e) in col.iter().zip(expected) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_snapshots_give_empty_basis() {
        let mut buf = SnapshotBuffer::new(1, 1, CoordSet::full(4), &SubspaceBasis::empty(BasisLabel::Merged)).unwrap();
        buf.capture(1, &[0.0; 4]);
        buf.capture(2, &[0.0; 4]);
        assert!(extract_basis(&buf, 5).unwrap().is_empty());
    }

    #[test]
    fn merge_of_single_basis_is_that_basis() {
        let dim = 10;
        let b = basis_from_columns(BasisLabel::Request(1), dim, &[pseudo(3, dim), pseudo(4, dim)]);
        let b = SubspaceBasis::new(BasisLabel::Request(1), b.coords.clone(), b.u.clone(), vec![4.0, 2.0]).unwrap();
        let m = merge(&[b.clone()], 40).unwrap();
        assert_eq!(m.rank(), 2);
        for k in 0..2 {
            let d = dot(&m.matrix().column(k), &b.matrix().column(k)).abs();
            assert!((d - 1.0).abs() < 1e-12);
        }
        assert!((m.singular_values()[0] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn energy_weighting_keeps_the_strong_direction() {
        let e = |i: usize| {
            let mut v = vec![0.0; 4];
            v[i] = 1.0;
            v
        };
        let strong = SubspaceBasis::new(
            BasisLabel::Request(1),
            CoordSet::full(4),
            DenseMatrix::from_columns(4, &[e(1)]).unwrap(),
            vec![1.0],
        )
        .unwrap();
        let weak = SubspaceBasis::new(
            BasisLabel::Request(2),
            CoordSet::full(4),
            DenseMatrix::from_columns(4, &[e(2)]).unwrap(),
            vec![3.0],
        )
        .unwrap();
        let m = merge(&[strong, weak], 1).unwrap();
        assert_eq!(m.rank(), 1);
        assert!((m.matrix().get(2, 0) - 1.0).abs() < 1e-12);
        assert!((m.singular_values()[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn merge_over_disjoint_coordinate_sets() {
        let a = SubspaceBasis::new(
            BasisLabel::Request(1),
            CoordSet::new(vec![0, 1]),
            DenseMatrix::from_columns(2, &[vec![1.0, 0.0]]).unwrap(),
            vec![2.0],
        )
        .unwrap();
        let b = SubspaceBasis::new(
            BasisLabel::Request(2),
            CoordSet::new(vec![5, 7]),
            DenseMatrix::from_columns(2, &[vec![0.0, 1.0]]).unwrap(),
            vec![1.0],
        )
        .unwrap();
        let m = merge(&[a, b], 4).unwrap();
        assert_eq!(m.coords().as_slice(), &[0, 1, 5, 7]);
        assert_eq!(m.rank(), 2);
        assert!(orthonormality_error(m.matrix()) < 1e-12);
    }

    #[test]
    fn empty_merge_is_empty() {
        assert!(merge(&[], 10).unwrap().is_empty());
    }

    #[test]
    fn projection_is_identity_without_history() {
        let mask = SaliencyMask::full(1, 5);
        let d = pseudo(9, 5);
        assert_eq!(project_delta(&d, &mask, &SubspaceBasis::empty(BasisLabel::Merged)).unwrap(), d);
    }

    #[test]
    fn projection_annihilates_span_and_keeps_complement() {
        let dim = 8;
        let basis = basis_from_columns(BasisLabel::Merged, dim, &[pseudo(1, dim), pseudo(2, dim)]);
        let mask = SaliencyMask::full(2, dim);
        let inside: Vec<f64> = (0..dim).map(|i| basis.matrix().get(i, 0) + basis.matrix().get(i, 1)).collect();
        let out = project_delta(&inside, &mask, &basis).unwrap();
        assert!(numkit::norm(&out) < 1e-12);

        let mut perp = pseudo(3, dim);
        let c = basis.coefficients(&perp);
        for (i, x) in perp.iter_mut().enumerate() {
            *x -= c[0] * basis.matrix().get(i, 0) + c[1] * basis.matrix().get(i, 1);
        }
        let out = project_delta(&perp, &mask, &basis).unwrap();
        for (a, b) in out.iter().zip(&perp) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn projection_respects_mask() {
        let dim = 6;
        let basis = basis_from_columns(BasisLabel::Merged, dim, &[pseudo(5, dim)]);
        let mask = SaliencyMask::from_indices(2, vec![0, 2, 3], dim, 50.0, 1e-8).unwrap();
        let mut delta = pseudo(6, dim);
        mask.apply(&mut delta);
        let out = project_delta(&delta, &mask, &basis).unwrap();
        for j in [1, 4, 5] {
            assert_eq!(out[j], 0.0);
        }
        let c = basis.coefficients(&out);
        assert!(c[0].abs() < 1e-12);
    }
}
