//! Contrastive saliency and top-k% trainable masks.
//!
//! A coordinate is salient for request `i` when the current forget Fisher is
//! large relative to the element-wise max of the remain Fisher and every
//! earlier forget Fisher:
//!
//! ```text
//! saliency[j] = (F_forget[j] + ε) / (max(F_remain[j], F_f1[j], …, F_f(i-1)[j]) + ε)
//! ```
//!
//! Coordinates important for retain quality or an earlier request sink to the
//! bottom of the ranking. The mask keeps the global top-k% of all coordinates.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{CortisError, Result};
use crate::fisher::FisherDiagonal;

pub const DEFAULT_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMask {
    pub request_index: usize,
    /// Strictly increasing coordinate indices.
    indices: Vec<usize>,
    pub dim: usize,
    pub k_percent: f64,
    pub epsilon: f64,
}

impl SaliencyMask {
    pub fn from_indices(
        request_index: usize,
        mut indices: Vec<usize>,
        dim: usize,
        k_percent: f64,
        epsilon: f64,
    ) -> Result<Self> {
        indices.sort_unstable();
        indices.dedup();
        if indices.last().is_some_and(|&j| j >= dim) {
            return Err(CortisError::Dimension(format!(
                "mask index {} out of range for dimension {dim}",
                indices.last().unwrap()
            )));
        }
        Ok(Self {
            request_index,
            indices,
            dim,
            k_percent,
            epsilon,
        })
    }

    /// Mask selecting every coordinate.
    pub fn full(request_index: usize, dim: usize) -> Self {
        Self {
            request_index,
            indices: (0..dim).collect(),
            dim,
            k_percent: 100.0,
            epsilon: 0.0,
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, j: usize) -> bool {
        self.indices.binary_search(&j).is_ok()
    }

    /// Zeroes every entry of `v` outside the mask.
    pub fn apply(&self, v: &mut [f64]) {
        let mut next = self.indices.iter().peekable();
        for (j, x) in v.iter_mut().enumerate() {
            if next.peek() == Some(&&j) {
                next.next();
            } else {
                *x = 0.0;
            }
        }
    }
}

/// Number of coordinates a k% mask keeps out of `dim`.
pub fn mask_size(k_percent: f64, dim: usize) -> usize {
    // Round away representation error before flooring, so k=30, d=20000 is
    // exactly 6000 rather than 5999.
    let raw = k_percent * dim as f64 / 100.0;
    let floored = (raw + 1e-9 * raw.abs().max(1.0)).floor();
    (floored as usize).min(dim)
}

pub fn saliency(
    forget: &FisherDiagonal,
    remain: &FisherDiagonal,
    prior_forget: &[FisherDiagonal],
    epsilon: f64,
) -> Result<Vec<f64>> {
    if !(epsilon > 0.0) {
        return Err(CortisError::Precondition(format!("epsilon must be positive, got {epsilon}")));
    }
    let d = forget.len();
    for f in std::iter::once(remain).chain(prior_forget) {
        if f.len() != d {
            return Err(CortisError::Dimension(format!(
                "Fisher diagonal of length {} against forget Fisher of length {d}",
                f.len()
            )));
        }
    }
    let mut denom = remain.values().to_vec();
    for f in prior_forget {
        for (m, x) in denom.iter_mut().zip(f.values()) {
            *m = m.max(*x);
        }
    }
    Ok(forget
        .values()
        .iter()
        .zip(&denom)
        .map(|(num, den)| (num + epsilon) / (den + epsilon))
        .collect())
}

/// Descending by value, ascending by index on ties.
fn rank_order(values: &[f64], a: usize, b: usize) -> Ordering {
    values[b].total_cmp(&values[a]).then(a.cmp(&b))
}

/// Global top-k% of `saliency`, ties broken toward the lower index.
pub fn top_k_mask(saliency: &[f64], k_percent: f64, request_index: usize, epsilon: f64) -> Result<SaliencyMask> {
    if !(k_percent > 0.0 && k_percent <= 100.0) {
        return Err(CortisError::Precondition(format!("k% must lie in (0, 100], got {k_percent}")));
    }
    let d = saliency.len();
    let keep = mask_size(k_percent, d);
    let mut order: Vec<usize> = (0..d).collect();
    if keep > 0 && keep < d {
        order.select_nth_unstable_by(keep - 1, |&a, &b| rank_order(saliency, a, b));
    }
    order.truncate(keep);
    SaliencyMask::from_indices(request_index, order, d, k_percent, epsilon)
}

/// `|A ∩ B| / |A ∪ B|`; two empty masks count as identical.
pub fn mask_jaccard(a: &SaliencyMask, b: &SaliencyMask) -> Result<f64> {
    if a.dim != b.dim {
        return Err(CortisError::Dimension(format!(
            "masks over dimensions {} and {}",
            a.dim, b.dim
        )));
    }
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    let (x, y) = (a.indices(), b.indices());
    while i < x.len() && j < y.len() {
        match x[i].cmp(&y[j]) {
            Ordering::Less => i += 1,
            Ordering::Greater => j += 1,
            Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    let union = x.len() + y.len() - inter;
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fisher::FisherSource;

    fn fd(v: &[f64]) -> FisherDiagonal {
        FisherDiagonal::new(v.to_vec(), FisherSource::Remain, 1).unwrap()
    }

    #[test]
    fn equal_fishers_give_unit_saliency() {
        let f = fd(&[0.5, 2.0, 0.0, 7.0]);
        let s = saliency(&f, &f, &[], DEFAULT_EPSILON).unwrap();
        assert!(s.iter().all(|x| (x - 1.0).abs() < 1e-15));
    }

    #[test]
    fn hand_evaluated_four_coordinates() {
        let s = saliency(
            &fd(&[4.0, 1.0, 0.0, 2.0]),
            &fd(&[1.0, 1.0, 1.0, 1.0]),
            &[fd(&[0.0, 8.0, 0.0, 0.0])],
            1e-8,
        )
        .unwrap();
        let expected = [4.0, 0.125, 0.0, 2.0];
        for (a, b) in s.iter().zip(expected) {
            assert!((a - b).abs() < 1e-7, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_forget_fisher_floors_at_epsilon_ratio() {
        let s = saliency(&fd(&[0.0; 3]), &fd(&[0.0, 1.0, 3.0]), &[], 1e-8).unwrap();
        assert!(s.iter().all(|x| *x <= 1.0 && *x > 0.0));
        assert_eq!(s[0], 1.0);
    }

    #[test]
    fn length_mismatch_is_dimension_error() {
        let r = saliency(&fd(&[1.0; 3]), &fd(&[1.0; 4]), &[], 1e-8);
        assert!(matches!(r, Err(CortisError::Dimension(_))));
    }

    #[test]
    fn full_mask_at_k_100() {
        let m = top_k_mask(&[0.3, 0.1, 0.2], 100.0, 1, 1e-8).unwrap();
        assert_eq!(m.indices(), &[0, 1, 2]);
    }

    #[test]
    fn thirty_percent_of_twenty_thousand() {
        let s: Vec<f64> = (0..20_000).map(|j| ((j * 7919) % 1000) as f64).collect();
        assert_eq!(top_k_mask(&s, 30.0, 1, 1e-8).unwrap().len(), 6000);
    }

    #[test]
    fn ties_break_toward_lower_index() {
        let m = top_k_mask(&[1.0; 10], 50.0, 1, 1e-8).unwrap();
        assert_eq!(m.indices(), &[0, 1, 2, 3, 4]);
    }

    #[test]
    fn invalid_k_is_rejected() {
        assert!(top_k_mask(&[1.0], 0.0, 1, 1e-8).is_err());
        assert!(top_k_mask(&[1.0], 100.5, 1, 1e-8).is_err());
    }

    #[test]
    fn jaccard_extremes() {
        let a = SaliencyMask::from_indices(1, vec![0, 1, 2], 6, 50.0, 1e-8).unwrap();
        let b = SaliencyMask::from_indices(2, vec![3, 4, 5], 6, 50.0, 1e-8).unwrap();
        let c = SaliencyMask::from_indices(3, vec![2, 3], 6, 50.0, 1e-8).unwrap();
        assert_eq!(mask_jaccard(&a, &a).unwrap(), 1.0);
        assert_eq!(mask_jaccard(&a, &b).unwrap(), 0.0);
        assert!((mask_jaccard(&a, &c).unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn apply_zeroes_outside() {
        let m = SaliencyMask::from_indices(1, vec![1, 3], 5, 40.0, 1e-8).unwrap();
        let mut v = vec![1.0; 5];
        m.apply(&mut v);
        assert_eq!(v, vec![0.0, 1.0, 0.0, 1.0, 0.0]);
    }
}
