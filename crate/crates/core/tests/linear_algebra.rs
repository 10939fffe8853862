mod common;

use cortis::localize::SaliencyMask;
use cortis::numkit::{gram_truncated_svd, norm, orthonormality_error, ChunkedMatrix, Cutoff, DenseMatrix};
use cortis::rng;
use cortis::subspace::{merge, project_delta, BasisLabel, CoordSet, SubspaceBasis};
use cortis_oracles::{oracle_svd, principal_cosines};
use proptest::prelude::*;
use rand::Rng;

use common::gaussian_matrix;

fn check_against_oracle(m: &DenseMatrix, chunk: usize) {
    let cols = m.cols();
    let fast = gram_truncated_svd(&ChunkedMatrix::new(m, chunk), cols, Cutoff::default()).unwrap();
    let slow = oracle_svd(m, cols);
    let r = fast.singular_values.len();
    for (k, (a, b)) in fast.singular_values.iter().zip(&slow.sigma).enumerate() {
        assert!((a - b).abs() < 1e-8, "σ_{k}: {a} vs {b}");
    }
    assert!(slow.sigma[r..].iter().all(|s| *s <= 1e-6 * slow.sigma[0]));
    assert!(orthonormality_error(&fast.left_vectors) < 1e-8);
    // Compare leading subspaces wherever the next value is separated.
    for k in 1..=r {
        let gap = if k < slow.sigma.len() { slow.sigma[k - 1] - slow.sigma[k] } else { f64::INFINITY };
        if gap > 1e-4 {
            let c = principal_cosines(&fast.left_vectors.leading_columns(k), &slow.u.leading_columns(k));
            let worst = c.iter().copied().fold(1.0, f64::min).min(1.0);
            assert!(worst.acos() < 1e-6, "rank-{k} subspace angle {}", worst.acos());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn gram_svd_matches_jacobi(seed in any::<u64>(), rows in 16usize..200, cols in 1usize..16, chunk in 1usize..64) {
        let mut r = rng::stream(seed, "la-test");
        check_against_oracle(&gaussian_matrix(&mut r, rows, cols.min(rows)), chunk);
    }

    #[test]
    fn projection_algebra(seed in any::<u64>(), d in 20usize..120, r in 1usize..6) {
        let mut g = rng::stream(seed, "proj-test");
        let coords = CoordSet::full(d);
        let q = cortis::numkit::orthonormalize(&gaussian_matrix(&mut g, d, r)).unwrap();
        let basis = SubspaceBasis::new(BasisLabel::Merged, coords, q.clone(), vec![1.0; r]).unwrap();
        let mask = SaliencyMask::full(2, d);
        let delta: Vec<f64> = (0..d).map(|_| g.random_range(-1.0..1.0)).collect();
        let once = project_delta(&delta, &mask, &basis).unwrap();
        let twice = project_delta(&once, &mask, &basis).unwrap();
        for (a, b) in once.iter().zip(&twice) {
            prop_assert!((a - b).abs() < 1e-10);
        }
        // ‖δ‖² = ‖δ'‖² + ‖UUᵀδ‖².
        let removed: Vec<f64> = delta.iter().zip(&once).map(|(a, b)| a - b).collect();
        let lhs = norm(&delta).powi(2);
        prop_assert!((lhs - norm(&once).powi(2) - norm(&removed).powi(2)).abs() < 1e-10 * lhs.max(1.0));
        // In-span deltas are annihilated.
        let coef: Vec<f64> = (0..r).map(|_| g.random_range(-1.0..1.0)).collect();
        let in_span = q.mul_vec(&coef).unwrap();
        let gone = project_delta(&in_span, &mask, &basis).unwrap();
        prop_assert!(norm(&gone) < 1e-8 * norm(&in_span));
    }
}

#[test]
fn projection_is_identity_at_first_request() {
    let delta = vec![0.5, -1.0, 2.0, 0.0];
    let mask = SaliencyMask::full(1, 4);
    let out = project_delta(&delta, &mask, &SubspaceBasis::empty(BasisLabel::Merged)).unwrap();
    assert_eq!(out, delta);
}

#[test]
fn rank_deficient_input_reports_only_the_true_rank() {
    let mut r = rng::stream(5, "la-deficient");
    let a = gaussian_matrix(&mut r, 80, 3);
    let b = gaussian_matrix(&mut r, 3, 10);
    let m = a.matmul(&b).unwrap();
    let svd = gram_truncated_svd(&ChunkedMatrix::new(&m, 7), 10, Cutoff::default()).unwrap();
    assert_eq!(svd.singular_values.len(), 3);
}

/// The merge keeps the top directions of the materialized energy stack.
#[test]
fn merge_matches_materialized_stack() {
    let mut g = rng::stream(9, "merge-test");
    let d = 60;
    let bases: Vec<SubspaceBasis> = (0..4)
        .map(|k| {
            let q = cortis::numkit::orthonormalize(&gaussian_matrix(&mut g, d, 5)).unwrap();
            let sigma: Vec<f64> = (0..5).map(|j| (10.0 - j as f64) * (k + 1) as f64).collect();
            SubspaceBasis::new(BasisLabel::Request(k + 1), CoordSet::full(d), q, sigma).unwrap()
        })
        .collect();
    let merged = merge(&bases, 8).unwrap();
    let mut cols = Vec::new();
    for b in &bases {
        for j in 0..b.rank() {
            cols.push(b.matrix().column(j).iter().map(|x| x * b.singular_values()[j]).collect::<Vec<_>>());
        }
    }
    let phi = DenseMatrix::from_columns(d, &cols).unwrap();
    let direct = oracle_svd(&phi, 8);
    assert_eq!(merged.rank(), 8);
    for (a, b) in merged.singular_values().iter().zip(&direct.sigma) {
        assert!((a - b).abs() < 1e-8 * b.max(1.0), "{a} vs {b}");
    }
    let c = principal_cosines(merged.matrix(), &direct.u);
    assert!(c.iter().all(|x| (1.0 - x).abs() < 1e-8), "{c:?}");
}
