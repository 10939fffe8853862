//! Slow, direct reference computations for the test suites. Nothing here is
//! reachable from the library, the CLI or the Python module.

use cortis::numkit::DenseMatrix;
use cortis::toytts::{loss_and_grad, ParamVector, Sample, ToyModel};

pub struct OracleSvd {
    /// rows × r, orthonormal columns.
    pub u: DenseMatrix,
    /// Descending, length r.
    pub sigma: Vec<f64>,
}

/// One-sided Jacobi SVD of the materialized matrix, truncated to `rank`.
/// Columns are rotated pairwise until mutually orthogonal; their norms are
/// then the singular values.
pub fn oracle_svd(m: &DenseMatrix, rank: usize) -> OracleSvd {
    let (rows, cols) = (m.rows(), m.cols());
    let mut a: Vec<Vec<f64>> = (0..cols).map(|j| m.column(j)).collect();
    for _sweep in 0..100 {
        let mut rotated = false;
        for p in 0..cols {
            for q in p + 1..cols {
                let alpha: f64 = a[p].iter().map(|x| x * x).sum();
                let beta: f64 = a[q].iter().map(|x| x * x).sum();
                let gamma: f64 = a[p].iter().zip(&a[q]).map(|(x, y)| x * y).sum();
                if gamma.abs() <= 1e-15 * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..rows {
                    let (x, y) = (a[p][i], a[q][i]);
                    a[p][i] = c * x - s * y;
                    a[q][i] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut cols_by_norm: Vec<(f64, Vec<f64>)> = a
        .into_iter()
        .map(|col| (col.iter().map(|x| x * x).sum::<f64>().sqrt(), col))
        .collect();
    cols_by_norm.sort_by(|x, y| y.0.total_cmp(&x.0));
    let r = rank.min(cols).min(rows);
    let sigma: Vec<f64> = cols_by_norm[..r].iter().map(|(s, _)| *s).collect();
    let u = DenseMatrix::from_fn(rows, r, |i, j| {
        let (s, col) = &cols_by_norm[j];
        if *s > 0.0 {
            col[i] / s
        } else {
            0.0
        }
    });
    OracleSvd { u, sigma }
}

/// Central finite differences of one sample's loss, coordinate by
/// coordinate.
pub fn oracle_grad(model: &ToyModel, sample: &Sample, step: f64) -> ParamVector {
    let d = model.num_params();
    let mut probe = model.clone();
    let mut grad = vec![0.0; d];
    for (j, g) in grad.iter_mut().enumerate() {
        let orig = model.params().as_slice()[j];
        probe.params_mut().as_mut_slice()[j] = orig + step;
        let up = probe.sample_loss(sample);
        probe.params_mut().as_mut_slice()[j] = orig - step;
        let down = probe.sample_loss(sample);
        probe.params_mut().as_mut_slice()[j] = orig;
        *g = (up - down) / (2.0 * step);
    }
    ParamVector::from_vec(grad).expect("finite differences are finite")
}

/// Indices of the `floor(k% · n)` largest values by a full sort, ties to the
/// lower index, returned ascending. Panics on k outside (0, 100].
pub fn oracle_topk(values: &[f64], k_percent: f64) -> Vec<usize> {
    assert!(k_percent > 0.0 && k_percent <= 100.0, "k% must lie in (0, 100]");
    let n = values.len();
    let keep = ((k_percent / 100.0 * n as f64) * (1.0 + 1e-12)).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap().then(a.cmp(&b)));
    let mut top = order[..keep.min(n)].to_vec();
    top.sort_unstable();
    top
}

/// Mean over samples of the squared single-sample gradient.
pub fn oracle_fisher(model: &ToyModel, samples: &[Sample]) -> Vec<f64> {
    let mut acc = vec![0.0; model.num_params()];
    for s in samples {
        let (_, g) = loss_and_grad(model, std::slice::from_ref(s)).expect("nonempty batch");
        for (a, x) in acc.iter_mut().zip(g.as_slice()) {
            *a += x * x;
        }
    }
    acc.into_iter().map(|a| a / samples.len() as f64).collect()
}

/// `|∂L/∂θ ⊙ θ|` for the batch loss.
pub fn oracle_taylor_importance(model: &ToyModel, samples: &[Sample]) -> Vec<f64> {
    let (_, g) = loss_and_grad(model, samples).expect("nonempty batch");
    g.as_slice().iter().zip(model.params().as_slice()).map(|(g, t)| (g * t).abs()).collect()
}

/// Principal-angle cosines between the column spans of two orthonormal
/// matrices: the singular values of `AᵀB`.
pub fn principal_cosines(a: &DenseMatrix, b: &DenseMatrix) -> Vec<f64> {
    let cross = DenseMatrix::from_fn(a.cols(), b.cols(), |i, j| {
        (0..a.rows()).map(|k| a.get(k, i) * b.get(k, j)).sum()
    });
    oracle_svd(&cross, a.cols().min(b.cols())).sigma
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_values() {
        let m = DenseMatrix::from_fn(3, 3, |i, j| if i == j { [3.0, 1.0, 2.0][i] } else { 0.0 });
        let s = oracle_svd(&m, 3);
        assert_eq!(s.sigma, vec![3.0, 2.0, 1.0]);
    }

    #[test]
    fn rank_deficient_trailing_values_vanish() {
        let m = DenseMatrix::from_fn(5, 3, |i, j| (i + 1) as f64 * [1.0, 2.0, -1.0][j]);
        let s = oracle_svd(&m, 3);
        assert!(s.sigma[1] < 1e-12 && s.sigma[2] < 1e-12, "{:?}", s.sigma);
    }

    #[test]
    fn topk_ties_go_to_lower_indices() {
        assert_eq!(oracle_topk(&[1.0; 10], 50.0), vec![0, 1, 2, 3, 4]);
        assert_eq!(oracle_topk(&[0.0, 5.0, 1.0, 5.0], 50.0), vec![1, 3]);
    }

    #[test]
    #[should_panic]
    fn topk_rejects_zero_percent() {
        oracle_topk(&[1.0, 2.0], 0.0);
    }
}
