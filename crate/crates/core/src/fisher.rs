//! Empirical diagonal Fisher information.

use serde::{Deserialize, Serialize};

use crate::error::{CortisError, Result};
use crate::toytts::{Sample, ToyModel};

/// Which dataset a Fisher diagonal was estimated on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FisherSource {
    Remain,
    /// Forget set of the given (1-based) request.
    Forget(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FisherDiagonal {
    values: Vec<f64>,
    pub source: FisherSource,
    pub sample_count: usize,
}

impl FisherDiagonal {
    pub fn new(values: Vec<f64>, source: FisherSource, sample_count: usize) -> Result<Self> {
        if let Some(j) = values.iter().position(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(CortisError::Numeric(format!(
                "Fisher entry {j} is {}, expected finite and nonnegative",
                values[j]
            )));
        }
        Ok(Self {
            values,
            source,
            sample_count,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// `values[j] = mean_k (∂ℓ_k/∂θ_j)²` over the first `max_samples` samples, in
/// dataset order.
pub fn fisher_diag(
    model: &ToyModel,
    dataset: &[Sample],
    max_samples: usize,
    source: FisherSource,
) -> Result<FisherDiagonal> {
    if dataset.is_empty() {
        return Err(CortisError::Precondition("Fisher estimate over an empty dataset".into()));
    }
    if max_samples == 0 {
        return Err(CortisError::Precondition("max_samples must be >= 1".into()));
    }
    let d = model.num_params();
    let used = &dataset[..dataset.len().min(max_samples)];
    let mut acc = vec![0.0; d];
    let mut grad = vec![0.0; d];
    for sample in used {
        grad.iter_mut().for_each(|g| *g = 0.0);
        model.accumulate_sample_grad(sample, 1.0, &mut grad);
        for (a, g) in acc.iter_mut().zip(&grad) {
            *a += g * g;
        }
    }
    let n = used.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    FisherDiagonal::new(acc, source, used.len())
}

/// Run-scoped cache for the remain-set Fisher, which is computed once on a
/// fixed subset and then reused by every request.
#[derive(Debug, Clone, Default)]
pub struct RemainFisherCache {
    fisher: Option<FisherDiagonal>,
    computations: usize,
}

impl RemainFisherCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_fisher(fisher: FisherDiagonal) -> Self {
        Self {
            fisher: Some(fisher),
            computations: 0,
        }
    }

    /// Returns the cached diagonal, computing it on `subset` against `model`
    /// only the first time.
    pub fn get_or_compute(
        &mut self,
        model: &ToyModel,
        subset: &[Sample],
    ) -> Result<&FisherDiagonal> {
        if self.fisher.is_none() {
            let f = fisher_diag(model, subset, subset.len().max(1), FisherSource::Remain)?;
            self.computations += 1;
            self.fisher = Some(f);
        }
        Ok(self.fisher.as_ref().expect("just populated"))
    }

    pub fn get(&self) -> Option<&FisherDiagonal> {
        self.fisher.as_ref()
    }

    pub fn computations(&self) -> usize {
        self.computations
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::toytts::{make_world, ModelConfig, WorldConfig};

    fn setup() -> (ToyModel, Vec<Sample>) {
        let w = make_world(&WorldConfig {
            num_speakers: 4,
            voice_dim: 8,
            content_dim: 4,
            signal_dim: 16,
            ..WorldConfig::default()
        })
        .unwrap();
        let m = ToyModel::new(
            &w,
            &ModelConfig {
                hidden: vec![8, 8],
                seed: 2,
            },
        );
        let mut r = rng::stream(0, "fisher-test");
        let data = (0..8).map(|k| w.utterance(k % 4, &mut r).sample).collect();
        (m, data)
    }

    #[test]
    fn single_sample_is_squared_gradient() {
        let (m, data) = setup();
        let f = fisher_diag(&m, &data[..1], 10, FisherSource::Forget(1)).unwrap();
        let mut g = vec![0.0; m.num_params()];
        m.accumulate_sample_grad(&data[0], 1.0, &mut g);
        for (a, b) in f.values().iter().zip(&g) {
            assert_eq!(*a, b * b);
        }
        assert_eq!(f.sample_count, 1);
    }

    #[test]
    fn duplicated_dataset_gives_same_mean() {
        let (m, data) = setup();
        let twice: Vec<Sample> = data.iter().chain(&data).cloned().collect();
        let a = fisher_diag(&m, &data, 100, FisherSource::Remain).unwrap();
        let b = fisher_diag(&m, &twice, 100, FisherSource::Remain).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).abs() <= 1e-12 * x.abs().max(1e-300));
        }
    }

    #[test]
    fn max_samples_truncates() {
        let (m, data) = setup();
        let a = fisher_diag(&m, &data, 3, FisherSource::Remain).unwrap();
        let b = fisher_diag(&m, &data[..3], 3, FisherSource::Remain).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_dataset_is_a_precondition_error() {
        let (m, _) = setup();
        assert!(matches!(
            fisher_diag(&m, &[], 4, FisherSource::Remain),
            Err(CortisError::Precondition(_))
        ));
    }

    #[test]
    fn cache_computes_once() {
        let (m, data) = setup();
        let mut cache = RemainFisherCache::new();
        let first = cache.get_or_compute(&m, &data).unwrap().clone();
        let second = cache.get_or_compute(&m, &data[..1]).unwrap().clone();
        assert_eq!(first, second);
        assert_eq!(cache.computations(), 1);
    }

    #[test]
    fn cache_of_one_sample_matches_direct_estimate() {
        let (m, data) = setup();
        let mut cache = RemainFisherCache::new();
        let cached = cache.get_or_compute(&m, &data[..1]).unwrap().clone();
        assert_eq!(cached, fisher_diag(&m, &data[..1], 1, FisherSource::Remain).unwrap());
    }

    #[test]
    fn rejects_negative_entries() {
        assert!(FisherDiagonal::new(vec![1.0, -1.0], FisherSource::Remain, 1).is_err());
    }
}
