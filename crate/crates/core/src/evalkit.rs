//! Similarity and content metrics, threshold calibration and the analyses
//! reported alongside each request.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{CortisError, Result};
use crate::localize::{mask_jaccard, SaliencyMask};
use crate::numkit::{dot, norm, DenseMatrix};
use crate::rng;
use crate::toytts::{mse, SpeakerId, SpeakerWorld, ToyModel};

/// Cosine between speaker embeddings of a reference signal and a generated
/// signal.
pub fn similarity(world: &SpeakerWorld, reference: &[f64], generated: &[f64]) -> Result<f64> {
    embedding_cosine(&world.speaker_embedding(reference), &world.speaker_embedding(generated))
}

pub fn embedding_cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let (na, nb) = (norm(a), norm(b));
    if !(na > 0.0 && nb > 0.0) {
        return Err(CortisError::UndefinedSimilarity("zero-norm speaker embedding".into()));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Whiskers {
    pub lower: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub upper: f64,
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Tukey box-plot whiskers: the most extreme observations within 1.5 IQR of
/// the quartiles.
pub fn tukey_whiskers(values: &[f64]) -> Whiskers {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let q1 = quantile(&v, 0.25);
    let q3 = quantile(&v, 0.75);
    let iqr = q3 - q1;
    let lo_fence = q1 - 1.5 * iqr;
    let hi_fence = q3 + 1.5 * iqr;
    let lower = v.iter().copied().find(|x| *x >= lo_fence).unwrap_or(v[0]);
    let upper = v.iter().rev().copied().find(|x| *x <= hi_fence).unwrap_or(v[v.len() - 1]);
    Whiskers {
        lower,
        q1,
        median: quantile(&v, 0.5),
        q3,
        upper,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    /// S-R below this is a retention failure.
    pub retain_fail_below: f64,
    /// S-f above this is a forgetting failure.
    pub forget_fail_above: f64,
    pub pairs: usize,
    pub same_speaker: Whiskers,
    pub different_speaker: Whiskers,
}

/// Calibrates the retain/forget thresholds from same-speaker and
/// different-speaker similarity distributions over `pairs` random pairs of
/// ground-truth utterances each. Each utterance is generated from its own
/// noisy realization of the speaker's voice, so same-speaker pairs carry the
/// same session variability as prompts. No model is involved.
pub fn calibrate_thresholds(world: &SpeakerWorld, pairs: usize, seed: u64) -> Result<Thresholds> {
    if pairs < 50 {
        return Err(CortisError::Precondition(format!("calibration needs >= 50 pairs, got {pairs}")));
    }
    let mut r = rng::stream(seed, "calibrate");
    use rand::Rng;
    let n = world.num_speakers();
    let realize = |s: SpeakerId, r: &mut rng::StreamRng| {
        let v = world.noisy_prompt(world.voice(s), r);
        let y = world.sample_content(r);
        world.generate(&v, &y)
    };
    let mut same = Vec::with_capacity(pairs);
    let mut diff = Vec::with_capacity(pairs);
    for _ in 0..pairs {
        let s = r.random_range(0..n);
        let a = realize(s, &mut r);
        let b = realize(s, &mut r);
        same.push(similarity(world, &a, &b)?);

        let s1 = r.random_range(0..n);
        let mut s2 = r.random_range(0..n - 1);
        if s2 >= s1 {
            s2 += 1;
        }
        let a = realize(s1, &mut r);
        let b = realize(s2, &mut r);
        diff.push(similarity(world, &a, &b)?);
    }
    let same_w = tukey_whiskers(&same);
    let diff_w = tukey_whiskers(&diff);
    if diff_w.upper >= same_w.lower {
        return Err(CortisError::Calibration(format!(
            "different-speaker upper whisker {:.3} overlaps same-speaker lower whisker {:.3}",
            diff_w.upper, same_w.lower
        )));
    }
    Ok(Thresholds {
        retain_fail_below: same_w.lower,
        forget_fail_above: diff_w.upper,
        pairs,
        same_speaker: same_w,
        different_speaker: diff_w,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Number of generation seeds averaged per report.
    pub seeds: usize,
    pub utterances_per_speaker: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seeds: 3,
            utterances_per_speaker: 8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub w_r: f64,
    pub w_f: f64,
    pub s_r: f64,
    pub s_f: BTreeMap<SpeakerId, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub request_index: usize,
    pub method: String,
    /// Content error on held-out remain speakers.
    pub w_r: f64,
    /// Content error averaged over every forgotten speaker so far.
    pub w_f: f64,
    pub s_r: f64,
    pub s_f: BTreeMap<SpeakerId, f64>,
    pub w_r_std: f64,
    pub w_f_std: f64,
    pub s_r_std: f64,
    pub s_f_std: BTreeMap<SpeakerId, f64>,
    pub per_seed: Vec<SeedMetrics>,
}

impl EvalReport {
    pub fn max_forget_similarity(&self) -> Option<f64> {
        self.s_f.values().copied().reduce(f64::max)
    }
}

struct SpeakerScore {
    sim: f64,
    content_err: f64,
}

fn score_speaker(
    model: &ToyModel,
    world: &SpeakerWorld,
    speaker: SpeakerId,
    config: &EvalConfig,
    seed_index: usize,
) -> Result<SpeakerScore> {
    // Prompts depend only on (eval seed, generation seed, speaker), so every
    // request and method is scored on identical inputs. Prompts for forgotten
    // speakers are regenerated here from the world, never read from run state.
    let mut r = rng::indexed_stream(config.seed, &format!("eval-{seed_index}"), speaker as u64);
    let n = config.utterances_per_speaker.max(1);
    let (mut sim, mut err) = (0.0, 0.0);
    for _ in 0..n {
        let u = world.utterance(speaker, &mut r).sample;
        let out = model.forward(&u.prompt, &u.content);
        sim += similarity(world, &u.target, &out)?;
        err += mse(&world.content_readout(&out), &u.content);
    }
    Ok(SpeakerScore {
        sim: sim / n as f64,
        content_err: err / n as f64,
    })
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Scores a model on the held-out remain speakers and on every forgotten
/// speaker, averaging over `config.seeds` generation seeds.
pub fn evaluate(
    model: &ToyModel,
    world: &SpeakerWorld,
    remain_eval: &[SpeakerId],
    forgotten: &[SpeakerId],
    config: &EvalConfig,
    request_index: usize,
    method: &str,
) -> Result<EvalReport> {
    if config.seeds == 0 {
        return Err(CortisError::Precondition("evaluation needs at least one seed".into()));
    }
    if remain_eval.is_empty() {
        return Err(CortisError::Precondition("no held-out remain speakers to evaluate".into()));
    }
    let mut per_seed = Vec::with_capacity(config.seeds);
    for k in 0..config.seeds {
        let mut s_r = 0.0;
        let mut w_r = 0.0;
        for &s in remain_eval {
            let sc = score_speaker(model, world, s, config, k)?;
            s_r += sc.sim;
            w_r += sc.content_err;
        }
        let mut s_f = BTreeMap::new();
        let mut w_f = 0.0;
        for &f in forgotten {
            let sc = score_speaker(model, world, f, config, k)?;
            s_f.insert(f, sc.sim);
            w_f += sc.content_err;
        }
        per_seed.push(SeedMetrics {
            w_r: w_r / remain_eval.len() as f64,
            w_f: if forgotten.is_empty() { 0.0 } else { w_f / forgotten.len() as f64 },
            s_r: s_r / remain_eval.len() as f64,
            s_f,
        });
    }
    let col = |f: &dyn Fn(&SeedMetrics) -> f64| mean_std(&per_seed.iter().map(f).collect::<Vec<_>>());
    let (w_r, w_r_std) = col(&|m| m.w_r);
    let (w_f, w_f_std) = col(&|m| m.w_f);
    let (s_r, s_r_std) = col(&|m| m.s_r);
    let mut s_f = BTreeMap::new();
    let mut s_f_std = BTreeMap::new();
    for &f in forgotten {
        let (m, s) = col(&|m| m.s_f[&f]);
        s_f.insert(f, m);
        s_f_std.insert(f, s);
    }
    Ok(EvalReport {
        request_index,
        method: method.to_string(),
        w_r,
        w_f,
        s_r,
        s_f,
        w_r_std,
        w_f_std,
        s_r_std,
        s_f_std,
        per_seed,
    })
}

/// Pairwise cosine between mean speaker embeddings of ground-truth
/// utterances.
pub fn separability_matrix(world: &SpeakerWorld, speakers: &[SpeakerId], seed: u64) -> Result<DenseMatrix> {
    let n_utt = 16;
    let means: Vec<Vec<f64>> = speakers
        .iter()
        .map(|&s| {
            let mut r = rng::indexed_stream(seed, "separability", s as u64);
            let mut acc = vec![0.0; world.voice_dim()];
            for u in world.utterances(s, n_utt, &mut r) {
                for (a, e) in acc.iter_mut().zip(world.speaker_embedding(&u.sample.target)) {
                    *a += e / n_utt as f64;
                }
            }
            acc
        })
        .collect();
    let n = speakers.len();
    let mut m = DenseMatrix::zeros(n, n);
    for i in 0..n {
        m.set(i, i, 1.0);
        for j in (i + 1)..n {
            let c = embedding_cosine(&means[i], &means[j])?;
            m.set(i, j, c);
            m.set(j, i, c);
        }
    }
    Ok(m)
}

/// Pairwise Jaccard overlap of a sequence of masks.
pub fn jaccard_matrix(masks: &[SaliencyMask]) -> Result<DenseMatrix> {
    let n = masks.len();
    let mut m = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            m.set(i, j, mask_jaccard(&masks[i], &masks[j])?);
        }
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toytts::{make_world, WorldConfig};

    fn world() -> SpeakerWorld {
        make_world(&WorldConfig::default()).unwrap()
    }

    #[test]
    fn identical_signal_has_unit_similarity() {
        let w = world();
        let mut r = rng::stream(0, "t");
        let u = w.utterance(3, &mut r).sample;
        assert!((similarity(&w, &u.target, &u.target).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_voice_has_near_zero_similarity() {
        let w = world();
        let v = w.voice(0).to_vec();
        let mut orth = w.voice(1).to_vec();
        let c = dot(&v, &orth);
        orth.iter_mut().zip(&v).for_each(|(o, x)| *o -= c * x);
        let y = vec![0.0; w.content_dim()];
        let s = similarity(&w, &w.generate(&v, &y), &w.generate(&orth, &y)).unwrap();
        assert!(s.abs() < 0.1, "{s}");
    }

    #[test]
    fn zero_embedding_is_undefined() {
        assert!(matches!(
            embedding_cosine(&[0.0, 0.0], &[1.0, 0.0]),
            Err(CortisError::UndefinedSimilarity(_))
        ));
    }

    #[test]
    fn similarity_is_symmetric_and_scale_invariant() {
        let a = [0.3, -1.0, 2.0];
        let b = [1.0, 0.5, 0.2];
        let ab = embedding_cosine(&a, &b).unwrap();
        assert_eq!(ab, embedding_cosine(&b, &a).unwrap());
        let a3: Vec<f64> = a.iter().map(|x| x * 3.0).collect();
        assert!((ab - embedding_cosine(&a3, &b).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn tukey_whiskers_clip_to_observed() {
        let mut v: Vec<f64> = (0..20).map(|x| x as f64).collect();
        v.push(100.0);
        let w = tukey_whiskers(&v);
        assert_eq!(w.lower, 0.0);
        assert_eq!(w.upper, 19.0);
    }

    #[test]
    fn calibration_separates_distributions() {
        let t = calibrate_thresholds(&world(), 200, 0).unwrap();
        assert!(t.forget_fail_above < t.retain_fail_below);
    }

    #[test]
    fn noiseless_world_has_tight_same_speaker_whisker() {
        let w = make_world(&WorldConfig {
            noise_scale: 0.0,
            ..WorldConfig::default()
        })
        .unwrap();
        let t = calibrate_thresholds(&w, 200, 0).unwrap();
        assert!(t.retain_fail_below > 0.95, "{t:?}");
    }

    #[test]
    fn too_few_pairs_rejected() {
        assert!(calibrate_thresholds(&world(), 49, 0).is_err());
    }

    #[test]
    fn single_seed_has_zero_std() {
        let w = world();
        let m = ToyModel::new(&w, &Default::default());
        let cfg = EvalConfig {
            seeds: 1,
            ..EvalConfig::default()
        };
        let r = evaluate(&m, &w, &[10, 11], &[0], &cfg, 0, "none").unwrap();
        assert_eq!(r.s_r_std, 0.0);
        assert_eq!(r.s_f_std[&0], 0.0);
    }

    #[test]
    fn separability_of_one_speaker() {
        let m = separability_matrix(&world(), &[4], 0).unwrap();
        assert_eq!(m.rows(), 1);
        assert_eq!(m.get(0, 0), 1.0);
    }

    #[test]
    fn separability_off_diagonals_below_half() {
        let m = separability_matrix(&world(), &[0, 1, 2, 3, 4], 0).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(m.get(i, j), m.get(j, i));
                if i != j {
                    assert!(m.get(i, j) < 0.5);
                }
            }
        }
    }
}
