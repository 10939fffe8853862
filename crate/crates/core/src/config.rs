//! Experiment configuration files.
//!
//! A config is a TOML document. `requests` and `seeds` are required at the
//! top level; every section is optional and falls back to its defaults.
//! Unknown keys anywhere are errors.
//!
//! ```toml
//! requests = [[0], [1], [2], [3], [4]]
//! seeds = [0, 1, 2]
//! pretrained = "pretrained"
//!
//! [world]
//! voice_dim = 48
//!
//! [unlearn]
//! method = "cortis"
//! rank = 40
//! ```

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CortisError, Result};
use crate::evalkit::EvalConfig;
use crate::toytts::{ModelConfig, PretrainConfig, SpeakerId, WorldConfig};
use crate::unlearn::UnlearnConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RemainConfig {
    /// World speakers whose utterances the retain loss trains on.
    pub train_speakers: Vec<SpeakerId>,
    /// Held-out world speakers scored for S-R.
    pub eval_speakers: Vec<SpeakerId>,
    pub per_speaker: usize,
    /// Extra random voices, one utterance each, added to the retain set.
    pub background: usize,
    pub seed: u64,
}

impl Default for RemainConfig {
    fn default() -> Self {
        Self {
            train_speakers: (5..35).collect(),
            eval_speakers: (35..50).collect(),
            per_speaker: 32,
            background: 2000,
            seed: 0,
        }
    }
}

fn default_pretrained() -> PathBuf {
    PathBuf::from("pretrained")
}

fn default_calibration_pairs() -> usize {
    200
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Forget speakers of each request, in arrival order.
    pub requests: Vec<Vec<SpeakerId>>,
    /// Run seeds; each drives one request sequence from the same θ₀.
    pub seeds: Vec<u64>,
    /// Directory holding `world.bin` and `theta0.bin`.
    #[serde(default = "default_pretrained")]
    pub pretrained: PathBuf,
    /// Same- and different-speaker pairs used for threshold calibration.
    #[serde(default = "default_calibration_pairs")]
    pub calibration_pairs: usize,
    #[serde(default)]
    pub world: WorldConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub remain: RemainConfig,
    /// `unlearn.seed` is replaced by each run seed.
    #[serde(default)]
    pub unlearn: UnlearnConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            requests: (0..5).map(|s| vec![s]).collect(),
            seeds: vec![0, 1, 2],
            pretrained: default_pretrained(),
            calibration_pairs: default_calibration_pairs(),
            world: WorldConfig::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            remain: RemainConfig::default(),
            unlearn: UnlearnConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| CortisError::Config(e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CortisError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            CortisError::Config(m) => CortisError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(CortisError::Config(m));
        let n = self.world.num_speakers;
        if self.requests.is_empty() {
            return fail("requests must list at least one request".into());
        }
        if self.seeds.is_empty() {
            return fail("seeds must list at least one seed".into());
        }
        let mut seen = BTreeSet::new();
        for (k, r) in self.requests.iter().enumerate() {
            if r.is_empty() {
                return fail(format!("requests[{k}] names no speaker"));
            }
            for &s in r {
                if s >= n {
                    return fail(format!("requests[{k}] names speaker {s}, world has {n}"));
                }
                if !seen.insert(s) {
                    return fail(format!("speaker {s} is requested more than once"));
                }
            }
        }
        let train: BTreeSet<_> = self.remain.train_speakers.iter().copied().collect();
        let eval: BTreeSet<_> = self.remain.eval_speakers.iter().copied().collect();
        if let Some(s) = train.iter().chain(&eval).find(|&&s| s >= n) {
            return fail(format!("remain speaker {s} out of range, world has {n}"));
        }
        if let Some(s) = train.intersection(&eval).next() {
            return fail(format!("speaker {s} is both a remain training and evaluation speaker"));
        }
        if let Some(s) = seen.iter().find(|s| train.contains(s) || eval.contains(s)) {
            return fail(format!("forget speaker {s} is also a remain speaker"));
        }
        if eval.is_empty() {
            return fail("remain.eval_speakers must not be empty".into());
        }
        if train.is_empty() && self.remain.background == 0 {
            return fail("remain set is empty: give remain.train_speakers or remain.background".into());
        }
        if self.remain.per_speaker == 0 && !train.is_empty() {
            return fail("remain.per_speaker must be >= 1".into());
        }
        if self.pretrain.batch_size == 0 {
            return fail("pretrain.batch_size must be >= 1".into());
        }
        if self.model.hidden.iter().any(|&h| h == 0) {
            return fail("model.hidden widths must be >= 1".into());
        }
        if self.eval.seeds == 0 || self.eval.utterances_per_speaker == 0 {
            return fail("eval.seeds and eval.utterances_per_speaker must be >= 1".into());
        }
        self.unlearn.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn minimal_document_uses_section_defaults() {
        let c = ExperimentConfig::from_toml("requests = [[0], [1]]\nseeds = [4]\n").unwrap();
        assert_eq!(c.requests, vec![vec![0], vec![1]]);
        assert_eq!(c.unlearn, UnlearnConfig::default());
    }

    #[test]
    fn missing_field_is_named() {
        let e = ExperimentConfig::from_toml("requests = [[0]]\n").unwrap_err();
        assert!(e.to_string().contains("seeds"), "{e}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = ExperimentConfig::from_toml("requests = [[0]]\nseeds = [0]\n[unlearn]\nrnak = 3\n").unwrap_err();
        assert!(e.to_string().contains("rnak"), "{e}");
    }

    #[test]
    fn overlapping_speakers_are_rejected() {
        let e = ExperimentConfig::from_toml("requests = [[5]]\nseeds = [0]\n").unwrap_err();
        assert!(e.to_string().contains("remain speaker"), "{e}");
        assert!(ExperimentConfig::from_toml("requests = [[0], [0]]\nseeds = [0]\n").is_err());
        assert!(ExperimentConfig::from_toml("requests = [[99]]\nseeds = [0]\n").is_err());
    }
}
