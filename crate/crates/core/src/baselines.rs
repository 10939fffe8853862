//! Comparison methods sharing the request loop of [`crate::unlearn`].

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CortisError, Result};
use crate::evalkit::{EvalConfig, EvalReport};
use crate::localize::{top_k_mask, SaliencyMask};
use crate::toytts::{loss_and_grad, Sample, SpeakerWorld, ToyModel, Utterance};
use crate::unlearn::{process_request, RunState, UnlearnConfig, UnlearnRequest};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Cortis,
    CortisNoProjection,
    /// Sequential teacher-guided unlearning on all coordinates.
    Tgu,
    /// Forget prompts paired with remain-speaker targets.
    Sgu,
    /// Teacher-guided unlearning with an L1 drift penalty toward θ_{i−1}.
    Un,
    /// Teacher-guided unlearning on a first-order Taylor importance mask.
    SelFt,
    /// Retrains on every forget set seen so far. Retains forget data, so a
    /// run with this method never passes the non-retention audit.
    CumulativeTgu,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Cortis,
        Method::CortisNoProjection,
        Method::Tgu,
        Method::Sgu,
        Method::Un,
        Method::SelFt,
        Method::CumulativeTgu,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Cortis => "cortis",
            Method::CortisNoProjection => "cortis-no-projection",
            Method::Tgu => "tgu",
            Method::Sgu => "sgu",
            Method::Un => "un",
            Method::SelFt => "sel-ft",
            Method::CumulativeTgu => "cumulative-tgu",
        }
    }

    /// Uses contrastive saliency masks and the long-then-short schedule.
    pub fn is_cortis_family(self) -> bool {
        matches!(self, Method::Cortis | Method::CortisNoProjection)
    }

    pub fn projects(self) -> bool {
        self == Method::Cortis
    }

    pub fn retains_forget_data(self) -> bool {
        self == Method::CumulativeTgu
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = CortisError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Method::ALL.iter().map(|m| m.name()).collect();
                CortisError::Config(format!("unknown method {s:?}, expected one of {}", names.join(", ")))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    /// L1 drift coefficient for UN.
    pub un_lambda: f64,
    /// Importance-mask percentage for SelFT.
    pub selft_k_percent: f64,
    /// SGU learning rate as a fraction of the teacher-guided rate.
    pub sgu_lr_factor: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            un_lambda: 0.8,
            selft_k_percent: 30.0,
            sgu_lr_factor: 0.2,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.un_lambda >= 0.0 && self.un_lambda.is_finite()) {
            return Err(CortisError::Config(format!("un_lambda must be finite and >= 0, got {}", self.un_lambda)));
        }
        if !(self.selft_k_percent > 0.0 && self.selft_k_percent <= 100.0) {
            return Err(CortisError::Config(format!(
                "selft_k_percent must lie in (0, 100], got {}",
                self.selft_k_percent
            )));
        }
        if !(self.sgu_lr_factor > 0.0 && self.sgu_lr_factor.is_finite()) {
            return Err(CortisError::Config(format!("sgu_lr_factor must be positive, got {}", self.sgu_lr_factor)));
        }
        Ok(())
    }
}

/// `|∂L/∂θ_j · θ_j|` for the forget loss at `model`.
pub fn selft_importance(model: &ToyModel, forget: &[Sample]) -> Result<Vec<f64>> {
    let (_, grad) = loss_and_grad(model, forget)?;
    Ok(grad
        .as_slice()
        .iter()
        .zip(model.params().as_slice())
        .map(|(g, t)| (g * t).abs())
        .collect())
}

pub fn selft_mask(model: &ToyModel, forget: &[Sample], k_percent: f64, request_index: usize) -> Result<SaliencyMask> {
    top_k_mask(&selft_importance(model, forget)?, k_percent, request_index, 0.0)
}

/// Pairs each forget prompt with a randomly chosen remain utterance, so the
/// model learns to answer the forget prompt with a remain voice.
pub fn sgu_samples(forget: &[Utterance], remain: &[Utterance], rng: &mut impl Rng) -> Result<Vec<Sample>> {
    if remain.is_empty() {
        return Err(CortisError::Precondition("SGU needs remain data".into()));
    }
    Ok(forget
        .iter()
        .map(|f| {
            let r = &remain[rng.random_range(0..remain.len())].sample;
            Sample {
                prompt: f.sample.prompt.clone(),
                content: r.content.clone(),
                target: r.target.clone(),
            }
        })
        .collect())
}

/// Proximal step for `λ‖θ − anchor‖₁` on the given coordinates:
/// soft-thresholds the drift by `threshold = lr·λ`.
pub fn l1_prox(params: &mut [f64], anchor: &[f64], threshold: f64, active: &[usize]) {
    for &j in active {
        let drift = params[j] - anchor[j];
        let shrunk = drift.abs() - threshold;
        params[j] = if shrunk > 0.0 { anchor[j] + drift.signum() * shrunk } else { anchor[j] };
    }
}

fn run_method(
    method: Method,
    state: &mut RunState,
    request: &mut UnlearnRequest,
    world: &SpeakerWorld,
    config: &UnlearnConfig,
    eval: &EvalConfig,
) -> Result<EvalReport> {
    let cfg = UnlearnConfig {
        method,
        ..config.clone()
    };
    process_request(state, request, world, &cfg, eval)
}

pub fn run_tgu_sequential(
    state: &mut RunState,
    request: &mut UnlearnRequest,
    world: &SpeakerWorld,
    config: &UnlearnConfig,
    eval: &EvalConfig,
) -> Result<EvalReport> {
    run_method(Method::Tgu, state, request, world, config, eval)
}

pub fn run_sgu(
    state: &mut RunState,
    request: &mut UnlearnRequest,
    world: &SpeakerWorld,
    config: &UnlearnConfig,
    eval: &EvalConfig,
) -> Result<EvalReport> {
    run_method(Method::Sgu, state, request, world, config, eval)
}

pub fn run_un(
    state: &mut RunState,
    request: &mut UnlearnRequest,
    world: &SpeakerWorld,
    config: &UnlearnConfig,
    eval: &EvalConfig,
) -> Result<EvalReport> {
    run_method(Method::Un, state, request, world, config, eval)
}

pub fn run_selft(
    state: &mut RunState,
    request: &mut UnlearnRequest,
    world: &SpeakerWorld,
    config: &UnlearnConfig,
    eval: &EvalConfig,
) -> Result<EvalReport> {
    run_method(Method::SelFt, state, request, world, config, eval)
}
