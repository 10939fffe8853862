//! Sequential unlearning requests.
//!
//! Requests arrive one at a time and each request's forget data is destroyed
//! once it has been processed. Only the model, masks, Fisher diagonals,
//! subspace bases and remain data carry over from one request to the next.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{l1_prox, selft_mask, sgu_samples, BaselineConfig, Method};
use crate::error::{CortisError, Result};
use crate::evalkit::{evaluate, EvalConfig, EvalReport};
use crate::fisher::{fisher_diag, FisherDiagonal, FisherSource, RemainFisherCache};
use crate::localize::{saliency, top_k_mask, SaliencyMask, DEFAULT_EPSILON};
use crate::numkit::{norm, DenseMatrix};
use crate::optim::{Adam, LrSchedule};
use crate::rng::{self, StreamRng};
use crate::subspace::{extract_basis, merge, BasisLabel, CoordSet, Projector, SnapshotBuffer, SubspaceBasis};
use crate::toytts::{cosine, loss_and_grad, teacher_random_voice_target, Sample, SpeakerId, SpeakerWorld, ToyModel, Utterance};

/// Forget utterances that can be read until they are destroyed.
#[derive(Debug)]
pub struct ForgetData {
    utterances: Option<Vec<Utterance>>,
}

impl ForgetData {
    pub fn new(utterances: Vec<Utterance>) -> Self {
        Self {
            utterances: Some(utterances),
        }
    }

    pub fn utterances(&self) -> Result<&[Utterance]> {
        self.utterances
            .as_deref()
            .ok_or_else(|| CortisError::C2Violation("forget data read after destruction".into()))
    }

    pub fn destroy(&mut self) {
        self.utterances = None;
    }

    pub fn is_destroyed(&self) -> bool {
        self.utterances.is_none()
    }
}

#[derive(Debug)]
pub struct UnlearnRequest {
    pub index: usize,
    pub forget_speakers: Vec<SpeakerId>,
    data: ForgetData,
}

impl UnlearnRequest {
    /// `index` is 1-based. Every utterance must belong to a listed speaker.
    pub fn new(index: usize, forget_speakers: Vec<SpeakerId>, utterances: Vec<Utterance>) -> Result<Self> {
        if forget_speakers.is_empty() {
            return Err(CortisError::Precondition("a request must name at least one speaker".into()));
        }
        if utterances.is_empty() {
            return Err(CortisError::Precondition("a request must carry forget utterances".into()));
        }
        if let Some(u) = utterances.iter().find(|u| !forget_speakers.contains(&u.speaker)) {
            return Err(CortisError::Precondition(format!(
                "utterance of speaker {} in a request for {:?}",
                u.speaker, forget_speakers
            )));
        }
        Ok(Self {
            index,
            forget_speakers,
            data: ForgetData::new(utterances),
        })
    }

    /// Draws `per_speaker` utterances for each speaker from the world.
    pub fn synthesize(
        world: &SpeakerWorld,
        index: usize,
        forget_speakers: Vec<SpeakerId>,
        per_speaker: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut r = rng::indexed_stream(seed, "forget-data", index as u64);
        let utts = forget_speakers
            .iter()
            .flat_map(|&s| world.utterances(s, per_speaker, &mut r))
            .collect();
        Self::new(index, forget_speakers, utts)
    }

    pub fn data(&self) -> Result<&[Utterance]> {
        self.data.utterances()
    }

    pub fn destroy(&mut self) {
        self.data.destroy();
    }

    pub fn is_destroyed(&self) -> bool {
        self.data.is_destroyed()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemainData {
    /// Utterances the retain loss and remain Fisher are drawn from.
    pub train: Vec<Utterance>,
    /// Held-out remain speakers scored by evaluation; none of their
    /// utterances are trained on.
    pub eval_speakers: Vec<SpeakerId>,
}

impl RemainData {
    pub fn sample(
        world: &SpeakerWorld,
        train_speakers: &[SpeakerId],
        eval_speakers: &[SpeakerId],
        per_speaker: usize,
        seed: u64,
    ) -> Result<Self> {
        let train_set: BTreeSet<_> = train_speakers.iter().collect();
        if eval_speakers.iter().any(|s| train_set.contains(s)) {
            return Err(CortisError::Precondition("evaluation speakers overlap the remain training set".into()));
        }
        let mut r = rng::stream(seed, "remain-data");
        let train = train_speakers
            .iter()
            .flat_map(|&s| world.utterances(s, per_speaker, &mut r))
            .collect();
        Ok(Self {
            train,
            eval_speakers: eval_speakers.to_vec(),
        })
    }

    /// Adds one utterance each from `count` random background voices, kept
    /// below the world's speaker-cosine bound against every world speaker.
    /// Background ids start at `world.num_speakers()`.
    pub fn with_background(mut self, world: &SpeakerWorld, count: usize, seed: u64) -> Self {
        let bound = world.config.max_speaker_cosine;
        let mut r = rng::stream(seed, "background");
        for k in 0..count {
            let voice = loop {
                let v = world.random_voice(&mut r);
                if world.voices().iter().all(|u| cosine(u, &v) < bound) {
                    break v;
                }
            };
            self.train.push(Utterance {
                speaker: world.num_speakers() + k,
                sample: world.sample_for_voice(&voice, &mut r),
            });
        }
        self
    }

    pub fn speakers(&self) -> BTreeSet<SpeakerId> {
        self.train.iter().map(|u| u.speaker).chain(self.eval_speakers.iter().copied()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SnapshotDomain {
    /// Coordinates of the current request's mask.
    Mask,
    /// Every model coordinate.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UnlearnConfig {
    pub method: Method,
    pub k_percent: f64,
    pub epsilon: f64,
    /// Per-request basis rank R.
    pub rank: usize,
    /// Merged basis rank.
    pub merge_rank: usize,
    pub snapshot_domain: SnapshotDomain,
    /// Steps of the first request, and of every request for baselines.
    pub first_steps: usize,
    /// Steps of each later request in the saliency-masked methods.
    pub later_steps: usize,
    pub lr: f64,
    pub later_lr_factor: f64,
    pub warmup_fraction: f64,
    pub first_interval: usize,
    pub later_interval: usize,
    pub remain_batch: usize,
    pub forget_batch: usize,
    pub forget_probability: f64,
    /// Forget samples per gradient snapshot.
    pub snapshot_batch: usize,
    /// Redraw the random-voice teacher target every time a forget sample is
    /// used, instead of fixing one target per utterance.
    pub fresh_targets: bool,
    pub retain_weight: f64,
    pub remain_fisher_samples: usize,
    /// Forget utterances synthesized per forget speaker.
    pub forget_utterances: usize,
    pub baselines: BaselineConfig,
    /// Experimental: at the first request, project against a basis of
    /// remain-loss gradients instead of running unprojected.
    pub project_from_start: bool,
    /// Checks every applied delta against the merged basis.
    pub debug_checks: bool,
    pub seed: u64,
}

impl Default for UnlearnConfig {
    fn default() -> Self {
        Self {
            method: Method::Cortis,
            k_percent: 30.0,
            epsilon: DEFAULT_EPSILON,
            rank: 40,
            merge_rank: 40,
            snapshot_domain: SnapshotDomain::Full,
            first_steps: 10_000,
            later_steps: 4000,
            lr: 1e-3,
            later_lr_factor: 1.0,
            warmup_fraction: 0.1,
            first_interval: 150,
            later_interval: 24,
            remain_batch: 8,
            forget_batch: 2,
            forget_probability: 0.3,
            snapshot_batch: 32,
            fresh_targets: true,
            retain_weight: 1.0,
            remain_fisher_samples: 256,
            forget_utterances: 32,
            baselines: BaselineConfig::default(),
            debug_checks: false,
            project_from_start: false,
            seed: 0,
        }
    }
}

impl UnlearnConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(CortisError::Config(m));
        if !(self.k_percent > 0.0 && self.k_percent <= 100.0) {
            return fail(format!("k_percent must lie in (0, 100], got {}", self.k_percent));
        }
        if !(self.epsilon > 0.0) {
            return fail(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if self.rank == 0 || self.merge_rank == 0 {
            return fail("rank and merge_rank must be >= 1".into());
        }
        if self.first_steps == 0 || self.later_steps == 0 {
            return fail("step budgets must be >= 1".into());
        }
        if self.first_interval == 0 || self.later_interval == 0 {
            return fail("snapshot intervals must be >= 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.later_lr_factor > 0.0) {
            return fail("learning rates must be positive".into());
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return fail(format!("warmup_fraction must lie in [0, 1), got {}", self.warmup_fraction));
        }
        if self.remain_batch == 0 || self.forget_batch == 0 || self.snapshot_batch == 0 {
            return fail("batch sizes must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.forget_probability) {
            return fail(format!("forget_probability must lie in [0, 1], got {}", self.forget_probability));
        }
        if !(self.retain_weight >= 0.0) {
            return fail("retain_weight must be >= 0".into());
        }
        if self.remain_fisher_samples == 0 || self.forget_utterances == 0 {
            return fail("remain_fisher_samples and forget_utterances must be >= 1".into());
        }
        self.baselines.validate()
    }

    fn budget(&self, request_index: usize) -> (usize, f64, usize) {
        if self.method.is_cortis_family() && request_index > 1 {
            (self.later_steps, self.lr * self.later_lr_factor, self.later_interval)
        } else if self.method == Method::Sgu {
            (self.first_steps, self.lr * self.baselines.sgu_lr_factor, self.first_interval)
        } else {
            (self.first_steps, self.lr, self.first_interval)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestLog {
    pub index: usize,
    pub method: Method,
    pub seed: u64,
    pub forget_speakers: Vec<SpeakerId>,
    pub steps: usize,
    pub forget_steps: usize,
    pub peak_lr: f64,
    pub mask_size: usize,
    pub snapshots: usize,
    pub basis_rank: usize,
    pub merged_rank: usize,
    pub projector_rank: usize,
    pub final_forget_loss: f64,
    pub final_retain_loss: f64,
    pub wall_seconds: f64,
    pub projection_seconds: f64,
    /// Largest `‖Uᵀδ'‖ / max(‖δ‖, 1)` seen with debug checks on.
    pub max_projection_residual: Option<f64>,
    /// Size of the state carried to the next request, remain data excluded.
    pub carried_bytes: usize,
}

impl RequestLog {
    pub fn projection_seconds_per_step(&self) -> f64 {
        self.projection_seconds / self.steps.max(1) as f64
    }
}

#[derive(Debug, Clone)]
pub struct RunState {
    pub theta: ToyModel,
    /// Forget speakers of each processed request, in order.
    pub requests: Vec<Vec<SpeakerId>>,
    pub remain: RemainData,
    pub remain_fisher: RemainFisherCache,
    pub prior_forget_fishers: Vec<FisherDiagonal>,
    pub request_bases: Vec<SubspaceBasis>,
    pub merged_basis: SubspaceBasis,
    pub masks: Vec<SaliencyMask>,
    pub log: Vec<RequestLog>,
    /// Forget utterances kept for retraining; only ever filled by
    /// cumulative TGU.
    pub retained_forget: Vec<Utterance>,
}

impl RunState {
    pub fn new(theta: ToyModel, remain: RemainData) -> Self {
        Self {
            theta,
            requests: Vec::new(),
            remain,
            remain_fisher: RemainFisherCache::new(),
            prior_forget_fishers: Vec::new(),
            request_bases: Vec::new(),
            merged_basis: SubspaceBasis::empty(BasisLabel::Merged),
            masks: Vec::new(),
            log: Vec::new(),
            retained_forget: Vec::new(),
        }
    }

    pub fn last_index(&self) -> usize {
        self.requests.len()
    }

    /// Bytes of θ, bases, Fisher diagonals, masks and any retained forget
    /// data, at 8 bytes per stored number.
    pub fn carried_bytes(&self) -> usize {
        let basis = |b: &SubspaceBasis| b.coords().len() + b.matrix().data().len() + b.singular_values().len();
        let words = self.theta.num_params()
            + self.request_bases.iter().map(basis).sum::<usize>()
            + basis(&self.merged_basis)
            + self.remain_fisher.get().map_or(0, |f| f.len())
            + self.prior_forget_fishers.iter().map(|f| f.len()).sum::<usize>()
            + self.masks.iter().map(|m| m.len()).sum::<usize>()
            + self
                .retained_forget
                .iter()
                .map(|u| 1 + u.sample.prompt.len() + u.sample.content.len() + u.sample.target.len())
                .sum::<usize>();
        8 * words
    }

    /// 𝓕_i: every speaker forgotten so far.
    pub fn forgotten(&self) -> Vec<SpeakerId> {
        self.requests.iter().flatten().copied().collect()
    }

    /// Remain-set subset the remain Fisher is estimated on.
    fn remain_fisher_subset(&self, n: usize) -> Vec<Sample> {
        self.remain.train.iter().take(n).map(|u| u.sample.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub passed: bool,
    pub violations: Vec<String>,
}

/// Checks that the in-memory state holds no data of any forgotten speaker.
pub fn audit_non_retention(state: &RunState) -> AuditReport {
    let forgotten: BTreeSet<_> = state.forgotten().into_iter().collect();
    let mut violations = Vec::new();
    if !state.retained_forget.is_empty() {
        violations.push(format!(
            "{} forget utterances retained for retraining",
            state.retained_forget.len()
        ));
    }
    let leaked: BTreeSet<_> = state
        .remain
        .train
        .iter()
        .map(|u| u.speaker)
        .filter(|s| forgotten.contains(s))
        .collect();
    if !leaked.is_empty() {
        violations.push(format!("remain data holds utterances of forgotten speakers {leaked:?}"));
    }
    if let Some(s) = state.remain.eval_speakers.iter().find(|s| forgotten.contains(s)) {
        violations.push(format!("forgotten speaker {s} listed as a remain evaluation speaker"));
    }
    AuditReport {
        passed: violations.is_empty(),
        violations,
    }
}

/// Regression of the student on random-voice teacher targets for forget
/// prompts.
pub fn forget_loss(theta: &ToyModel, forget_batch: &[Sample]) -> Result<(f64, Vec<f64>)> {
    let (l, g) = loss_and_grad(theta, forget_batch)?;
    Ok((l, g.into_vec()))
}

pub fn retain_loss(theta: &ToyModel, remain_batch: &[Sample]) -> Result<(f64, Vec<f64>)> {
    let (l, g) = loss_and_grad(theta, remain_batch)?;
    Ok((l, g.into_vec()))
}

/// Teacher-target training pairs for forget utterances: the forget prompt
/// and content, with the teacher's output for a random voice as target.
pub fn teacher_targets(world: &SpeakerWorld, teacher: &ToyModel, forget: &[Utterance], r: &mut StreamRng) -> Vec<Sample> {
    forget
        .iter()
        .map(|u| Sample {
            prompt: u.sample.prompt.clone(),
            content: u.sample.content.clone(),
            target: teacher_random_voice_target(world, teacher, &u.sample.content, r),
        })
        .collect()
}

/// Basis of remain-loss gradient directions over the mask, used by the
/// experimental project-from-start option.
fn remain_gradient_basis(model: &ToyModel, remain: &[Sample], mask: &SaliencyMask, rank: usize) -> Result<SubspaceBasis> {
    let coords = CoordSet::from_mask(mask);
    let empty = SubspaceBasis::empty(BasisLabel::Merged);
    let mut buffer = SnapshotBuffer::new(0, 1, coords, &empty)?;
    for (k, chunk) in remain.chunks(8).take(rank * 2).enumerate() {
        buffer.capture(k + 1, loss_and_grad(model, chunk)?.1.as_slice());
    }
    extract_basis(&buffer, rank)
}

fn draw_batch(pool: &[Sample], n: usize, r: &mut StreamRng) -> Vec<Sample> {
    (0..n).map(|_| pool.choose(r).expect("nonempty pool").clone()).collect()
}

/// Processes one request in place and returns its evaluation.
///
/// The state is only updated once every fallible step has succeeded, so an
/// error leaves it as it was. The forget data is destroyed on success.
pub fn process_request(
    state: &mut RunState,
    request: &mut UnlearnRequest,
    world: &SpeakerWorld,
    config: &UnlearnConfig,
    eval: &EvalConfig,
) -> Result<EvalReport> {
    config.validate()?;
    let i = request.index;
    if i != state.last_index() + 1 {
        return Err(CortisError::Sequencing {
            expected: state.last_index() + 1,
            got: i,
        });
    }
    let forgotten: BTreeSet<_> = state.forgotten().into_iter().collect();
    if let Some(s) = request.forget_speakers.iter().find(|s| forgotten.contains(s)) {
        return Err(CortisError::Precondition(format!("speaker {s} was already forgotten")));
    }
    let started = Instant::now();
    let method = config.method;
    let d = state.theta.num_params();
    let teacher = state.theta.clone();
    let mut r = rng::indexed_stream(config.seed, "unlearn", i as u64);
    // Snapshot batches come from their own stream so capturing them never
    // perturbs the training trajectory.
    let mut snap_rng = rng::indexed_stream(config.seed, "snapshots", i as u64);

    let current: BTreeSet<_> = request.forget_speakers.iter().copied().collect();
    let remain_pool: Vec<Sample> = state
        .remain
        .train
        .iter()
        .filter(|u| !current.contains(&u.speaker) && !forgotten.contains(&u.speaker))
        .map(|u| u.sample.clone())
        .collect();
    if remain_pool.is_empty() {
        return Err(CortisError::Precondition("no remain data left to train on".into()));
    }

    let forget_utts = request.data()?.to_vec();
    let forget_train: Vec<Sample> = match method {
        Method::Sgu => sgu_samples(&forget_utts, &state.remain.train, &mut r)?,
        Method::CumulativeTgu => {
            let all: Vec<Utterance> = state.retained_forget.iter().chain(&forget_utts).cloned().collect();
            teacher_targets(world, &teacher, &all, &mut r)
        }
        _ => teacher_targets(world, &teacher, &forget_utts, &mut r),
    };

    // Steps 1-2: forget Fisher and trainable mask.
    let mut forget_fisher = None;
    let mask = match method {
        Method::Cortis | Method::CortisNoProjection => {
            let subset = state.remain_fisher_subset(config.remain_fisher_samples);
            let remain_f = state.remain_fisher.get_or_compute(&teacher, &subset)?.clone();
            let f = fisher_diag(&teacher, &forget_train, forget_train.len(), FisherSource::Forget(i))?;
            let s = saliency(&f, &remain_f, &state.prior_forget_fishers, config.epsilon)?;
            forget_fisher = Some(f);
            top_k_mask(&s, config.k_percent, i, config.epsilon)?
        }
        Method::SelFt => selft_mask(&teacher, &forget_train, config.baselines.selft_k_percent, i)?,
        _ => SaliencyMask::full(i, d),
    };
    let full_mask = mask.len() == d;

    let projector = if method.projects() && !state.merged_basis.is_empty() {
        Projector::new(&state.merged_basis, &mask)?
    } else if method.projects() && config.project_from_start {
        let b = remain_gradient_basis(&teacher, &remain_pool, &mask, config.merge_rank)?;
        Projector::new(&b, &mask)?
    } else {
        Projector::identity()
    };

    let (steps, peak_lr, interval) = config.budget(i);
    let mut buffer = if method.projects() {
        let coords = match config.snapshot_domain {
            SnapshotDomain::Mask => CoordSet::from_mask(&mask),
            SnapshotDomain::Full => CoordSet::full(d),
        };
        Some(SnapshotBuffer::new(i, interval, coords, &state.merged_basis)?)
    } else {
        None
    };

    // Step 3: mixed forget/retain training.
    let schedule = LrSchedule {
        peak: peak_lr,
        warmup_steps: (config.warmup_fraction * steps as f64).round() as usize,
        total_steps: steps,
    };
    let mut theta = teacher.clone();
    let mut adam = Adam::new(d);
    let active = (!full_mask).then(|| mask.indices());
    let lambda = config.baselines.un_lambda;
    let fresh_targets = config.fresh_targets && method != Method::Sgu;
    let mut projection_time = Duration::ZERO;
    let mut max_residual: Option<f64> = None;
    let mut forget_steps = 0;
    let (mut last_forget, mut last_retain) = (f64::NAN, f64::NAN);
    for t in 1..=steps {
        let lr = schedule.at(t);
        let forget_step = r.random::<f64>() < config.forget_probability;
        let (loss, mut grad) = if forget_step {
            forget_steps += 1;
            let mut batch = draw_batch(&forget_train, config.forget_batch, &mut r);
            if fresh_targets {
                for s in batch.iter_mut() {
                    s.target = teacher_random_voice_target(world, &teacher, &s.content, &mut r);
                }
            }
            forget_loss(&theta, &batch)?
        } else {
            let batch = draw_batch(&remain_pool, config.remain_batch, &mut r);
            let (l, mut g) = retain_loss(&theta, &batch)?;
            if config.retain_weight != 1.0 {
                g.iter_mut().for_each(|x| *x *= config.retain_weight);
            }
            (l, g)
        };
        if forget_step {
            last_forget = loss;
        } else {
            last_retain = loss;
        }
        if !full_mask {
            mask.apply(&mut grad);
        }

        let before = (!projector.is_identity()).then(|| theta.params().as_slice().to_vec());
        let params = theta.params_mut().as_mut_slice();
        adam.step(params, &grad, lr, active);
        if method == Method::Un && lambda > 0.0 {
            l1_prox(params, teacher.params().as_slice(), lr * lambda, mask.indices());
        }
        if let Some(before) = before {
            let tp = Instant::now();
            let mut delta: Vec<f64> = params.iter().zip(&before).map(|(a, b)| a - b).collect();
            let raw_norm = norm(&delta);
            projector.apply(&mut delta);
            for &j in mask.indices() {
                params[j] = before[j] + delta[j];
            }
            projection_time += tp.elapsed();
            if config.debug_checks {
                let applied: Vec<f64> = params.iter().zip(&before).map(|(a, b)| a - b).collect();
                let res = norm(&state.merged_basis.coefficients(&applied)) / raw_norm.max(1.0);
                max_residual = Some(max_residual.map_or(res, |m: f64| m.max(res)));
                if res > 1e-8 {
                    return Err(CortisError::Numeric(format!(
                        "step {t}: applied delta has residual {res:e} against the merged basis"
                    )));
                }
            }
        }
        if let Some(buf) = buffer.as_mut() {
            if buf.is_capture_step(t) {
                let batch = draw_batch(&forget_train, config.snapshot_batch, &mut snap_rng);
                let (_, g) = forget_loss(&theta, &batch)?;
                buf.capture(t, &g);
            }
        }
    }
    if !theta.params().is_finite() {
        return Err(CortisError::Numeric(format!("request {i} diverged")));
    }

    // Steps 4-5: per-request basis and merge.
    let mut request_bases = state.request_bases.clone();
    let mut merged = state.merged_basis.clone();
    let snapshots = buffer.as_ref().map_or(0, |b| b.len());
    let mut basis_rank = 0;
    if let Some(buf) = buffer {
        let basis = if buf.is_empty() {
            SubspaceBasis::empty(BasisLabel::Request(i))
        } else {
            extract_basis(&buf, config.rank)?
        };
        basis_rank = basis.rank();
        request_bases.push(basis);
        merged = merge(&request_bases, config.merge_rank)?;
    }

    // Steps 6-7: commit, then destroy the forget data.
    let merged_rank = merged.rank();
    state.theta = theta;
    state.request_bases = request_bases;
    state.merged_basis = merged;
    if let Some(f) = forget_fisher {
        state.prior_forget_fishers.push(f);
    }
    state.masks.push(mask.clone());
    state.requests.push(request.forget_speakers.clone());
    state.remain.train.retain(|u| !current.contains(&u.speaker));
    if method.retains_forget_data() {
        state.retained_forget.extend(forget_utts);
    } else {
        drop(forget_utts);
    }
    request.destroy();
    let carried_bytes = state.carried_bytes();
    state.log.push(RequestLog {
        index: i,
        method,
        seed: config.seed,
        forget_speakers: request.forget_speakers.clone(),
        steps,
        forget_steps,
        peak_lr,
        mask_size: mask.len(),
        snapshots,
        basis_rank,
        merged_rank,
        projector_rank: projector.rank(),
        final_forget_loss: last_forget,
        final_retain_loss: last_retain,
        wall_seconds: started.elapsed().as_secs_f64(),
        projection_seconds: projection_time.as_secs_f64(),
        max_projection_residual: max_residual,
        carried_bytes,
    });

    // Step 8.
    evaluate(
        &state.theta,
        world,
        &state.remain.eval_speakers,
        &state.forgotten(),
        eval,
        i,
        method.name(),
    )
}

/// Largest `|U_<iᵀ U_i|` entry for each per-request basis against the merge
/// of the bases before it.
pub fn deflation_residuals(bases: &[SubspaceBasis], merge_rank: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(bases.len());
    for k in 0..bases.len() {
        let prior = merge(&bases[..k], merge_rank)?;
        let b = &bases[k];
        if prior.is_empty() || b.is_empty() {
            out.push(0.0);
            continue;
        }
        let common = prior.coords().union(b.coords());
        let p = prior.embed(&common)?;
        let q = b.embed(&common)?;
        let cross: DenseMatrix = p.matrix().t_matmul(q.matrix())?;
        out.push(cross.max_abs());
    }
    Ok(out)
}
