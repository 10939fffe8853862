//! Synthetic speaker world and a small conditional generator.
//!
//! A [`SpeakerWorld`] owns a population of unit-norm voice vectors, a fixed
//! nonlinear ground-truth generator `G(v, y)` from a voice and a content code
//! to an output signal, and two linear probes fitted by least squares that
//! read the voice and content back out of a signal. The probes play the part
//! of the speaker-verification and ASR models used to score real systems.
//!
//! [`ToyModel`] is an MLP trained to imitate `G` from a noisy voice prompt.
//! Because it is trained on freshly drawn voices it clones unseen speakers
//! zero-shot, which is exactly what makes forgotten speakers easy to re-learn.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CortisError, Result};
use crate::numkit::{dot, norm, solve_spd, DenseMatrix};
use crate::optim::{Adam, LrSchedule};
use crate::rng::{self, StreamRng};

pub type SpeakerId = usize;

/// Flat view of every trainable model parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn from_vec(values: Vec<f64>) -> Result<Self> {
        if let Some(j) = values.iter().position(|x| !x.is_finite()) {
            return Err(CortisError::Numeric(format!("parameter {j} is {}", values[j])));
        }
        Ok(Self(values))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }
}

impl std::ops::Index<usize> for ParamVector {
    type Output = f64;
    fn index(&self, j: usize) -> &f64 {
        &self.0[j]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub num_speakers: usize,
    pub voice_dim: usize,
    pub content_dim: usize,
    pub signal_dim: usize,
    /// Weight of the tanh term in the generator.
    pub nonlinearity: f64,
    /// Per-coordinate std of the Gaussian noise added to voice prompts.
    pub noise_scale: f64,
    /// Upper bound on pairwise voice cosine.
    pub max_speaker_cosine: f64,
    /// Bound on probe mean absolute error, checked at construction.
    pub probe_tolerance: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            num_speakers: 50,
            voice_dim: 48,
            content_dim: 16,
            signal_dim: 80,
            nonlinearity: 0.3,
            noise_scale: 0.05,
            max_speaker_cosine: 0.5,
            probe_tolerance: 0.05,
            seed: 0,
        }
    }
}

/// One (prompt, content, target) training or evaluation triple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub prompt: Vec<f64>,
    pub content: Vec<f64>,
    pub target: Vec<f64>,
}

/// An utterance of a known world speaker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: SpeakerId,
    pub sample: Sample,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeResidual {
    pub speaker_mae: f64,
    pub content_mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerWorld {
    pub config: WorldConfig,
    voices: Vec<Vec<f64>>,
    gen_voice: DenseMatrix,
    gen_content: DenseMatrix,
    gen_mix: DenseMatrix,
    probe_speaker: DenseMatrix,
    probe_content: DenseMatrix,
    residual: ProbeResidual,
}

const SPEAKER_RETRIES: usize = 10_000;

pub fn random_unit_vector(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let n = norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm(a) * norm(b))
}

fn gaussian_matrix(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| std * rng.sample::<f64, _>(StandardNormal))
}

/// Builds a world. Deterministic in `config.seed`.
pub fn make_world(config: &WorldConfig) -> Result<SpeakerWorld> {
    let c = config;
    if c.voice_dim == 0 || c.content_dim == 0 || c.signal_dim == 0 {
        return Err(CortisError::Precondition("world dimensions must be >= 1".into()));
    }
    if c.num_speakers < 2 {
        return Err(CortisError::Precondition("a world needs at least two speakers".into()));
    }
    let mut rng = rng::stream(c.seed, "world");

    let mut voices: Vec<Vec<f64>> = Vec::with_capacity(c.num_speakers);
    while voices.len() < c.num_speakers {
        let mut placed = false;
        for _ in 0..SPEAKER_RETRIES {
            let cand = random_unit_vector(c.voice_dim, &mut rng);
            if voices.iter().all(|v| dot(v, &cand) < c.max_speaker_cosine) {
                voices.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(CortisError::Construction(format!(
                "could not place speaker {} with cosine < {} in {} dimensions",
                voices.len(),
                c.max_speaker_cosine,
                c.voice_dim
            )));
        }
    }

    let o = c.signal_dim;
    let gen_voice = gaussian_matrix(o, c.voice_dim, 1.0 / (o as f64).sqrt(), &mut rng);
    let gen_content = gaussian_matrix(o, c.content_dim, 1.0 / (o as f64).sqrt(), &mut rng);
    let in_dim = c.voice_dim + c.content_dim;
    let gen_mix = gaussian_matrix(o, in_dim, 1.0 / (in_dim as f64).sqrt(), &mut rng);

    let mut world = SpeakerWorld {
        config: c.clone(),
        voices,
        gen_voice,
        gen_content,
        gen_mix,
        probe_speaker: DenseMatrix::zeros(c.voice_dim, o),
        probe_content: DenseMatrix::zeros(c.content_dim, o),
        residual: ProbeResidual {
            speaker_mae: f64::NAN,
            content_mae: f64::NAN,
        },
    };
    world.fit_probes(&mut rng)?;
    Ok(world)
}

impl SpeakerWorld {
    pub fn num_speakers(&self) -> usize {
        self.voices.len()
    }

    pub fn voice_dim(&self) -> usize {
        self.config.voice_dim
    }

    pub fn content_dim(&self) -> usize {
        self.config.content_dim
    }

    pub fn signal_dim(&self) -> usize {
        self.config.signal_dim
    }

    pub fn voice(&self, speaker: SpeakerId) -> &[f64] {
        &self.voices[speaker]
    }

    pub fn voices(&self) -> &[Vec<f64>] {
        &self.voices
    }

    pub fn probe_residual(&self) -> ProbeResidual {
        self.residual
    }

    /// Ground-truth generator `G(v, y) = A v + B y + γ tanh(C [v; y])`.
    pub fn generate(&self, voice: &[f64], content: &[f64]) -> Vec<f64> {
        let a = self.gen_voice.mul_vec(voice).expect("voice dim");
        let b = self.gen_content.mul_vec(content).expect("content dim");
        let joint: Vec<f64> = voice.iter().chain(content).copied().collect();
        let mix = self.gen_mix.mul_vec(&joint).expect("joint dim");
        let g = self.config.nonlinearity;
        a.iter()
            .zip(&b)
            .zip(&mix)
            .map(|((a, b), m)| a + b + g * m.tanh())
            .collect()
    }

    pub fn speaker_embedding(&self, signal: &[f64]) -> Vec<f64> {
        self.probe_speaker.mul_vec(signal).expect("signal dim")
    }

    pub fn content_readout(&self, signal: &[f64]) -> Vec<f64> {
        self.probe_content.mul_vec(signal).expect("signal dim")
    }

    pub fn sample_content(&self, rng: &mut impl Rng) -> Vec<f64> {
        let std = 1.0 / (self.config.content_dim as f64).sqrt();
        (0..self.config.content_dim)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    pub fn random_voice(&self, rng: &mut impl Rng) -> Vec<f64> {
        random_unit_vector(self.config.voice_dim, rng)
    }

    /// A reference observation of `voice`: the voice plus Gaussian noise.
    pub fn noisy_prompt(&self, voice: &[f64], rng: &mut impl Rng) -> Vec<f64> {
        voice
            .iter()
            .map(|v| v + self.config.noise_scale * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    pub fn sample_for_voice(&self, voice: &[f64], rng: &mut impl Rng) -> Sample {
        let content = self.sample_content(rng);
        let prompt = self.noisy_prompt(voice, rng);
        let target = self.generate(voice, &content);
        Sample {
            prompt,
            content,
            target,
        }
    }

    pub fn utterance(&self, speaker: SpeakerId, rng: &mut impl Rng) -> Utterance {
        Utterance {
            speaker,
            sample: self.sample_for_voice(&self.voices[speaker], rng),
        }
    }

    pub fn utterances(&self, speaker: SpeakerId, count: usize, rng: &mut impl Rng) -> Vec<Utterance> {
        (0..count).map(|_| self.utterance(speaker, rng)).collect()
    }

    fn fit_probes(&mut self, rng: &mut StreamRng) -> Result<()> {
        let o = self.config.signal_dim;
        let n_fit = 40 * o.max(self.config.voice_dim + self.config.content_dim);
        let draw = |world: &SpeakerWorld, rng: &mut StreamRng| {
            let v = world.random_voice(rng);
            let y = world.sample_content(rng);
            let x = world.generate(&v, &y);
            (x, v, y)
        };
        let mut xtx = DenseMatrix::zeros(o, o);
        let mut xtv = DenseMatrix::zeros(o, self.config.voice_dim);
        let mut xty = DenseMatrix::zeros(o, self.config.content_dim);
        for _ in 0..n_fit {
            let (x, v, y) = draw(self, rng);
            for i in 0..o {
                for j in 0..o {
                    xtx.set(i, j, xtx.get(i, j) + x[i] * x[j]);
                }
                for (j, vj) in v.iter().enumerate() {
                    xtv.set(i, j, xtv.get(i, j) + x[i] * vj);
                }
                for (j, yj) in y.iter().enumerate() {
                    xty.set(i, j, xty.get(i, j) + x[i] * yj);
                }
            }
        }
        let ridge = 1e-9 * (0..o).map(|i| xtx.get(i, i)).sum::<f64>() / o as f64;
        for i in 0..o {
            xtx.set(i, i, xtx.get(i, i) + ridge);
        }
        self.probe_speaker = solve_spd(&xtx, &xtv)?.transpose();
        self.probe_content = solve_spd(&xtx, &xty)?.transpose();

        let n_hold = 2000;
        let (mut s_err, mut c_err) = (0.0, 0.0);
        for _ in 0..n_hold {
            let (x, v, y) = draw(self, rng);
            let pv = self.speaker_embedding(&x);
            let py = self.content_readout(&x);
            s_err += pv.iter().zip(&v).map(|(a, b)| (a - b).abs()).sum::<f64>() / v.len() as f64;
            c_err += py.iter().zip(&y).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64;
        }
        self.residual = ProbeResidual {
            speaker_mae: s_err / n_hold as f64,
            content_mae: c_err / n_hold as f64,
        };
        let tol = self.config.probe_tolerance;
        if !(self.residual.speaker_mae < tol && self.residual.content_mae < tol) {
            return Err(CortisError::Construction(format!(
                "probe residual {:?} exceeds tolerance {tol}",
                self.residual
            )));
        }
        Ok(())
    }

    pub(crate) fn from_parts(
        config: WorldConfig,
        voices: Vec<Vec<f64>>,
        mats: [DenseMatrix; 5],
        residual: ProbeResidual,
    ) -> Self {
        let [gen_voice, gen_content, gen_mix, probe_speaker, probe_content] = mats;
        Self {
            config,
            voices,
            gen_voice,
            gen_content,
            gen_mix,
            probe_speaker,
            probe_content,
            residual,
        }
    }

    pub(crate) fn matrices(&self) -> [&DenseMatrix; 5] {
        [
            &self.gen_voice,
            &self.gen_content,
            &self.gen_mix,
            &self.probe_speaker,
            &self.probe_content,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64, 64],
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Layer {
    in_dim: usize,
    out_dim: usize,
    weights: usize,
    bias: usize,
}

/// MLP from `[prompt; content]` to a signal, tanh hidden layers and a linear
/// output layer. Parameters are stored layer by layer, each as a row-major
/// weight block followed by its bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    sizes: Vec<usize>,
    voice_dim: usize,
    params: ParamVector,
}

/// Per-layer activations of one forward pass, input first.
pub struct Trace {
    activations: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("trace has an output")
    }
}

impl ToyModel {
    /// Randomly initialized model with shapes matching `world`.
    pub fn new(world: &SpeakerWorld, config: &ModelConfig) -> Self {
        let mut model = Self::zeros(world.voice_dim(), world.content_dim(), &config.hidden, world.signal_dim());
        let mut rng = rng::stream(config.seed, "model-init");
        let layers = model.layers();
        let p = model.params.as_mut_slice();
        for layer in layers {
            let std = 1.0 / (layer.in_dim as f64).sqrt();
            for w in &mut p[layer.weights..layer.weights + layer.in_dim * layer.out_dim] {
                *w = std * rng.sample::<f64, _>(StandardNormal);
            }
        }
        model
    }

    pub fn zeros(voice_dim: usize, content_dim: usize, hidden: &[usize], signal_dim: usize) -> Self {
        let mut sizes = vec![voice_dim + content_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(signal_dim);
        let d = sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Self {
            sizes,
            voice_dim,
            params: ParamVector::zeros(d),
        }
    }

    pub fn with_params(&self, params: ParamVector) -> Result<Self> {
        if params.len() != self.params.len() {
            return Err(CortisError::Dimension(format!(
                "model has {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        Ok(Self {
            sizes: self.sizes.clone(),
            voice_dim: self.voice_dim,
            params,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn voice_dim(&self) -> usize {
        self.voice_dim
    }

    pub fn content_dim(&self) -> usize {
        self.sizes[0] - self.voice_dim
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("at least input and output")
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamVector {
        &mut self.params
    }

    fn layers(&self) -> Vec<Layer> {
        let mut offset = 0;
        self.sizes
            .windows(2)
            .map(|w| {
                let layer = Layer {
                    in_dim: w[0],
                    out_dim: w[1],
                    weights: offset,
                    bias: offset + w[0] * w[1],
                };
                offset = layer.bias + w[1];
                layer
            })
            .collect()
    }

    pub fn trace(&self, prompt: &[f64], content: &[f64]) -> Trace {
        debug_assert_eq!(prompt.len(), self.voice_dim);
        debug_assert_eq!(content.len(), self.content_dim());
        let p = self.params.as_slice();
        let layers = self.layers();
        let last = layers.len() - 1;
        let mut activations = Vec::with_capacity(layers.len() + 1);
        activations.push(prompt.iter().chain(content).copied().collect::<Vec<f64>>());
        for (l, layer) in layers.iter().enumerate() {
            let input = &activations[l];
            let w = &p[layer.weights..layer.bias];
            let b = &p[layer.bias..layer.bias + layer.out_dim];
            let out: Vec<f64> = (0..layer.out_dim)
                .map(|i| {
                    let z = b[i] + dot(&w[i * layer.in_dim..(i + 1) * layer.in_dim], input);
                    if l == last {
                        z
                    } else {
                        z.tanh()
                    }
                })
                .collect();
            activations.push(out);
        }
        Trace { activations }
    }

    pub fn forward(&self, prompt: &[f64], content: &[f64]) -> Vec<f64> {
        self.trace(prompt, content).activations.pop().expect("output layer")
    }

    /// Accumulates `scale · (∂output/∂θ)ᵀ · cotangent` into `grad`.
    pub fn backward(&self, trace: &Trace, cotangent: &[f64], scale: f64, grad: &mut [f64]) {
        let p = self.params.as_slice();
        let layers = self.layers();
        let mut delta: Vec<f64> = cotangent.iter().map(|g| g * scale).collect();
        for (l, layer) in layers.iter().enumerate().rev() {
            let input = &trace.activations[l];
            for i in 0..layer.out_dim {
                let di = delta[i];
                if di == 0.0 {
                    continue;
                }
                let gw = &mut grad[layer.weights + i * layer.in_dim..layer.weights + (i + 1) * layer.in_dim];
                for (g, a) in gw.iter_mut().zip(input) {
                    *g += di * a;
                }
                grad[layer.bias + i] += di;
            }
            if l > 0 {
                let w = &p[layer.weights..layer.bias];
                let mut prev = vec![0.0; layer.in_dim];
                for i in 0..layer.out_dim {
                    let di = delta[i];
                    if di == 0.0 {
                        continue;
                    }
                    for (pv, wij) in prev.iter_mut().zip(&w[i * layer.in_dim..(i + 1) * layer.in_dim]) {
                        *pv += di * wij;
                    }
                }
                for (pv, a) in prev.iter_mut().zip(input) {
                    *pv *= 1.0 - a * a;
                }
                delta = prev;
            }
        }
    }

    /// Vector-Jacobian product of the output at one input.
    pub fn output_vjp(&self, prompt: &[f64], content: &[f64], cotangent: &[f64]) -> ParamVector {
        let trace = self.trace(prompt, content);
        let mut grad = vec![0.0; self.num_params()];
        self.backward(&trace, cotangent, 1.0, &mut grad);
        ParamVector(grad)
    }

    /// Per-sample squared error averaged over output coordinates.
    pub fn sample_loss(&self, sample: &Sample) -> f64 {
        let out = self.forward(&sample.prompt, &sample.content);
        mse(&out, &sample.target)
    }

    /// Accumulates `weight ·` the gradient of one sample's loss into `grad`
    /// and returns that sample's loss.
    pub fn accumulate_sample_grad(&self, sample: &Sample, weight: f64, grad: &mut [f64]) -> f64 {
        let trace = self.trace(&sample.prompt, &sample.content);
        let out = trace.output();
        let o = out.len() as f64;
        let residual: Vec<f64> = out.iter().zip(&sample.target).map(|(a, t)| a - t).collect();
        let loss = residual.iter().map(|r| r * r).sum::<f64>() / o;
        let cot: Vec<f64> = residual.iter().map(|r| 2.0 * r / o).collect();
        self.backward(&trace, &cot, weight, grad);
        loss
    }
}

pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Mean-squared regression loss over a batch and its gradient.
pub fn loss_and_grad<'a, I>(model: &ToyModel, batch: I) -> Result<(f64, ParamVector)>
where
    I: IntoIterator<Item = &'a Sample>,
    I::IntoIter: ExactSizeIterator,
{
    let batch = batch.into_iter();
    let n = batch.len();
    if n == 0 {
        return Err(CortisError::Precondition("loss over an empty batch".into()));
    }
    let mut grad = vec![0.0; model.num_params()];
    let w = 1.0 / n as f64;
    let mut loss = 0.0;
    for sample in batch {
        loss += model.accumulate_sample_grad(sample, w, &mut grad);
    }
    Ok((loss / n as f64, ParamVector(grad)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_fraction: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 10_000,
            batch_size: 32,
            lr: 2e-3,
            warmup_fraction: 0.05,
            seed: 0,
        }
    }
}

/// Trains `model` to imitate the world generator on freshly drawn voices, so
/// no world speaker is ever seen during pretraining. Returns the final
/// training-batch loss alongside the model.
pub fn pretrain(world: &SpeakerWorld, model: &ToyModel, config: &PretrainConfig) -> Result<(ToyModel, f64)> {
    let mut model = model.clone();
    if config.steps == 0 {
        return Ok((model, f64::NAN));
    }
    if config.batch_size == 0 {
        return Err(CortisError::Precondition("pretraining batch size must be >= 1".into()));
    }
    let mut rng = rng::stream(config.seed, "pretrain");
    let schedule = LrSchedule {
        peak: config.lr,
        warmup_steps: (config.warmup_fraction * config.steps as f64).round() as usize,
        total_steps: config.steps,
    };
    let mut adam = Adam::new(model.num_params());
    let mut last_loss = f64::NAN;
    for t in 1..=config.steps {
        let batch: Vec<Sample> = (0..config.batch_size)
            .map(|_| {
                let v = world.random_voice(&mut rng);
                world.sample_for_voice(&v, &mut rng)
            })
            .collect();
        let (loss, grad) = loss_and_grad(&model, &batch)?;
        adam.step(model.params.as_mut_slice(), grad.as_slice(), schedule.at(t), None);
        last_loss = loss;
    }
    if !model.params.is_finite() {
        return Err(CortisError::Numeric("pretraining diverged".into()));
    }
    Ok((model, last_loss))
}

/// Target for teacher-guided unlearning: the teacher's output for `content`
/// when prompted with a freshly drawn random voice. No forget-speaker
/// information enters the target.
pub fn teacher_random_voice_target(
    world: &SpeakerWorld,
    teacher: &ToyModel,
    content: &[f64],
    rng: &mut impl Rng,
) -> Vec<f64> {
    let voice = world.random_voice(rng);
    teacher.forward(&voice, content)
}
