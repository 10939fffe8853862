//! Versioned binary artifacts.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "CRTS" | version u32 | kind u32 | d u64
//!        | n_dims u32 | dims u64 × n_dims
//!        | n_meta u32 | meta u64 × n_meta
//!        | n_words u64 | payload 8-byte words × n_words
//! ```
//!
//! `d` is the model parameter dimension the artifact refers to. Payload words
//! are f64 values except for index arrays (masks, basis coordinates), which
//! are u64.

use std::fs;
use std::path::Path;

use crate::error::{CortisError, Result};
use crate::fisher::{FisherDiagonal, FisherSource};
use crate::localize::SaliencyMask;
use crate::numkit::DenseMatrix;
use crate::subspace::{BasisLabel, CoordSet, SubspaceBasis};
use crate::toytts::{ParamVector, ProbeResidual, Sample, SpeakerWorld, ToyModel, Utterance, WorldConfig};

pub const MAGIC: &[u8; 4] = b"CRTS";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum ArtifactKind {
    Model = 1,
    World = 2,
    Fisher = 3,
    Mask = 4,
    Basis = 5,
    Samples = 6,
}

impl ArtifactKind {
    fn from_code(code: u32) -> Option<Self> {
        [Self::Model, Self::World, Self::Fisher, Self::Mask, Self::Basis, Self::Samples]
            .into_iter()
            .find(|k| *k as u32 == code)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: ArtifactKind,
    pub d: u64,
    pub dims: Vec<u64>,
    pub meta: Vec<u64>,
    pub payload: Vec<u64>,
}

impl Container {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(40 + 8 * (self.dims.len() + self.meta.len() + self.payload.len()));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.kind as u32).to_le_bytes());
        out.extend_from_slice(&self.d.to_le_bytes());
        for list in [&self.dims, &self.meta] {
            out.extend_from_slice(&(list.len() as u32).to_le_bytes());
            list.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        }
        out.extend_from_slice(&(self.payload.len() as u64).to_le_bytes());
        self.payload.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        out
    }

    /// Parses `bytes`; `origin` only labels errors.
    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, origin };
        if r.take(4)? != MAGIC {
            return Err(r.err("bad magic, not a CRTS artifact"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.err(&format!("unsupported format version {version}, expected {VERSION}")));
        }
        let code = r.u32()?;
        let kind = ArtifactKind::from_code(code).ok_or_else(|| r.err(&format!("unknown artifact kind {code}")))?;
        let d = r.u64()?;
        let n = r.u32()? as usize;
        let dims = r.words(n)?;
        let n = r.u32()? as usize;
        let meta = r.words(n)?;
        let n = usize::try_from(r.u64()?).map_err(|_| r.err("payload length overflows"))?;
        let payload = r.words(n)?;
        if r.pos != bytes.len() {
            return Err(r.err(&format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            kind,
            d,
            dims,
            meta,
            payload,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| CortisError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| CortisError::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Reads `path` and checks it holds a `kind` artifact.
    pub fn read_kind(path: &Path, kind: ArtifactKind) -> Result<Self> {
        let c = Self::read(path)?;
        if c.kind != kind {
            return Err(format_err(path, &format!("expected a {kind:?} artifact, found {:?}", c.kind)));
        }
        Ok(c)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl Reader<'_> {
    fn err(&self, reason: &str) -> CortisError {
        format_err(self.origin, reason)
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| self.err(&format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn words(&mut self, n: usize) -> Result<Vec<u64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| self.err("length overflows"))?)?;
        Ok(raw.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

fn format_err(path: &Path, reason: &str) -> CortisError {
    CortisError::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

fn floats(words: &[u64]) -> Vec<f64> {
    words.iter().map(|w| f64::from_bits(*w)).collect()
}

fn words(values: &[f64]) -> impl Iterator<Item = u64> + '_ {
    values.iter().map(|v| v.to_bits())
}

fn index(w: u64, path: &Path) -> Result<usize> {
    usize::try_from(w).map_err(|_| format_err(path, &format!("index {w} overflows")))
}

fn expect_len(path: &Path, what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(format_err(path, &format!("{what}: expected {want} values, found {got}")));
    }
    Ok(())
}

pub fn model_container(model: &ToyModel) -> Container {
    Container {
        kind: ArtifactKind::Model,
        d: model.num_params() as u64,
        dims: model.layer_sizes().iter().map(|&s| s as u64).collect(),
        meta: vec![model.voice_dim() as u64],
        payload: words(model.params().as_slice()).collect(),
    }
}

pub fn model_from_container(c: &Container, path: &Path) -> Result<ToyModel> {
    if c.dims.len() < 2 || c.meta.len() != 1 {
        return Err(format_err(path, "model header needs >= 2 layer sizes and a voice dimension"));
    }
    let sizes: Vec<usize> = c.dims.iter().map(|&s| index(s, path)).collect::<Result<_>>()?;
    let voice_dim = index(c.meta[0], path)?;
    if voice_dim > sizes[0] {
        return Err(format_err(path, "voice dimension exceeds the input width"));
    }
    let shape = ToyModel::zeros(voice_dim, sizes[0] - voice_dim, &sizes[1..sizes.len() - 1], sizes[sizes.len() - 1]);
    expect_len(path, "parameters", c.payload.len(), shape.num_params())?;
    expect_len(path, "header d", c.d as usize, shape.num_params())?;
    shape.with_params(ParamVector::from_vec(floats(&c.payload))?)
}

pub fn save_model(model: &ToyModel, path: &Path) -> Result<()> {
    model_container(model).write(path)
}

pub fn load_model(path: &Path) -> Result<ToyModel> {
    model_from_container(&Container::read_kind(path, ArtifactKind::Model)?, path)
}

/// World matrices in a fixed order, each preceded in `dims` by its shape.
pub fn save_world(world: &SpeakerWorld, path: &Path) -> Result<()> {
    let c = &world.config;
    let mats = world.matrices();
    let mut dims = vec![c.num_speakers as u64, c.voice_dim as u64, c.content_dim as u64, c.signal_dim as u64];
    for m in &mats {
        dims.extend([m.rows() as u64, m.cols() as u64]);
    }
    let residual = world.probe_residual();
    let mut payload: Vec<u64> = words(&[
        c.nonlinearity,
        c.noise_scale,
        c.max_speaker_cosine,
        c.probe_tolerance,
        residual.speaker_mae,
        residual.content_mae,
    ])
    .collect();
    for v in world.voices() {
        payload.extend(words(v));
    }
    for m in &mats {
        payload.extend(words(m.data()));
    }
    Container {
        kind: ArtifactKind::World,
        d: 0,
        dims,
        meta: vec![c.seed],
        payload,
    }
    .write(path)
}

pub fn load_world(path: &Path) -> Result<SpeakerWorld> {
    let c = Container::read_kind(path, ArtifactKind::World)?;
    if c.dims.len() != 14 || c.meta.len() != 1 {
        return Err(format_err(path, "world header needs 14 dims and a seed"));
    }
    let dims: Vec<usize> = c.dims.iter().map(|&s| index(s, path)).collect::<Result<_>>()?;
    let (s, m) = (dims[0], dims[1]);
    let wanted = 6 + s * m + (0..5).map(|k| dims[4 + 2 * k] * dims[5 + 2 * k]).sum::<usize>();
    expect_len(path, "world payload", c.payload.len(), wanted)?;
    let values = floats(&c.payload);
    let config = WorldConfig {
        num_speakers: s,
        voice_dim: m,
        content_dim: dims[2],
        signal_dim: dims[3],
        nonlinearity: values[0],
        noise_scale: values[1],
        max_speaker_cosine: values[2],
        probe_tolerance: values[3],
        seed: c.meta[0],
    };
    let residual = ProbeResidual {
        speaker_mae: values[4],
        content_mae: values[5],
    };
    let mut rest = &values[6..];
    let voices = (0..s)
        .map(|_| {
            let (v, tail) = rest.split_at(m);
            rest = tail;
            v.to_vec()
        })
        .collect();
    let mut mats = Vec::with_capacity(5);
    for k in 0..5 {
        let (rows, cols) = (dims[4 + 2 * k], dims[5 + 2 * k]);
        let (v, tail) = rest.split_at(rows * cols);
        rest = tail;
        mats.push(DenseMatrix::new(rows, cols, v.to_vec())?);
    }
    let mats: [DenseMatrix; 5] = mats.try_into().expect("five matrices");
    Ok(SpeakerWorld::from_parts(config, voices, mats, residual))
}

/// Header meta: source tag (0 remain, 1 forget), request index, sample count.
pub fn save_fisher(fisher: &FisherDiagonal, path: &Path) -> Result<()> {
    let (tag, request) = match fisher.source {
        FisherSource::Remain => (0, 0),
        FisherSource::Forget(i) => (1, i as u64),
    };
    Container {
        kind: ArtifactKind::Fisher,
        d: fisher.len() as u64,
        dims: vec![fisher.len() as u64],
        meta: vec![tag, request, fisher.sample_count as u64],
        payload: words(fisher.values()).collect(),
    }
    .write(path)
}

pub fn load_fisher(path: &Path) -> Result<FisherDiagonal> {
    let c = Container::read_kind(path, ArtifactKind::Fisher)?;
    if c.meta.len() != 3 {
        return Err(format_err(path, "Fisher header needs source, request index and sample count"));
    }
    expect_len(path, "Fisher values", c.payload.len(), c.d as usize)?;
    let source = match c.meta[0] {
        0 => FisherSource::Remain,
        1 => FisherSource::Forget(index(c.meta[1], path)?),
        t => return Err(format_err(path, &format!("unknown Fisher source tag {t}"))),
    };
    FisherDiagonal::new(floats(&c.payload), source, index(c.meta[2], path)?)
}

/// Header meta: request index, k% and ε as f64 bit patterns.
pub fn save_mask(mask: &SaliencyMask, path: &Path) -> Result<()> {
    Container {
        kind: ArtifactKind::Mask,
        d: mask.dim as u64,
        dims: vec![mask.len() as u64],
        meta: vec![mask.request_index as u64, mask.k_percent.to_bits(), mask.epsilon.to_bits()],
        payload: mask.indices().iter().map(|&j| j as u64).collect(),
    }
    .write(path)
}

pub fn load_mask(path: &Path) -> Result<SaliencyMask> {
    let c = Container::read_kind(path, ArtifactKind::Mask)?;
    if c.meta.len() != 3 {
        return Err(format_err(path, "mask header needs request index, k and epsilon"));
    }
    if c.payload.windows(2).any(|w| w[0] >= w[1]) {
        return Err(format_err(path, "mask indices are not strictly increasing"));
    }
    let indices = c.payload.iter().map(|&w| index(w, path)).collect::<Result<_>>()?;
    SaliencyMask::from_indices(
        index(c.meta[0], path)?,
        indices,
        index(c.d, path)?,
        f64::from_bits(c.meta[1]),
        f64::from_bits(c.meta[2]),
    )
}

/// Payload: coordinates, then U row-major, then σ. Header meta: label tag
/// (0 merged, 1 request) and request index.
pub fn save_basis(basis: &SubspaceBasis, d: usize, path: &Path) -> Result<()> {
    let (tag, request) = match basis.label {
        BasisLabel::Merged => (0, 0),
        BasisLabel::Request(i) => (1, i as u64),
    };
    let u = basis.matrix();
    let mut payload: Vec<u64> = basis.coords().as_slice().iter().map(|&j| j as u64).collect();
    payload.extend(words(u.data()));
    payload.extend(words(basis.singular_values()));
    Container {
        kind: ArtifactKind::Basis,
        d: d as u64,
        dims: vec![basis.coords().len() as u64, basis.rank() as u64],
        meta: vec![tag, request],
        payload,
    }
    .write(path)
}

pub fn load_basis(path: &Path) -> Result<SubspaceBasis> {
    let c = Container::read_kind(path, ArtifactKind::Basis)?;
    if c.dims.len() != 2 || c.meta.len() != 2 {
        return Err(format_err(path, "basis header needs 2 dims and 2 meta words"));
    }
    let (rows, cols) = (index(c.dims[0], path)?, index(c.dims[1], path)?);
    expect_len(path, "basis payload", c.payload.len(), rows + rows * cols + cols)?;
    let coords: Vec<usize> = c.payload[..rows].iter().map(|&w| index(w, path)).collect::<Result<_>>()?;
    if coords.windows(2).any(|w| w[0] >= w[1]) || coords.last().is_some_and(|&j| j as u64 >= c.d) {
        return Err(format_err(path, "basis coordinates are not sorted indices below d"));
    }
    let u = DenseMatrix::new(rows, cols, floats(&c.payload[rows..rows + rows * cols]))?;
    let sigma = floats(&c.payload[rows + rows * cols..]);
    let label = match c.meta[0] {
        0 => BasisLabel::Merged,
        1 => BasisLabel::Request(index(c.meta[1], path)?),
        t => return Err(format_err(path, &format!("unknown basis label tag {t}"))),
    };
    if rows == 0 && cols == 0 {
        return Ok(SubspaceBasis::empty(label));
    }
    SubspaceBasis::new(label, CoordSet::new(coords), u, sigma)
}

/// Utterances with speaker ids. Dims: count, prompt, content and target
/// widths. Payload per utterance: speaker id, then the three vectors.
pub fn save_utterances(utterances: &[Utterance], path: &Path) -> Result<()> {
    let widths = utterances.first().map_or([0; 3], |u| {
        [u.sample.prompt.len(), u.sample.content.len(), u.sample.target.len()]
    });
    let mut payload = Vec::with_capacity(utterances.len() * (1 + widths.iter().sum::<usize>()));
    for u in utterances {
        let s = &u.sample;
        if [s.prompt.len(), s.content.len(), s.target.len()] != widths {
            return Err(CortisError::Dimension("utterances differ in shape".into()));
        }
        payload.push(u.speaker as u64);
        payload.extend(words(&s.prompt).chain(words(&s.content)).chain(words(&s.target)));
    }
    let mut dims = vec![utterances.len() as u64];
    dims.extend(widths.iter().map(|&w| w as u64));
    Container {
        kind: ArtifactKind::Samples,
        d: 0,
        dims,
        meta: vec![],
        payload,
    }
    .write(path)
}

pub fn load_utterances(path: &Path) -> Result<Vec<Utterance>> {
    let c = Container::read_kind(path, ArtifactKind::Samples)?;
    if c.dims.len() != 4 {
        return Err(format_err(path, "samples header needs 4 dims"));
    }
    let dims: Vec<usize> = c.dims.iter().map(|&s| index(s, path)).collect::<Result<_>>()?;
    let (n, p, y, o) = (dims[0], dims[1], dims[2], dims[3]);
    let stride = 1 + p + y + o;
    expect_len(path, "samples payload", c.payload.len(), n * stride)?;
    c.payload
        .chunks_exact(stride)
        .map(|w| {
            let v = floats(&w[1..]);
            Ok(Utterance {
                speaker: index(w[0], path)?,
                sample: Sample {
                    prompt: v[..p].to_vec(),
                    content: v[p..p + y].to_vec(),
                    target: v[p + y..].to_vec(),
                },
            })
        })
        .collect()
}
