//! Pseudo-speaker generation from a speaker pool and utterance-level
//! anonymization.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{Corpus, DataError};
use crate::model::{cosine, normalize, CodecModel, FrameSequence, ModelError, SpeakerEmbedding};
use crate::signal::AudioBuffer;

const POOL_MAGIC: &[u8; 4] = b"ANPL";
const POOL_VERSION: u32 = 1;
const NORM_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum AnonError {
    #[error("pool has {have} entries, need {need}")]
    PoolTooSmall { need: usize, have: usize },
    #[error("manifest is empty")]
    EmptyManifest,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid anonymization settings: {0}")]
    InvalidSpec(String),
    #[error("invalid pool: {0}")]
    InvalidPool(String),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoolEntry {
    pub id: String,
    pub embedding: SpeakerEmbedding,
}

/// Unit-norm speaker embeddings of equal dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerPool {
    entries: Vec<PoolEntry>,
    source: String,
}

impl SpeakerPool {
    pub fn new(entries: Vec<PoolEntry>, source: impl Into<String>) -> Result<Self, AnonError> {
        let Some(first) = entries.first() else {
            return Err(AnonError::InvalidPool("pool needs at least one entry".into()));
        };
        let d = first.embedding.dim();
        for e in &entries {
            if e.embedding.dim() != d {
                return Err(AnonError::DimensionMismatch(format!("{} has dim {}, pool dim {d}", e.id, e.embedding.dim())));
            }
            if (e.embedding.norm() - 1.0).abs() > NORM_TOL {
                return Err(AnonError::InvalidPool(format!("{} is not unit norm", e.id)));
            }
        }
        Ok(Self { entries, source: source.into() })
    }

    pub fn entries(&self) -> &[PoolEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.entries[0].embedding.dim()
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    /// Binary pool file: magic, version, d, count, source, ids, then f32
    /// little-endian embeddings row by row.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(POOL_MAGIC);
        out.extend_from_slice(&POOL_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        put_str(&mut out, &self.source);
        for e in &self.entries {
            put_str(&mut out, &e.id);
        }
        for e in &self.entries {
            for &v in &e.embedding.vector {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, AnonError> {
        let bad = |m: &str| AnonError::InvalidPool(m.to_string());
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != POOL_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = get_u32(&mut r)?;
        if version != POOL_VERSION {
            return Err(AnonError::InvalidPool(format!("unsupported version {version}")));
        }
        let d = get_u32(&mut r)? as usize;
        let n = get_u32(&mut r)? as usize;
        let source = get_str(&mut r)?;
        let ids = (0..n).map(|_| get_str(&mut r)).collect::<Result<Vec<_>, _>>()?;
        let mut entries = Vec::with_capacity(n);
        let mut buf = [0u8; 4];
        for id in ids {
            let mut v = Vec::with_capacity(d);
            for _ in 0..d {
                r.read_exact(&mut buf).map_err(|_| bad("truncated embeddings"))?;
                v.push(f32::from_le_bytes(buf) as f64);
            }
            // Stored values are kept as-is so load then save is byte-stable; f32
            // rounding stays well inside the unit-norm tolerance.
            entries.push(PoolEntry { id, embedding: SpeakerEmbedding { vector: v, normalized: true } });
        }
        if (r.position() as usize) != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Self::new(entries, source)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), AnonError> {
        Ok(fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, AnonError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn get_u32(r: &mut Cursor<&[u8]>) -> Result<u32, AnonError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| AnonError::InvalidPool("truncated field".into()))?;
    Ok(u32::from_le_bytes(b))
}

fn get_str(r: &mut Cursor<&[u8]>) -> Result<String, AnonError> {
    let n = get_u32(r)? as usize;
    let remaining = r.get_ref().len() - r.position() as usize;
    if n > remaining {
        return Err(AnonError::InvalidPool("truncated string".into()));
    }
    let mut b = vec![0u8; n];
    r.read_exact(&mut b).map_err(|_| AnonError::InvalidPool("truncated string".into()))?;
    String::from_utf8(b).map_err(|_| AnonError::InvalidPool("string is not utf-8".into()))
}

/// Mean of unit vectors, re-normalized.
pub fn mean_direction<'a>(vs: impl IntoIterator<Item = &'a [f64]>) -> Vec<f64> {
    let mut acc: Vec<f64> = Vec::new();
    for v in vs {
        if acc.is_empty() {
            acc = vec![0.0; v.len()];
        }
        acc.iter_mut().zip(v).for_each(|(a, x)| *a += x);
    }
    normalize(&mut acc);
    acc
}

/// One pool entry per speaker: the re-normalized mean of the embeddings of
/// all their utterances.
pub fn build_pool(corpus: &Corpus, model: &CodecModel) -> Result<SpeakerPool, AnonError> {
    if corpus.is_empty() {
        return Err(AnonError::EmptyManifest);
    }
    let m = &corpus.manifest;
    let mut sums: Vec<Vec<Vec<f64>>> = vec![Vec::new(); m.num_speakers()];
    for (i, buf) in corpus.audio.iter().enumerate() {
        sums[corpus.label(i)].push(model.embed(buf)?.vector);
    }
    let entries = m
        .speakers
        .iter()
        .zip(&sums)
        .map(|(id, vs)| PoolEntry {
            id: id.clone(),
            embedding: SpeakerEmbedding::normalized(mean_direction(vs.iter().map(Vec::as_slice))),
        })
        .collect();
    SpeakerPool::new(entries, format!("{} utterances", corpus.len()))
}

/// How the `M` pool speakers are chosen.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selection {
    /// Uniformly without replacement.
    #[default]
    Random,
    /// Uniformly among the `2M` entries farthest (by cosine) from the
    /// original speaker.
    Farthest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnonSpec {
    pub alpha: f64,
    pub num_selected: usize,
    pub seed: u64,
    /// Standard deviation of the random identity; `None` means `1/sqrt(d)`.
    pub gaussian_sigma: Option<f64>,
    pub selection: Selection,
    /// Control arm: return the input audio unchanged.
    pub passthrough: bool,
}

impl Default for AnonSpec {
    fn default() -> Self {
        Self { alpha: 0.9, num_selected: 20, seed: 0, gaussian_sigma: None, selection: Selection::Random, passthrough: false }
    }
}

impl AnonSpec {
    pub fn validate(&self) -> Result<(), AnonError> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(AnonError::InvalidSpec(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.num_selected == 0 {
            return Err(AnonError::InvalidSpec("num_selected must be >= 1".into()));
        }
        if let Some(s) = self.gaussian_sigma {
            if !(s.is_finite() && s > 0.0) {
                return Err(AnonError::InvalidSpec(format!("gaussian_sigma {s} must be positive")));
            }
        }
        Ok(())
    }
}

/// Independent stream per utterance: ChaCha8 keyed by
/// `sha256(seed as little-endian u64 || utterance id)`.
pub fn utterance_rng(seed: u64, utterance_id: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(utterance_id.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Every intermediate of one pseudo-speaker draw.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoSpeakerDraw {
    pub selected: Vec<usize>,
    /// Normalized pool average.
    pub pool_mean: Vec<f64>,
    /// Normalized Gaussian sample.
    pub random: Vec<f64>,
    /// `alpha * pool_mean + (1 - alpha) * random` before normalization.
    pub mix: Vec<f64>,
    pub speaker: SpeakerEmbedding,
}

pub fn draw_pseudo_speaker<R: Rng>(
    pool: &SpeakerPool,
    spec: &AnonSpec,
    original: Option<&SpeakerEmbedding>,
    rng: &mut R,
) -> Result<PseudoSpeakerDraw, AnonError> {
    spec.validate()?;
    let m = spec.num_selected;
    if m > pool.len() {
        return Err(AnonError::PoolTooSmall { need: m, have: pool.len() });
    }
    let selected: Vec<usize> = match spec.selection {
        Selection::Random => sample(rng, pool.len(), m).into_vec(),
        Selection::Farthest => {
            let orig = original.ok_or_else(|| AnonError::InvalidSpec("farthest selection needs the original speaker".into()))?;
            if orig.dim() != pool.dim() {
                return Err(AnonError::DimensionMismatch(format!("speaker dim {} vs pool dim {}", orig.dim(), pool.dim())));
            }
            let mut order: Vec<usize> = (0..pool.len()).collect();
            let sims: Vec<f64> = pool.entries.iter().map(|e| cosine(&e.embedding.vector, &orig.vector)).collect();
            order.sort_by(|&a, &b| sims[a].total_cmp(&sims[b]).then(a.cmp(&b)));
            let candidates = &order[..(2 * m).min(pool.len())];
            sample(rng, candidates.len(), m).into_iter().map(|i| candidates[i]).collect()
        }
    };
    let pool_mean = mean_direction(selected.iter().map(|&i| pool.entries[i].embedding.vector.as_slice()));

    let d = pool.dim();
    let sigma = spec.gaussian_sigma.unwrap_or(1.0 / (d as f64).sqrt());
    let normal = Normal::new(0.0, sigma).map_err(|e| AnonError::InvalidSpec(e.to_string()))?;
    let mut random: Vec<f64> = (0..d).map(|_| normal.sample(rng)).collect();
    normalize(&mut random);

    let a = spec.alpha;
    let mix: Vec<f64> = pool_mean.iter().zip(&random).map(|(s, r)| a * s + (1.0 - a) * r).collect();
    let speaker = SpeakerEmbedding::normalized(mix.clone());
    Ok(PseudoSpeakerDraw { selected, pool_mean, random, mix, speaker })
}

pub fn pseudo_speaker<R: Rng>(pool: &SpeakerPool, spec: &AnonSpec, rng: &mut R) -> Result<SpeakerEmbedding, AnonError> {
    Ok(draw_pseudo_speaker(pool, spec, None, rng)?.speaker)
}

#[derive(Clone, Debug)]
pub struct AnonymizedUtterance {
    pub audio: AudioBuffer,
    pub original_speaker: SpeakerEmbedding,
    /// `None` in passthrough mode.
    pub pseudo_speaker: Option<SpeakerEmbedding>,
    /// Quantizer indices of the content path, per layer.
    pub codes: Vec<Vec<usize>>,
}

/// Encodes `buf`, swaps the speaker embedding for a pseudo-speaker after
/// quantization and decodes.
pub fn anonymize_utterance<R: Rng>(
    buf: &AudioBuffer,
    model: &CodecModel,
    pool: &SpeakerPool,
    spec: &AnonSpec,
    rng: &mut R,
) -> Result<AnonymizedUtterance, AnonError> {
    spec.validate()?;
    if pool.dim() != model.config().speaker_dim {
        return Err(AnonError::DimensionMismatch(format!(
            "pool dim {} vs model speaker dim {}",
            pool.dim(),
            model.config().speaker_dim
        )));
    }
    let analysis = model.analyze(buf)?;
    if spec.passthrough {
        return Ok(AnonymizedUtterance {
            audio: buf.clone(),
            original_speaker: analysis.speaker,
            pseudo_speaker: None,
            codes: analysis.quant.indices,
        });
    }
    let draw = draw_pseudo_speaker(pool, spec, Some(&analysis.speaker), rng)?;
    let content = FrameSequence {
        data: analysis.quant.cumulative.clone(),
        frames: analysis.content_input.frames,
        dim: analysis.content_input.dim,
    };
    let audio = model.synthesize(&content, &draw.speaker)?;
    Ok(AnonymizedUtterance {
        audio,
        original_speaker: analysis.speaker,
        pseudo_speaker: Some(draw.speaker),
        codes: analysis.quant.indices,
    })
}
