//! Frame-level linguistic teacher: a pluggable feature extractor followed
//! by k-means, giving one discrete token per codec frame.

use std::f64::consts::PI;

use crate::quantize::{kmeans_init, quantize_nearest, Codebook};
use crate::signal::{AudioBuffer, MelConfig, MelExtractor};

use super::ModelError;

/// Produces `[frames, dim]` features for an utterance.
pub trait FrameFeatureExtractor: Send + Sync {
    fn dim(&self) -> usize;
    fn extract(&self, buf: &AudioBuffer) -> Result<Vec<f64>, ModelError>;
}

/// 13 cepstral coefficients of the log-mel spectrum plus their deltas,
/// mean-normalized per utterance.
pub struct MfccExtractor {
    mel: MelExtractor,
    n_coeffs: usize,
    dct: Vec<f64>,
}

pub const MFCC_COEFFS: usize = 13;
const DELTA_N: usize = 2;

impl MfccExtractor {
    pub fn new(mel_cfg: &MelConfig) -> Result<Self, ModelError> {
        let mel = MelExtractor::new(mel_cfg).map_err(|e| ModelError::ConfigInvalid(e.to_string()))?;
        let m = mel_cfg.n_mels;
        let n_coeffs = MFCC_COEFFS.min(m);
        // Orthonormal DCT-II rows.
        let mut dct = vec![0.0; n_coeffs * m];
        for k in 0..n_coeffs {
            let scale = if k == 0 { (1.0 / m as f64).sqrt() } else { (2.0 / m as f64).sqrt() };
            for n in 0..m {
                dct[k * m + n] = scale * (PI * k as f64 * (n as f64 + 0.5) / m as f64).cos();
            }
        }
        Ok(Self { mel, n_coeffs, dct })
    }
}

impl FrameFeatureExtractor for MfccExtractor {
    fn dim(&self) -> usize {
        2 * self.n_coeffs
    }

    fn extract(&self, buf: &AudioBuffer) -> Result<Vec<f64>, ModelError> {
        let nm = self.mel.config().n_mels;
        let logmel = self.mel.log_mel(&buf.samples);
        let t = logmel.len() / nm;
        let c = self.n_coeffs;
        let mut ceps = vec![0.0; t * c];
        for f in 0..t {
            let frame = &logmel[f * nm..(f + 1) * nm];
            for k in 0..c {
                ceps[f * c + k] = self.dct[k * nm..(k + 1) * nm].iter().zip(frame).map(|(a, b)| a * b).sum();
            }
        }
        let denom: f64 = 2.0 * (1..=DELTA_N).map(|n| (n * n) as f64).sum::<f64>();
        let d = self.dim();
        let mut out = vec![0.0; t * d];
        for f in 0..t {
            for k in 0..c {
                let at = |i: isize| ceps[(i.clamp(0, t as isize - 1) as usize) * c + k];
                let delta: f64 = (1..=DELTA_N as isize)
                    .map(|n| n as f64 * (at(f as isize + n) - at(f as isize - n)))
                    .sum::<f64>()
                    / denom;
                out[f * d + k] = ceps[f * c + k];
                out[f * d + c + k] = delta;
            }
        }
        for j in 0..d {
            let mean = (0..t).map(|f| out[f * d + j]).sum::<f64>() / t as f64;
            (0..t).for_each(|f| out[f * d + j] -= mean);
        }
        Ok(out)
    }
}

/// Maps audio to teacher tokens at the codec frame rate.
pub struct TeacherTokenizer {
    extractor: Box<dyn FrameFeatureExtractor>,
    centroids: Option<Codebook>,
    vocab: usize,
    hop: usize,
}

impl std::fmt::Debug for TeacherTokenizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TeacherTokenizer")
            .field("vocab", &self.vocab)
            .field("trained", &self.centroids.is_some())
            .finish_non_exhaustive()
    }
}

impl TeacherTokenizer {
    /// `hop` is the codec frame hop the tokens are aligned to.
    pub fn new(extractor: Box<dyn FrameFeatureExtractor>, vocab: usize, hop: usize) -> Self {
        Self { extractor, centroids: None, vocab, hop }
    }

    pub fn mfcc(mel_cfg: &MelConfig, vocab: usize) -> Result<Self, ModelError> {
        Ok(Self::new(Box::new(MfccExtractor::new(mel_cfg)?), vocab, mel_cfg.hop_length))
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn feature_dim(&self) -> usize {
        self.extractor.dim()
    }

    pub fn centroids(&self) -> Option<&Codebook> {
        self.centroids.as_ref()
    }

    pub fn set_centroids(&mut self, cb: Codebook) -> Result<(), ModelError> {
        if cb.dim() != self.extractor.dim() || cb.len() != self.vocab {
            return Err(ModelError::ConfigInvalid(format!(
                "teacher centroids are {}x{}, expected {}x{}",
                cb.len(),
                cb.dim(),
                self.vocab,
                self.extractor.dim()
            )));
        }
        self.centroids = Some(cb);
        Ok(())
    }

    /// Fits the k-means vocabulary on the features of `corpus`.
    pub fn fit(&mut self, corpus: &[AudioBuffer], seed: u64) -> Result<(), ModelError> {
        let mut feats = Vec::new();
        for buf in corpus {
            feats.extend(self.extractor.extract(buf)?);
        }
        let cb = kmeans_init(&feats, self.extractor.dim(), self.vocab, seed)
            .map_err(|e| ModelError::TeacherUntrained(format!("k-means failed: {e}")))?;
        self.centroids = Some(cb);
        Ok(())
    }

    /// One token per codec frame (`ceil(len / hop)` of them).
    pub fn tokenize(&self, buf: &AudioBuffer) -> Result<Vec<usize>, ModelError> {
        let cb = self.centroids.as_ref().ok_or_else(|| ModelError::TeacherUntrained("call fit first".into()))?;
        let feats = self.extractor.extract(buf)?;
        let (tokens, _) = quantize_nearest(&feats, cb).map_err(|e| ModelError::ConfigInvalid(e.to_string()))?;
        let target = buf.len().div_ceil(self.hop);
        let n = tokens.len();
        if n == target {
            return Ok(tokens);
        }
        Ok((0..target).map(|i| tokens[((2 * i * n + target) / (2 * target)).min(n - 1)]).collect())
    }
}
