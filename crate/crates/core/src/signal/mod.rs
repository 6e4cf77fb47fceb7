//! Audio I/O and the deterministic feature extractors used for training
//! targets and evaluation: log-mel spectrograms, YIN pitch, frame alignment.

mod align;
mod mel;
mod wav;
mod yin;

pub use align::align_f0_to_frames;
pub use mel::{mel_spectrogram, MelCache, MelConfig, MelExtractor, MelSpectrogram};
pub use wav::{load_wav, save_wav};
pub use yin::{extract_f0, F0Contour, Yin, YinConfig};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SignalError {
    #[error("not a RIFF/WAVE file: {0}")]
    NotWav(String),
    #[error("unsupported encoding: {0}")]
    UnsupportedEncoding(String),
    #[error("truncated file: {0}")]
    TruncatedFile(String),
    #[error("i/o failure: {0}")]
    IoFailure(#[from] std::io::Error),
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("invalid audio: {0}")]
    InvalidAudio(String),
    #[error("empty F0 contour")]
    EmptyContour,
}

/// Mono PCM audio with amplitudes nominally in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self, SignalError> {
        if sample_rate == 0 {
            return Err(SignalError::InvalidAudio("sample rate must be positive".into()));
        }
        if samples.is_empty() {
            return Err(SignalError::InvalidAudio("buffer is empty".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(SignalError::InvalidAudio(format!("sample {i} is not finite")));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn rms(&self) -> f64 {
        (self.samples.iter().map(|s| s * s).sum::<f64>() / self.samples.len() as f64).sqrt()
    }
}

/// Index into a signal of length `len` extended by whole-sample mirroring
/// (`reflect` padding). Also defined far outside `[0, len)`, where the
/// mirror repeats periodically.
#[inline]
pub(crate) fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = i.rem_euclid(period);
    if m >= len as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

/// Frames produced for `len` samples at `hop` when frame `t` is centered on sample `t * hop`.
pub fn frame_count(len: usize, hop: usize) -> usize {
    len.div_ceil(hop)
}
