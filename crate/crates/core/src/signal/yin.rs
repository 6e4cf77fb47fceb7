use serde::{Deserialize, Serialize};

use super::{frame_count, AudioBuffer, SignalError};

/// Per-frame fundamental frequency; `hz` is 0 on unvoiced frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct F0Contour {
    pub hz: Vec<f64>,
    pub voiced: Vec<bool>,
}

impl F0Contour {
    pub fn len(&self) -> usize {
        self.hz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hz.is_empty()
    }

    pub fn voiced_count(&self) -> usize {
        self.voiced.iter().filter(|&&v| v).count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct YinConfig {
    pub threshold: f64,
    pub f_min: f64,
    pub f_max: f64,
    /// Integration window of the difference function, in samples.
    pub window: usize,
}

impl Default for YinConfig {
    fn default() -> Self {
        Self { threshold: 0.15, f_min: 50.0, f_max: 550.0, window: 512 }
    }
}

/// Frames with mean power below this are treated as silence.
const SILENCE_POWER: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct Yin {
    cfg: YinConfig,
    sample_rate: u32,
    tau_min: usize,
    tau_max: usize,
}

impl Yin {
    pub fn new(cfg: &YinConfig, sample_rate: u32) -> Result<Self, SignalError> {
        let nyquist = sample_rate as f64 / 2.0;
        if !(cfg.f_min > 0.0 && cfg.f_min < cfg.f_max && cfg.f_max < nyquist) {
            return Err(SignalError::ConfigInvalid(format!(
                "need 0 < f_min < f_max < {nyquist} Hz, got {} and {}",
                cfg.f_min, cfg.f_max
            )));
        }
        if !(cfg.threshold > 0.0 && cfg.threshold < 1.0) || cfg.window < 2 {
            return Err(SignalError::ConfigInvalid("YIN threshold must be in (0, 1) and window >= 2".into()));
        }
        let sr = sample_rate as f64;
        let tau_min = ((sr / cfg.f_max).floor() as usize).max(2);
        let tau_max = (sr / cfg.f_min).ceil() as usize;
        Ok(Self { cfg: cfg.clone(), sample_rate, tau_min, tau_max })
    }

    /// Pitch of the frame centered on sample `center`, or `None` if unvoiced.
    pub fn frame_f0(&self, samples: &[f64], center: usize, seg: &mut Vec<f64>, d: &mut Vec<f64>) -> Option<f64> {
        let w = self.cfg.window;
        let span = w + self.tau_max + 1;
        let start = center as isize - (span / 2) as isize;
        seg.clear();
        seg.extend((0..span).map(|j| {
            let i = start + j as isize;
            if i >= 0 && (i as usize) < samples.len() {
                samples[i as usize]
            } else {
                0.0
            }
        }));
        let power = seg[..w].iter().map(|x| x * x).sum::<f64>() / w as f64;
        if power < SILENCE_POWER {
            return None;
        }

        // Difference function, then its cumulative-mean normalization in place.
        d.clear();
        d.resize(self.tau_max + 2, 0.0);
        for tau in 1..=self.tau_max + 1 {
            d[tau] = seg[..w].iter().zip(&seg[tau..tau + w]).map(|(a, b)| (a - b) * (a - b)).sum();
        }
        d[0] = 1.0;
        let mut running = 0.0;
        for tau in 1..d.len() {
            running += d[tau];
            d[tau] = if running > 0.0 { d[tau] * tau as f64 / running } else { 1.0 };
        }

        let mut tau = (self.tau_min..=self.tau_max).find(|&t| d[t] < self.cfg.threshold)?;
        while tau < self.tau_max && d[tau + 1] < d[tau] {
            tau += 1;
        }
        let (a, b, c) = (d[tau - 1], d[tau], d[tau + 1]);
        let denom = a - 2.0 * b + c;
        let shift = if denom > 0.0 { ((a - c) / (2.0 * denom)).clamp(-1.0, 1.0) } else { 0.0 };
        let hz = self.sample_rate as f64 / (tau as f64 + shift);
        (hz >= self.cfg.f_min && hz <= self.cfg.f_max).then_some(hz)
    }

    /// One estimate per frame centered on `t * hop`, `ceil(len / hop)` frames.
    pub fn run(&self, samples: &[f64], hop: usize) -> F0Contour {
        let n = frame_count(samples.len(), hop);
        let mut hz = Vec::with_capacity(n);
        let mut voiced = Vec::with_capacity(n);
        let (mut seg, mut d) = (Vec::new(), Vec::new());
        for t in 0..n {
            match self.frame_f0(samples, t * hop, &mut seg, &mut d) {
                Some(f) => {
                    hz.push(f);
                    voiced.push(true);
                }
                None => {
                    hz.push(0.0);
                    voiced.push(false);
                }
            }
        }
        F0Contour { hz, voiced }
    }
}

/// YIN pitch track with the default threshold and window.
pub fn extract_f0(buf: &AudioBuffer, frame_hop: usize, f_min: f64, f_max: f64) -> Result<F0Contour, SignalError> {
    if frame_hop == 0 {
        return Err(SignalError::ConfigInvalid("frame_hop must be >= 1".into()));
    }
    let cfg = YinConfig { f_min, f_max, ..YinConfig::default() };
    Ok(Yin::new(&cfg, buf.sample_rate)?.run(&buf.samples, frame_hop))
}
