use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::{frame_count, reflect_index, AudioBuffer, SignalError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub win_length: usize,
    pub hop_length: usize,
    pub n_mels: usize,
    pub f_min: f64,
    /// Upper filter edge; `None` means Nyquist.
    pub f_max: Option<f64>,
    /// Energies are clamped to this before the log.
    pub floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16000,
            n_fft: 1024,
            win_length: 1024,
            hop_length: 320,
            n_mels: 80,
            f_min: 0.0,
            f_max: None,
            floor: 1e-5,
        }
    }
}

impl MelConfig {
    pub fn validate(&self) -> Result<(), SignalError> {
        let bad = |m: &str| Err(SignalError::ConfigInvalid(m.to_string()));
        if self.sample_rate == 0 {
            return bad("sample_rate must be positive");
        }
        if !(self.n_fft >= self.win_length && self.win_length >= self.hop_length && self.hop_length >= 1) {
            return bad("need n_fft >= win_length >= hop_length >= 1");
        }
        if self.n_mels == 0 {
            return bad("n_mels must be positive");
        }
        let f_max = self.upper_hz();
        if !(self.f_min >= 0.0 && self.f_min < f_max && f_max <= self.sample_rate as f64 / 2.0) {
            return bad("need 0 <= f_min < f_max <= sample_rate / 2");
        }
        if !(self.floor > 0.0 && self.floor.is_finite()) {
            return bad("floor must be positive and finite");
        }
        Ok(())
    }

    pub fn upper_hz(&self) -> f64 {
        self.f_max.unwrap_or(self.sample_rate as f64 / 2.0)
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }
}

/// Log-compressed mel energies, `frames[t * n_mels + m]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    pub frames: Vec<f64>,
    pub n_frames: usize,
    pub n_mels: usize,
    pub hop_length: usize,
    pub sample_rate: u32,
}

impl MelSpectrogram {
    pub fn frame(&self, t: usize) -> &[f64] {
        &self.frames[t * self.n_mels..(t + 1) * self.n_mels]
    }

    /// Channel-major copy, `[n_mels, n_frames]`, the layout networks consume.
    pub fn channel_major(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.frames.len()];
        for t in 0..self.n_frames {
            for m in 0..self.n_mels {
                out[m * self.n_frames + t] = self.frames[t * self.n_mels + m];
            }
        }
        out
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

#[derive(Clone, Debug)]
struct Filter {
    start: usize,
    weights: Vec<f64>,
}

/// Spectra and mel energies kept from a forward pass so gradients can be
/// pulled back to the waveform.
#[derive(Clone, Debug)]
pub struct MelCache {
    len: usize,
    spectra: Vec<Complex<f64>>,
    energies: Vec<f64>,
}

/// Precomputed window, filterbank and FFT plans for one [`MelConfig`].
pub struct MelExtractor {
    cfg: MelConfig,
    window: Vec<f64>,
    filters: Vec<Filter>,
    centers: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for MelExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MelExtractor").field("cfg", &self.cfg).finish_non_exhaustive()
    }
}

impl MelExtractor {
    pub fn new(cfg: &MelConfig) -> Result<Self, SignalError> {
        cfg.validate()?;
        let n_fft = cfg.n_fft;
        // Periodic Hann of win_length, centered inside the n_fft frame.
        let mut window = vec![0.0; n_fft];
        let off = (n_fft - cfg.win_length) / 2;
        for n in 0..cfg.win_length {
            window[off + n] = 0.5 - 0.5 * (2.0 * PI * n as f64 / cfg.win_length as f64).cos();
        }

        let lo = hz_to_mel(cfg.f_min);
        let hi = hz_to_mel(cfg.upper_hz());
        let edges: Vec<f64> = (0..cfg.n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
            .collect();
        let bin_hz = cfg.sample_rate as f64 / n_fft as f64;
        let filters = (0..cfg.n_mels)
            .map(|m| {
                let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
                let weights: Vec<f64> = (0..cfg.n_bins())
                    .map(|k| {
                        let f = k as f64 * bin_hz;
                        let up = (f - left) / (center - left);
                        let down = (right - f) / (right - center);
                        up.min(down).max(0.0)
                    })
                    .collect();
                let start = weights.iter().position(|&w| w > 0.0).unwrap_or(0);
                let end = weights.iter().rposition(|&w| w > 0.0).map_or(start, |e| e + 1);
                Filter { start, weights: weights[start..end].to_vec() }
            })
            .collect();
        let centers = edges[1..=cfg.n_mels].to_vec();

        let mut planner = FftPlanner::new();
        Ok(Self {
            cfg: cfg.clone(),
            window,
            filters,
            centers,
            fft: planner.plan_fft_forward(n_fft),
            ifft: planner.plan_fft_inverse(n_fft),
        })
    }

    pub fn config(&self) -> &MelConfig {
        &self.cfg
    }

    pub fn n_frames(&self, len: usize) -> usize {
        frame_count(len, self.cfg.hop_length)
    }

    /// Center frequency of every filter in Hz.
    pub fn centers_hz(&self) -> &[f64] {
        &self.centers
    }

    /// Dense `[n_mels, n_bins]` filterbank matrix.
    pub fn filter_matrix(&self) -> Vec<f64> {
        let nb = self.cfg.n_bins();
        let mut out = vec![0.0; self.cfg.n_mels * nb];
        for (m, f) in self.filters.iter().enumerate() {
            out[m * nb + f.start..m * nb + f.start + f.weights.len()].copy_from_slice(&f.weights);
        }
        out
    }

    /// The `n_fft` windowed samples of frame `t` (reflect-padded at the edges).
    pub fn windowed_frame(&self, samples: &[f64], t: usize, out: &mut [f64]) {
        let half = (self.cfg.n_fft / 2) as isize;
        let base = (t * self.cfg.hop_length) as isize - half;
        let len = samples.len();
        for (n, o) in out.iter_mut().enumerate() {
            *o = self.window[n] * samples[reflect_index(base + n as isize, len)];
        }
    }

    fn spectrum(&self, samples: &[f64], t: usize, frame: &mut [f64], buf: &mut [Complex<f64>]) {
        self.windowed_frame(samples, t, frame);
        for (b, &v) in buf.iter_mut().zip(frame.iter()) {
            *b = Complex::new(v, 0.0);
        }
        self.fft.process(buf);
    }

    fn project(&self, spec: &[Complex<f64>], energies: &mut [f64]) {
        for (e, f) in energies.iter_mut().zip(&self.filters) {
            *e = f.weights.iter().zip(&spec[f.start..]).map(|(w, c)| w * c.norm_sqr()).sum();
        }
    }

    fn run(&self, samples: &[f64], keep: bool) -> (Vec<f64>, Option<MelCache>) {
        assert!(!samples.is_empty(), "mel of empty signal");
        let (n_fft, nb, nm) = (self.cfg.n_fft, self.cfg.n_bins(), self.cfg.n_mels);
        let n_frames = self.n_frames(samples.len());
        let mut frame = vec![0.0; n_fft];
        let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
        let mut energies = vec![0.0; n_frames * nm];
        let mut spectra = if keep { Vec::with_capacity(n_frames * nb) } else { Vec::new() };
        for t in 0..n_frames {
            self.spectrum(samples, t, &mut frame, &mut buf);
            self.project(&buf, &mut energies[t * nm..(t + 1) * nm]);
            if keep {
                spectra.extend_from_slice(&buf[..nb]);
            }
        }
        let floor = self.cfg.floor;
        let log_mel = energies.iter().map(|&e| e.max(floor).ln()).collect();
        let cache = keep.then(|| MelCache { len: samples.len(), spectra, energies });
        (log_mel, cache)
    }

    /// Log-mel frames of `samples`, `[n_frames, n_mels]` row-major.
    pub fn log_mel(&self, samples: &[f64]) -> Vec<f64> {
        self.run(samples, false).0
    }

    pub fn log_mel_with_cache(&self, samples: &[f64]) -> (Vec<f64>, MelCache) {
        let (v, c) = self.run(samples, true);
        (v, c.expect("cache requested"))
    }

    /// Pulls `grad` (shaped like the log-mel output) back to the samples.
    /// Entries clamped at the floor pass no gradient.
    pub fn backward(&self, cache: &MelCache, grad: &[f64]) -> Vec<f64> {
        let (n_fft, nb, nm) = (self.cfg.n_fft, self.cfg.n_bins(), self.cfg.n_mels);
        let n_frames = self.n_frames(cache.len);
        assert_eq!(grad.len(), n_frames * nm);
        let mut out = vec![0.0; cache.len];
        let mut gk = vec![0.0; nb];
        let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
        let half = (n_fft / 2) as isize;
        for t in 0..n_frames {
            gk.iter_mut().for_each(|v| *v = 0.0);
            let mut any = false;
            for (m, f) in self.filters.iter().enumerate() {
                let e = cache.energies[t * nm + m];
                let g = grad[t * nm + m];
                if e <= self.cfg.floor || g == 0.0 {
                    continue;
                }
                any = true;
                let scale = g / e;
                for (j, w) in f.weights.iter().enumerate() {
                    gk[f.start + j] += scale * w;
                }
            }
            if !any {
                continue;
            }
            let spec = &cache.spectra[t * nb..(t + 1) * nb];
            buf.iter_mut().for_each(|b| *b = Complex::new(0.0, 0.0));
            for k in 0..nb {
                buf[k] = spec[k] * gk[k];
            }
            self.ifft.process(&mut buf);
            let base = (t * self.cfg.hop_length) as isize - half;
            for n in 0..n_fft {
                let w = self.window[n];
                if w == 0.0 {
                    continue;
                }
                out[reflect_index(base + n as isize, cache.len)] += 2.0 * w * buf[n].re;
            }
        }
        out
    }

    pub fn compute(&self, buf: &AudioBuffer) -> Result<MelSpectrogram, SignalError> {
        if buf.sample_rate != self.cfg.sample_rate {
            return Err(SignalError::ConfigInvalid(format!(
                "audio is {} Hz, mel config expects {} Hz",
                buf.sample_rate, self.cfg.sample_rate
            )));
        }
        Ok(MelSpectrogram {
            frames: self.log_mel(&buf.samples),
            n_frames: self.n_frames(buf.len()),
            n_mels: self.cfg.n_mels,
            hop_length: self.cfg.hop_length,
            sample_rate: self.cfg.sample_rate,
        })
    }
}

pub fn mel_spectrogram(buf: &AudioBuffer, cfg: &MelConfig) -> Result<MelSpectrogram, SignalError> {
    MelExtractor::new(cfg)?.compute(buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mel_scale_round_trips() {
        for hz in [0.0, 100.0, 440.0, 8000.0] {
            assert!((mel_to_hz(hz_to_mel(hz)) - hz).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = MelConfig { hop_length: 2048, ..MelConfig::default() };
        assert!(matches!(MelExtractor::new(&cfg), Err(SignalError::ConfigInvalid(_))));
    }

    #[test]
    fn frame_count_is_ceil() {
        let ex = MelExtractor::new(&MelConfig::default()).unwrap();
        assert_eq!(ex.n_frames(320), 1);
        assert_eq!(ex.n_frames(321), 2);
        assert_eq!(ex.n_frames(16000), 50);
        assert_eq!(ex.log_mel(&[0.0; 5]).len(), 80);
    }
}
