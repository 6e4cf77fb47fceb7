//! Deterministic synthetic speech-like corpus.
//!
//! A speaker is a vocal-tract length factor, a spectral tilt, a formant
//! bandwidth factor and a fixed gain profile over the low overtones. An
//! utterance is a phone sequence (vowel formant targets or band-limited
//! noise) driven by an F0 random walk that is independent of the speaker.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{io_err, DataError, Manifest, ManifestRecord};
use crate::signal::{save_wav, AudioBuffer};

/// Vowel formants (F1, F2, F3) in Hz for a reference tract.
const VOWELS: [[f64; 3]; 8] = [
    [270.0, 2290.0, 3010.0],
    [530.0, 1840.0, 2480.0],
    [730.0, 1090.0, 2440.0],
    [570.0, 840.0, 2410.0],
    [300.0, 870.0, 2240.0],
    [390.0, 1990.0, 2550.0],
    [660.0, 1720.0, 2410.0],
    [520.0, 1190.0, 2390.0],
];
const FORMANT_GAINS: [f64; 3] = [1.0, 0.6, 0.3];
const FORMANT_BANDWIDTHS: [f64; 3] = [90.0, 120.0, 170.0];
/// Centre frequencies of the noise phones.
const FRICATIVES: [f64; 2] = [2600.0, 4800.0];

pub const NUM_PHONES: usize = VOWELS.len() + FRICATIVES.len();
pub const UNVOICED_PHONES: [usize; 2] = [VOWELS.len(), VOWELS.len() + 1];

const PROFILE_HARMONICS: usize = 8;
const MAX_HARMONIC_HZ: f64 = 7000.0;
const NOISE_LEVEL: f64 = 0.35;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub sample_rate: u32,
    pub duration_s: f64,
    pub hop_length: usize,
    pub f0_min: f64,
    pub f0_max: f64,
    pub min_phone_frames: usize,
    pub max_phone_frames: usize,
    /// Target RMS of every utterance.
    pub rms: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16000,
            duration_s: 2.0,
            hop_length: 320,
            f0_min: 80.0,
            f0_max: 300.0,
            min_phone_frames: 5,
            max_phone_frames: 12,
            rms: 0.1,
        }
    }
}

/// Ground truth stored next to each synthetic utterance, one entry per
/// codec frame (frame `t` centred on sample `t * hop_length`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub id: String,
    pub speaker: String,
    pub sample_rate: u32,
    pub hop_length: usize,
    /// Generating F0 in Hz, 0 on unvoiced frames.
    pub f0_hz: Vec<f64>,
    pub voiced: Vec<bool>,
    pub phones: Vec<usize>,
}

pub fn load_sidecar(path: impl AsRef<Path>) -> Result<Sidecar, DataError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| DataError::ParseError { line: 1, msg: e.to_string() })
}

#[derive(Clone, Debug)]
struct Speaker {
    tract: f64,
    tilt_db_per_oct: f64,
    bandwidth: f64,
    profile: [f64; PROFILE_HARMONICS],
}

impl Speaker {
    fn draw(index: usize, count: usize, rng: &mut ChaCha8Rng) -> Self {
        // Stratified tract factors keep speakers apart even for small counts.
        let u = (index as f64 + rng.gen_range(0.2..0.8)) / count as f64;
        let tract = 0.8 * (1.25f64 / 0.8).powf(u);
        let mut profile = [1.0; PROFILE_HARMONICS];
        for p in profile.iter_mut() {
            *p = 10f64.powf(rng.gen_range(-5.0..5.0) / 20.0);
        }
        Self { tract, tilt_db_per_oct: rng.gen_range(-12.0..-3.0), bandwidth: rng.gen_range(0.7..1.5), profile }
    }

    fn envelope(&self, phone: usize, f: f64) -> f64 {
        let formants = &VOWELS[phone];
        let mut e = 0.02;
        for i in 0..3 {
            let c = formants[i] * self.tract;
            let b = FORMANT_BANDWIDTHS[i] * self.bandwidth;
            e += FORMANT_GAINS[i] / (1.0 + ((f - c) / b).powi(2));
        }
        e * 10f64.powf(self.tilt_db_per_oct * (f / 100.0).max(1e-3).log2() / 20.0)
    }
}

struct Biquad {
    b: [f64; 3],
    a: [f64; 2],
}

impl Biquad {
    fn bandpass(fc: f64, q: f64, sr: f64) -> Self {
        let w0 = 2.0 * PI * fc / sr;
        let alpha = w0.sin() / (2.0 * q);
        let a0 = 1.0 + alpha;
        Self { b: [alpha / a0, 0.0, -alpha / a0], a: [-2.0 * w0.cos() / a0, (1.0 - alpha) / a0] }
    }

    fn run(&self, x: &[f64]) -> Vec<f64> {
        let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
        x.iter()
            .map(|&v| {
                let y = self.b[0] * v + self.b[1] * x1 + self.b[2] * x2 - self.a[0] * y1 - self.a[1] * y2;
                (x2, x1, y2, y1) = (x1, v, y1, y);
                y
            })
            .collect()
    }
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt()
}

/// Linear interpolation of per-frame values at sample `n`.
fn at_sample(values: &[f64], n: usize, hop: usize) -> f64 {
    let t = n / hop;
    let frac = (n % hop) as f64 / hop as f64;
    let a = values[t.min(values.len() - 1)];
    let b = values[(t + 1).min(values.len() - 1)];
    a + (b - a) * frac
}

fn utterance_rng(seed: u64, speaker: usize, utt: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + ((speaker as u64) << 20) + utt as u64);
    rng
}

fn speakers(num_speakers: usize, seed: u64) -> Vec<Speaker> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..num_speakers).map(|i| Speaker::draw(i, num_speakers, &mut rng)).collect()
}

pub fn speaker_name(s: usize) -> String {
    format!("spk{s:02}")
}

pub fn utterance_name(s: usize, u: usize) -> String {
    format!("spk{s:02}_utt{u:03}")
}

fn render(spk: &Speaker, speaker: usize, utt: usize, seed: u64, cfg: &SynthConfig) -> (AudioBuffer, Sidecar) {
    let mut rng = utterance_rng(seed, speaker, utt);
    let sr = cfg.sample_rate as f64;
    let hop = cfg.hop_length;
    let len = ((cfg.duration_s * sr).round() as usize).max(hop);
    let frames = len.div_ceil(hop);

    // Phone sequence at the frame rate.
    let mut phones = Vec::with_capacity(frames + cfg.max_phone_frames);
    while phones.len() < frames {
        let p = rng.gen_range(0..NUM_PHONES);
        let d = rng.gen_range(cfg.min_phone_frames..=cfg.max_phone_frames);
        phones.extend(std::iter::repeat(p).take(d));
    }
    phones.truncate(frames);

    // Smooth log-F0 walk (random velocity) with a mild pull toward its centre.
    let (lo, hi) = (cfg.f0_min.ln(), cfg.f0_max.ln());
    let centre = rng.gen_range((cfg.f0_min * 1.3).ln()..(cfg.f0_max / 1.3).ln());
    let step = Normal::new(0.0, 0.008).expect("valid sigma");
    let (mut lf, mut vel) = (centre, 0.0);
    let mut f0 = Vec::with_capacity(frames);
    for _ in 0..frames {
        vel = 0.9 * vel + step.sample(&mut rng);
        lf += vel + 0.03 * (centre - lf);
        if lf < lo {
            lf = 2.0 * lo - lf;
        }
        if lf > hi {
            lf = 2.0 * hi - lf;
        }
        f0.push(lf.exp());
    }

    let voiced: Vec<bool> = phones.iter().map(|p| !UNVOICED_PHONES.contains(p)).collect();
    let voicing: Vec<f64> = voiced.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();

    // Harmonic amplitudes per frame, each frame scaled to unit power.
    let n_harm = (MAX_HARMONIC_HZ / cfg.f0_min) as usize;
    let mut amps = vec![vec![0.0; frames]; n_harm];
    let mut last_vowel = phones.iter().copied().find(|p| !UNVOICED_PHONES.contains(p)).unwrap_or(0);
    for t in 0..frames {
        if voiced[t] {
            last_vowel = phones[t];
        }
        let mut power = 0.0;
        for (h, row) in amps.iter_mut().enumerate() {
            let f = (h + 1) as f64 * f0[t];
            if f >= MAX_HARMONIC_HZ {
                row[t] = 0.0;
                continue;
            }
            let prof = if h == 0 { 1.0 } else { spk.profile.get(h - 1).copied().unwrap_or(1.0) };
            let a = spk.envelope(last_vowel, f) * prof;
            row[t] = a;
            power += 0.5 * a * a;
        }
        let norm = power.sqrt().max(1e-12);
        amps.iter_mut().for_each(|row| row[t] /= norm);
    }

    let mut out = vec![0.0; len];
    let mut phase = rng.gen_range(0.0..2.0 * PI);
    for (n, o) in out.iter_mut().enumerate() {
        let fh = at_sample(&f0, n, hop);
        let v = at_sample(&voicing, n, hop);
        phase = (phase + 2.0 * PI * fh / sr) % (2.0 * PI);
        if v <= 0.0 {
            continue;
        }
        let mut s = 0.0;
        for (h, row) in amps.iter().enumerate() {
            if (h + 1) as f64 * fh >= MAX_HARMONIC_HZ {
                break;
            }
            s += at_sample(row, n, hop) * ((h + 1) as f64 * phase).sin();
        }
        *o = v * s;
    }

    let white: Vec<f64> = (0..len).map(|_| StandardNormal.sample(&mut rng)).collect();
    for (j, &fc) in FRICATIVES.iter().enumerate() {
        let phone = UNVOICED_PHONES[j];
        let weight: Vec<f64> = phones.iter().map(|&p| if p == phone { 1.0 } else { 0.0 }).collect();
        if weight.iter().all(|&w| w == 0.0) {
            continue;
        }
        let mut band = Biquad::bandpass((fc * spk.tract).min(0.45 * sr), 2.0, sr).run(&white);
        let r = rms(&band).max(1e-12);
        band.iter_mut().for_each(|b| *b *= NOISE_LEVEL / r);
        for (n, o) in out.iter_mut().enumerate() {
            *o += at_sample(&weight, n, hop) * band[n];
        }
    }

    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    let gain = (cfg.rms / rms(&out).max(1e-12)).min(0.95 / peak);
    out.iter_mut().for_each(|v| *v *= gain);

    let id = utterance_name(speaker, utt);
    let sidecar = Sidecar {
        id,
        speaker: speaker_name(speaker),
        sample_rate: cfg.sample_rate,
        hop_length: hop,
        f0_hz: f0.iter().zip(&voiced).map(|(&f, &v)| if v { f } else { 0.0 }).collect(),
        voiced,
        phones,
    };
    (AudioBuffer { samples: out, sample_rate: cfg.sample_rate }, sidecar)
}

/// Renders one utterance without touching the filesystem.
pub fn synthesize_utterance(num_speakers: usize, speaker: usize, utt: usize, seed: u64, cfg: &SynthConfig) -> (AudioBuffer, Sidecar) {
    let spk = speakers(num_speakers, seed);
    render(&spk[speaker], speaker, utt, seed, cfg)
}

/// Writes `<id>.wav`, `<id>.json` and `manifest.jsonl` under `out_dir`.
pub fn make_synthetic_corpus(
    out_dir: impl AsRef<Path>,
    num_speakers: usize,
    utts_per_speaker: usize,
    seed: u64,
    cfg: &SynthConfig,
) -> Result<Manifest, DataError> {
    let out_dir = out_dir.as_ref();
    if num_speakers == 0 || utts_per_speaker == 0 {
        return Err(DataError::Invalid("need at least one speaker and one utterance".into()));
    }
    if cfg.min_phone_frames == 0 || cfg.min_phone_frames > cfg.max_phone_frames || cfg.f0_min >= cfg.f0_max {
        return Err(DataError::Invalid("invalid synthesis configuration".into()));
    }
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let spk = speakers(num_speakers, seed);
    let mut records = Vec::with_capacity(num_speakers * utts_per_speaker);
    for (s, sp) in spk.iter().enumerate() {
        for u in 0..utts_per_speaker {
            let (buf, sidecar) = render(sp, s, u, seed, cfg);
            let wav = format!("{}.wav", sidecar.id);
            let wav_path = out_dir.join(&wav);
            save_wav(&buf, &wav_path).map_err(|e| match e {
                crate::signal::SignalError::IoFailure(source) => DataError::IoFailure { path: wav_path.clone(), source },
                other => DataError::Audio { id: sidecar.id.clone(), source: other },
            })?;
            let json_path = out_dir.join(format!("{}.json", sidecar.id));
            let text = serde_json::to_string(&sidecar).map_err(|e| DataError::Invalid(e.to_string()))?;
            fs::write(&json_path, text).map_err(io_err(&json_path))?;
            records.push(ManifestRecord {
                id: sidecar.id.clone(),
                speaker: sidecar.speaker.clone(),
                path: wav.into(),
                duration_s: buf.duration_s(),
            });
        }
    }
    let manifest = Manifest::new(records, out_dir)?;
    manifest.write(out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}
