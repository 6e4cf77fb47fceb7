use std::f64::consts::PI;

use anoncodec_core::signal::{
    align_f0_to_frames, extract_f0, load_wav, mel_spectrogram, save_wav, AudioBuffer, F0Contour, MelConfig,
    MelExtractor, SignalError, Yin, YinConfig,
};
use proptest::prelude::*;

const SR: u32 = 16000;

fn sine(freq: f64, secs: f64, amp: f64) -> Vec<f64> {
    let n = (secs * SR as f64) as usize;
    (0..n).map(|i| amp * (2.0 * PI * freq * i as f64 / SR as f64).sin()).collect()
}

fn write_raw_wav(path: &std::path::Path, channels: u16, samples: &[i16]) {
    let spec = hound::WavSpec { channels, sample_rate: SR, bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
    let mut w = hound::WavWriter::create(path, spec).unwrap();
    for &s in samples {
        w.write_sample(s).unwrap();
    }
    w.finalize().unwrap();
}

#[test]
fn load_wav_scales_by_32768() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("three.wav");
    write_raw_wav(&p, 1, &[0, 16384, -32768]);
    let buf = load_wav(&p).unwrap();
    assert_eq!(buf.samples, vec![0.0, 0.5, -1.0]);
    assert_eq!(buf.sample_rate, SR);
}

#[test]
fn load_wav_rejects_stereo_garbage_and_truncation() {
    let dir = tempfile::tempdir().unwrap();
    let stereo = dir.path().join("stereo.wav");
    write_raw_wav(&stereo, 2, &[1, 2, 3, 4]);
    assert!(matches!(load_wav(&stereo), Err(SignalError::UnsupportedEncoding(_))));

    let junk = dir.path().join("junk.wav");
    std::fs::write(&junk, b"this is not a wave file at all").unwrap();
    assert!(matches!(load_wav(&junk), Err(SignalError::NotWav(_))));

    let full = dir.path().join("full.wav");
    write_raw_wav(&full, 1, &[7; 100]);
    let bytes = std::fs::read(&full).unwrap();
    let cut = dir.path().join("cut.wav");
    std::fs::write(&cut, &bytes[..bytes.len() - 51]).unwrap();
    assert!(matches!(load_wav(&cut), Err(SignalError::TruncatedFile(_))));
}

#[test]
fn save_wav_clips_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.wav");
    save_wav(&AudioBuffer::new(vec![0.0], SR).unwrap(), &p).unwrap();
    let mut r = hound::WavReader::open(&p).unwrap();
    assert_eq!(r.samples::<i16>().map(|s| s.unwrap()).collect::<Vec<_>>(), vec![0]);

    save_wav(&AudioBuffer::new(vec![2.0], SR).unwrap(), &p).unwrap();
    let mut r = hound::WavReader::open(&p).unwrap();
    assert_eq!(r.samples::<i16>().map(|s| s.unwrap()).collect::<Vec<_>>(), vec![32767]);

    let tone = AudioBuffer::new(sine(440.0, 1.0, 0.9), SR).unwrap();
    save_wav(&tone, &p).unwrap();
    let back = load_wav(&p).unwrap();
    let max_err = tone.samples.iter().zip(&back.samples).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(max_err <= 1.0 / 32768.0, "max error {max_err}");
}

#[test]
fn mel_of_silence_is_log_floor() {
    let cfg = MelConfig::default();
    let mel = mel_spectrogram(&AudioBuffer::new(vec![0.0; 4000], SR).unwrap(), &cfg).unwrap();
    assert_eq!(mel.n_mels, 80);
    assert_eq!(mel.n_frames, 13);
    assert!(mel.frames.iter().all(|&v| v == cfg.floor.ln()));
}

/// Independent log-mel: explicit reflect-padded signal, naive DFT, triangles
/// built from the HTK formula.
fn oracle_log_mel(x: &[f64], cfg: &MelConfig) -> Vec<Vec<f64>> {
    let n_fft = cfg.n_fft;
    let half = n_fft / 2;
    let len = x.len();
    assert!(len > half, "oracle padding needs len > n_fft / 2");
    let mut padded: Vec<f64> = (1..=half).rev().map(|i| x[i]).collect();
    padded.extend_from_slice(x);
    padded.extend((1..=half).map(|i| x[len - 1 - i]));
    let hann: Vec<f64> = (0..n_fft).map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / n_fft as f64).cos()).collect();
    let mel = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
    let inv = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
    let top = mel(cfg.sample_rate as f64 / 2.0);
    let pts: Vec<f64> = (0..cfg.n_mels + 2).map(|i| inv(top * i as f64 / (cfg.n_mels + 1) as f64)).collect();
    let n_frames = len.div_ceil(cfg.hop_length);
    (0..n_frames)
        .map(|t| {
            let frame: Vec<f64> = (0..n_fft).map(|n| hann[n] * padded[t * cfg.hop_length + n]).collect();
            let power: Vec<f64> = (0..=half)
                .map(|k| {
                    let (mut re, mut im) = (0.0, 0.0);
                    for (n, v) in frame.iter().enumerate() {
                        let a = -2.0 * PI * (k * n) as f64 / n_fft as f64;
                        re += v * a.cos();
                        im += v * a.sin();
                    }
                    re * re + im * im
                })
                .collect();
            (0..cfg.n_mels)
                .map(|m| {
                    let e: f64 = (0..=half)
                        .map(|k| {
                            let f = k as f64 * cfg.sample_rate as f64 / n_fft as f64;
                            let w = ((f - pts[m]) / (pts[m + 1] - pts[m])).min((pts[m + 2] - f) / (pts[m + 2] - pts[m + 1]));
                            w.max(0.0) * power[k]
                        })
                        .sum();
                    e.max(cfg.floor).ln()
                })
                .collect()
        })
        .collect()
}

fn argmax(v: &[f64]) -> usize {
    v.iter().enumerate().fold(0, |b, (i, &x)| if x > v[b] { i } else { b })
}

#[test]
fn pure_tone_argmax_matches_dft_oracle_and_nearest_center() {
    let cfg = MelConfig::default();
    let ex = MelExtractor::new(&cfg).unwrap();
    for freq in [440.0, 1000.0, 2500.0] {
        let x = sine(freq, 0.1, 0.5);
        let mel = ex.log_mel(&x);
        let oracle = oracle_log_mel(&x, &cfg);
        let nearest = argmax(&ex.centers_hz().iter().map(|c| -(c - freq).abs()).collect::<Vec<_>>());
        for (t, row) in oracle.iter().enumerate() {
            let got = &mel[t * 80..(t + 1) * 80];
            for (a, b) in got.iter().zip(row) {
                assert!((a - b).abs() < 1e-6 * (1.0 + b.abs()), "frame {t}: {a} vs {b}");
            }
            assert_eq!(argmax(got), argmax(row));
            assert_eq!(argmax(got), nearest, "{freq} Hz frame {t}");
        }
    }
}

#[test]
fn mel_frame_count_tracks_codec_frames() {
    let ex = MelExtractor::new(&MelConfig::default()).unwrap();
    for len in [1usize, 5, 319, 320, 321, 640, 16000, 16001] {
        assert_eq!(ex.log_mel(&vec![0.1; len]).len() / 80, len.div_ceil(320));
    }
}

#[test]
fn mel_backward_matches_finite_differences() {
    let cfg = MelConfig { n_fft: 64, win_length: 48, hop_length: 16, n_mels: 8, ..MelConfig::default() };
    let ex = MelExtractor::new(&cfg).unwrap();
    let x: Vec<f64> = (0..150).map(|i| (i as f64 * 0.37).sin() * 0.3 + (i as f64 * 1.9).cos() * 0.2).collect();
    let (y, cache) = ex.log_mel_with_cache(&x);
    let dir: Vec<f64> = (0..y.len()).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.5).collect();
    let g = ex.backward(&cache, &dir);
    let f = |x: &[f64]| ex.log_mel(x).iter().zip(&dir).map(|(a, b)| a * b).sum::<f64>();
    let eps = 1e-6;
    let mut num = vec![0.0; x.len()];
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp[i] += eps;
        let mut xm = x.clone();
        xm[i] -= eps;
        num[i] = (f(&xp) - f(&xm)) / (2.0 * eps);
    }
    let diff: f64 = g.iter().zip(&num).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale = num.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(diff / scale < 1e-4, "rel err {}", diff / scale);
}

fn sawtooth(freq: f64, secs: f64) -> Vec<f64> {
    let n = (secs * SR as f64) as usize;
    (0..n).map(|i| 0.5 * (2.0 * ((i as f64 * freq / SR as f64) % 1.0) - 1.0)).collect()
}

#[test]
fn yin_silence_is_unvoiced() {
    let f0 = extract_f0(&AudioBuffer::new(vec![0.0; 8000], SR).unwrap(), 320, 50.0, 550.0).unwrap();
    assert_eq!(f0.len(), 25);
    assert!(f0.voiced.iter().all(|v| !v) && f0.hz.iter().all(|&h| h == 0.0));
}

#[test]
fn yin_sawtooth_220_within_one_percent() {
    let f0 = extract_f0(&AudioBuffer::new(sawtooth(220.0, 1.0), SR).unwrap(), 320, 50.0, 550.0).unwrap();
    assert!(f0.voiced_count() >= 45);
    for (&h, &v) in f0.hz.iter().zip(&f0.voiced) {
        if v {
            assert!((h - 220.0).abs() <= 2.2, "{h}");
        }
    }
}

#[test]
fn yin_tones_80_to_400_within_one_percent() {
    for freq in [80.0, 100.0, 150.0, 220.0, 300.0, 400.0] {
        let f0 = extract_f0(&AudioBuffer::new(sine(freq, 0.5, 0.5), SR).unwrap(), 320, 50.0, 550.0).unwrap();
        let inner = &f0.hz[2..f0.len() - 2];
        assert!(f0.voiced[2..f0.len() - 2].iter().all(|&v| v), "{freq} Hz not voiced");
        for &h in inner {
            assert!((h - freq).abs() <= 0.01 * freq, "{freq} Hz estimated {h}");
        }
    }
}

#[test]
fn yin_tracks_chirp_within_three_percent() {
    let secs = 2.0;
    let (f0, f1) = (100.0, 300.0);
    let n = (secs * SR as f64) as usize;
    let rate = (f1 - f0) / secs;
    let x: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / SR as f64;
            0.5 * (2.0 * PI * (f0 * t + 0.5 * rate * t * t)).sin()
        })
        .collect();
    let track = extract_f0(&AudioBuffer::new(x, SR).unwrap(), 320, 50.0, 550.0).unwrap();
    for t in 3..track.len() - 3 {
        let inst = f0 + rate * (t * 320) as f64 / SR as f64;
        assert!(track.voiced[t]);
        assert!((track.hz[t] - inst).abs() <= 0.03 * inst, "frame {t}: {} vs {inst}", track.hz[t]);
    }
}

#[test]
fn yin_is_amplitude_invariant() {
    let x = sawtooth(180.0, 0.5);
    let quiet: Vec<f64> = x.iter().map(|v| v * 0.1).collect();
    let yin = Yin::new(&YinConfig::default(), SR).unwrap();
    let a = yin.run(&x, 320);
    let b = yin.run(&quiet, 320);
    assert_eq!(a.voiced, b.voiced);
    for (p, q) in a.hz.iter().zip(&b.hz) {
        assert!((p - q).abs() < 1e-9);
    }
}

#[test]
fn yin_rejects_bad_range() {
    let buf = AudioBuffer::new(vec![0.0; 100], SR).unwrap();
    assert!(matches!(extract_f0(&buf, 320, 300.0, 100.0), Err(SignalError::ConfigInvalid(_))));
    assert!(matches!(extract_f0(&buf, 320, 50.0, 9000.0), Err(SignalError::ConfigInvalid(_))));
}

fn contour(hz: &[f64]) -> F0Contour {
    F0Contour { hz: hz.to_vec(), voiced: hz.iter().map(|&h| h > 0.0).collect() }
}

#[test]
fn align_identity_constant_and_downsample() {
    let c = contour(&[100.0, 0.0, 120.0, 130.0, 0.0, 150.0]);
    assert_eq!(align_f0_to_frames(&c, 6).unwrap(), c);
    let flat = contour(&[150.0; 7]);
    for n in [1, 3, 7, 20] {
        assert!(align_f0_to_frames(&flat, n).unwrap().hz.iter().all(|&h| h == 150.0));
    }
    // 2:1: output frame i sits on input frame 2i.
    let down = align_f0_to_frames(&c, 3).unwrap();
    assert_eq!(down, contour(&[100.0, 120.0, 0.0]));
    assert!(matches!(align_f0_to_frames(&contour(&[]), 3), Err(SignalError::EmptyContour)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn log_mel_shifts_by_two_log_c(c in 0.05f64..8.0, seed in 0u64..1000) {
        let ex = MelExtractor::new(&MelConfig::default()).unwrap();
        let x: Vec<f64> = (0..3000).map(|i| ((i as u64 * 2654435761 + seed) % 1000) as f64 / 2000.0 - 0.25).collect();
        let scaled: Vec<f64> = x.iter().map(|v| v * c).collect();
        let (a, b) = (ex.log_mel(&x), ex.log_mel(&scaled));
        let floor = ex.config().floor.ln();
        for (p, q) in a.iter().zip(&b) {
            if *p > floor + 1e-9 && *q > floor + 1e-9 {
                prop_assert!((q - p - 2.0 * c.ln()).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn concatenated_frame_count_is_additive(a in 1usize..5000, b in 1usize..5000) {
        let ex = MelExtractor::new(&MelConfig::default()).unwrap();
        let (ta, tb, tab) = (ex.n_frames(a), ex.n_frames(b), ex.n_frames(a + b));
        prop_assert!(tab + 1 >= ta + tb && tab <= ta + tb + 1);
    }
}
