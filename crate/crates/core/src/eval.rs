//! Verification trials, EER and the utility proxies (teacher-free token
//! preservation through the codec's own first quantizer, F0 correlation and
//! mel distortion).

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anonymize::{anonymize_utterance, utterance_rng, AnonError, AnonSpec, SpeakerPool};
use crate::data::{Corpus, Manifest};
use crate::model::{cosine, CodecModel, ModelError};
use crate::signal::{AudioBuffer, MelExtractor, Yin, YinConfig};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no embedding for utterance {0:?}")]
    MissingEmbedding(String),
    #[error("need at least one target and one non-target trial (got {targets} / {nontargets})")]
    DegenerateTrials { targets: usize, nontargets: usize },
    #[error("only {0} frames voiced in both contours, need 2")]
    InsufficientVoicedFrames(usize),
    #[error("F0 contour has no variance over the common voiced frames")]
    ConstantContour,
    #[error("trial list line {line}: {msg}")]
    TrialParse { line: usize, msg: String },
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Anon(#[from] AnonError),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trial {
    pub enroll: String,
    pub test: String,
    pub target: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TrialList {
    pub trials: Vec<Trial>,
}

impl TrialList {
    pub fn counts(&self) -> (usize, usize) {
        let t = self.trials.iter().filter(|t| t.target).count();
        (t, self.trials.len() - t)
    }

    /// One trial per line: `enroll_id test_id target|nontarget`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.trials {
            let kind = if t.target { "target" } else { "nontarget" };
            writeln!(s, "{} {} {kind}", t.enroll, t.test).expect("write to string");
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, EvalError> {
        let mut trials = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            let err = |msg: &str| EvalError::TrialParse { line: i + 1, msg: msg.to_string() };
            let [enroll, test, kind] = parts[..] else {
                return Err(err("expected three fields"));
            };
            let target = match kind {
                "target" => true,
                "nontarget" => false,
                _ => return Err(err("third field must be target or nontarget")),
            };
            trials.push(Trial { enroll: enroll.into(), test: test.into(), target });
        }
        Ok(Self { trials })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, EvalError> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), EvalError> {
        Ok(fs::write(path, self.to_text())?)
    }
}

/// Seeded trials over distinct utterance pairs: targets share a speaker,
/// non-targets do not. Counts are capped by the available pairs.
pub fn generate_trials(manifest: &Manifest, num_target: usize, num_nontarget: usize, seed: u64) -> TrialList {
    let recs = &manifest.records;
    let mut same = Vec::new();
    let mut diff = Vec::new();
    for (i, a) in recs.iter().enumerate() {
        for (j, b) in recs.iter().enumerate() {
            if i == j {
                continue;
            }
            if a.speaker == b.speaker {
                same.push((i, j));
            } else {
                diff.push((i, j));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pick = |pairs: &[(usize, usize)], n: usize, target: bool| -> Vec<Trial> {
        let n = n.min(pairs.len());
        let mut idx = sample(&mut rng, pairs.len(), n).into_vec();
        idx.sort_unstable();
        idx.into_iter()
            .map(|k| Trial { enroll: recs[pairs[k].0].id.clone(), test: recs[pairs[k].1].id.clone(), target })
            .collect()
    };
    let mut trials = pick(&same, num_target, true);
    trials.extend(pick(&diff, num_nontarget, false));
    TrialList { trials }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredTrial {
    pub enroll: String,
    pub test: String,
    pub target: bool,
    pub score: f64,
}

/// Cosine score of every trial.
pub fn score_trials(
    trials: &TrialList,
    enroll: &HashMap<String, Vec<f64>>,
    test: &HashMap<String, Vec<f64>>,
) -> Result<Vec<ScoredTrial>, EvalError> {
    trials
        .trials
        .iter()
        .map(|t| {
            let e = enroll.get(&t.enroll).ok_or_else(|| EvalError::MissingEmbedding(t.enroll.clone()))?;
            let s = test.get(&t.test).ok_or_else(|| EvalError::MissingEmbedding(t.test.clone()))?;
            Ok(ScoredTrial { enroll: t.enroll.clone(), test: t.test.clone(), target: t.target, score: cosine(e, s) })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Eer {
    pub eer_percent: f64,
    pub threshold: f64,
}

/// Equal error rate of `(score, is_target)` pairs.
///
/// A trial is accepted when `score >= threshold`. Thresholds run over the
/// distinct scores (ascending) and then +inf; the EER is read where
/// `FAR - FRR` first reaches zero, linearly interpolated between the two
/// operating points that bracket the sign change.
pub fn compute_eer(scored: &[(f64, bool)]) -> Result<Eer, EvalError> {
    let n_t = scored.iter().filter(|s| s.1).count();
    let n_n = scored.len() - n_t;
    if n_t == 0 || n_n == 0 {
        return Err(EvalError::DegenerateTrials { targets: n_t, nontargets: n_n });
    }
    let mut sorted: Vec<(f64, bool)> = scored.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Operating points: (threshold, FAR, FRR).
    let mut points = Vec::with_capacity(sorted.len() + 1);
    let (mut below_t, mut below_n) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let th = sorted[i].0;
        points.push((th, (n_n - below_n) as f64 / n_n as f64, below_t as f64 / n_t as f64));
        while i < sorted.len() && sorted[i].0 == th {
            if sorted[i].1 {
                below_t += 1;
            } else {
                below_n += 1;
            }
            i += 1;
        }
    }
    points.push((f64::INFINITY, 0.0, 1.0));

    for k in 0..points.len() {
        let (th, far, frr) = points[k];
        let d = far - frr;
        if d == 0.0 {
            return Ok(Eer { eer_percent: 100.0 * far, threshold: th });
        }
        if let Some(&(th2, far2, frr2)) = points.get(k + 1) {
            let d2 = far2 - frr2;
            if d > 0.0 && d2 < 0.0 {
                let lam = d / (d - d2);
                let threshold = if th2.is_finite() { th + lam * (th2 - th) } else { th };
                return Ok(Eer { eer_percent: 100.0 * (far + lam * (far2 - far)), threshold });
            }
        }
    }
    unreachable!("FAR - FRR runs from 1 to -1")
}

pub fn eer_of(scored: &[ScoredTrial]) -> Result<Eer, EvalError> {
    compute_eer(&scored.iter().map(|s| (s.score, s.target)).collect::<Vec<_>>())
}

/// Fraction of frames whose first-layer quantizer index agrees between the
/// two signals, over the shorter frame count.
pub fn token_preservation(orig: &AudioBuffer, anon: &AudioBuffer, model: &CodecModel) -> Result<f64, EvalError> {
    let a = model.analyze(orig)?;
    let b = model.analyze(anon)?;
    Ok(agreement(&a.quant.indices[0], &b.quant.indices[0]))
}

pub fn agreement(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len().min(b.len());
    if n == 0 {
        return 0.0;
    }
    a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / n as f64
}

/// Probability that two independent draws from the empirical distribution
/// of `tokens` collide.
pub fn collision_rate(tokens: &[usize]) -> f64 {
    if tokens.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for &t in tokens {
        *counts.entry(t).or_default() += 1;
    }
    let n = tokens.len() as f64;
    counts.values().map(|&c| (c as f64 / n).powi(2)).sum()
}

/// Pearson correlation of two F0 tracks over frames voiced in both.
pub fn pearson_voiced(a: &[f64], av: &[bool], b: &[f64], bv: &[bool]) -> Result<f64, EvalError> {
    let pairs: Vec<(f64, f64)> =
        (0..a.len().min(b.len())).filter(|&t| av[t] && bv[t]).map(|t| (a[t], b[t])).collect();
    if pairs.len() < 2 {
        return Err(EvalError::InsufficientVoicedFrames(pairs.len()));
    }
    let n = pairs.len() as f64;
    let ma = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let mb = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in &pairs {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return Err(EvalError::ConstantContour);
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// F0 correlation of two buffers under YIN at the codec frame rate.
pub fn f0_correlation(orig: &AudioBuffer, anon: &AudioBuffer, yin: &YinConfig, hop: usize) -> Result<f64, EvalError> {
    let y = Yin::new(yin, orig.sample_rate).map_err(|e| EvalError::Model(ModelError::ConfigInvalid(e.to_string())))?;
    let a = y.run(&orig.samples, hop);
    let b = y.run(&anon.samples, hop);
    pearson_voiced(&a.hz, &a.voiced, &b.hz, &b.voiced)
}

/// Mean absolute log-mel difference; `anon` is trimmed or zero-padded.
pub fn mel_distortion(orig: &AudioBuffer, anon: &AudioBuffer, mel: &MelExtractor) -> f64 {
    let mut y = anon.samples.clone();
    y.resize(orig.len(), 0.0);
    let a = mel.log_mel(&orig.samples);
    let b = mel.log_mel(&y);
    let n = a.len().max(1) as f64;
    a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / n
}

/// Equal-RMS white noise with the length of `like`.
pub fn white_noise_like<R: Rng>(like: &AudioBuffer, rng: &mut R) -> AudioBuffer {
    let amp = like.rms() * 3f64.sqrt();
    let samples = (0..like.len()).map(|_| rng.gen_range(-amp..=amp)).collect();
    AudioBuffer { samples, sample_rate: like.sample_rate }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Lazy-attacker EER: original enrollment vs anonymized test.
    pub eer_percent: f64,
    pub eer_threshold: f64,
    /// Same trials with original test audio.
    pub baseline_eer_percent: f64,
    /// Proxy for intelligibility: first-quantizer index agreement.
    pub token_preservation: f64,
    /// Token agreement of equal-RMS white noise against the original.
    pub token_chance: f64,
    /// Expected agreement of two independent draws from the pooled
    /// first-quantizer usage of the original utterances.
    pub token_collision_rate: f64,
    /// Proxy for emotion preservation: voiced-frame F0 Pearson r.
    pub f0_correlation: f64,
    pub mel_distortion: f64,
    pub num_utterances: usize,
    pub num_target_trials: usize,
    pub num_nontarget_trials: usize,
    /// Utterances whose F0 correlation was undefined; they count as 0.
    pub f0_undefined: usize,
    pub spec: AnonSpec,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain struct serializes")
    }
}

/// Everything the privacy/utility evaluation produces.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: MetricReport,
    pub anonymized_scores: Vec<ScoredTrial>,
    pub baseline_scores: Vec<ScoredTrial>,
    pub anonymized: Vec<AudioBuffer>,
}

const NOISE_STREAM_SALT: u64 = 0x6e6f_6973_6521;

pub fn privacy_report(
    corpus: &Corpus,
    model: &CodecModel,
    pool: &SpeakerPool,
    spec: &AnonSpec,
    trials: &TrialList,
) -> Result<Evaluation, EvalError> {
    let (n_t, n_n) = trials.counts();
    if n_t == 0 || n_n == 0 {
        return Err(EvalError::DegenerateTrials { targets: n_t, nontargets: n_n });
    }
    let cfg = model.config();
    let hop = cfg.hop();
    let mut enroll = HashMap::new();
    let mut test_orig = HashMap::new();
    let mut test_anon = HashMap::new();
    let mut anonymized = Vec::with_capacity(corpus.len());
    let (mut tok, mut chance, mut f0c, mut mel_d) = (0.0, 0.0, 0.0, 0.0);
    let mut f0_undefined = 0;
    let mut usage = Vec::new();

    for (r, buf) in corpus.manifest.records.iter().zip(&corpus.audio) {
        let emb = model.embed(buf)?.vector;
        enroll.insert(r.id.clone(), emb.clone());
        test_orig.insert(r.id.clone(), emb);

        let mut rng = utterance_rng(spec.seed, &r.id);
        let out = anonymize_utterance(buf, model, pool, spec, &mut rng)?;
        test_anon.insert(r.id.clone(), model.embed(&out.audio)?.vector);

        usage.extend_from_slice(&out.codes[0]);
        let anon_codes = model.analyze(&out.audio)?.quant.indices;
        tok += agreement(&out.codes[0], &anon_codes[0]);
        let mut noise_rng = utterance_rng(spec.seed ^ NOISE_STREAM_SALT, &r.id);
        let noise = white_noise_like(buf, &mut noise_rng);
        chance += agreement(&out.codes[0], &model.analyze(&noise)?.quant.indices[0]);
        match f0_correlation(buf, &out.audio, &cfg.f0, hop) {
            Ok(c) => f0c += c,
            Err(EvalError::InsufficientVoicedFrames(_) | EvalError::ConstantContour) => f0_undefined += 1,
            Err(e) => return Err(e),
        }
        mel_d += mel_distortion(buf, &out.audio, model.mel());
        anonymized.push(out.audio);
    }

    let anonymized_scores = score_trials(trials, &enroll, &test_anon)?;
    let baseline_scores = score_trials(trials, &enroll, &test_orig)?;
    let eer = eer_of(&anonymized_scores)?;
    let base = eer_of(&baseline_scores)?;
    let n = corpus.len().max(1) as f64;
    let report = MetricReport {
        eer_percent: eer.eer_percent,
        eer_threshold: eer.threshold,
        baseline_eer_percent: base.eer_percent,
        token_preservation: tok / n,
        token_chance: chance / n,
        token_collision_rate: collision_rate(&usage),
        f0_correlation: f0c / n,
        mel_distortion: mel_d / n,
        num_utterances: corpus.len(),
        num_target_trials: n_t,
        num_nontarget_trials: n_n,
        f0_undefined,
        spec: spec.clone(),
    };
    Ok(Evaluation { report, anonymized_scores, baseline_scores, anonymized })
}
