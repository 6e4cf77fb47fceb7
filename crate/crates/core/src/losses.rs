//! Training objectives: speaker, linguistic and emotion distillation,
//! reconstruction, adversarial terms, commitment and the weighted mixture.

use std::sync::Arc;

use anoncodec_autograd::{Bound, CustomOp, Graph, Tensor, Var};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Codec, ScaleOutput};
use crate::quantize::QuantizationResult;
use crate::signal::{AudioBuffer, F0Contour, MelCache, MelConfig, MelExtractor};

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("speaker label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("discriminator scale mismatch: {real} real vs {fake} fake")]
    ScaleMismatch { real: usize, fake: usize },
    #[error("loss term {0} is not finite")]
    NonFiniteTerm(&'static str),
}

/// Mixture weights of the generator objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub rec: f64,
    pub adv: f64,
    pub com: f64,
    pub spk: f64,
    pub lin: f64,
    pub emo: f64,
    /// Multiplies feature matching inside the adversarial group.
    pub feature_match: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { rec: 45.0, adv: 1.0, com: 0.1, spk: 1.0, lin: 1.0, emo: 1.0, feature_match: 2.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in self.named() {
            if !v.is_finite() || v < 0.0 {
                return Err(format!("loss weight {name} must be finite and >= 0, got {v}"));
            }
        }
        Ok(())
    }

    fn named(&self) -> [(&'static str, f64); 7] {
        [
            ("rec", self.rec),
            ("adv", self.adv),
            ("com", self.com),
            ("spk", self.spk),
            ("lin", self.lin),
            ("emo", self.emo),
            ("feature_match", self.feature_match),
        ]
    }
}

/// Scalar values of every term for one step, written as one JSON line.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub rec: f64,
    pub adv: f64,
    pub feat_match: f64,
    pub com: f64,
    pub spk: f64,
    pub lin: f64,
    pub emo: f64,
    pub disc: f64,
    pub total: f64,
}

impl LossReport {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("plain struct serializes")
    }

    /// Weighted generator total from the stored terms.
    pub fn weighted_total(&self, w: &LossWeights) -> Result<f64, LossError> {
        for (name, v) in [
            ("rec", self.rec),
            ("adv", self.adv),
            ("feat_match", self.feat_match),
            ("com", self.com),
            ("spk", self.spk),
            ("lin", self.lin),
            ("emo", self.emo),
        ] {
            if !v.is_finite() {
                return Err(LossError::NonFiniteTerm(name));
            }
        }
        Ok(w.rec * self.rec
            + w.adv * (self.adv + w.feature_match * self.feat_match)
            + w.com * self.com
            + w.spk * self.spk
            + w.lin * self.lin
            + w.emo * self.emo)
    }
}

/// Graph nodes of the generator-side terms.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorTerms {
    pub rec: Var,
    pub adv: Var,
    pub feat_match: Var,
    pub com: Var,
    pub spk: Var,
    pub lin: Var,
    pub emo: Var,
}

pub fn total_loss(g: &mut Graph, t: &GeneratorTerms, w: &LossWeights) -> Result<Var, LossError> {
    for (name, v) in [
        ("rec", t.rec),
        ("adv", t.adv),
        ("feat_match", t.feat_match),
        ("com", t.com),
        ("spk", t.spk),
        ("lin", t.lin),
        ("emo", t.emo),
    ] {
        if !g.value(v).item().is_finite() {
            return Err(LossError::NonFiniteTerm(name));
        }
    }
    let fm = g.scale(t.feat_match, w.feature_match);
    let adv = g.add(t.adv, fm);
    let parts = [(t.rec, w.rec), (adv, w.adv), (t.com, w.com), (t.spk, w.spk), (t.lin, w.lin), (t.emo, w.emo)];
    let mut total = g.scale(parts[0].0, parts[0].1);
    for &(v, wt) in &parts[1..] {
        let s = g.scale(v, wt);
        total = g.add(total, s);
    }
    Ok(total)
}

/// Speaker distillation from classifier logits `[B, S]` of two segments and
/// the two embeddings `[B, d]`: `CE(l1) + CE(l2) - cos(s1, s2)`, averaged
/// over the batch.
pub fn spk_loss_from_logits(
    g: &mut Graph,
    logits1: Var,
    logits2: Var,
    s1: Var,
    s2: Var,
    labels: &[usize],
) -> Result<Var, LossError> {
    let (b, classes) = g.value(logits1).dims2();
    if labels.len() != b || g.value(logits2).dims2() != (b, classes) || g.shape(s1) != g.shape(s2) {
        return Err(LossError::LengthMismatch(format!("{} labels for batch {b}", labels.len())));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(LossError::LabelOutOfRange { label, classes });
    }
    let ce1 = g.cross_entropy(logits1, labels, None);
    let ce2 = g.cross_entropy(logits2, labels, None);
    let cos = g.cosine_rows(s1, s2);
    let cos = g.mean(cos);
    let ce = g.add(ce1, ce2);
    Ok(g.sub(ce, cos))
}

pub fn spk_loss(g: &mut Graph, codec: &Codec, p: &Bound, s1: Var, s2: Var, labels: &[usize]) -> Result<Var, LossError> {
    let l1 = codec.speaker_classify(g, p, s1);
    let l2 = codec.speaker_classify(g, p, s2);
    spk_loss_from_logits(g, l1, l2, s1, s2, labels)
}

/// Mean cross-entropy of teacher tokens under `[T, K]` logits, over frames
/// whose mask entry is true.
pub fn lin_loss(g: &mut Graph, logits: Var, tokens: &[usize], mask: Option<&[bool]>) -> Result<Var, LossError> {
    let (n, k) = g.value(logits).dims2();
    if tokens.len() != n || mask.is_some_and(|m| m.len() != n) {
        return Err(LossError::LengthMismatch(format!("{} tokens / {n} logit rows", tokens.len())));
    }
    if let Some(&label) = tokens.iter().find(|&&t| t >= k) {
        return Err(LossError::LabelOutOfRange { label, classes: k });
    }
    let weights: Option<Vec<f64>> = mask.map(|m| m.iter().map(|&on| if on { 1.0 } else { 0.0 }).collect());
    Ok(g.cross_entropy(logits, tokens, weights.as_deref()))
}

const EMO_NORM_EPS: f64 = 1e-12;

/// `1 - cos` between mean-centered F0 and projection over the voiced frames
/// of each group of `group_len` consecutive entries, averaged over groups
/// that carry contour information.
struct EmoCosine {
    targets: Vec<f64>,
    voiced: Vec<bool>,
    group_len: usize,
}

struct GroupStats {
    a: Vec<f64>,
    b: Vec<f64>,
    idx: Vec<usize>,
    na: f64,
    nb: f64,
    dot: f64,
}

impl EmoCosine {
    fn groups<'a>(&'a self, proj: &'a [f64]) -> impl Iterator<Item = GroupStats> + 'a {
        (0..self.targets.len() / self.group_len).filter_map(move |gi| {
            let range = gi * self.group_len..(gi + 1) * self.group_len;
            let idx: Vec<usize> = range.filter(|&i| self.voiced[i]).collect();
            if idx.len() < 2 {
                return None;
            }
            let n = idx.len() as f64;
            let ma = idx.iter().map(|&i| self.targets[i]).sum::<f64>() / n;
            let mb = idx.iter().map(|&i| proj[i]).sum::<f64>() / n;
            let a: Vec<f64> = idx.iter().map(|&i| self.targets[i] - ma).collect();
            let b: Vec<f64> = idx.iter().map(|&i| proj[i] - mb).collect();
            let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            if na < 1e-9 {
                return None;
            }
            let nb = (b.iter().map(|v| v * v).sum::<f64>() + EMO_NORM_EPS).sqrt();
            let dot = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            Some(GroupStats { a, b, idx, na, nb, dot })
        })
    }

    fn value(&self, proj: &[f64]) -> f64 {
        let (mut sum, mut count) = (0.0, 0usize);
        for s in self.groups(proj) {
            sum += 1.0 - s.dot / (s.na * s.nb);
            count += 1;
        }
        if count == 0 {
            0.0
        } else {
            sum / count as f64
        }
    }
}

impl CustomOp for EmoCosine {
    fn name(&self) -> &'static str {
        "emo_cosine"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let proj = inputs[0].data();
        let stats: Vec<GroupStats> = self.groups(proj).collect();
        let mut out = vec![0.0; proj.len()];
        if !stats.is_empty() {
            let scale = grad.item() / stats.len() as f64;
            for s in &stats {
                // Both a and b are centered, so the centering Jacobian acts as identity.
                let k1 = 1.0 / (s.na * s.nb);
                let k2 = s.dot / (s.na * s.nb.powi(3));
                for (j, &i) in s.idx.iter().enumerate() {
                    out[i] = -scale * (s.a[j] * k1 - s.b[j] * k2);
                }
            }
        }
        vec![Some(Tensor::new(inputs[0].shape().to_vec(), out))]
    }
}

/// Emotion distillation for one or more equal-length contours laid out
/// back to back in `proj` (`[n]` or `[n, 1]`).
pub fn emo_loss(g: &mut Graph, proj: Var, f0: &[&F0Contour]) -> Result<Var, LossError> {
    let n: usize = g.value(proj).data().len();
    let group_len = f0.first().map_or(0, |c| c.len());
    if f0.iter().any(|c| c.len() != group_len) || group_len * f0.len() != n {
        return Err(LossError::LengthMismatch(format!("{n} projections for {} contours of {group_len}", f0.len())));
    }
    if n == 0 {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let op = EmoCosine {
        targets: f0.iter().flat_map(|c| c.hz.iter().copied()).collect(),
        voiced: f0.iter().flat_map(|c| c.voiced.iter().copied()).collect(),
        group_len,
    };
    let v = op.value(g.value(proj).data());
    Ok(g.custom(&[proj], Tensor::scalar(v), Box::new(op)))
}

/// Differentiable log-mel of `[B, 1, L]` waveforms, output `[B, T, n_mels]`.
struct LogMelOp {
    mel: Arc<MelExtractor>,
    caches: Vec<MelCache>,
}

impl CustomOp for LogMelOp {
    fn name(&self) -> &'static str {
        "log_mel"
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (b, t, m) = output.dims3();
        let len = inputs[0].shape()[2];
        let mut out = Vec::with_capacity(b * len);
        for (i, cache) in self.caches.iter().enumerate() {
            out.extend(self.mel.backward(cache, &grad.data()[i * t * m..(i + 1) * t * m]));
        }
        vec![Some(Tensor::new(inputs[0].shape().to_vec(), out))]
    }
}

pub fn log_mel(g: &mut Graph, mel: &Arc<MelExtractor>, wav: Var) -> Var {
    let (b, c, len) = g.value(wav).dims3();
    assert_eq!(c, 1, "log_mel expects mono [batch, 1, samples]");
    let nm = mel.config().n_mels;
    let t = mel.n_frames(len);
    let mut data = Vec::with_capacity(b * t * nm);
    let mut caches = Vec::with_capacity(b);
    for row in g.value(wav).data().chunks_exact(len) {
        let (v, cache) = mel.log_mel_with_cache(row);
        data.extend(v);
        caches.push(cache);
    }
    let value = Tensor::new([b, t, nm], data);
    g.custom(&[wav], value, Box::new(LogMelOp { mel: Arc::clone(mel), caches }))
}

/// Reconstruction loss between target waveforms `x` and generated `x_hat`,
/// both `[B, 1, L]`: mean absolute plus root-mean-square log-mel difference.
pub fn rec_loss(g: &mut Graph, mel: &Arc<MelExtractor>, x: &Tensor, x_hat: Var) -> Result<Var, LossError> {
    if x.shape() != g.shape(x_hat) {
        return Err(LossError::LengthMismatch(format!("target {:?} vs output {:?}", x.shape(), g.shape(x_hat))));
    }
    let (b, _, len) = x.dims3();
    let nm = mel.config().n_mels;
    let t = mel.n_frames(len);
    let target: Vec<f64> = x.data().chunks_exact(len).flat_map(|row| mel.log_mel(row)).collect();
    let target = g.constant(Tensor::new([b, t, nm], target));
    let pred = log_mel(g, mel, x_hat);
    let diff = g.sub(pred, target);
    let l1 = g.mean_abs(diff);
    let ms = g.mean_square(diff);
    let l2 = g.sqrt(ms);
    Ok(g.add(l1, l2))
}

/// Value-only reconstruction loss on two buffers; `x_hat` is trimmed or
/// zero-padded to the length of `x`.
pub fn rec_loss_value(x: &AudioBuffer, x_hat: &AudioBuffer, cfg: &MelConfig) -> Result<f64, LossError> {
    if x.sample_rate != x_hat.sample_rate {
        return Err(LossError::LengthMismatch("sample rates differ".into()));
    }
    let mel = MelExtractor::new(cfg).map_err(|e| LossError::LengthMismatch(e.to_string()))?;
    let mut y = x_hat.samples.clone();
    y.resize(x.len(), 0.0);
    let a = mel.log_mel(&x.samples);
    let b = mel.log_mel(&y);
    if a.len() != b.len() {
        return Err(LossError::LengthMismatch(format!("{} vs {} mel entries", a.len(), b.len())));
    }
    Ok(mel_distance(&a, &b))
}

/// Mean absolute plus root-mean-square difference of two equal-length arrays.
pub fn mel_distance(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().max(1) as f64;
    let l1 = a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / n;
    let ms = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n;
    l1 + ms.sqrt()
}

fn check_scales(real: &[ScaleOutput], fake: &[ScaleOutput]) -> Result<(), LossError> {
    if real.len() != fake.len() || real.is_empty() {
        return Err(LossError::ScaleMismatch { real: real.len(), fake: fake.len() });
    }
    Ok(())
}

fn sum_vars(g: &mut Graph, vs: &[Var]) -> Var {
    let mut it = vs.iter();
    let first = *it.next().expect("at least one term");
    it.fold(first, |acc, &v| g.add(acc, v))
}

/// Least-squares discriminator loss `sum_s E[(D(x) - 1)^2] + E[D(x_hat)^2]`.
pub fn disc_loss(g: &mut Graph, real: &[ScaleOutput], fake: &[ScaleOutput]) -> Result<Var, LossError> {
    check_scales(real, fake)?;
    let mut terms = Vec::with_capacity(2 * real.len());
    for (r, f) in real.iter().zip(fake) {
        let r1 = g.add_scalar(r.score, -1.0);
        terms.push(g.mean_square(r1));
        terms.push(g.mean_square(f.score));
    }
    Ok(sum_vars(g, &terms))
}

/// Generator adversarial loss `sum_s E[(D(x_hat) - 1)^2]` and feature
/// matching `sum_s sum_l mean |f_real - f_fake|`.
pub fn gen_adv_losses(g: &mut Graph, real: &[ScaleOutput], fake: &[ScaleOutput]) -> Result<(Var, Var), LossError> {
    check_scales(real, fake)?;
    let mut adv = Vec::with_capacity(real.len());
    let mut fm = Vec::new();
    for (r, f) in real.iter().zip(fake) {
        if r.features.len() != f.features.len() {
            return Err(LossError::ScaleMismatch { real: r.features.len(), fake: f.features.len() });
        }
        let s = g.add_scalar(f.score, -1.0);
        adv.push(g.mean_square(s));
        for (&fr, &ff) in r.features.iter().zip(&f.features) {
            let d = g.sub(fr, ff);
            fm.push(g.mean_abs(d));
        }
    }
    let adv = sum_vars(g, &adv);
    let fm = if fm.is_empty() { g.constant(Tensor::scalar(0.0)) } else { sum_vars(g, &fm) };
    Ok((adv, fm))
}

/// Commitment loss `sum_i mean (x_i - q_i)^2` on `r1` rows `[N, D]`. The
/// quantized targets are constants, so the gradient reaches only `r1`.
pub fn commit_loss(g: &mut Graph, r1: Var, result: &QuantizationResult) -> Result<Var, LossError> {
    let shape = g.shape(r1).to_vec();
    if g.value(r1).data().len() != result.cumulative.len() {
        return Err(LossError::LengthMismatch(format!("{:?} vs {} quantized values", shape, result.cumulative.len())));
    }
    let mut cum = vec![0.0; result.cumulative.len()];
    let mut terms = Vec::with_capacity(result.quantized.len());
    for q in &result.quantized {
        cum.iter_mut().zip(q).for_each(|(c, v)| *c += v);
        let target = g.constant(Tensor::new(shape.clone(), cum.clone()));
        let d = g.sub(r1, target);
        terms.push(g.mean_square(d));
    }
    if terms.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    Ok(sum_vars(g, &terms))
}
