//! Run configuration, checkpoints and the alternating generator /
//! discriminator training loop.

mod checkpoint;
mod config;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anoncodec_autograd::{AdamW, AdamWConfig, Graph, ParamStore, Tensor, Var};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use checkpoint::Checkpoint;
pub use config::{DataConfig, OptimConfig, RunConfig};

use crate::data::{sample_segment_pair_at, Corpus, DataError, SegmentPair};
use crate::losses::{
    commit_loss, disc_loss, emo_loss, gen_adv_losses, lin_loss, rec_loss, spk_loss, total_loss, GeneratorTerms, LossError,
    LossReport,
};
use crate::model::{Codec, Discriminator, TeacherTokenizer};
use crate::quantize::{ema_update, rvq_forward, straight_through, ResidualBottleneck};
use crate::signal::{F0Contour, MelExtractor, Yin};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("data: {0}")]
    DataMissing(String),
    #[error("non-finite {term} at step {step}")]
    NonFiniteLoss { step: u64, term: String },
    #[error("invalid checkpoint: {0}")]
    CheckpointInvalid(String),
    #[error("i/o failure: {0}")]
    Io(String),
}

impl From<DataError> for TrainError {
    fn from(e: DataError) -> Self {
        TrainError::DataMissing(e.to_string())
    }
}

/// Salt for the held-out evaluation stream so it never overlaps training draws.
const HELDOUT_STREAM: u64 = u64::MAX;
const HELDOUT_SEGMENTS: usize = 8;

/// Training and held-out utterance indices. The last `holdout` utterances
/// of each speaker (manifest order) are held out, always leaving at least
/// one for training.
pub fn split_corpus(corpus: &Corpus, holdout: usize) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut held = Vec::new();
    for s in 0..corpus.manifest.num_speakers() {
        let idx: Vec<usize> = (0..corpus.len()).filter(|&i| corpus.label(i) == s).collect();
        let h = holdout.min(idx.len().saturating_sub(1));
        let cut = idx.len() - h;
        train.extend_from_slice(&idx[..cut]);
        held.extend_from_slice(&idx[cut..]);
    }
    train.sort_unstable();
    held.sort_unstable();
    (train, held)
}

pub struct Trainer {
    cfg: RunConfig,
    corpus: Corpus,
    train_idx: Vec<usize>,
    heldout_idx: Vec<usize>,
    codec: Codec,
    generator: ParamStore,
    disc: Discriminator,
    disc_params: ParamStore,
    bottleneck: ResidualBottleneck,
    teacher: TeacherTokenizer,
    tokens: Vec<Vec<usize>>,
    f0: Vec<F0Contour>,
    opt_g: AdamW,
    opt_d: AdamW,
    step: u64,
    mel: Arc<MelExtractor>,
}

impl std::fmt::Debug for Trainer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Trainer").field("step", &self.step).finish_non_exhaustive()
    }
}

fn adam_config(o: &OptimConfig) -> AdamWConfig {
    AdamWConfig { beta1: o.beta1, beta2: o.beta2, eps: o.eps, weight_decay: o.weight_decay }
}

impl Trainer {
    /// Fresh run: initializes every network from `cfg.seed` and fits the
    /// teacher tokenizer on the training utterances.
    pub fn new(cfg: RunConfig, corpus: Corpus) -> Result<Self, TrainError> {
        cfg.validate()?;
        let num_speakers = corpus.manifest.num_speakers();
        if num_speakers == 0 {
            return Err(TrainError::DataMissing("manifest is empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut generator = ParamStore::new();
        let codec =
            Codec::new(&cfg.model, num_speakers, &mut generator, &mut rng).map_err(|e| TrainError::ConfigInvalid(e.to_string()))?;
        let mut disc_params = ParamStore::new();
        let disc = Discriminator::new(&mut disc_params, cfg.model.disc_channels, cfg.model.disc_scales, &mut rng);
        let bottleneck = ResidualBottleneck::new(cfg.model.num_quantizers, cfg.model.codebook_size, cfg.model.encoder_out_dim);
        let opt_g = AdamW::new(adam_config(&cfg.optim), &generator);
        let opt_d = AdamW::new(adam_config(&cfg.optim), &disc_params);

        let (train_idx, _) = split_corpus(&corpus, cfg.data.holdout_per_speaker);
        let mut teacher =
            TeacherTokenizer::mfcc(&cfg.model.mel, cfg.model.teacher_vocab).map_err(|e| TrainError::ConfigInvalid(e.to_string()))?;
        let train_audio: Vec<_> = train_idx.iter().map(|&i| corpus.audio[i].clone()).collect();
        teacher.fit(&train_audio, cfg.seed).map_err(|e| TrainError::DataMissing(e.to_string()))?;

        Self::assemble(cfg, corpus, codec, generator, disc, disc_params, bottleneck, teacher, opt_g, opt_d, 0)
    }

    /// Continues from `ck`. The corpus must carry the same speaker set.
    pub fn resume(ck: Checkpoint, corpus: Corpus) -> Result<Self, TrainError> {
        if ck.speakers != corpus.manifest.speakers {
            return Err(TrainError::DataMissing("corpus speakers differ from the checkpoint's".into()));
        }
        let (codec, disc) = ck.networks()?;
        let teacher = ck.teacher()?;
        if teacher.centroids().is_none() {
            return Err(TrainError::CheckpointInvalid("teacher centroids missing".into()));
        }
        Self::assemble(
            ck.config,
            corpus,
            codec,
            ck.generator,
            disc,
            ck.discriminator,
            ck.bottleneck,
            teacher,
            ck.opt_g,
            ck.opt_d,
            ck.step,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        cfg: RunConfig,
        corpus: Corpus,
        codec: Codec,
        generator: ParamStore,
        disc: Discriminator,
        disc_params: ParamStore,
        bottleneck: ResidualBottleneck,
        teacher: TeacherTokenizer,
        opt_g: AdamW,
        opt_d: AdamW,
        step: u64,
    ) -> Result<Self, TrainError> {
        let hop = cfg.model.hop();
        let seg_len = cfg.data.segment_frames * hop;
        for (r, buf) in corpus.manifest.records.iter().zip(&corpus.audio) {
            if buf.sample_rate != cfg.model.mel.sample_rate {
                return Err(TrainError::DataMissing(format!("{} is {} Hz", r.id, buf.sample_rate)));
            }
            if buf.len() < seg_len {
                return Err(DataError::UtteranceTooShort { id: r.id.clone(), len: buf.len(), need: seg_len }.into());
            }
        }
        let (train_idx, heldout_idx) = split_corpus(&corpus, cfg.data.holdout_per_speaker);
        let yin = Yin::new(&cfg.model.f0, cfg.model.mel.sample_rate).map_err(|e| TrainError::ConfigInvalid(e.to_string()))?;
        let mut tokens = Vec::with_capacity(corpus.len());
        let mut f0 = Vec::with_capacity(corpus.len());
        for buf in &corpus.audio {
            tokens.push(teacher.tokenize(buf).map_err(|e| TrainError::DataMissing(e.to_string()))?);
            f0.push(yin.run(&buf.samples, hop));
        }
        let mel = Arc::new(MelExtractor::new(&cfg.model.mel).map_err(|e| TrainError::ConfigInvalid(e.to_string()))?);
        Ok(Self {
            cfg,
            corpus,
            train_idx,
            heldout_idx,
            codec,
            generator,
            disc,
            disc_params,
            bottleneck,
            teacher,
            tokens,
            f0,
            opt_g,
            opt_d,
            step,
            mel,
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn generator(&self) -> &ParamStore {
        &self.generator
    }

    pub fn generator_mut(&mut self) -> &mut ParamStore {
        &mut self.generator
    }

    pub fn train_indices(&self) -> &[usize] {
        &self.train_idx
    }

    pub fn heldout_indices(&self) -> &[usize] {
        &self.heldout_idx
    }

    /// Steps per pass over the training utterances.
    pub fn steps_per_epoch(&self) -> u64 {
        (self.train_idx.len() as u64).div_ceil(self.cfg.optim.batch_size as u64).max(1)
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        let epoch = step / self.steps_per_epoch();
        self.cfg.optim.lr * self.cfg.optim.lr_decay.powf(epoch as f64)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg.clone(),
            step: self.step,
            speakers: self.corpus.manifest.speakers.clone(),
            generator: self.generator.clone(),
            discriminator: self.disc_params.clone(),
            bottleneck: self.bottleneck.clone(),
            teacher: self.teacher.centroids().cloned(),
            opt_g: self.opt_g.clone(),
            opt_d: self.opt_d.clone(),
        }
    }

    fn mel_batch(&self, segs: &[&[f64]]) -> Tensor {
        let nm = self.cfg.model.mel.n_mels;
        let mut data = Vec::new();
        let mut t = 0;
        for s in segs {
            let frames = self.mel.log_mel(s);
            t = frames.len() / nm;
            let base = data.len();
            data.resize(base + frames.len(), 0.0);
            for f in 0..t {
                for m in 0..nm {
                    data[base + m * t + f] = frames[f * nm + m];
                }
            }
        }
        Tensor::new([segs.len(), nm, t], data)
    }

    /// Frame-aligned slice of a per-utterance frame sequence.
    fn frame_window<T: Clone>(seq: &[T], offset: usize, hop: usize, frames: usize) -> Vec<T> {
        let start = ((offset as f64 / hop as f64).round() as usize).min(seq.len().saturating_sub(frames));
        seq[start..start + frames].to_vec()
    }

    /// One discriminator update followed by one generator update.
    pub fn train_step(&mut self) -> Result<LossReport, TrainError> {
        let step = self.step;
        let non_finite = |term: &str| TrainError::NonFiniteLoss { step, term: term.to_string() };
        let cfg = &self.cfg;
        let hop = cfg.model.hop();
        let t = cfg.data.segment_frames;
        let seg_len = t * hop;
        let b = cfg.optim.batch_size;
        let d = cfg.model.encoder_out_dim;
        let lr = self.lr_at(step);

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(step);
        let pairs: Vec<SegmentPair> = (0..b)
            .map(|_| {
                let i = self.train_idx[rng.gen_range(0..self.train_idx.len())];
                sample_segment_pair_at(&self.corpus, i, seg_len, &mut rng)
            })
            .collect::<Result<_, _>>()?;
        let labels: Vec<usize> = pairs.iter().map(|p| p.label).collect();
        let mut tokens = Vec::with_capacity(b * t);
        let mut f0 = Vec::with_capacity(b);
        for p in &pairs {
            tokens.extend(Self::frame_window(&self.tokens[p.utterance], p.offset_a, hop, t));
            let c = &self.f0[p.utterance];
            f0.push(F0Contour {
                hz: Self::frame_window(&c.hz, p.offset_a, hop, t),
                voiced: Self::frame_window(&c.voiced, p.offset_a, hop, t),
            });
        }
        let x_t = Tensor::new([b, 1, seg_len], pairs.iter().flat_map(|p| p.seg_a.samples.iter().copied()).collect());
        let mel_a = self.mel_batch(&pairs.iter().map(|p| p.seg_a.samples.as_slice()).collect::<Vec<_>>());
        let mel_b = self.mel_batch(&pairs.iter().map(|p| p.seg_b.samples.as_slice()).collect::<Vec<_>>());

        // Generator forward.
        let mut g = Graph::new();
        let p = g.bind(&self.generator, true);
        let x = g.constant(x_t.clone());
        let frames = self.codec.speech_encode(&mut g, &p, x);
        let ma = g.constant(mel_a);
        let mb = g.constant(mel_b);
        let s1 = self.codec.speaker_encode(&mut g, &p, ma);
        let s2 = self.codec.speaker_encode(&mut g, &p, mb);
        let r1 = self.codec.subtract_speaker(&mut g, &p, frames, s1);
        let rt = g.transpose12(r1);
        let rows = g.reshape(rt, &[b * t, d]);
        let rows_val = g.value(rows).data().to_vec();
        if !rows_val.iter().all(|v| v.is_finite()) {
            return Err(non_finite("encoder output"));
        }
        if !self.bottleneck.initialized {
            self.bottleneck.init_from_data(&rows_val, cfg.seed);
        }
        let q = rvq_forward(&rows_val, &self.bottleneck).map_err(|e| TrainError::ConfigInvalid(e.to_string()))?;
        let com = commit_loss(&mut g, rows, &q).map_err(loss_err(step))?;
        let content_rows = straight_through(&mut g, rows, &q);
        let content = g.reshape(content_rows, &[b, t, d]);
        let content = g.transpose12(content);
        let q1 = g.straight_through(rows, Tensor::new([b * t, d], q.quantized[0].clone()));
        let q2 = g.straight_through(rows, Tensor::new([b * t, d], q.quantized[1].clone()));
        let logits = self.codec.linguistic_head(&mut g, &p, q1);
        let lin = lin_loss(&mut g, logits, &tokens, None).map_err(loss_err(step))?;
        let proj = self.codec.emotion_proj(&mut g, &p, q2);
        let f0_refs: Vec<&F0Contour> = f0.iter().collect();
        let emo = emo_loss(&mut g, proj, &f0_refs).map_err(loss_err(step))?;
        let spk = spk_loss(&mut g, &self.codec, &p, s1, s2, &labels).map_err(loss_err(step))?;
        let x_hat = self.codec.decode(&mut g, &p, content, s1);
        let rec = rec_loss(&mut g, &self.mel, &x_t, x_hat).map_err(loss_err(step))?;

        // Discriminator step on the detached output.
        let x_hat_val = g.value(x_hat).clone();
        let disc_value = {
            let mut gd = Graph::new();
            let pd = gd.bind(&self.disc_params, true);
            let xr = gd.constant(x_t.clone());
            let xf = gd.constant(x_hat_val);
            let real = self.disc.forward(&mut gd, &pd, xr);
            let fake = self.disc.forward(&mut gd, &pd, xf);
            let dl = disc_loss(&mut gd, &real, &fake).map_err(loss_err(step))?;
            let value = gd.value(dl).item();
            if !value.is_finite() {
                return Err(non_finite("disc"));
            }
            let grads = gd.backward(dl).for_params(&pd, &self.disc_params);
            if !grads.iter().all(Tensor::is_finite) {
                return Err(non_finite("discriminator gradient"));
            }
            self.opt_d.step(&mut self.disc_params, &grads, lr);
            value
        };

        // Generator step against the updated, frozen discriminator.
        let pd = g.bind(&self.disc_params, false);
        let xr = g.constant(x_t);
        let real = self.disc.forward(&mut g, &pd, xr);
        let fake = self.disc.forward(&mut g, &pd, x_hat);
        let (adv, feat_match) = gen_adv_losses(&mut g, &real, &fake).map_err(loss_err(step))?;
        let terms = GeneratorTerms { rec, adv, feat_match, com, spk, lin, emo };
        let total = total_loss(&mut g, &terms, &cfg.loss).map_err(loss_err(step))?;
        let grads = g.backward(total).for_params(&p, &self.generator);
        if !grads.iter().all(Tensor::is_finite) {
            return Err(non_finite("generator gradient"));
        }
        self.opt_g.step(&mut self.generator, &grads, lr);

        let decay = cfg.model.codebook_decay;
        for i in 0..self.bottleneck.num_layers() {
            let input = if i == 0 { &rows_val } else { &q.residuals[i - 1] };
            ema_update(&mut self.bottleneck.layers[i], &q.indices[i], input, decay, &mut rng);
        }

        let val = |v: Var| g.value(v).item();
        let report = LossReport {
            step,
            rec: val(rec),
            adv: val(adv),
            feat_match: val(feat_match),
            com: val(com),
            spk: val(spk),
            lin: val(lin),
            emo: val(emo),
            disc: disc_value,
            total: val(total),
        };
        self.step += 1;
        Ok(report)
    }

    /// Speaker classification accuracy on random segments of the held-out
    /// utterances, or `None` when nothing is held out.
    pub fn heldout_accuracy(&self) -> Option<f64> {
        if self.heldout_idx.is_empty() {
            return None;
        }
        let seg_len = self.cfg.data.segment_frames * self.cfg.model.hop();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(HELDOUT_STREAM);
        let (mut correct, mut total) = (0usize, 0usize);
        for &i in &self.heldout_idx {
            let segs: Vec<SegmentPair> = (0..HELDOUT_SEGMENTS / 2)
                .map(|_| sample_segment_pair_at(&self.corpus, i, seg_len, &mut rng).expect("length checked at construction"))
                .collect();
            let views: Vec<&[f64]> = segs.iter().flat_map(|s| [s.seg_a.samples.as_slice(), s.seg_b.samples.as_slice()]).collect();
            let mel = self.mel_batch(&views);
            let mut g = Graph::new();
            let p = g.bind(&self.generator, false);
            let m = g.constant(mel);
            let s = self.codec.speaker_encode(&mut g, &p, m);
            let logits = self.codec.speaker_classify(&mut g, &p, s);
            let (n, k) = g.value(logits).dims2();
            let label = self.corpus.label(i);
            for row in g.value(logits).data().chunks(k).take(n) {
                let arg = row.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map_or(0, |(j, _)| j);
                correct += (arg == label) as usize;
                total += 1;
            }
        }
        Some(correct as f64 / total as f64)
    }
}

fn loss_err(step: u64) -> impl Fn(LossError) -> TrainError {
    move |e| match e {
        LossError::NonFiniteTerm(term) => TrainError::NonFiniteLoss { step, term: term.to_string() },
        other => TrainError::ConfigInvalid(other.to_string()),
    }
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub reports: Vec<LossReport>,
    pub final_checkpoint: PathBuf,
    pub heldout_accuracy: Option<f64>,
}

pub fn checkpoint_path(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join(format!("step{step:07}.ckpt"))
}

pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const LOSS_LOG: &str = "train_log.jsonl";

/// Runs `trainer` up to the configured step count, appending one JSON line
/// per step to `out_dir/train_log.jsonl` and writing periodic checkpoints
/// plus `out_dir/final.ckpt`. A non-finite loss aborts before anything of
/// that step reaches disk.
pub fn run_training(trainer: &mut Trainer, out_dir: &Path) -> Result<TrainSummary, TrainError> {
    let io = |e: std::io::Error| TrainError::Io(format!("{}: {e}", out_dir.display()));
    fs::create_dir_all(out_dir).map_err(io)?;
    let log_file = if trainer.step() == 0 {
        File::create(out_dir.join(LOSS_LOG))
    } else {
        File::options().create(true).append(true).open(out_dir.join(LOSS_LOG))
    }
    .map_err(io)?;
    let mut log = BufWriter::new(log_file);
    let steps = trainer.config().optim.steps;
    let every = trainer.config().data.checkpoint_every;
    let mut reports = Vec::new();
    while trainer.step() < steps {
        let report = trainer.train_step()?;
        writeln!(log, "{}", report.to_json_line()).map_err(io)?;
        reports.push(report);
        if every > 0 && trainer.step() % every == 0 && trainer.step() < steps {
            log.flush().map_err(io)?;
            trainer.checkpoint().save(checkpoint_path(out_dir, trainer.step()))?;
        }
    }
    log.flush().map_err(io)?;
    let final_checkpoint = out_dir.join(FINAL_CHECKPOINT);
    trainer.checkpoint().save(&final_checkpoint)?;
    Ok(TrainSummary { reports, final_checkpoint, heldout_accuracy: trainer.heldout_accuracy() })
}
