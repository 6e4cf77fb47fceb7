//! Codec networks: speech encoder, speaker encoder, decoder, the three
//! distillation heads, the discriminator and the linguistic teacher.

mod config;
mod disc;
pub mod layers;
mod teacher;

pub use config::CodecConfig;
pub use disc::{Discriminator, ScaleOutput};
pub use teacher::{FrameFeatureExtractor, MfccExtractor, TeacherTokenizer, MFCC_COEFFS};

use anoncodec_autograd::{Bound, Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::quantize::{rvq_forward, QuantizationResult, ResidualBottleneck};
use crate::signal::{AudioBuffer, MelExtractor};
use layers::{Conv, ConvUp, Linear, LstmStack, ResUnit};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    ConfigInvalid(String),
    #[error("input too short: {got} samples, need at least {need}")]
    InputTooShort { got: usize, need: usize },
    #[error("teacher tokenizer untrained: {0}")]
    TeacherUntrained(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Global speaker representation.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerEmbedding {
    pub vector: Vec<f64>,
    pub normalized: bool,
}

impl SpeakerEmbedding {
    pub fn normalized(mut vector: Vec<f64>) -> Self {
        normalize(&mut vector);
        Self { vector, normalized: true }
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn norm(&self) -> f64 {
        self.vector.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Scales `v` to unit length; the zero vector is left unchanged.
pub fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// `[frames, dim]` row-major features at the codec frame rate.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    pub data: Vec<f64>,
    pub frames: usize,
    pub dim: usize,
}

impl FrameSequence {
    /// From a `[1, dim, frames]` channel-major tensor.
    pub fn from_channel_major(t: &Tensor) -> Self {
        let (_, dim, frames) = t.dims3();
        let src = t.data();
        let mut data = vec![0.0; dim * frames];
        for c in 0..dim {
            for f in 0..frames {
                data[f * dim + c] = src[c * frames + f];
            }
        }
        Self { data, frames, dim }
    }

    /// `[1, dim, frames]` channel-major tensor.
    pub fn to_channel_major(&self) -> Tensor {
        let mut out = vec![0.0; self.data.len()];
        for f in 0..self.frames {
            for c in 0..self.dim {
                out[c * self.frames + f] = self.data[f * self.dim + c];
            }
        }
        Tensor::new([1, self.dim, self.frames], out)
    }
}

/// Layout of every generator-side network. Parameters live in a separate
/// [`ParamStore`]; this struct only records which tensors each layer uses.
#[derive(Clone, Debug)]
pub struct Codec {
    cfg: CodecConfig,
    num_speakers: usize,
    enc_in: Conv,
    enc_blocks: Vec<(ResUnit, Conv)>,
    enc_lstm: LstmStack,
    enc_out: Conv,
    spk_convs: Vec<Conv>,
    spk_out: Conv,
    proj: Linear,
    dec_spk: Linear,
    dec_in: Conv,
    dec_lstm: LstmStack,
    dec_blocks: Vec<(ConvUp, ResUnit)>,
    dec_out: Conv,
    spk_cls: Linear,
    lin_head: Linear,
    emo_proj: Linear,
}

impl Codec {
    pub fn new<R: Rng>(cfg: &CodecConfig, num_speakers: usize, store: &mut ParamStore, rng: &mut R) -> Result<Self, ModelError> {
        cfg.validate()?;
        if num_speakers == 0 {
            return Err(ModelError::ConfigInvalid("need at least one speaker label".into()));
        }
        let c0 = cfg.base_channels;
        let top = cfg.top_channels();
        let d_enc = cfg.encoder_out_dim;
        let d_spk = cfg.speaker_dim;
        let n_mels = cfg.mel.n_mels;

        let enc_in = Conv::same(store, "enc.in", 1, c0, 7, rng);
        let enc_blocks = cfg
            .strides
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                let ch = c0 << i;
                let res = ResUnit::new(store, &format!("enc.block{i}.res"), ch, rng);
                let down = Conv::new(store, &format!("enc.block{i}.down"), ch, 2 * ch, 2 * s, s, s.div_ceil(2), rng);
                (res, down)
            })
            .collect();
        let enc_lstm = LstmStack::new(store, "enc.lstm", top, cfg.lstm_layers, rng);
        let enc_out = Conv::same(store, "enc.out", top, d_enc, 7, rng);

        let h = cfg.speaker_hidden;
        let spk_convs = vec![
            Conv::same(store, "spk.c0", n_mels, h, 3, rng),
            Conv::same(store, "spk.c1", h, h, 3, rng),
            Conv::same(store, "spk.c2", h, h, 3, rng),
        ];
        let spk_out = Conv::same(store, "spk.out", h, d_spk, 1, rng);
        let proj = Linear::new(store, "proj", d_spk, d_enc, false, rng);

        let dec_spk = Linear::new(store, "dec.spk", d_spk, d_enc, true, rng);
        let dec_in = Conv::same(store, "dec.in", 2 * d_enc, top, 7, rng);
        let dec_lstm = LstmStack::new(store, "dec.lstm", top, cfg.lstm_layers, rng);
        let dec_blocks = cfg
            .strides
            .iter()
            .rev()
            .enumerate()
            .map(|(i, &s)| {
                let ch = top >> i;
                let up = ConvUp::new(store, &format!("dec.block{i}.up"), ch, ch / 2, s, rng);
                let res = ResUnit::new(store, &format!("dec.block{i}.res"), ch / 2, rng);
                (up, res)
            })
            .collect();
        let dec_out = Conv::same(store, "dec.out", c0, 1, 7, rng);

        let spk_cls = Linear::new(store, "head.spk", d_spk, num_speakers, true, rng);
        let lin_head = Linear::new(store, "head.lin", d_enc, cfg.teacher_vocab, true, rng);
        let emo_proj = Linear::new(store, "head.emo", d_enc, 1, true, rng);

        Ok(Self {
            cfg: cfg.clone(),
            num_speakers,
            enc_in,
            enc_blocks,
            enc_lstm,
            enc_out,
            spk_convs,
            spk_out,
            proj,
            dec_spk,
            dec_in,
            dec_lstm,
            dec_blocks,
            dec_out,
            spk_cls,
            lin_head,
            emo_proj,
        })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.cfg
    }

    pub fn num_speakers(&self) -> usize {
        self.num_speakers
    }

    /// Weight of the speaker-to-frame projection `P`, shape `[D, d]`.
    pub fn proj_weight(&self) -> ParamId {
        self.proj.weight()
    }

    /// `[batch, 1, samples]` with `samples` a multiple of the hop, giving
    /// `[batch, D, samples / hop]`.
    pub fn speech_encode(&self, g: &mut Graph, p: &Bound, wav: Var) -> Var {
        let mut h = self.enc_in.apply(g, p, wav);
        for (res, down) in &self.enc_blocks {
            h = res.apply(g, p, h);
            h = g.elu(h);
            h = down.apply(g, p, h);
        }
        h = self.enc_lstm.apply(g, p, h);
        h = g.elu(h);
        self.enc_out.apply(g, p, h)
    }

    /// `[batch, n_mels, frames]` log-mel to unit-norm `[batch, d]`.
    pub fn speaker_encode(&self, g: &mut Graph, p: &Bound, mel: Var) -> Var {
        let mut h = mel;
        for conv in &self.spk_convs {
            h = conv.apply(g, p, h);
            h = g.elu(h);
        }
        h = self.spk_out.apply(g, p, h);
        let pooled = g.mean_last(h);
        g.l2_normalize_rows(pooled)
    }

    /// `r1[t] = frames[t] - P s`, broadcast over frames.
    pub fn subtract_speaker(&self, g: &mut Graph, p: &Bound, frames: Var, spk: Var) -> Var {
        let t = g.shape(frames)[2];
        let ps = self.proj.apply(g, p, spk);
        let ps = g.broadcast_last(ps, t);
        g.sub(frames, ps)
    }

    /// Content `[batch, D, T]` and speaker `[batch, d]` to `[batch, 1, T * hop]`.
    pub fn decode(&self, g: &mut Graph, p: &Bound, content: Var, spk: Var) -> Var {
        let t = g.shape(content)[2];
        let s = self.dec_spk.apply(g, p, spk);
        let s = g.broadcast_last(s, t);
        let mut h = g.concat1(&[content, s]);
        h = self.dec_in.apply(g, p, h);
        h = self.dec_lstm.apply(g, p, h);
        for (up, res) in &self.dec_blocks {
            h = g.elu(h);
            h = up.apply(g, p, h);
            h = res.apply(g, p, h);
        }
        h = g.elu(h);
        h = self.dec_out.apply(g, p, h);
        g.tanh(h)
    }

    pub fn speaker_classify(&self, g: &mut Graph, p: &Bound, spk: Var) -> Var {
        self.spk_cls.apply(g, p, spk)
    }

    /// Layer-1 quantized frames `[.., D]` to teacher-token logits `[.., K_tok]`.
    pub fn linguistic_head(&self, g: &mut Graph, p: &Bound, q1: Var) -> Var {
        self.lin_head.apply(g, p, q1)
    }

    /// Layer-2 quantized frames `[.., D]` to one scalar per frame `[.., 1]`.
    pub fn emotion_proj(&self, g: &mut Graph, p: &Bound, q2: Var) -> Var {
        self.emo_proj.apply(g, p, q2)
    }
}

/// Zero-pads `samples` to a whole number of codec frames.
pub fn pad_to_frames(samples: &[f64], hop: usize) -> Vec<f64> {
    let mut out = samples.to_vec();
    out.resize(samples.len().div_ceil(hop).max(1) * hop, 0.0);
    out
}

/// Per-utterance outputs of the analysis half of the codec.
#[derive(Clone, Debug)]
pub struct Analysis {
    pub speaker: SpeakerEmbedding,
    /// Speaker-independent frames `r1`, `[T, D]`.
    pub content_input: FrameSequence,
    pub quant: QuantizationResult,
}

/// Trained generator with its bottleneck, for inference on whole utterances.
pub struct CodecModel {
    pub codec: Codec,
    pub params: ParamStore,
    pub bottleneck: ResidualBottleneck,
    mel: MelExtractor,
}

impl std::fmt::Debug for CodecModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CodecModel").field("cfg", self.codec.config()).finish_non_exhaustive()
    }
}

impl CodecModel {
    pub fn new(cfg: &CodecConfig, num_speakers: usize, seed: u64) -> Result<Self, ModelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let codec = Codec::new(cfg, num_speakers, &mut params, &mut rng)?;
        let bottleneck = ResidualBottleneck::new(cfg.num_quantizers, cfg.codebook_size, cfg.encoder_out_dim);
        Self::from_parts(codec, params, bottleneck)
    }

    pub fn from_parts(codec: Codec, params: ParamStore, bottleneck: ResidualBottleneck) -> Result<Self, ModelError> {
        let mel = MelExtractor::new(&codec.config().mel).map_err(|e| ModelError::ConfigInvalid(e.to_string()))?;
        if bottleneck.dim() != codec.config().encoder_out_dim {
            return Err(ModelError::DimensionMismatch(format!(
                "bottleneck dim {} != encoder dim {}",
                bottleneck.dim(),
                codec.config().encoder_out_dim
            )));
        }
        Ok(Self { codec, params, bottleneck, mel })
    }

    pub fn config(&self) -> &CodecConfig {
        self.codec.config()
    }

    pub fn mel(&self) -> &MelExtractor {
        &self.mel
    }

    fn check(&self, buf: &AudioBuffer) -> Result<(), ModelError> {
        let hop = self.config().hop();
        if buf.sample_rate != self.config().mel.sample_rate {
            return Err(ModelError::DimensionMismatch(format!(
                "audio is {} Hz, model expects {} Hz",
                buf.sample_rate,
                self.config().mel.sample_rate
            )));
        }
        if buf.len() < hop {
            return Err(ModelError::InputTooShort { got: buf.len(), need: hop });
        }
        Ok(())
    }

    /// Log-mel of `samples` as a `[1, n_mels, T]` tensor.
    pub fn mel_tensor(&self, samples: &[f64]) -> Tensor {
        let nm = self.config().mel.n_mels;
        let frames = self.mel.log_mel(samples);
        let t = frames.len() / nm;
        let mut out = vec![0.0; frames.len()];
        for f in 0..t {
            for m in 0..nm {
                out[m * t + f] = frames[f * nm + m];
            }
        }
        Tensor::new([1, nm, t], out)
    }

    pub fn embed(&self, buf: &AudioBuffer) -> Result<SpeakerEmbedding, ModelError> {
        self.check(buf)?;
        let mut g = Graph::new();
        let p = g.bind(&self.params, false);
        let mel = g.constant(self.mel_tensor(&buf.samples));
        let s = self.codec.speaker_encode(&mut g, &p, mel);
        Ok(SpeakerEmbedding { vector: g.value(s).data().to_vec(), normalized: true })
    }

    /// Speech encoder output for a whole utterance, `[T, D]`.
    pub fn speech_frames(&self, buf: &AudioBuffer) -> Result<FrameSequence, ModelError> {
        self.check(buf)?;
        let hop = self.config().hop();
        let padded = pad_to_frames(&buf.samples, hop);
        let mut g = Graph::new();
        let p = g.bind(&self.params, false);
        let n = padded.len();
        let x = g.constant(Tensor::new([1, 1, n], padded));
        let frames = self.codec.speech_encode(&mut g, &p, x);
        Ok(FrameSequence::from_channel_major(g.value(frames)))
    }

    /// Speaker embedding, `r1` and its quantization.
    pub fn analyze(&self, buf: &AudioBuffer) -> Result<Analysis, ModelError> {
        self.check(buf)?;
        let hop = self.config().hop();
        let padded = pad_to_frames(&buf.samples, hop);
        let mut g = Graph::new();
        let p = g.bind(&self.params, false);
        let n = padded.len();
        let x = g.constant(Tensor::new([1, 1, n], padded));
        let frames = self.codec.speech_encode(&mut g, &p, x);
        let mel = g.constant(self.mel_tensor(&buf.samples));
        let s = self.codec.speaker_encode(&mut g, &p, mel);
        let r1 = self.codec.subtract_speaker(&mut g, &p, frames, s);
        let content_input = FrameSequence::from_channel_major(g.value(r1));
        let quant = rvq_forward(&content_input.data, &self.bottleneck)
            .map_err(|e| ModelError::DimensionMismatch(e.to_string()))?;
        Ok(Analysis {
            speaker: SpeakerEmbedding { vector: g.value(s).data().to_vec(), normalized: true },
            content_input,
            quant,
        })
    }

    /// Decodes quantized content `[T, D]` with the given speaker vector.
    pub fn synthesize(&self, content: &FrameSequence, speaker: &SpeakerEmbedding) -> Result<AudioBuffer, ModelError> {
        let cfg = self.config();
        if content.dim != cfg.encoder_out_dim || speaker.dim() != cfg.speaker_dim {
            return Err(ModelError::DimensionMismatch(format!(
                "content dim {} / speaker dim {} vs model {} / {}",
                content.dim,
                speaker.dim(),
                cfg.encoder_out_dim,
                cfg.speaker_dim
            )));
        }
        let mut g = Graph::new();
        let p = g.bind(&self.params, false);
        let c = g.constant(content.to_channel_major());
        let s = g.constant(Tensor::new([1, speaker.dim()], speaker.vector.clone()));
        let y = self.codec.decode(&mut g, &p, c, s);
        AudioBuffer::new(g.value(y).data().to_vec(), cfg.mel.sample_rate)
            .map_err(|e| ModelError::DimensionMismatch(e.to_string()))
    }

    /// Analysis followed by synthesis with `speaker` (or the utterance's own).
    pub fn resynthesize(&self, buf: &AudioBuffer, speaker: Option<&SpeakerEmbedding>) -> Result<AudioBuffer, ModelError> {
        let a = self.analyze(buf)?;
        let content = FrameSequence { data: a.quant.cumulative.clone(), frames: a.content_input.frames, dim: a.content_input.dim };
        self.synthesize(&content, speaker.unwrap_or(&a.speaker))
    }
}
