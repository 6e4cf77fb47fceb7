//! Binary checkpoint: magic, version, JSON config echo, step, speaker
//! vocabulary, generator and discriminator tensors, codebooks, teacher
//! centroids, both optimizer states, then a SHA-256 of everything before it.
//! All numbers are little-endian; tensors are stored as f64 so a resumed run
//! continues exactly.

use std::fs;
use std::path::Path;

use anoncodec_autograd::{AdamW, AdamWConfig, ParamStore, Tensor};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::model::{Codec, CodecModel, Discriminator, TeacherTokenizer};
use crate::quantize::{Codebook, ResidualBottleneck};

use super::{RunConfig, TrainError};

const MAGIC: &[u8; 4] = b"ANCK";
const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub step: u64,
    pub speakers: Vec<String>,
    pub generator: ParamStore,
    pub discriminator: ParamStore,
    pub bottleneck: ResidualBottleneck,
    pub teacher: Option<Codebook>,
    pub opt_g: AdamW,
    pub opt_d: AdamW,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&u32::try_from(v).expect("fits in u32").to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }
    fn tensor(&mut self, t: &Tensor) {
        self.u32(t.rank());
        for &d in t.shape() {
            self.u32(d);
        }
        self.f64s(t.data());
    }
    fn store(&mut self, s: &ParamStore) {
        self.u32(s.len());
        for (name, t) in s.iter() {
            self.str(name);
            self.tensor(t);
        }
    }
    fn codebook(&mut self, cb: &Codebook) {
        self.u32(cb.len());
        self.u32(cb.dim());
        self.u8(cb.frozen_zero() as u8);
        self.f64s(cb.vectors());
        self.f64s(cb.usage());
        self.f64s(cb.sums());
    }
    fn adam(&mut self, a: &AdamW) {
        self.u64(a.step);
        self.f64s(&[a.config.beta1, a.config.beta2, a.config.eps, a.config.weight_decay]);
        self.u32(a.m.len());
        for t in a.m.iter().chain(&a.v) {
            self.tensor(t);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

fn corrupt(msg: impl Into<String>) -> TrainError {
    TrainError::CheckpointInvalid(msg.into())
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TrainError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| corrupt("truncated"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, TrainError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize, TrainError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
    fn u64(&mut self) -> Result<u64, TrainError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, TrainError> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| corrupt("length overflow"))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
    fn str(&mut self) -> Result<String, TrainError> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| corrupt("string is not utf-8"))
    }
    fn tensor(&mut self) -> Result<Tensor, TrainError> {
        let rank = self.u32()?;
        let shape = (0..rank).map(|_| self.u32()).collect::<Result<Vec<_>, _>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| corrupt("shape overflow"))?;
        Ok(Tensor::new(shape, self.f64s(n)?))
    }
    fn store(&mut self) -> Result<ParamStore, TrainError> {
        let n = self.u32()?;
        let mut s = ParamStore::new();
        for _ in 0..n {
            let name = self.str()?;
            if s.id(&name).is_some() {
                return Err(corrupt(format!("duplicate parameter {name}")));
            }
            let t = self.tensor()?;
            s.add(name, t);
        }
        Ok(s)
    }
    fn codebook(&mut self) -> Result<Codebook, TrainError> {
        let k = self.u32()?;
        let dim = self.u32()?;
        if k == 0 || dim == 0 {
            return Err(corrupt("empty codebook"));
        }
        let frozen = self.u8()? != 0;
        let vectors = self.f64s(k * dim)?;
        let usage = self.f64s(k)?;
        let sums = self.f64s(k * dim)?;
        Ok(Codebook::from_parts(dim, vectors, usage, sums, frozen))
    }
    fn adam(&mut self) -> Result<AdamW, TrainError> {
        let step = self.u64()?;
        let c = self.f64s(4)?;
        let config = AdamWConfig { beta1: c[0], beta2: c[1], eps: c[2], weight_decay: c[3] };
        let n = self.u32()?;
        let m = (0..n).map(|_| self.tensor()).collect::<Result<Vec<_>, _>>()?;
        let v = (0..n).map(|_| self.tensor()).collect::<Result<Vec<_>, _>>()?;
        Ok(AdamW { config, step, m, v })
    }
}

fn same_layout(a: &ParamStore, b: &ParamStore) -> bool {
    a.len() == b.len() && a.iter().zip(b.iter()).all(|((na, ta), (nb, tb))| na == nb && ta.shape() == tb.shape())
}

fn adam_matches(opt: &AdamW, store: &ParamStore) -> bool {
    opt.m.len() == store.len()
        && opt.v.len() == store.len()
        && opt.m.iter().zip(&opt.v).zip(store.tensors()).all(|((m, v), t)| m.shape() == t.shape() && v.shape() == t.shape())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION as usize);
        w.str(&self.config.to_json());
        w.u64(self.step);
        w.u32(self.speakers.len());
        for s in &self.speakers {
            w.str(s);
        }
        w.store(&self.generator);
        w.store(&self.discriminator);
        w.u8(self.bottleneck.initialized as u8);
        w.u32(self.bottleneck.layers.len());
        for cb in &self.bottleneck.layers {
            w.codebook(cb);
        }
        match &self.teacher {
            Some(cb) => {
                w.u8(1);
                w.codebook(cb);
            }
            None => w.u8(0),
        }
        w.adam(&self.opt_g);
        w.adam(&self.opt_d);
        let digest = Sha256::digest(&w.0);
        w.0.extend_from_slice(&digest);
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrainError> {
        if bytes.len() < MAGIC.len() + 4 + DIGEST_LEN {
            return Err(corrupt("file too short"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch"));
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION as usize {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let config: RunConfig =
            serde_json::from_str(&r.str()?).map_err(|e| corrupt(format!("config echo: {e}")))?;
        let step = r.u64()?;
        let n_spk = r.u32()?;
        let speakers = (0..n_spk).map(|_| r.str()).collect::<Result<Vec<_>, _>>()?;
        let generator = r.store()?;
        let discriminator = r.store()?;
        let initialized = r.u8()? != 0;
        let n_layers = r.u32()?;
        let layers = (0..n_layers).map(|_| r.codebook()).collect::<Result<Vec<_>, _>>()?;
        let teacher = if r.u8()? != 0 { Some(r.codebook()?) } else { None };
        let opt_g = r.adam()?;
        let opt_d = r.adam()?;
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes"));
        }
        if layers.is_empty() || layers.iter().any(|l| l.dim() != layers[0].dim()) {
            return Err(corrupt("inconsistent codebooks"));
        }
        if !adam_matches(&opt_g, &generator) || !adam_matches(&opt_d, &discriminator) {
            return Err(corrupt("optimizer state does not match parameters"));
        }
        let ck = Self {
            config,
            step,
            speakers,
            generator,
            discriminator,
            bottleneck: ResidualBottleneck { layers, initialized },
            teacher,
            opt_g,
            opt_d,
        };
        ck.check_layout()?;
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        let path = path.as_ref();
        // Write then rename so a crash never leaves a half-written file.
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| TrainError::Io(format!("{}: {e}", tmp.display())))?;
        fs::rename(&tmp, path).map_err(|e| TrainError::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| TrainError::CheckpointInvalid(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    /// Rebuilds the network layouts from the echoed config and checks that
    /// the stored tensors fit them.
    pub fn networks(&self) -> Result<(Codec, Discriminator), TrainError> {
        let cfg = &self.config.model;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = ParamStore::new();
        let codec = Codec::new(cfg, self.speakers.len().max(1), &mut g, &mut rng)
            .map_err(|e| corrupt(format!("config echo: {e}")))?;
        let mut d = ParamStore::new();
        let disc = Discriminator::new(&mut d, cfg.disc_channels, cfg.disc_scales, &mut rng);
        if !same_layout(&g, &self.generator) || !same_layout(&d, &self.discriminator) {
            return Err(corrupt("parameters do not match the configured networks"));
        }
        Ok((codec, disc))
    }

    fn check_layout(&self) -> Result<(), TrainError> {
        self.networks()?;
        let cfg = &self.config.model;
        let b = &self.bottleneck;
        if b.num_layers() != cfg.num_quantizers
            || b.layers.iter().any(|l| l.len() != cfg.codebook_size || l.dim() != cfg.encoder_out_dim)
        {
            return Err(corrupt("codebooks do not match the configured bottleneck"));
        }
        Ok(())
    }

    pub fn codec_model(&self) -> Result<CodecModel, TrainError> {
        let (codec, _) = self.networks()?;
        CodecModel::from_parts(codec, self.generator.clone(), self.bottleneck.clone()).map_err(|e| corrupt(e.to_string()))
    }

    pub fn teacher(&self) -> Result<TeacherTokenizer, TrainError> {
        let cfg = &self.config.model;
        let mut t = TeacherTokenizer::mfcc(&cfg.mel, cfg.teacher_vocab).map_err(|e| corrupt(e.to_string()))?;
        if let Some(cb) = &self.teacher {
            t.set_centroids(cb.clone()).map_err(|e| corrupt(e.to_string()))?;
        }
        Ok(t)
    }
}
