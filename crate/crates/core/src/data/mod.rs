//! Manifests, segment sampling and the synthetic corpus generator.

mod synth;

pub use synth::{
    load_sidecar, make_synthetic_corpus, speaker_name, synthesize_utterance, utterance_name, Sidecar, SynthConfig, NUM_PHONES,
    UNVOICED_PHONES,
};

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::signal::{load_wav, AudioBuffer, SignalError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("manifest line {line}: {msg}")]
    ParseError { line: usize, msg: String },
    #[error("duplicate utterance id {0:?}")]
    DuplicateUtteranceId(String),
    #[error("audio for {id:?} not found at {path}")]
    MissingAudio { id: String, path: PathBuf },
    #[error("utterance {id:?} has {len} samples, segment needs {need}")]
    UtteranceTooShort { id: String, len: usize, need: usize },
    #[error("unknown utterance {0:?}")]
    UnknownUtterance(String),
    #[error("i/o failure on {path}: {source}")]
    IoFailure { path: PathBuf, source: std::io::Error },
    #[error("audio error in {id:?}: {source}")]
    Audio { id: String, source: SignalError },
    #[error("{0}")]
    Invalid(String),
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::IoFailure { path: path.to_path_buf(), source }
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub speaker: String,
    pub path: PathBuf,
    pub duration_s: f64,
}

/// Validated list of utterances. Relative audio paths resolve against the
/// manifest's directory.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
    /// Sorted distinct speaker ids; a speaker's label is its index here.
    pub speakers: Vec<String>,
    pub base_dir: PathBuf,
}

impl Manifest {
    /// Builds a manifest from records, rejecting duplicate ids.
    pub fn new(records: Vec<ManifestRecord>, base_dir: impl Into<PathBuf>) -> Result<Self, DataError> {
        let mut seen = BTreeSet::new();
        for r in &records {
            if !seen.insert(r.id.as_str()) {
                return Err(DataError::DuplicateUtteranceId(r.id.clone()));
            }
        }
        let speakers: Vec<String> = records.iter().map(|r| r.speaker.clone()).collect::<BTreeSet<_>>().into_iter().collect();
        Ok(Self { records, speakers, base_dir: base_dir.into() })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn num_speakers(&self) -> usize {
        self.speakers.len()
    }

    pub fn speaker_label(&self, speaker: &str) -> Option<usize> {
        self.speakers.binary_search_by(|s| s.as_str().cmp(speaker)).ok()
    }

    pub fn get(&self, id: &str) -> Option<&ManifestRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn audio_path(&self, r: &ManifestRecord) -> PathBuf {
        if r.path.is_absolute() {
            r.path.clone()
        } else {
            self.base_dir.join(&r.path)
        }
    }

    /// Records of one speaker, in manifest order.
    pub fn utterances_of<'a>(&'a self, speaker: &'a str) -> impl Iterator<Item = &'a ManifestRecord> + 'a {
        self.records.iter().filter(move |r| r.speaker == speaker)
    }

    pub fn load_audio(&self, r: &ManifestRecord) -> Result<AudioBuffer, DataError> {
        let path = self.audio_path(r);
        if !path.is_file() {
            return Err(DataError::MissingAudio { id: r.id.clone(), path });
        }
        load_wav(&path).map_err(|source| DataError::Audio { id: r.id.clone(), source })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), DataError> {
        let path = path.as_ref();
        let mut f = fs::File::create(path).map_err(io_err(path))?;
        for r in &self.records {
            let line = serde_json::to_string(r).map_err(|e| DataError::Invalid(e.to_string()))?;
            writeln!(f, "{line}").map_err(io_err(path))?;
        }
        Ok(())
    }
}

/// Reads a JSON-lines manifest and checks that every audio file exists.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest, DataError> {
    let path = path.as_ref();
    let f = fs::File::open(path).map_err(io_err(path))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: ManifestRecord =
            serde_json::from_str(&line).map_err(|e| DataError::ParseError { line: i + 1, msg: e.to_string() })?;
        if !(r.duration_s.is_finite() && r.duration_s >= 0.0) {
            return Err(DataError::ParseError { line: i + 1, msg: format!("bad duration {}", r.duration_s) });
        }
        records.push(r);
    }
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let m = Manifest::new(records, base)?;
    for r in &m.records {
        let p = m.audio_path(r);
        if !p.is_file() {
            return Err(DataError::MissingAudio { id: r.id.clone(), path: p });
        }
    }
    Ok(m)
}

/// A manifest with all audio in memory.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub manifest: Manifest,
    pub audio: Vec<AudioBuffer>,
    index: HashMap<String, usize>,
}

impl Corpus {
    pub fn load(manifest: Manifest) -> Result<Self, DataError> {
        let audio = manifest.records.iter().map(|r| manifest.load_audio(r)).collect::<Result<Vec<_>, _>>()?;
        Self::from_parts(manifest, audio)
    }

    pub fn from_parts(manifest: Manifest, audio: Vec<AudioBuffer>) -> Result<Self, DataError> {
        if audio.len() != manifest.len() {
            return Err(DataError::Invalid(format!("{} buffers for {} records", audio.len(), manifest.len())));
        }
        if let Some(first) = audio.first() {
            if let Some((r, _)) = manifest.records.iter().zip(&audio).find(|(_, a)| a.sample_rate != first.sample_rate) {
                return Err(DataError::Invalid(format!("{} has a different sample rate", r.id)));
            }
        }
        let index = manifest.records.iter().enumerate().map(|(i, r)| (r.id.clone(), i)).collect();
        Ok(Self { manifest, audio, index })
    }

    pub fn len(&self) -> usize {
        self.audio.len()
    }

    pub fn is_empty(&self) -> bool {
        self.audio.is_empty()
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn label(&self, i: usize) -> usize {
        self.manifest.speaker_label(&self.manifest.records[i].speaker).expect("speaker in vocabulary")
    }
}

/// Two fixed-length crops of one utterance and its speaker label.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentPair {
    pub utterance: usize,
    pub label: usize,
    pub offset_a: usize,
    pub offset_b: usize,
    pub seg_a: AudioBuffer,
    pub seg_b: AudioBuffer,
}

/// Two independent uniform start offsets in `0..=len - seg_len`.
pub fn segment_offsets<R: Rng>(len: usize, seg_len: usize, rng: &mut R) -> Option<(usize, usize)> {
    if seg_len == 0 || len < seg_len {
        return None;
    }
    let hi = len - seg_len;
    Some((rng.gen_range(0..=hi), rng.gen_range(0..=hi)))
}

pub fn sample_segment_pair<R: Rng>(corpus: &Corpus, utt: &str, seg_len: usize, rng: &mut R) -> Result<SegmentPair, DataError> {
    let i = corpus.position(utt).ok_or_else(|| DataError::UnknownUtterance(utt.to_string()))?;
    sample_segment_pair_at(corpus, i, seg_len, rng)
}

pub fn sample_segment_pair_at<R: Rng>(corpus: &Corpus, i: usize, seg_len: usize, rng: &mut R) -> Result<SegmentPair, DataError> {
    let buf = &corpus.audio[i];
    let (a, b) = segment_offsets(buf.len(), seg_len, rng).ok_or_else(|| DataError::UtteranceTooShort {
        id: corpus.manifest.records[i].id.clone(),
        len: buf.len(),
        need: seg_len,
    })?;
    let crop = |o: usize| AudioBuffer { samples: buf.samples[o..o + seg_len].to_vec(), sample_rate: buf.sample_rate };
    Ok(SegmentPair { utterance: i, label: corpus.label(i), offset_a: a, offset_b: b, seg_a: crop(a), seg_b: crop(b) })
}
