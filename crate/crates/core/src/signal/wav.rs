use std::path::Path;

use super::{AudioBuffer, SignalError};

fn classify(err: hound::Error, path: &Path) -> SignalError {
    let p = path.display();
    match err {
        hound::Error::IoError(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => {
            SignalError::TruncatedFile(format!("{p}: {e}"))
        }
        hound::Error::IoError(e) => SignalError::IoFailure(e),
        hound::Error::FormatError(m) => SignalError::NotWav(format!("{p}: {m}")),
        hound::Error::Unsupported => SignalError::UnsupportedEncoding(format!("{p}: unsupported WAVE format")),
        other => SignalError::UnsupportedEncoding(format!("{p}: {other}")),
    }
}

/// Reads a 16-bit PCM mono WAVE file, scaling samples by `1 / 32768`.
pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioBuffer, SignalError> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| classify(e, path))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(SignalError::UnsupportedEncoding(format!(
            "{}: {} channels, expected mono",
            path.display(),
            spec.channels
        )));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(SignalError::UnsupportedEncoding(format!(
            "{}: {} bit {:?}, expected 16-bit PCM",
            path.display(),
            spec.bits_per_sample,
            spec.sample_format
        )));
    }
    let expected = reader.len() as usize;
    let mut samples = Vec::with_capacity(expected);
    for s in reader.into_samples::<i16>() {
        let s = s.map_err(|e| match e {
            hound::Error::IoError(io) => {
                SignalError::TruncatedFile(format!("{}: {io}", path.display()))
            }
            other => classify(other, path),
        })?;
        samples.push(s as f64 / 32768.0);
    }
    if samples.len() < expected {
        return Err(SignalError::TruncatedFile(format!(
            "{}: {} of {expected} samples present",
            path.display(),
            samples.len()
        )));
    }
    AudioBuffer::new(samples, spec.sample_rate)
}

/// Quantizes to 16-bit PCM. Values outside `[-1, 1]` are clipped.
pub(crate) fn to_pcm16(x: f64) -> i16 {
    (x.clamp(-1.0, 1.0) * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Writes a 16-bit PCM mono WAVE file.
pub fn save_wav(buf: &AudioBuffer, path: impl AsRef<Path>) -> Result<(), SignalError> {
    let path = path.as_ref();
    if buf.samples.iter().any(|s| !s.is_finite()) {
        return Err(SignalError::InvalidAudio("cannot write non-finite samples".into()));
    }
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: buf.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(|e| classify(e, path))?;
    for &s in &buf.samples {
        w.write_sample(to_pcm16(s)).map_err(|e| classify(e, path))?;
    }
    w.finalize().map_err(|e| classify(e, path))?;
    Ok(())
}
