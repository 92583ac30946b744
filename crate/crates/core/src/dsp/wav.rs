//! 16-bit PCM mono WAV I/O.

use std::path::Path;

use crate::error::{Error, Result};

const FULL_SCALE: f64 = 32768.0;

/// Reads a mono 16-bit PCM file, scaling samples into `[-1, 1)`.
pub fn read_wav(path: impl AsRef<Path>) -> Result<(Vec<f64>, u32)> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| map_hound(path, e))?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::WavEncoding(format!(
            "{:?} with {} bits per sample",
            spec.sample_format, spec.bits_per_sample
        )));
    }
    if spec.channels != 1 {
        return Err(Error::WavChannels(spec.channels));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / FULL_SCALE))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| map_hound(path, e))?;
    Ok((samples, spec.sample_rate))
}

/// Quantises to 16 bits with round-to-nearest and saturation.
pub fn quantize(v: f64) -> i16 {
    (v * FULL_SCALE).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16
}

pub fn write_wav(path: impl AsRef<Path>, signal: &[f64], sample_rate: u32) -> Result<()> {
    let path = path.as_ref();
    if signal.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("samples written to {}", path.display())));
    }
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| map_hound(path, e))?;
    for &v in signal {
        writer.write_sample(quantize(v)).map_err(|e| map_hound(path, e))?;
    }
    writer.finalize().map_err(|e| map_hound(path, e))
}

fn map_hound(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) if io.kind() == std::io::ErrorKind::UnexpectedEof => {
            Error::WavHeader(format!("{}: unexpected end of file", path.display()))
        }
        hound::Error::IoError(io) => Error::io(path, io),
        hound::Error::FormatError(msg) => Error::WavHeader(format!("{}: {msg}", path.display())),
        hound::Error::Unsupported => Error::WavEncoding("unsupported WAVE feature".into()),
        other => Error::WavEncoding(other.to_string()),
    }
}
