//! 16-bit PCM mono WAV input and output.

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::AudioClip;
use crate::error::{Error, Result};

const FULL_SCALE: f64 = 32768.0;

pub fn read_wav(path: &Path) -> Result<AudioClip> {
    let reader = WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::format(path, "header", other.to_string()),
    })?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::format(path, "channels", format!("expected mono, found {} channels", spec.channels)));
    }
    if spec.sample_format != SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::format(
            path,
            "bits_per_sample",
            format!(
                "unsupported encoding: {} bit {:?} (only 16-bit PCM is supported)",
                spec.bits_per_sample, spec.sample_format
            ),
        ));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / FULL_SCALE))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::format(path, "data", e.to_string()))?;
    Ok(AudioClip { samples, sample_rate: spec.sample_rate })
}

/// Quantize to 16 bits, clamping to the representable range.
pub fn write_wav(clip: &AudioClip, path: &Path) -> Result<()> {
    clip.validate()?;
    let spec = WavSpec { channels: 1, sample_rate: clip.sample_rate, bits_per_sample: 16, sample_format: SampleFormat::Int };
    let wrap = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::format(path, "data", other.to_string()),
    };
    let mut w = WavWriter::create(path, spec).map_err(wrap)?;
    for &x in &clip.samples {
        let q = (x * FULL_SCALE).round().clamp(-FULL_SCALE, FULL_SCALE - 1.0) as i16;
        w.write_sample(q).map_err(wrap)?;
    }
    w.finalize().map_err(wrap)
}
