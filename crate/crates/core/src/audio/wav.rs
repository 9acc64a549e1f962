use std::path::Path;

use hound::{SampleFormat, WavSpec};

use super::Waveform;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Sample rate every front-end stage expects.
pub const EXPECTED_RATE_HZ: u32 = 16_000;

/// Read a 16-bit PCM mono WAV recorded at 16 kHz.
pub fn read_wav<T: Real>(path: impl AsRef<Path>) -> Result<Waveform<T>> {
    let path = path.as_ref();
    let unsupported = |reason: String| Error::UnsupportedAudio {
        path: path.to_path_buf(),
        reason,
    };
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(unsupported(format!(
            "{} channels; only mono audio is accepted",
            spec.channels
        )));
    }
    if spec.sample_format != SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(unsupported(format!(
            "{}-bit {:?} samples; only 16-bit PCM is accepted",
            spec.bits_per_sample, spec.sample_format
        )));
    }
    if spec.sample_rate != EXPECTED_RATE_HZ {
        return Err(unsupported(format!(
            "sample rate {} Hz; audio must be {EXPECTED_RATE_HZ} Hz (no resampling is performed)",
            spec.sample_rate
        )));
    }
    let scale = T::lit(1.0 / 32768.0);
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| T::lit(v as f64) * scale))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Waveform::new(samples, spec.sample_rate)
}

/// Write `w` as 16-bit PCM mono, clipping to [-1, 1].
pub fn write_wav<T: Real>(path: impl AsRef<Path>, w: &Waveform<T>) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: w.sample_rate_hz(),
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &s in w.samples() {
        let v = s.as_f64().clamp(-1.0, 1.0);
        writer.write_sample((v * 32767.0).round() as i16)?;
    }
    writer.finalize()?;
    Ok(())
}
