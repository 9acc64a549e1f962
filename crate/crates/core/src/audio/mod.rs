//! Waveform container, WAV I/O and the acoustic front end.

mod features;
mod wav;

pub use features::{
    dct_ortho, fbank, frame_signal, hamming_window, hz_to_mel, idct_ortho, mel_filterbank,
    mel_to_hz, mfcc, normalize, spectrogram, FeatureExtractor, FrameConfig, LOG_FLOOR,
};
pub use wav::{read_wav, write_wav, EXPECTED_RATE_HZ};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Mono PCM audio with its sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform<T> {
    samples: Vec<T>,
    sample_rate_hz: u32,
}

impl<T: Real> Waveform<T> {
    pub fn new(samples: Vec<T>, sample_rate_hz: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidWaveform("no samples".into()));
        }
        if sample_rate_hz == 0 {
            return Err(Error::InvalidWaveform("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::InvalidWaveform(format!("sample {i} is not finite")));
        }
        Ok(Self {
            samples,
            sample_rate_hz,
        })
    }

    pub fn samples(&self) -> &[T] {
        &self.samples
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }

    pub fn peak(&self) -> T {
        self.samples
            .iter()
            .fold(T::zero(), |m, s| if s.abs() > m { s.abs() } else { m })
    }

    pub fn into_samples(self) -> Vec<T> {
        self.samples
    }
}

/// Which acoustic representation a [`FeatureMatrix`] holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Mfcc,
    Fbank,
    Spectrogram,
}

impl FeatureKind {
    pub const ALL: [FeatureKind; 3] = [FeatureKind::Mfcc, FeatureKind::Fbank, FeatureKind::Spectrogram];

    /// Coefficients per frame.
    pub fn dim(self) -> usize {
        match self {
            FeatureKind::Mfcc | FeatureKind::Fbank => 40,
            FeatureKind::Spectrogram => 200,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FeatureKind::Mfcc => "mfcc",
            FeatureKind::Fbank => "fbank",
            FeatureKind::Spectrogram => "spectrogram",
        }
    }
}

impl std::str::FromStr for FeatureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mfcc" => Ok(FeatureKind::Mfcc),
            "fbank" => Ok(FeatureKind::Fbank),
            "spectrogram" | "spec" => Ok(FeatureKind::Spectrogram),
            other => Err(Error::InvalidArgument(format!("unknown feature kind `{other}`"))),
        }
    }
}

impl std::fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Frame hop in seconds (160 samples at 16 kHz).
pub const FRAME_HOP_S: f64 = 0.010;
/// Frame length in seconds (400 samples at 16 kHz).
pub const FRAME_LEN_S: f64 = 0.025;

/// Frames × coefficients matrix tagged with its feature kind.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix<T> {
    kind: FeatureKind,
    frames: Array2<T>,
}

impl<T: Real> FeatureMatrix<T> {
    pub fn new(kind: FeatureKind, frames: Array2<T>) -> Result<Self> {
        if frames.nrows() == 0 {
            return Err(Error::Shape("feature matrix has no frames".into()));
        }
        if frames.ncols() != kind.dim() {
            return Err(Error::Shape(format!(
                "{kind} features need {} coefficients, got {}",
                kind.dim(),
                frames.ncols()
            )));
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("feature matrix has non-finite entries".into()));
        }
        Ok(Self { kind, frames })
    }

    pub fn kind(&self) -> FeatureKind {
        self.kind
    }

    pub fn frames(&self) -> &Array2<T> {
        &self.frames
    }

    pub fn into_frames(self) -> Array2<T> {
        self.frames
    }

    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }

    pub fn frame_hop_s(&self) -> f64 {
        FRAME_HOP_S
    }

    pub fn frame_len_s(&self) -> f64 {
        FRAME_LEN_S
    }

    /// Contiguous frames `start..start + len` (caller guarantees bounds).
    pub(crate) fn slice_frames(&self, start: usize, len: usize) -> Self {
        Self {
            kind: self.kind,
            frames: self.frames.slice(ndarray::s![start..start + len, ..]).to_owned(),
        }
    }
}
