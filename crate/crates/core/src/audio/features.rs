use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::{FeatureKind, FeatureMatrix, Waveform};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Energies are floored here before taking the log.
pub const LOG_FLOOR: f64 = 1e-10;

/// Short-time analysis parameters for 16 kHz audio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrameConfig {
    pub window_len_samples: usize,
    pub hop_samples: usize,
    pub fft_size: usize,
    pub num_mel_filters: usize,
    pub mel_low_hz: f64,
    pub mel_high_hz: f64,
}

impl Default for FrameConfig {
    fn default() -> Self {
        Self {
            window_len_samples: 400,
            hop_samples: 160,
            fft_size: 512,
            num_mel_filters: 40,
            mel_low_hz: 20.0,
            mel_high_hz: 7600.0,
        }
    }
}

impl FrameConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_len_samples == 0 || self.hop_samples == 0 {
            return Err(Error::Config("window and hop must be positive".into()));
        }
        if self.window_len_samples > self.fft_size {
            return Err(Error::Config(format!(
                "window length {} exceeds fft size {}",
                self.window_len_samples, self.fft_size
            )));
        }
        if self.hop_samples > self.window_len_samples {
            return Err(Error::Config(format!(
                "hop {} exceeds window length {}",
                self.hop_samples, self.window_len_samples
            )));
        }
        if !(self.mel_low_hz >= 0.0 && self.mel_low_hz < self.mel_high_hz) {
            return Err(Error::Config("mel band edges must satisfy 0 <= low < high".into()));
        }
        if self.fft_size / 2 < FeatureKind::Spectrogram.dim() {
            return Err(Error::Config(format!(
                "fft size {} has fewer than {} non-DC bins",
                self.fft_size,
                FeatureKind::Spectrogram.dim()
            )));
        }
        Ok(())
    }

    /// Number of frames for a signal of `len` samples.
    pub fn num_frames(&self, len: usize) -> Result<usize> {
        if len < self.window_len_samples {
            return Err(Error::SignalTooShort {
                got: len,
                min: self.window_len_samples,
            });
        }
        Ok((len - self.window_len_samples) / self.hop_samples + 1)
    }
}

pub fn hamming_window<T: Real>(len: usize) -> Vec<T> {
    if len == 1 {
        return vec![T::one()];
    }
    let denom = (len - 1) as f64;
    (0..len)
        .map(|n| T::lit(0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / denom).cos()))
        .collect()
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filters over the `fft_size / 2 + 1` power-spectrum bins,
/// shape `num_mel_filters × (fft_size / 2 + 1)`.
pub fn mel_filterbank<T: Real>(cfg: &FrameConfig, sample_rate_hz: u32) -> Array2<T> {
    let nbins = cfg.fft_size / 2 + 1;
    let nfilt = cfg.num_mel_filters;
    let lo = hz_to_mel(cfg.mel_low_hz);
    let hi = hz_to_mel(cfg.mel_high_hz);
    let edges: Vec<f64> = (0..nfilt + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (nfilt + 1) as f64))
        .collect();
    let bin_hz = sample_rate_hz as f64 / cfg.fft_size as f64;
    let mut bank = Array2::zeros((nfilt, nbins));
    for k in 0..nfilt {
        let (left, center, right) = (edges[k], edges[k + 1], edges[k + 2]);
        for b in 0..nbins {
            let f = b as f64 * bin_hz;
            let w = if f > left && f <= center {
                (f - left) / (center - left)
            } else if f > center && f < right {
                (right - f) / (right - center)
            } else {
                0.0
            };
            bank[[k, b]] = T::lit(w);
        }
    }
    bank
}

/// Split `w` into Hamming-windowed frames, one per row.
pub fn frame_signal<T: Real>(w: &Waveform<T>, cfg: &FrameConfig) -> Result<Array2<T>> {
    let n = cfg.num_frames(w.len())?;
    let window = hamming_window::<T>(cfg.window_len_samples);
    let samples = w.samples();
    let mut frames = Array2::zeros((n, cfg.window_len_samples));
    for (t, mut row) in frames.axis_iter_mut(Axis(0)).enumerate() {
        let start = t * cfg.hop_samples;
        let chunk = &samples[start..start + cfg.window_len_samples];
        for ((dst, &s), &h) in row.iter_mut().zip(chunk).zip(&window) {
            *dst = s * h;
        }
    }
    Ok(frames)
}

/// Orthonormal DCT-II of `x`, computed through a length-`2N` FFT.
pub fn dct_ortho<T: Real>(x: ArrayView1<'_, T>) -> Array1<T> {
    let n = x.len();
    let mut planner = FftPlanner::<T>::new();
    let fft = planner.plan_fft_forward(2 * n);
    let mut buf: Vec<Complex<T>> = x
        .iter()
        .chain(x.iter().rev())
        .map(|&v| Complex::new(v, T::zero()))
        .collect();
    fft.process(&mut buf);
    let nf = n as f64;
    let s0 = T::lit((1.0 / nf).sqrt());
    let sk = T::lit((2.0 / nf).sqrt());
    let half = T::lit(0.5);
    Array1::from_iter((0..n).map(|k| {
        let phase = -std::f64::consts::PI * k as f64 / (2.0 * nf);
        let twiddle = Complex::new(T::lit(phase.cos()), T::lit(phase.sin()));
        let v = (buf[k] * twiddle).re * half;
        if k == 0 {
            v * s0
        } else {
            v * sk
        }
    }))
}

/// Inverse of [`dct_ortho`] (orthonormal DCT-III).
pub fn idct_ortho<T: Real>(c: ArrayView1<'_, T>) -> Array1<T> {
    let n = c.len();
    let nf = n as f64;
    Array1::from_iter((0..n).map(|i| {
        let mut acc = 0.0;
        for (k, &ck) in c.iter().enumerate() {
            let s = if k == 0 { (1.0 / nf).sqrt() } else { (2.0 / nf).sqrt() };
            acc += s
                * ck.as_f64()
                * (std::f64::consts::PI * k as f64 * (2 * i + 1) as f64 / (2.0 * nf)).cos();
        }
        T::lit(acc)
    }))
}

/// Reusable front end holding the FFT plan, window and filterbank.
pub struct FeatureExtractor<T: Real> {
    cfg: FrameConfig,
    sample_rate_hz: u32,
    fft: Arc<dyn Fft<T>>,
    window: Vec<T>,
    filterbank: Array2<T>,
}

impl<T: Real> FeatureExtractor<T> {
    pub fn new(cfg: FrameConfig, sample_rate_hz: u32) -> Result<Self> {
        cfg.validate()?;
        let fft = FftPlanner::new().plan_fft_forward(cfg.fft_size);
        let window = hamming_window(cfg.window_len_samples);
        let filterbank = mel_filterbank(&cfg, sample_rate_hz);
        Ok(Self {
            cfg,
            sample_rate_hz,
            fft,
            window,
            filterbank,
        })
    }

    pub fn config(&self) -> &FrameConfig {
        &self.cfg
    }

    fn check_rate(&self, w: &Waveform<T>) -> Result<()> {
        if w.sample_rate_hz() != self.sample_rate_hz {
            return Err(Error::InvalidWaveform(format!(
                "sample rate {} Hz does not match extractor rate {} Hz",
                w.sample_rate_hz(),
                self.sample_rate_hz
            )));
        }
        Ok(())
    }

    /// `frames × (fft_size/2 + 1)` power spectrum.
    pub fn power_spectrum(&self, w: &Waveform<T>) -> Result<Array2<T>> {
        self.check_rate(w)?;
        let n = self.cfg.num_frames(w.len())?;
        let nbins = self.cfg.fft_size / 2 + 1;
        let mut out = Array2::zeros((n, nbins));
        let mut buf = vec![Complex::new(T::zero(), T::zero()); self.cfg.fft_size];
        let mut scratch =
            vec![Complex::new(T::zero(), T::zero()); self.fft.get_inplace_scratch_len()];
        let samples = w.samples();
        for (t, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
            let start = t * self.cfg.hop_samples;
            for (i, c) in buf.iter_mut().enumerate() {
                *c = if i < self.cfg.window_len_samples {
                    Complex::new(samples[start + i] * self.window[i], T::zero())
                } else {
                    Complex::new(T::zero(), T::zero())
                };
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (dst, c) in row.iter_mut().zip(&buf) {
                *dst = c.norm_sqr();
            }
        }
        Ok(out)
    }

    fn log_floor(v: T) -> T {
        let floor = T::lit(LOG_FLOOR);
        (if v > floor { v } else { floor }).ln()
    }

    pub fn spectrogram(&self, w: &Waveform<T>) -> Result<FeatureMatrix<T>> {
        let power = self.power_spectrum(w)?;
        let d = FeatureKind::Spectrogram.dim();
        let spec = power
            .slice(ndarray::s![.., 1..=d])
            .mapv(Self::log_floor);
        FeatureMatrix::new(FeatureKind::Spectrogram, spec)
    }

    /// Log mel energies, `frames × num_mel_filters`, without a kind check.
    pub fn log_mel(&self, w: &Waveform<T>) -> Result<Array2<T>> {
        let power = self.power_spectrum(w)?;
        Ok(power.dot(&self.filterbank.t()).mapv(Self::log_floor))
    }

    pub fn fbank(&self, w: &Waveform<T>) -> Result<FeatureMatrix<T>> {
        FeatureMatrix::new(FeatureKind::Fbank, self.log_mel(w)?)
    }

    pub fn mfcc(&self, w: &Waveform<T>) -> Result<FeatureMatrix<T>> {
        let logmel = self.log_mel(w)?;
        let mut out = Array2::zeros(logmel.raw_dim());
        for (src, mut dst) in logmel.axis_iter(Axis(0)).zip(out.axis_iter_mut(Axis(0))) {
            dst.assign(&dct_ortho(src));
        }
        FeatureMatrix::new(FeatureKind::Mfcc, out)
    }

    pub fn extract(&self, kind: FeatureKind, w: &Waveform<T>) -> Result<FeatureMatrix<T>> {
        match kind {
            FeatureKind::Mfcc => self.mfcc(w),
            FeatureKind::Fbank => self.fbank(w),
            FeatureKind::Spectrogram => self.spectrogram(w),
        }
    }
}

pub fn spectrogram<T: Real>(w: &Waveform<T>, cfg: &FrameConfig) -> Result<FeatureMatrix<T>> {
    FeatureExtractor::new(cfg.clone(), w.sample_rate_hz())?.spectrogram(w)
}

pub fn fbank<T: Real>(w: &Waveform<T>, cfg: &FrameConfig) -> Result<FeatureMatrix<T>> {
    FeatureExtractor::new(cfg.clone(), w.sample_rate_hz())?.fbank(w)
}

pub fn mfcc<T: Real>(w: &Waveform<T>, cfg: &FrameConfig) -> Result<FeatureMatrix<T>> {
    FeatureExtractor::new(cfg.clone(), w.sample_rate_hz())?.mfcc(w)
}

/// Per-utterance mean/variance normalization of every coefficient column.
/// Columns with zero variance become all zeros.
pub fn normalize<T: Real>(f: &FeatureMatrix<T>) -> Result<FeatureMatrix<T>> {
    let frames = f.frames();
    let t = frames.nrows();
    if t < 2 {
        return Err(Error::NormalizeTooFewFrames(t));
    }
    let tn = T::from_usize_lossy(t);
    let mut out = frames.to_owned();
    for mut col in out.axis_iter_mut(Axis(1)) {
        let mean = col.iter().copied().sum::<T>() / tn;
        let var = col.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / tn;
        let std = var.sqrt();
        let scale = if mean.abs() > T::one() { mean.abs() } else { T::one() };
        if std <= T::epsilon() * T::lit(64.0) * scale {
            col.fill(T::zero());
        } else {
            col.mapv_inplace(|v| (v - mean) / std);
        }
    }
    FeatureMatrix::new(f.kind(), out)
}
