//! Training-set augmentation: speed and volume perturbation of waveforms,
//! manifest expansion, and random segmentation of feature matrices.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{FeatureMatrix, Waveform, FRAME_HOP_S};
use crate::error::{Error, Result};
use crate::manifest::{Manifest, ManifestEntry, Provenance, Split};
use crate::scalar::Real;

pub const MIN_SPEED_FACTOR: f64 = 0.5;
pub const MAX_SPEED_FACTOR: f64 = 2.0;

/// Zero crossings of the interpolation kernel on each side.
const SINC_ZERO_CROSSINGS: f64 = 16.0;

/// Segment lengths (seconds) drawn by [`random_segment`] besides the original length.
pub const SEGMENT_SECONDS: [u32; 9] = [2, 3, 4, 5, 6, 7, 8, 9, 10];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentPolicy {
    pub speed_factors: Vec<f64>,
    pub volume_factors: Vec<f64>,
    pub random_segment: bool,
    /// Splits whose utterances get augmented copies.
    pub splits: Vec<Split>,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            speed_factors: vec![0.9, 1.1],
            volume_factors: vec![0.25, 2.0],
            random_segment: true,
            splits: vec![Split::Train, Split::Dev],
        }
    }
}

impl AugmentPolicy {
    /// No perturbation copies and no random segmentation.
    pub fn none() -> Self {
        Self {
            speed_factors: vec![],
            volume_factors: vec![],
            random_segment: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for &f in &self.speed_factors {
            check_speed(f)?;
        }
        for &g in &self.volume_factors {
            check_gain(g)?;
        }
        Ok(())
    }
}

fn check_speed(factor: f64) -> Result<()> {
    if !(factor.is_finite() && (MIN_SPEED_FACTOR..=MAX_SPEED_FACTOR).contains(&factor)) {
        return Err(Error::OutOfRange {
            name: "speed factor",
            value: factor,
            lo: MIN_SPEED_FACTOR,
            hi: MAX_SPEED_FACTOR,
        });
    }
    Ok(())
}

fn check_gain(gain: f64) -> Result<()> {
    if !(gain.is_finite() && gain > 0.0) {
        return Err(Error::OutOfRange {
            name: "volume gain",
            value: gain,
            lo: 0.0,
            hi: f64::INFINITY,
        });
    }
    Ok(())
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Play `w` `factor` times faster: band-limited resampling to
/// `round(len / factor)` samples at the unchanged sample rate, so a tone
/// at `f` Hz comes out at `f * factor` Hz.
pub fn perturb_speed<T: Real>(w: &Waveform<T>, factor: f64) -> Result<Waveform<T>> {
    check_speed(factor)?;
    if factor == 1.0 {
        return Ok(w.clone());
    }
    let x = w.samples();
    let len = x.len();
    let out_len = ((len as f64 / factor).round() as usize).max(1);
    // Lowpass below the output Nyquist when compressing time.
    let cutoff = (1.0 / factor).min(1.0);
    let half_width = SINC_ZERO_CROSSINGS / cutoff;
    let mut out = Vec::with_capacity(out_len);
    for n in 0..out_len {
        let t = n as f64 * factor;
        let lo = ((t - half_width).ceil().max(0.0)) as usize;
        let hi = ((t + half_width).floor() as usize).min(len - 1);
        let mut acc = 0.0;
        for (k, &xk) in x.iter().enumerate().take(hi + 1).skip(lo) {
            let d = t - k as f64;
            let win = 0.5 + 0.5 * (std::f64::consts::PI * d / half_width).cos();
            acc += xk.as_f64() * cutoff * sinc(cutoff * d) * win;
        }
        out.push(T::lit(acc.clamp(-1.0, 1.0)));
    }
    Waveform::new(out, w.sample_rate_hz())
}

/// Scale every sample by `gain` and clip to [-1, 1].
pub fn perturb_volume<T: Real>(w: &Waveform<T>, gain: f64) -> Result<Waveform<T>> {
    check_gain(gain)?;
    let g = T::lit(gain);
    let one = T::one();
    let out = w
        .samples()
        .iter()
        .map(|&s| {
            let v = s * g;
            if v > one {
                one
            } else if v < -one {
                -one
            } else {
                v
            }
        })
        .collect();
    Waveform::new(out, w.sample_rate_hz())
}

/// Apply the waveform perturbation a manifest row's provenance calls for.
pub fn apply_provenance<T: Real>(w: &Waveform<T>, provenance: Provenance) -> Result<Waveform<T>> {
    match provenance {
        Provenance::Original => Ok(w.clone()),
        Provenance::Speed(f) => perturb_speed(w, f),
        Provenance::Volume(g) => perturb_volume(w, g),
    }
}

/// Add one row per (original utterance × factor) for the policy's splits.
/// Augmented rows follow their source row; labels and paths are copied.
pub fn expand_corpus(manifest: &Manifest, policy: &AugmentPolicy) -> Result<Manifest> {
    policy.validate()?;
    let mut entries = Vec::with_capacity(manifest.len());
    for e in manifest.entries() {
        entries.push(e.clone());
        if !e.provenance.is_original() || !policy.splits.contains(&e.split) {
            continue;
        }
        let variants = policy
            .speed_factors
            .iter()
            .map(|&f| Provenance::Speed(f))
            .chain(policy.volume_factors.iter().map(|&g| Provenance::Volume(g)));
        for provenance in variants {
            entries.push(ManifestEntry {
                id: format!("{}@{}", e.id, provenance),
                provenance,
                ..e.clone()
            });
        }
    }
    Manifest::new(manifest.labels().to_vec(), entries)
}

/// One outcome of the random-segmentation draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SegmentChoice {
    Seconds(u32),
    Original,
}

impl SegmentChoice {
    pub const ALL: [SegmentChoice; 10] = [
        SegmentChoice::Seconds(2),
        SegmentChoice::Seconds(3),
        SegmentChoice::Seconds(4),
        SegmentChoice::Seconds(5),
        SegmentChoice::Seconds(6),
        SegmentChoice::Seconds(7),
        SegmentChoice::Seconds(8),
        SegmentChoice::Seconds(9),
        SegmentChoice::Seconds(10),
        SegmentChoice::Original,
    ];

    pub fn draw<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self::ALL[rng.random_range(0..Self::ALL.len())]
    }

    /// Frame count for a fixed-length choice.
    pub fn frames(self) -> Option<usize> {
        match self {
            SegmentChoice::Seconds(s) => Some((s as f64 / FRAME_HOP_S).round() as usize),
            SegmentChoice::Original => None,
        }
    }
}

/// Crop `f` according to `choice`, drawing the start frame uniformly.
/// Utterances shorter than the drawn length are returned unchanged.
pub fn apply_segment<T: Real, R: Rng + ?Sized>(
    f: &FeatureMatrix<T>,
    choice: SegmentChoice,
    rng: &mut R,
) -> FeatureMatrix<T> {
    match choice.frames() {
        Some(len) if len <= f.num_frames() => {
            let start = rng.random_range(0..=f.num_frames() - len);
            f.slice_frames(start, len)
        }
        _ => f.clone(),
    }
}

pub fn random_segment<T: Real, R: Rng + ?Sized>(f: &FeatureMatrix<T>, rng: &mut R) -> FeatureMatrix<T> {
    let choice = SegmentChoice::draw(rng);
    apply_segment(f, choice, rng)
}
