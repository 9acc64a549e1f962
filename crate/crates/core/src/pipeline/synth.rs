//! Desk-scale synthetic corpus: per-dialect band-limited audio bursts plus
//! parallel word-token transcripts with tunable vocabulary overlap.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::audio::{write_wav, Waveform};
use crate::error::{Error, Result};
use crate::manifest::{Manifest, ManifestEntry, Provenance, Split};
use crate::vsm::{write_token_file, TokenSequence, TokenLevel};
use crate::{seeded_rng, Rng64};

const SAMPLE_RATE: u32 = 16_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub num_dialects: usize,
    pub utts_per_dialect: usize,
    pub seed: u64,
    pub min_duration_s: f64,
    pub max_duration_s: f64,
    /// Fraction of each dialect's vocabulary drawn from a pool shared by all dialects.
    pub vocab_overlap: f64,
    pub vocab_per_dialect: usize,
    pub min_words: usize,
    pub max_words: usize,
    /// Fractions of each dialect's utterances assigned to TRAIN and DEV; the rest is TEST.
    pub train_fraction: f64,
    pub dev_fraction: f64,
    /// Fraction of burst partials drawn from the dialect's own band; the
    /// rest are spread over the whole 250 Hz to 6 kHz range.
    pub acoustic_purity: f64,
    pub write_audio: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_dialects: 3,
            utts_per_dialect: 50,
            seed: 0,
            min_duration_s: 3.0,
            max_duration_s: 12.0,
            vocab_overlap: 0.5,
            vocab_per_dialect: 60,
            min_words: 8,
            max_words: 30,
            train_fraction: 0.5,
            dev_fraction: 0.3,
            acoustic_purity: 0.3,
            write_audio: true,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_dialects < 2 {
            return Err(Error::Config("synthetic corpus needs at least 2 dialects".into()));
        }
        if self.num_dialects > 13 {
            return Err(Error::Config("synthetic corpus supports at most 13 dialects".into()));
        }
        if self.utts_per_dialect < 3 {
            return Err(Error::Config("need at least 3 utterances per dialect".into()));
        }
        if !(self.min_duration_s >= 0.1 && self.min_duration_s <= self.max_duration_s) {
            return Err(Error::Config("need 0.1 <= min_duration_s <= max_duration_s".into()));
        }
        if !(0.0..=1.0).contains(&self.vocab_overlap) {
            return Err(Error::Config("vocab_overlap must be in [0, 1]".into()));
        }
        if self.vocab_per_dialect == 0 || self.min_words == 0 || self.min_words > self.max_words {
            return Err(Error::Config("vocabulary and utterance word counts must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.acoustic_purity) {
            return Err(Error::Config("acoustic_purity must be in [0, 1]".into()));
        }
        let f = self.train_fraction + self.dev_fraction;
        if !(self.train_fraction > 0.0 && self.dev_fraction > 0.0 && f < 1.0) {
            return Err(Error::Config("train/dev fractions must be positive and leave room for TEST".into()));
        }
        Ok(())
    }

    pub fn labels(&self) -> Vec<String> {
        (0..self.num_dialects).map(|d| format!("DIA{d}")).collect()
    }
}

/// Paths of a generated corpus.
#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub manifest: Manifest,
    pub manifest_path: PathBuf,
    pub words_path: PathBuf,
}

/// Frequency band `[lo, hi]` in Hz owned by dialect `d` of `n`: equal
/// slices of a log-frequency axis from 250 Hz to 6 kHz, keeping the
/// central 60 % of each slice.
pub fn dialect_band(d: usize, n: usize) -> (f64, f64) {
    let (lo, hi) = (250f64.ln(), 6000f64.ln());
    let step = (hi - lo) / n as f64;
    let a = lo + step * (d as f64 + 0.2);
    let b = lo + step * (d as f64 + 0.8);
    (a.exp(), b.exp())
}

/// One synthetic utterance of dialect `d`: a low noise floor with
/// syllable-like bursts of partials, a `purity` fraction of them in-band.
pub fn synth_waveform(
    d: usize,
    n: usize,
    duration_s: f64,
    purity: f64,
    rng: &mut Rng64,
) -> Result<Waveform<f64>> {
    let len = (duration_s * SAMPLE_RATE as f64).round() as usize;
    let (lo, hi) = dialect_band(d, n);
    let floor = Normal::new(0.0, 0.005).expect("valid normal");
    let mut x: Vec<f64> = (0..len).map(|_| floor.sample(rng)).collect();
    let sr = SAMPLE_RATE as f64;
    let tau = 2.0 * std::f64::consts::PI;
    let mut t = rng.random_range(0.0..0.2);
    while t < duration_s {
        let burst = rng.random_range(0.08..0.30);
        let amp = rng.random_range(0.05..0.25);
        let start = (t * sr) as usize;
        let end = (((t + burst) * sr) as usize).min(len);
        let partials: Vec<(f64, f64, f64)> = (0..6)
            .map(|_| {
                let f = if rng.random::<f64>() < purity {
                    rng.random_range(lo..hi)
                } else {
                    rng.random_range(250f64.ln()..6000f64.ln()).exp()
                };
                (
                    f,
                    rng.random_range(0.0..tau),
                    rng.random_range(0.3..1.0),
                )
            })
            .collect();
        let blen = (end - start).max(1) as f64;
        for (i, s) in x[start..end].iter_mut().enumerate() {
            let env = (std::f64::consts::PI * i as f64 / blen).sin();
            let time = i as f64 / sr;
            let v: f64 = partials
                .iter()
                .map(|&(f, ph, a)| a * (tau * f * time + ph).sin())
                .sum::<f64>()
                / partials.len() as f64;
            *s += amp * env * v;
        }
        t += burst + rng.random_range(0.05..0.20);
    }
    for s in &mut x {
        *s = s.clamp(-1.0, 1.0);
    }
    Waveform::new(x, SAMPLE_RATE)
}

fn random_word(rng: &mut Rng64, letters: &[char]) -> String {
    let len = rng.random_range(3..=7);
    (0..len).map(|_| letters[rng.random_range(0..letters.len())]).collect()
}

/// Alphabet slice that dialect `d` builds its private words from.
fn dialect_letters(d: usize, n: usize) -> Vec<char> {
    let letters: Vec<char> = ('a'..='z').collect();
    let per = letters.len() / n;
    letters[d * per..(d + 1) * per].to_vec()
}

/// Per-dialect vocabularies, most frequent first. The first
/// `round(overlap · V)` entries of every list come from a pool shared by
/// all dialects; the remainder is private to the dialect.
pub fn synth_vocabularies(cfg: &SynthConfig, rng: &mut Rng64) -> Vec<Vec<String>> {
    let n = cfg.num_dialects;
    let v = cfg.vocab_per_dialect;
    let shared_count = (cfg.vocab_overlap * v as f64).round() as usize;
    let all: Vec<char> = ('a'..='z').collect();
    let mut used = HashSet::new();
    let mut fresh = |rng: &mut Rng64, letters: &[char]| loop {
        let w = random_word(rng, letters);
        if used.insert(w.clone()) {
            return w;
        }
    };
    let shared: Vec<String> = (0..shared_count).map(|_| fresh(rng, &all)).collect();
    (0..n)
        .map(|d| {
            let letters = dialect_letters(d, n);
            let mut vocab = shared.clone();
            vocab.extend((shared_count..v).map(|_| fresh(rng, &letters)));
            vocab
        })
        .collect()
}

/// Zipf-distributed word sequence over `vocab` (rank 1 = first entry).
pub fn synth_sentence(vocab: &[String], words: usize, rng: &mut Rng64) -> Vec<String> {
    let weights: Vec<f64> = (1..=vocab.len()).map(|r| 1.0 / r as f64).collect();
    let dist = rand::distr::weighted::WeightedIndex::new(&weights).expect("positive weights");
    (0..words).map(|_| vocab[dist.sample(rng)].clone()).collect()
}

/// Write `num_dialects × utts_per_dialect` WAV files, `manifest.csv` and
/// `tokens/words.txt` under `out_dir`.
pub fn generate_synthetic_corpus(cfg: &SynthConfig, out_dir: &Path) -> Result<SynthCorpus> {
    cfg.validate()?;
    let audio_dir = out_dir.join("audio");
    let token_dir = out_dir.join("tokens");
    std::fs::create_dir_all(&audio_dir)?;
    std::fs::create_dir_all(&token_dir)?;
    let mut rng = seeded_rng(cfg.seed);
    let vocabs = synth_vocabularies(cfg, &mut rng);
    let labels = cfg.labels();
    let n_train = ((cfg.utts_per_dialect as f64) * cfg.train_fraction).round() as usize;
    let n_dev = ((cfg.utts_per_dialect as f64) * cfg.dev_fraction).round().max(1.0) as usize;

    let mut entries = Vec::new();
    let mut sequences = Vec::new();
    for (d, label) in labels.iter().enumerate() {
        for i in 0..cfg.utts_per_dialect {
            let id = format!("{label}_{i:04}");
            let split = if i < n_train {
                Split::Train
            } else if i < n_train + n_dev {
                Split::Dev
            } else {
                Split::Test
            };
            let duration = rng.random_range(cfg.min_duration_s..=cfg.max_duration_s);
            let path = audio_dir.join(format!("{id}.wav"));
            // Audio and text draw from separate streams so toggling audio
            // output leaves transcripts unchanged.
            let mut audio_rng = seeded_rng(rng.random());
            if cfg.write_audio {
                let w = synth_waveform(d, cfg.num_dialects, duration, cfg.acoustic_purity, &mut audio_rng)?;
                write_wav(&path, &w)?;
            }
            let words = rng.random_range(cfg.min_words..=cfg.max_words);
            sequences.push(TokenSequence::new(
                id.clone(),
                TokenLevel::Word,
                synth_sentence(&vocabs[d], words, &mut rng),
            )?);
            entries.push(ManifestEntry {
                id,
                path,
                label: label.clone(),
                split,
                provenance: Provenance::Original,
            });
        }
    }
    let manifest = Manifest::new(labels, entries)?;
    let manifest_path = out_dir.join("manifest.csv");
    manifest.save(&manifest_path)?;
    let words_path = token_dir.join("words.txt");
    write_token_file(&words_path, &sequences)?;
    Ok(SynthCorpus {
        manifest,
        manifest_path,
        words_path,
    })
}
