//! One function per `didkit` subcommand. Every command validates its
//! inputs, writes its artifacts plus a `.runlog`, and removes whatever it
//! created if it fails part-way.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rayon::prelude::*;

use crate::audio::{normalize, read_wav, FeatureExtractor, FeatureKind, FeatureMatrix, FRAME_HOP_S};
use crate::augment::{apply_provenance, expand_corpus};
use crate::e2e::{train, validation_split, E2eModel, Example, Snapshot};
use crate::error::{Error, Result};
use crate::eval::{det_points, det_points_tsv, evaluate as eval_metrics, znorm, FusionModel, Metrics, ScoreTable};
use crate::manifest::{Manifest, ManifestEntry, Split};
use crate::pipeline::checkpoint::{
    e2e_from_checkpoint, e2e_to_checkpoint, features_from_checkpoint, features_to_checkpoint,
    siamese_from_checkpoint, siamese_to_checkpoint, Checkpoint,
};
use crate::pipeline::config::{FeaturesSection, PipelineConfig};
use crate::pipeline::runlog::{blob_hash, text_hash, Outputs, RunLog};
use crate::pipeline::synth::generate_synthetic_corpus;
use crate::siamese::{representative_embeddings, score_embedding, train_siamese, LabeledVector, SparseInput};
use crate::vsm::{
    cosine_score_baseline, read_token_file, representative_vectors, NGramDictionary, NGramPolicy, SparseVector,
    TokenLevel, RepresentativeVector,
};

pub const FEATURE_INDEX: &str = "index.tsv";
pub const VSM_DICTIONARY: &str = "dictionary.txt";
pub const VSM_VECTORS: &str = "vectors.tsv";
pub const EMBEDDINGS: &str = "embeddings.tsv";
pub const REP_EMBEDDINGS: &str = "representatives.tsv";

fn runlog_path(output: &Path, command: &str) -> PathBuf {
    if output.is_dir() {
        output.join(format!("{command}.runlog"))
    } else {
        let mut s = output.as_os_str().to_owned();
        s.push(".runlog");
        PathBuf::from(s)
    }
}

fn finish(outputs: &mut Outputs, mut log: RunLog, written: &[PathBuf], anchor: &Path) -> Result<()> {
    for p in written {
        log.output(p)?;
    }
    let path = outputs.file(runlog_path(anchor, &log.command));
    std::fs::write(path, log.to_text())?;
    Ok(())
}

fn write_file(outputs: &mut Outputs, written: &mut Vec<PathBuf>, path: PathBuf, contents: &[u8]) -> Result<()> {
    let p = outputs.file(path);
    std::fs::write(&p, contents)?;
    written.push(p);
    Ok(())
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("worker pool: {e}")))
}

fn safe_name(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "._@=-".contains(c) { c } else { '_' })
        .collect()
}

/// `synth-corpus`: audio, manifest and word tokens under `out_dir`.
pub fn synth_corpus(cfg: &PipelineConfig, out_dir: &Path) -> Result<String> {
    let mut outputs = Outputs::new();
    outputs.dir(out_dir)?;
    for sub in ["audio", "tokens"] {
        outputs.dir(out_dir.join(sub))?;
    }
    let corpus = generate_synthetic_corpus(&cfg.synth, out_dir)?;
    let mut written: Vec<PathBuf> = if cfg.synth.write_audio {
        corpus.manifest.entries().iter().map(|e| e.path.clone()).collect()
    } else {
        Vec::new()
    };
    written.push(corpus.manifest_path.clone());
    written.push(corpus.words_path.clone());
    let log = RunLog::new("synth-corpus", Some(cfg.synth.seed), cfg.to_toml());
    finish(&mut outputs, log, &written, out_dir)?;
    outputs.commit();
    Ok(format!(
        "wrote {} utterances ({} dialects) to {}",
        corpus.manifest.len(),
        corpus.manifest.labels().len(),
        out_dir.display()
    ))
}

/// `augment-manifest`: adds speed/volume rows per the augment policy.
pub fn augment_manifest(cfg: &PipelineConfig, manifest: &Path, out: &Path) -> Result<String> {
    let m = Manifest::load(manifest)?;
    m.check_files()?;
    let expanded = expand_corpus(&m, &cfg.augment)?;
    let mut outputs = Outputs::new();
    let p = outputs.file(out);
    expanded.save(&p)?;
    let mut log = RunLog::new("augment-manifest", None, cfg.to_toml());
    log.input(manifest)?;
    finish(&mut outputs, log, &[p], out)?;
    outputs.commit();
    Ok(format!("{} rows -> {} rows", m.len(), expanded.len()))
}

/// Location and content hash of each utterance's stored features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureIndex {
    pub kind: FeatureKind,
    pub dir: PathBuf,
    pub rows: BTreeMap<String, (String, usize, String)>,
}

impl FeatureIndex {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(FEATURE_INDEX);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Error::InvalidArgument(format!("cannot read feature index {}: {e}", path.display())))?;
        let perr = |l: usize, m: &str| Error::Parse {
            context: format!("{}:{}", path.display(), l + 1),
            message: m.to_string(),
        };
        let mut kind = None;
        let mut rows = BTreeMap::new();
        for (ln, line) in text.lines().enumerate() {
            let f: Vec<&str> = line.split('\t').collect();
            match f.as_slice() {
                ["# kind", k] => kind = Some(k.parse()?),
                ["id", ..] => {}
                [id, file, frames, hash] => {
                    let frames = frames.parse().map_err(|_| perr(ln, "bad frame count"))?;
                    rows.insert(id.to_string(), (file.to_string(), frames, hash.to_string()));
                }
                _ => return Err(perr(ln, "expected `id<TAB>file<TAB>frames<TAB>hash`")),
            }
        }
        Ok(Self {
            kind: kind.ok_or_else(|| perr(0, "missing `# kind` line"))?,
            dir: dir.to_path_buf(),
            rows,
        })
    }

    pub fn get(&self, id: &str) -> Result<FeatureMatrix<f64>> {
        let (file, _, _) = self
            .rows
            .get(id)
            .ok_or_else(|| Error::InvalidArgument(format!("no features for utterance `{id}`")))?;
        features_from_checkpoint(&Checkpoint::load(self.dir.join(file))?)
    }
}

/// `features`: per-utterance features for every manifest row, with
/// provenance applied to the audio first. `cache` is keyed by the audio
/// content hash plus a hash of the feature settings and provenance.
pub fn features(cfg: &PipelineConfig, manifest: &Path, out_dir: &Path, cache: Option<&Path>) -> Result<String> {
    let m = Manifest::load(manifest)?;
    m.check_files()?;
    let fc = &cfg.features;
    let mut outputs = Outputs::new();
    outputs.dir(out_dir)?;
    if let Some(c) = cache {
        std::fs::create_dir_all(c)?;
    }
    let mut names: HashMap<String, &str> = HashMap::new();
    for e in m.entries() {
        if let Some(prev) = names.insert(safe_name(&e.id), &e.id) {
            return Err(Error::DuplicateId(format!("`{prev}` and `{}` map to the same file name", e.id)));
        }
    }
    // Worker count is not part of the cache key.
    let keyed = FeaturesSection { workers: 0, ..fc.clone() };
    let settings = toml::to_string(&keyed).expect("features section serializes");
    let extractor = FeatureExtractor::<f64>::new(fc.frame.clone(), crate::audio::EXPECTED_RATE_HZ)?;
    let compute = |e: &ManifestEntry| -> Result<(String, usize, Vec<u8>, bool)> {
        let audio = std::fs::read(&e.path)?;
        let key = format!(
            "{}-{}",
            blob_hash(&audio),
            text_hash(&format!("{settings}provenance = \"{}\"\n", e.provenance))
        );
        if let Some(c) = cache {
            let hit = c.join(format!("{key}.feat"));
            if hit.exists() {
                let bytes = std::fs::read(&hit)?;
                let f: FeatureMatrix<f64> = features_from_checkpoint(&Checkpoint::from_bytes(&bytes)?)?;
                return Ok((key, f.num_frames(), bytes, true));
            }
        }
        let w = apply_provenance(&read_wav::<f64>(&e.path)?, e.provenance)?;
        let mut f = extractor.extract(fc.kind, &w)?;
        if fc.normalize {
            f = normalize(&f)?;
        }
        let bytes = features_to_checkpoint(&f, &[("provenance", e.provenance.to_string())]).to_bytes();
        Ok((key, f.num_frames(), bytes, false))
    };
    let results: Vec<Result<(String, usize, Vec<u8>, bool)>> =
        pool(fc.workers)?.install(|| m.entries().par_iter().map(compute).collect());
    let mut index = format!("# kind\t{}\nid\tfile\tframes\tsha256\n", fc.kind);
    let mut hits = 0;
    let mut written = Vec::new();
    for (e, r) in m.entries().iter().zip(results) {
        let (key, frames, bytes, hit) = r?;
        if let Some(c) = cache {
            let p = c.join(format!("{key}.feat"));
            if !hit {
                std::fs::write(p, &bytes)?;
            }
        }
        hits += hit as usize;
        let file = format!("{}.feat", safe_name(&e.id));
        let _ = writeln!(index, "{}\t{file}\t{frames}\t{}", e.id, blob_hash(&bytes));
        write_file(&mut outputs, &mut Vec::new(), out_dir.join(&file), &bytes)?;
    }
    write_file(&mut outputs, &mut written, out_dir.join(FEATURE_INDEX), index.as_bytes())?;
    let mut log = RunLog::new("features", None, cfg.to_toml());
    log.input(manifest)?;
    finish(&mut outputs, log, &written, out_dir)?;
    outputs.commit();
    Ok(format!("{} utterances ({} from cache), kind {}", m.len(), hits, fc.kind))
}

fn examples(index: &FeatureIndex, rows: &[&ManifestEntry], m: &Manifest) -> Result<Vec<Example<f64>>> {
    rows.iter()
        .map(|e| {
            Ok(Example {
                id: e.id.clone(),
                label: m.label_index(&e.label).expect("manifest labels validated"),
                features: index.get(&e.id)?,
            })
        })
        .collect()
}

fn snapshot_checkpoint(s: &Snapshot<f64>, seed: u64, kind: FeatureKind, labels: &[String]) -> Checkpoint {
    e2e_to_checkpoint(
        &s.model,
        &[
            ("seed", seed.to_string()),
            ("epoch", s.epoch.to_string()),
            ("batch_counter", s.batch_counter.to_string()),
            ("selection", s.selection.as_str().to_string()),
            ("criterion_met", s.criterion_met.to_string()),
            ("validation_accuracy", format!("{:.6}", s.validation_accuracy)),
            ("feature_kind", kind.to_string()),
            ("labels", labels.join(",")),
        ],
    )
}

/// `train-e2e`: trains on TRAIN plus non-held-out DEV rows and writes the
/// MAXIMUM and CONVERGED checkpoints and the training log.
pub fn train_e2e(cfg: &PipelineConfig, manifest: &Path, features_dir: &Path, out_dir: &Path) -> Result<String> {
    let m = Manifest::load(manifest)?;
    m.require_splits(&[Split::Train, Split::Dev])?;
    let index = FeatureIndex::load(features_dir)?;
    let mut tc = cfg.e2e.clone();
    tc.feature_kind = index.kind;
    let (train_rows, val_rows) = validation_split(m.entries(), tc.validation_fraction);
    let train_set = examples(&index, &train_rows, &m)?;
    let validation = examples(&index, &val_rows, &m)?;
    let outcome = train(&train_set, &validation, m.labels().len(), &tc)?;

    let mut effective = cfg.clone();
    effective.e2e = tc.clone();
    let mut outputs = Outputs::new();
    outputs.dir(out_dir)?;
    let mut written = Vec::new();
    for s in [&outcome.maximum, &outcome.converged] {
        let c = snapshot_checkpoint(s, tc.seed, index.kind, m.labels());
        write_file(&mut outputs, &mut written, out_dir.join(format!("{}.ckpt", s.selection.as_str())), &c.to_bytes())?;
    }
    write_file(&mut outputs, &mut written, out_dir.join("training_log.tsv"), outcome.log.to_tsv().as_bytes())?;
    write_file(&mut outputs, &mut written, out_dir.join("config.toml"), effective.to_toml().as_bytes())?;
    let mut log = RunLog::new("train-e2e", Some(tc.seed), effective.to_toml());
    log.input(manifest)?;
    log.input(&features_dir.join(FEATURE_INDEX))?;
    finish(&mut outputs, log, &written, out_dir)?;
    outputs.commit();
    let conv = match outcome.log.converged_at {
        Some((e, b)) => format!("converged at epoch {e} (batch {b})"),
        None => "did not converge".into(),
    };
    Ok(format!(
        "maximum: epoch {} validation accuracy {:.4}; {conv}",
        outcome.maximum.epoch, outcome.maximum.validation_accuracy
    ))
}

fn labels_from_meta(c: &Checkpoint) -> Result<Vec<String>> {
    Ok(c.meta("labels")?.split(',').map(str::to_string).collect())
}

fn truth_for(m: &Manifest, rows: &[&ManifestEntry], labels: &[String]) -> Result<Vec<usize>> {
    if m.labels() != labels {
        return Err(Error::TableMismatch(format!(
            "manifest labels {:?} differ from model labels {labels:?}",
            m.labels()
        )));
    }
    Ok(rows.iter().map(|e| m.label_index(&e.label).expect("validated")).collect())
}

/// Original rows of `split`, sorted by id.
fn original_rows(m: &Manifest, split: Split) -> Result<Vec<&ManifestEntry>> {
    let mut rows: Vec<&ManifestEntry> = m.split(split).filter(|e| e.provenance.is_original()).collect();
    if rows.is_empty() {
        return Err(Error::EmptySplit(split.to_string()));
    }
    rows.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(rows)
}

/// Keeps the first `seconds` of frames (never fewer than `min_frames`).
pub fn truncate_features(f: &FeatureMatrix<f64>, seconds: f64, min_frames: usize) -> Result<FeatureMatrix<f64>> {
    let keep = ((seconds / FRAME_HOP_S).round() as usize).max(min_frames).min(f.num_frames());
    FeatureMatrix::new(f.kind(), f.frames().slice(ndarray::s![..keep, ..]).to_owned())
}

/// `score-e2e`: softmax posteriors for the original rows of `split`,
/// plus a sibling `.logprob.tsv` with log-posteriors.
pub fn score_e2e(
    cfg: &PipelineConfig,
    checkpoint: &Path,
    manifest: &Path,
    features_dir: &Path,
    split: Split,
    truncate_s: Option<f64>,
    out: &Path,
) -> Result<String> {
    let c = Checkpoint::load(checkpoint)?;
    let model: E2eModel<f64> = e2e_from_checkpoint(&c)?;
    let labels = labels_from_meta(&c)?;
    let m = Manifest::load(manifest)?;
    let index = FeatureIndex::load(features_dir)?;
    let rows = original_rows(&m, split)?;
    let truth = truth_for(&m, &rows, &labels)?;
    let min_frames = model.topology().min_input_frames();
    let scored: Vec<Result<(Array1<f64>, Array1<f64>)>> = pool(cfg.features.workers)?.install(|| {
        rows.par_iter()
            .map(|e| {
                let mut f = index.get(&e.id)?;
                if let Some(s) = truncate_s {
                    f = truncate_features(&f, s, min_frames)?;
                }
                Ok((model.score(&f)?, model.log_scores(&f)?))
            })
            .collect()
    });
    let n = labels.len();
    let mut probs = Array2::zeros((rows.len(), n));
    let mut logp = Array2::zeros((rows.len(), n));
    for (i, r) in scored.into_iter().enumerate() {
        let (p, l) = r?;
        probs.row_mut(i).assign(&p);
        logp.row_mut(i).assign(&l);
    }
    let ids: Vec<String> = rows.iter().map(|e| e.id.clone()).collect();
    let system = format!("e2e-{}-{}", c.meta("feature_kind")?, c.meta("selection")?);
    let table = ScoreTable::new(&system, labels.clone(), ids.clone(), probs, Some(truth.clone()))?;
    let log_table = ScoreTable::new(&system, labels, ids, logp, Some(truth))?;
    let mut outputs = Outputs::new();
    let mut written = Vec::new();
    write_file(&mut outputs, &mut written, out.to_path_buf(), table.to_tsv().as_bytes())?;
    write_file(&mut outputs, &mut written, logprob_path(out), log_table.to_tsv().as_bytes())?;
    let mut log = RunLog::new("score-e2e", c.meta("seed").ok().and_then(|s| s.parse().ok()), cfg.to_toml());
    log.input(checkpoint)?;
    log.input(manifest)?;
    log.input(&features_dir.join(FEATURE_INDEX))?;
    finish(&mut outputs, log, &written, out)?;
    outputs.commit();
    Ok(format!("scored {} {} utterances with {system}", table.len(), split))
}

/// `scores.tsv` → `scores.logprob.tsv`.
pub fn logprob_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}.logprob.tsv"))
}

/// Utterance count vectors with labels and splits, plus the dictionary
/// they were built over.
#[derive(Debug, Clone)]
pub struct VsmStore {
    pub labels: Vec<String>,
    pub policy: NGramPolicy,
    pub dictionary: NGramDictionary,
    pub rows: Vec<LabeledVector>,
}

fn policy_fields(p: &NGramPolicy) -> String {
    format!("{}\t{}\t{}", p.level.as_str(), p.n, p.boundary_markers)
}

impl VsmStore {
    pub fn vectors_tsv(&self) -> String {
        let mut s = format!(
            "# labels\t{}\n# policy\t{}\n# dim\t{}\nutt_id\tlabel\tsplit\tcounts\n",
            self.labels.join(","),
            policy_fields(&self.policy),
            self.dictionary.len()
        );
        for r in &self.rows {
            let counts: Vec<String> = r.vector.entries().iter().map(|(i, c)| format!("{i}:{c}")).collect();
            let _ = writeln!(s, "{}\t{}\t{}\t{}", r.id, self.labels[r.dialect], r.split, counts.join(" "));
        }
        s
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(VSM_VECTORS);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Error::InvalidArgument(format!("cannot read {}: {e}", path.display())))?;
        let perr = |l: usize, m: String| Error::Parse {
            context: format!("{}:{}", path.display(), l + 1),
            message: m,
        };
        let (mut labels, mut policy, mut dim) = (None, None, None);
        let mut rows = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let f: Vec<&str> = line.split('\t').collect();
            match f.as_slice() {
                ["# labels", l] => labels = Some(l.split(',').map(str::to_string).collect::<Vec<_>>()),
                ["# policy", level, n, markers] => {
                    let level: TokenLevel = level.parse()?;
                    policy = Some(NGramPolicy {
                        level,
                        n: n.parse().map_err(|_| perr(ln, "bad n".into()))?,
                        boundary_markers: markers.parse().map_err(|_| perr(ln, "bad marker flag".into()))?,
                    });
                }
                ["# dim", d] => dim = Some(d.parse::<usize>().map_err(|_| perr(ln, "bad dim".into()))?),
                ["utt_id", ..] => {}
                [id, label, split, counts] => {
                    let labels = labels.as_ref().ok_or_else(|| perr(ln, "rows before `# labels`".into()))?;
                    let dim = dim.ok_or_else(|| perr(ln, "rows before `# dim`".into()))?;
                    let dialect = labels
                        .iter()
                        .position(|l| l == label)
                        .ok_or_else(|| perr(ln, format!("unknown label `{label}`")))?;
                    let entries = counts
                        .split_whitespace()
                        .map(|kv| {
                            let (i, c) = kv.split_once(':').ok_or_else(|| perr(ln, format!("bad count `{kv}`")))?;
                            Ok((
                                i.parse().map_err(|_| perr(ln, format!("bad index `{i}`")))?,
                                c.parse().map_err(|_| perr(ln, format!("bad count `{c}`")))?,
                            ))
                        })
                        .collect::<Result<Vec<(usize, u32)>>>()?;
                    rows.push(LabeledVector {
                        id: id.to_string(),
                        dialect,
                        split: split.parse()?,
                        vector: SparseVector::from_sorted(dim, entries)?,
                    });
                }
                _ => return Err(perr(ln, "unrecognised line".into())),
            }
        }
        let policy = policy.ok_or_else(|| perr(0, "missing `# policy` line".into()))?;
        let dictionary = NGramDictionary::load(dir.join(VSM_DICTIONARY), policy)?;
        if Some(dictionary.len()) != dim {
            return Err(perr(0, "dictionary size differs from `# dim`".into()));
        }
        Ok(Self {
            labels: labels.ok_or_else(|| perr(0, "missing `# labels` line".into()))?,
            policy,
            dictionary,
            rows,
        })
    }

    /// TRAIN and DEV rows, the pool for representatives and pair sampling.
    pub fn training_pool(&self) -> Vec<LabeledVector> {
        self.rows.iter().filter(|r| r.split != Split::Test).cloned().collect()
    }

    pub fn representatives(&self) -> Result<Vec<RepresentativeVector<f64>>> {
        let pool = self.training_pool();
        let groups: Vec<Vec<&SparseVector>> = (0..self.labels.len())
            .map(|d| pool.iter().filter(|r| r.dialect == d).map(|r| &r.vector).collect())
            .collect();
        for (d, g) in groups.iter().enumerate() {
            if g.is_empty() {
                return Err(Error::EmptyDialect(self.labels[d].clone()));
            }
        }
        representative_vectors(&groups)
    }

    /// Rows of `split`, sorted by id.
    pub fn split_rows(&self, split: Split) -> Result<Vec<&LabeledVector>> {
        let mut rows: Vec<&LabeledVector> = self.rows.iter().filter(|r| r.split == split).collect();
        if rows.is_empty() {
            return Err(Error::EmptySplit(split.to_string()));
        }
        rows.sort_by(|a, b| a.id.cmp(&b.id));
        Ok(rows)
    }
}

/// `build-vsm`: dictionary from TRAIN+DEV token sequences, count vectors
/// for every original manifest row.
pub fn build_vsm(cfg: &PipelineConfig, manifest: &Path, tokens: &Path, out_dir: &Path) -> Result<String> {
    let m = Manifest::load(manifest)?;
    let policy = cfg.vsm.policy();
    let seqs = read_token_file(tokens, policy.level)?;
    let by_id: HashMap<&str, usize> = seqs.iter().enumerate().map(|(i, s)| (s.utterance_id.as_str(), i)).collect();
    if by_id.len() != seqs.len() {
        return Err(Error::InvalidArgument("token file repeats an utterance id".into()));
    }
    let rows: Vec<&ManifestEntry> = m.entries().iter().filter(|e| e.provenance.is_original()).collect();
    let mut row_seqs = Vec::with_capacity(rows.len());
    for e in &rows {
        let i = by_id
            .get(e.id.as_str())
            .ok_or_else(|| Error::MissingFile {
                id: e.id.clone(),
                path: tokens.to_path_buf(),
            })?;
        row_seqs.push(&seqs[*i]);
    }
    let train_seqs: Vec<_> = rows
        .iter()
        .zip(&row_seqs)
        .filter(|(e, _)| e.split != Split::Test)
        .map(|(_, s)| (*s).clone())
        .collect();
    let dictionary = NGramDictionary::build(&train_seqs, policy)?;
    let mut dropped = 0;
    let mut vrows = Vec::with_capacity(rows.len());
    for (e, s) in rows.iter().zip(&row_seqs) {
        let (v, d) = dictionary.vectorize(s)?;
        dropped += d;
        vrows.push(LabeledVector {
            id: e.id.clone(),
            dialect: m.label_index(&e.label).expect("validated"),
            split: e.split,
            vector: v,
        });
    }
    let store = VsmStore {
        labels: m.labels().to_vec(),
        policy,
        dictionary,
        rows: vrows,
    };
    let mut outputs = Outputs::new();
    outputs.dir(out_dir)?;
    let dict_path = outputs.file(out_dir.join(VSM_DICTIONARY));
    store.dictionary.save(&dict_path)?;
    let mut written = vec![dict_path];
    write_file(&mut outputs, &mut written, out_dir.join(VSM_VECTORS), store.vectors_tsv().as_bytes())?;
    let mut log = RunLog::new("build-vsm", None, cfg.to_toml());
    log.input(manifest)?;
    log.input(tokens)?;
    finish(&mut outputs, log, &written, out_dir)?;
    outputs.commit();
    Ok(format!(
        "dictionary of {} {}-grams ({}), {} vectors, {} out-of-dictionary n-grams dropped",
        store.dictionary.len(),
        policy.n,
        policy.level.as_str(),
        store.rows.len(),
        dropped
    ))
}

/// `train-siamese`: writes the checkpoint and a sibling `.log.tsv`.
pub fn train_siamese_cmd(cfg: &PipelineConfig, vsm_dir: &Path, out: &Path) -> Result<String> {
    let store = VsmStore::load(vsm_dir)?;
    let reps = store.representatives()?;
    let (model, tlog) = train_siamese(&store.training_pool(), &reps, &cfg.siamese)?;
    let c = siamese_to_checkpoint(
        &model,
        &[
            ("seed", cfg.siamese.seed.to_string()),
            ("batches", cfg.siamese.num_batches.to_string()),
            ("labels", store.labels.join(",")),
            ("policy", policy_fields(&store.policy)),
        ],
    );
    let mut outputs = Outputs::new();
    let mut written = Vec::new();
    write_file(&mut outputs, &mut written, out.to_path_buf(), &c.to_bytes())?;
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    write_file(&mut outputs, &mut written, out.with_file_name(format!("{stem}.log.tsv")), tlog.to_tsv().as_bytes())?;
    let mut log = RunLog::new("train-siamese", Some(cfg.siamese.seed), cfg.to_toml());
    log.input(&vsm_dir.join(VSM_VECTORS))?;
    log.input(&vsm_dir.join(VSM_DICTIONARY))?;
    finish(&mut outputs, log, &written, out)?;
    outputs.commit();
    let last = tlog.records.last().map(|r| r.mean_loss).unwrap_or(f64::NAN);
    Ok(format!("{} batches, final mean pair loss {last:.6}", cfg.siamese.num_batches))
}

fn embedding_tsv(ids: &[String], rows: &[Array1<f64>]) -> String {
    let dim = rows.first().map(|r| r.len()).unwrap_or(0);
    let mut s = String::from("utt_id");
    for i in 0..dim {
        let _ = write!(s, "\te{i}");
    }
    s.push('\n');
    for (id, r) in ids.iter().zip(rows) {
        s.push_str(id);
        for v in r {
            let _ = write!(s, "\t{v:e}");
        }
        s.push('\n');
    }
    s
}

/// Reads `utt_id<TAB>floats…` embedding files.
pub fn read_embeddings(path: &Path) -> Result<Vec<(String, Array1<f64>)>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate().skip(1) {
        let mut f = line.split('\t');
        let id = f.next().unwrap_or_default().to_string();
        let v = f
            .map(|x| {
                x.parse::<f64>().map_err(|e| Error::Parse {
                    context: format!("{}:{}", path.display(), ln + 1),
                    message: e.to_string(),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        out.push((id, Array1::from(v)));
    }
    Ok(out)
}

/// `embed`: embeddings of every stored vector and of each dialect
/// representative.
pub fn embed(cfg: &PipelineConfig, checkpoint: &Path, vsm_dir: &Path, out_dir: &Path) -> Result<String> {
    let c = Checkpoint::load(checkpoint)?;
    let model = siamese_from_checkpoint::<f64>(&c)?;
    let store = VsmStore::load(vsm_dir)?;
    if labels_from_meta(&c)? != store.labels {
        return Err(Error::TableMismatch("checkpoint and VSM labels differ".into()));
    }
    let reps = store.representatives()?;
    let rep_e = representative_embeddings(&model, &reps)?;
    let embs: Vec<Result<Array1<f64>>> = pool(cfg.features.workers)?
        .install(|| store.rows.par_iter().map(|r| model.embed(&SparseInput::from(&r.vector))).collect());
    let embs = embs.into_iter().collect::<Result<Vec<_>>>()?;
    let ids: Vec<String> = store.rows.iter().map(|r| r.id.clone()).collect();
    let mut outputs = Outputs::new();
    outputs.dir(out_dir)?;
    let mut written = Vec::new();
    write_file(&mut outputs, &mut written, out_dir.join(EMBEDDINGS), embedding_tsv(&ids, &embs).as_bytes())?;
    write_file(
        &mut outputs,
        &mut written,
        out_dir.join(REP_EMBEDDINGS),
        embedding_tsv(&store.labels, &rep_e).as_bytes(),
    )?;
    let mut log = RunLog::new("embed", c.meta("seed").ok().and_then(|s| s.parse().ok()), cfg.to_toml());
    log.input(checkpoint)?;
    log.input(&vsm_dir.join(VSM_VECTORS))?;
    finish(&mut outputs, log, &written, out_dir)?;
    outputs.commit();
    Ok(format!("{} embeddings of dimension {}", ids.len(), model.embedding_dim()))
}

/// `score-embed`: embedding-cosine scores when `embeddings_dir` is
/// given, otherwise raw VSM cosine against the representative vectors.
pub fn score_embed(
    cfg: &PipelineConfig,
    vsm_dir: &Path,
    embeddings_dir: Option<&Path>,
    split: Split,
    out: &Path,
) -> Result<String> {
    let store = VsmStore::load(vsm_dir)?;
    let rows = store.split_rows(split)?;
    let n = store.labels.len();
    let mut scores = Array2::zeros((rows.len(), n));
    let system;
    let mut log;
    match embeddings_dir {
        Some(dir) => {
            system = "siamese-embedding";
            let utt: HashMap<String, Array1<f64>> = read_embeddings(&dir.join(EMBEDDINGS))?.into_iter().collect();
            let rep_rows = read_embeddings(&dir.join(REP_EMBEDDINGS))?;
            let rep_labels: Vec<String> = rep_rows.iter().map(|r| r.0.clone()).collect();
            if rep_labels != store.labels {
                return Err(Error::TableMismatch("representative embeddings do not match VSM labels".into()));
            }
            let reps: Vec<Array1<f64>> = rep_rows.into_iter().map(|r| r.1).collect();
            for (i, r) in rows.iter().enumerate() {
                let e = utt
                    .get(&r.id)
                    .ok_or_else(|| Error::InvalidArgument(format!("no embedding for `{}`", r.id)))?;
                scores.row_mut(i).assign(&score_embedding(e.view(), &reps));
            }
            log = RunLog::new("score-embed", None, cfg.to_toml());
            log.input(&dir.join(EMBEDDINGS))?;
            log.input(&dir.join(REP_EMBEDDINGS))?;
        }
        None => {
            system = "vsm-cosine";
            let reps = store.representatives()?;
            for (i, r) in rows.iter().enumerate() {
                scores.row_mut(i).assign(&cosine_score_baseline(&r.vector, &reps)?);
            }
            log = RunLog::new("score-embed", None, cfg.to_toml());
        }
    }
    log.input(&vsm_dir.join(VSM_VECTORS))?;
    let table = ScoreTable::new(
        system,
        store.labels.clone(),
        rows.iter().map(|r| r.id.clone()).collect(),
        scores,
        Some(rows.iter().map(|r| r.dialect).collect()),
    )?;
    let mut outputs = Outputs::new();
    let mut written = Vec::new();
    write_file(&mut outputs, &mut written, out.to_path_buf(), table.to_tsv().as_bytes())?;
    finish(&mut outputs, log, &written, out)?;
    outputs.commit();
    Ok(format!("scored {} {} utterances with {system}", table.len(), split))
}

fn load_normalized(path: &Path, cohort: Option<&Path>) -> Result<ScoreTable> {
    let t = ScoreTable::load(path)?;
    match cohort {
        Some(c) => znorm(&t, &ScoreTable::load(c)?),
        None => Ok(t),
    }
}

fn metrics_tsv(rows: &[(String, Metrics)]) -> String {
    let mut s = String::from("system\taccuracy\teer\tmin_cavg\n");
    for (name, m) in rows {
        let _ = writeln!(s, "{name}\t{:.6}\t{:.6}\t{:.6}", m.accuracy, m.eer, m.min_cavg);
    }
    s
}

/// `evaluate`: accuracy, EER and minimum C_avg of one score table,
/// optionally Z-normed by a cohort table first.
pub fn evaluate(
    cfg: &PipelineConfig,
    scores: &Path,
    cohort: Option<&Path>,
    out: Option<&Path>,
    det: Option<&Path>,
) -> Result<String> {
    let t = load_normalized(scores, cohort)?;
    let m = eval_metrics(&t, cfg.eval.cost)?;
    let mut outputs = Outputs::new();
    let mut written = Vec::new();
    if let Some(o) = out {
        write_file(&mut outputs, &mut written, o.to_path_buf(), metrics_tsv(&[(t.system.clone(), m)]).as_bytes())?;
    }
    if let Some(d) = det {
        write_file(&mut outputs, &mut written, d.to_path_buf(), det_points_tsv(&det_points(&t)?).as_bytes())?;
    }
    if let Some(anchor) = out.or(det) {
        let mut log = RunLog::new("evaluate", None, cfg.to_toml());
        log.input(scores)?;
        if let Some(c) = cohort {
            log.input(c)?;
        }
        finish(&mut outputs, log, &written, anchor)?;
    }
    outputs.commit();
    Ok(format!(
        "{}: accuracy {:.2}%  EER {:.2}%  min C_avg {:.2}",
        t.system,
        100.0 * m.accuracy,
        100.0 * m.eer,
        100.0 * m.min_cavg
    ))
}

/// `fuse`: logistic-regression fusion learned on `dev` tables, applied to
/// the matching `test` tables. With `znorm`, each system's tables are
/// normalized by that system's dev table first.
pub fn fuse(
    cfg: &PipelineConfig,
    dev: &[PathBuf],
    test: &[PathBuf],
    znorm_by_dev: bool,
    out: &Path,
    weights_out: &Path,
) -> Result<String> {
    if dev.len() != test.len() || dev.len() < 2 {
        return Err(Error::InvalidArgument("fusion needs at least 2 systems with one dev and one test table each".into()));
    }
    let mut dev_t = Vec::new();
    let mut test_t = Vec::new();
    for (d, t) in dev.iter().zip(test) {
        let dt = ScoreTable::load(d)?;
        let tt = ScoreTable::load(t)?;
        if znorm_by_dev {
            test_t.push(znorm(&tt, &dt)?);
            dev_t.push(znorm(&dt, &dt)?);
        } else {
            test_t.push(tt);
            dev_t.push(dt);
        }
    }
    let model = FusionModel::train(&dev_t, &cfg.fusion)?;
    let fused = model.apply(&test_t)?;
    let mut outputs = Outputs::new();
    let mut written = Vec::new();
    write_file(&mut outputs, &mut written, out.to_path_buf(), fused.to_tsv().as_bytes())?;
    write_file(&mut outputs, &mut written, weights_out.to_path_buf(), model.to_text().as_bytes())?;
    let mut log = RunLog::new("fuse", None, cfg.to_toml());
    for p in dev.iter().chain(test) {
        log.input(p)?;
    }
    finish(&mut outputs, log, &written, out)?;
    outputs.commit();
    let acc = fused.truth.as_ref().map(|_| crate::eval::accuracy(&fused)).transpose()?;
    Ok(match acc {
        Some(a) => format!("fused {} systems in {} iterations; accuracy {:.2}%", dev.len(), model.iterations, 100.0 * a),
        None => format!("fused {} systems in {} iterations", dev.len(), model.iterations),
    })
}

/// `report`: per-system metrics as an aligned text table and a TSV.
/// `dev` is optional; when given it must pair one-to-one with `test`.
pub fn report(cfg: &PipelineConfig, test: &[PathBuf], dev: &[PathBuf], out_dir: &Path) -> Result<String> {
    if test.is_empty() {
        return Err(Error::InvalidArgument("report needs at least one score table".into()));
    }
    if !dev.is_empty() && dev.len() != test.len() {
        return Err(Error::InvalidArgument("dev and test table lists differ in length".into()));
    }
    let mut rows: Vec<(String, Option<Metrics>, Metrics)> = Vec::new();
    for (i, t) in test.iter().enumerate() {
        let tt = ScoreTable::load(t)?;
        let tm = eval_metrics(&tt, cfg.eval.cost)?;
        let dm = match dev.get(i) {
            Some(d) => Some(eval_metrics(&ScoreTable::load(d)?, cfg.eval.cost)?),
            None => None,
        };
        rows.push((tt.system, dm, tm));
    }
    let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(6).max(6);
    let has_dev = !dev.is_empty();
    let mut human = format!("{:<width$}", "System");
    if has_dev {
        human.push_str(" | Dev Acc(%)  EER(%)  Cavg");
    }
    human.push_str(" | Test Acc(%)  EER(%)  Cavg\n");
    let rule = "-".repeat(human.trim_end().len());
    human.push_str(&rule);
    human.push('\n');
    let mut machine = String::from("system\tset\taccuracy\teer\tmin_cavg\n");
    let cell = |m: &Metrics| format!("{:>10.2}  {:>6.2}  {:>5.2}", 100.0 * m.accuracy, 100.0 * m.eer, 100.0 * m.min_cavg);
    for (name, dm, tm) in &rows {
        let _ = write!(human, "{name:<width$}");
        if let Some(d) = dm {
            let _ = write!(human, " | {}", cell(d));
            let _ = writeln!(machine, "{name}\tdev\t{:.6}\t{:.6}\t{:.6}", d.accuracy, d.eer, d.min_cavg);
        }
        let _ = writeln!(human, " |  {}", cell(tm));
        let _ = writeln!(machine, "{name}\ttest\t{:.6}\t{:.6}\t{:.6}", tm.accuracy, tm.eer, tm.min_cavg);
    }
    human.push_str("C_avg is reported ×100.\n");
    let mut outputs = Outputs::new();
    outputs.dir(out_dir)?;
    let mut written = Vec::new();
    write_file(&mut outputs, &mut written, out_dir.join("report.txt"), human.as_bytes())?;
    write_file(&mut outputs, &mut written, out_dir.join("report.tsv"), machine.as_bytes())?;
    let mut log = RunLog::new("report", None, cfg.to_toml());
    for p in dev.iter().chain(test) {
        log.input(p)?;
    }
    finish(&mut outputs, log, &written, out_dir)?;
    outputs.commit();
    Ok(human)
}
