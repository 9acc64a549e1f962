//! Vector-space-model features: n-gram count vectors over a fixed
//! dictionary, per-dialect representative (mean) vectors, and cosine
//! scoring against them.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenLevel {
    Word,
    Char,
    Phone,
}

impl TokenLevel {
    /// Unigrams for words, trigrams for characters and phones.
    pub fn default_order(self) -> usize {
        match self {
            TokenLevel::Word => 1,
            TokenLevel::Char | TokenLevel::Phone => 3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TokenLevel::Word => "word",
            TokenLevel::Char => "char",
            TokenLevel::Phone => "phone",
        }
    }
}

impl fmt::Display for TokenLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TokenLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "word" => Ok(TokenLevel::Word),
            "char" | "character" => Ok(TokenLevel::Char),
            "phone" | "phoneme" => Ok(TokenLevel::Phone),
            other => Err(Error::InvalidArgument(format!("unknown token level `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub utterance_id: String,
    pub level: TokenLevel,
    pub tokens: Vec<String>,
}

impl TokenSequence {
    pub fn new(utterance_id: impl Into<String>, level: TokenLevel, tokens: Vec<String>) -> Result<Self> {
        let utterance_id = utterance_id.into();
        if tokens.iter().any(|t| t.is_empty() || t.chars().any(char::is_whitespace)) {
            return Err(Error::InvalidArgument(format!(
                "utterance `{utterance_id}` has an empty or whitespace-bearing token"
            )));
        }
        Ok(Self {
            utterance_id,
            level,
            tokens,
        })
    }
}

/// Read `utterance_id <TAB> space-separated tokens` lines.
pub fn read_token_file(path: impl AsRef<Path>, level: TokenLevel) -> Result<Vec<TokenSequence>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (id, rest) = line.split_once('\t').ok_or_else(|| Error::Parse {
            context: format!("{}:{}", path.display(), lineno + 1),
            message: "expected `utterance_id<TAB>tokens`".into(),
        })?;
        let tokens = rest.split_whitespace().map(str::to_string).collect();
        out.push(TokenSequence::new(id.trim(), level, tokens)?);
    }
    Ok(out)
}

pub fn write_token_file(path: impl AsRef<Path>, seqs: &[TokenSequence]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for s in seqs {
        writeln!(w, "{}\t{}", s.utterance_id, s.tokens.join(" "))?;
    }
    w.flush()?;
    Ok(())
}

/// How utterances are cut into n-grams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NGramPolicy {
    pub level: TokenLevel,
    pub n: usize,
    /// Character level only: wrap every word in `_` before windowing.
    pub boundary_markers: bool,
}

impl NGramPolicy {
    pub fn for_level(level: TokenLevel) -> Self {
        Self {
            level,
            n: level.default_order(),
            boundary_markers: true,
        }
    }

    /// Stride-1 n-gram windows. Character windows never cross words;
    /// word and phone n-grams are joined with single spaces.
    pub fn ngrams(&self, seq: &TokenSequence) -> Vec<String> {
        let n = self.n;
        match self.level {
            TokenLevel::Word | TokenLevel::Phone => {
                if seq.tokens.len() < n {
                    return Vec::new();
                }
                seq.tokens.windows(n).map(|w| w.join(" ")).collect()
            }
            TokenLevel::Char => {
                let mut out = Vec::new();
                for word in &seq.tokens {
                    let mut chars: Vec<char> = word.chars().collect();
                    if self.boundary_markers {
                        chars.insert(0, '_');
                        chars.push('_');
                    }
                    if chars.len() >= n {
                        out.extend(chars.windows(n).map(|w| w.iter().collect::<String>()));
                    }
                }
                out
            }
        }
    }

    /// Number of windows `ngrams` yields, before dictionary lookup.
    pub fn window_count(&self, seq: &TokenSequence) -> usize {
        match self.level {
            TokenLevel::Word | TokenLevel::Phone => (seq.tokens.len() + 1).saturating_sub(self.n),
            TokenLevel::Char => seq
                .tokens
                .iter()
                .map(|w| {
                    let len = w.chars().count() + if self.boundary_markers { 2 } else { 0 };
                    (len + 1).saturating_sub(self.n)
                })
                .sum(),
        }
    }
}

/// Sorted n-gram inventory; index = position in sorted order.
#[derive(Debug, Clone, PartialEq)]
pub struct NGramDictionary {
    policy: NGramPolicy,
    grams: Vec<String>,
    index: HashMap<String, usize>,
}

impl NGramDictionary {
    pub fn build(sequences: &[TokenSequence], policy: NGramPolicy) -> Result<Self> {
        if sequences.is_empty() {
            return Err(Error::EmptyCorpus("no token sequences to build a dictionary from".into()));
        }
        if policy.n == 0 {
            return Err(Error::InvalidArgument("n-gram order must be positive".into()));
        }
        let mut set = BTreeSet::new();
        for s in sequences {
            set.extend(policy.ngrams(s));
        }
        Ok(Self::from_sorted(policy, set.into_iter().collect()))
    }

    fn from_sorted(policy: NGramPolicy, grams: Vec<String>) -> Self {
        let index = grams.iter().enumerate().map(|(i, g)| (g.clone(), i)).collect();
        Self { policy, grams, index }
    }

    pub fn policy(&self) -> NGramPolicy {
        self.policy
    }

    pub fn len(&self) -> usize {
        self.grams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grams.is_empty()
    }

    pub fn grams(&self) -> &[String] {
        &self.grams
    }

    pub fn get(&self, gram: &str) -> Option<usize> {
        self.index.get(gram).copied()
    }

    /// Count vector of `seq`; also returns how many windows were out of vocabulary.
    pub fn vectorize(&self, seq: &TokenSequence) -> Result<(SparseVector, usize)> {
        if seq.level != self.policy.level {
            return Err(Error::InvalidArgument(format!(
                "utterance `{}` is {}-level, dictionary is {}-level",
                seq.utterance_id, seq.level, self.policy.level
            )));
        }
        let mut counts: HashMap<usize, u32> = HashMap::new();
        let mut dropped = 0;
        for g in self.policy.ngrams(seq) {
            match self.index.get(&g) {
                Some(&i) => *counts.entry(i).or_default() += 1,
                None => dropped += 1,
            }
        }
        let mut entries: Vec<(usize, u32)> = counts.into_iter().collect();
        entries.sort_unstable();
        Ok((SparseVector::from_sorted(self.len(), entries)?, dropped))
    }

    /// One n-gram per line.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        for g in &self.grams {
            writeln!(w, "{g}")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, policy: NGramPolicy) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let grams: Vec<String> = text.lines().map(str::to_string).collect();
        if grams.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Parse {
                context: path.display().to_string(),
                message: "dictionary entries must be unique and sorted".into(),
            });
        }
        Ok(Self::from_sorted(policy, grams))
    }
}

/// Non-zero counts with strictly increasing indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparseVector {
    dim: usize,
    entries: Vec<(usize, u32)>,
}

impl SparseVector {
    pub fn from_sorted(dim: usize, entries: Vec<(usize, u32)>) -> Result<Self> {
        for (k, &(i, c)) in entries.iter().enumerate() {
            if i >= dim || c == 0 || (k > 0 && entries[k - 1].0 >= i) {
                return Err(Error::InvalidArgument(format!(
                    "sparse entry ({i}, {c}) violates ordering, bounds or positivity"
                )));
            }
        }
        Ok(Self { dim, entries })
    }

    pub fn zeros(dim: usize) -> Self {
        Self { dim, entries: Vec::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[(usize, u32)] {
        &self.entries
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn total(&self) -> u64 {
        self.entries.iter().map(|&(_, c)| c as u64).sum()
    }

    pub fn get(&self, i: usize) -> u32 {
        self.entries
            .binary_search_by_key(&i, |&(j, _)| j)
            .map_or(0, |k| self.entries[k].1)
    }

    pub fn to_dense<T: Real>(&self) -> Array1<T> {
        let mut v = Array1::zeros(self.dim);
        for &(i, c) in &self.entries {
            v[i] = T::lit(c as f64);
        }
        v
    }

    /// Inverse of [`SparseVector::to_dense`] for non-negative integral vectors.
    pub fn from_dense<T: Real>(v: &Array1<T>) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, &x) in v.iter().enumerate() {
            let c = x.as_f64();
            if c < 0.0 || c.fract() != 0.0 || c > u32::MAX as f64 {
                return Err(Error::InvalidArgument(format!("entry {i} = {c} is not a count")));
            }
            if c > 0.0 {
                entries.push((i, c as u32));
            }
        }
        Self::from_sorted(v.len(), entries)
    }

    pub fn dot_dense<T: Real>(&self, dense: &Array1<T>) -> T {
        self.entries
            .iter()
            .map(|&(i, c)| T::lit(c as f64) * dense[i])
            .sum()
    }

    pub fn norm<T: Real>(&self) -> T {
        T::lit(
            self.entries
                .iter()
                .map(|&(_, c)| (c as f64) * (c as f64))
                .sum::<f64>()
                .sqrt(),
        )
    }
}

/// Mean count vector of one dialect.
#[derive(Debug, Clone, PartialEq)]
pub struct RepresentativeVector<T> {
    pub dialect: usize,
    pub mean: Array1<T>,
    pub count: usize,
}

/// Exact arithmetic mean per dialect; `groups[d]` holds dialect `d`'s vectors.
pub fn representative_vectors<T: Real>(groups: &[Vec<&SparseVector>]) -> Result<Vec<RepresentativeVector<T>>> {
    let dim = groups
        .iter()
        .flat_map(|g| g.first())
        .map(|v| v.dim())
        .next()
        .ok_or_else(|| Error::EmptyCorpus("no vectors".into()))?;
    groups
        .iter()
        .enumerate()
        .map(|(d, vecs)| {
            if vecs.is_empty() {
                return Err(Error::EmptyDialect(format!("dialect {d}")));
            }
            let mut sums = vec![0u64; dim];
            for v in vecs {
                if v.dim() != dim {
                    return Err(Error::Shape(format!("vector dimension {} != {dim}", v.dim())));
                }
                for &(i, c) in v.entries() {
                    sums[i] += c as u64;
                }
            }
            let n = vecs.len() as f64;
            Ok(RepresentativeVector {
                dialect: d,
                mean: Array1::from_iter(sums.iter().map(|&s| T::lit(s as f64 / n))),
                count: vecs.len(),
            })
        })
        .collect()
}

/// Cosine similarity of `v` to each representative; zero vectors score 0.
pub fn cosine_score_baseline<T: Real>(v: &SparseVector, reps: &[RepresentativeVector<T>]) -> Result<Array1<T>> {
    let nv: T = v.norm();
    reps.iter()
        .map(|r| {
            if r.mean.len() != v.dim() {
                return Err(Error::Shape(format!(
                    "vector dimension {} vs representative {}",
                    v.dim(),
                    r.mean.len()
                )));
            }
            let nr = r.mean.dot(&r.mean).sqrt();
            if nv == T::zero() || nr == T::zero() {
                return Ok(T::zero());
            }
            Ok(v.dot_dense(&r.mean) / (nv * nr))
        })
        .collect::<Result<Vec<T>>>()
        .map(Array1::from)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn seq(level: TokenLevel, text: &str) -> TokenSequence {
        TokenSequence::new("u", level, text.split_whitespace().map(str::to_string).collect()).unwrap()
    }

    /// Sliding-window count of `gram` over the raw token list.
    fn brute_count(tokens: &[String], gram: &[String]) -> u32 {
        let n = gram.len();
        if tokens.len() < n {
            return 0;
        }
        let mut c = 0;
        for start in 0..=tokens.len() - n {
            if (0..n).all(|k| tokens[start + k] == gram[k]) {
                c += 1;
            }
        }
        c
    }

    #[test]
    fn word_unigram_dictionary() {
        let p = NGramPolicy::for_level(TokenLevel::Word);
        let d = NGramDictionary::build(&[seq(TokenLevel::Word, "a b"), seq(TokenLevel::Word, "b c")], p).unwrap();
        assert_eq!(d.grams(), ["a", "b", "c"]);
        let (v, dropped) = d.vectorize(&seq(TokenLevel::Word, "a b a")).unwrap();
        assert_eq!(dropped, 0);
        assert_eq!((v.get(0), v.get(1), v.get(2)), (2, 1, 0));
        let (_, dropped) = d.vectorize(&seq(TokenLevel::Word, "a z")).unwrap();
        assert_eq!(dropped, 1);
    }

    #[test]
    fn char_trigrams() {
        let plain = NGramPolicy {
            boundary_markers: false,
            ..NGramPolicy::for_level(TokenLevel::Char)
        };
        let d = NGramDictionary::build(&[seq(TokenLevel::Char, "abc")], plain).unwrap();
        assert_eq!(d.grams(), ["abc"]);

        let marked = NGramPolicy::for_level(TokenLevel::Char);
        let d = NGramDictionary::build(&[seq(TokenLevel::Char, "abc de")], marked).unwrap();
        assert_eq!(d.grams(), ["_ab", "_de", "abc", "bc_", "de_"]);
    }

    #[test]
    fn short_sequence_gives_zero_vector() {
        let p = NGramPolicy::for_level(TokenLevel::Phone);
        let d = NGramDictionary::build(&[seq(TokenLevel::Phone, "p a t k")], p).unwrap();
        let (v, dropped) = d.vectorize(&seq(TokenLevel::Phone, "p a")).unwrap();
        assert_eq!((v.nnz(), dropped), (0, 0));
    }

    #[test]
    fn empty_corpus_and_level_mismatch() {
        let p = NGramPolicy::for_level(TokenLevel::Word);
        assert!(matches!(NGramDictionary::build(&[], p), Err(Error::EmptyCorpus(_))));
        let d = NGramDictionary::build(&[seq(TokenLevel::Word, "a")], p).unwrap();
        assert!(d.vectorize(&seq(TokenLevel::Char, "a")).is_err());
    }

    #[test]
    fn dictionary_ignores_input_order() {
        let p = NGramPolicy::for_level(TokenLevel::Phone);
        let a = [seq(TokenLevel::Phone, "x y z w"), seq(TokenLevel::Phone, "a b c")];
        let b = [a[1].clone(), a[0].clone()];
        assert_eq!(NGramDictionary::build(&a, p).unwrap(), NGramDictionary::build(&b, p).unwrap());
    }

    #[test]
    fn dictionary_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = NGramPolicy::for_level(TokenLevel::Phone);
        let d = NGramDictionary::build(&[seq(TokenLevel::Phone, "a b c d e")], p).unwrap();
        let path = dir.path().join("dict.txt");
        d.save(&path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "a b c\nb c d\nc d e\n");
        assert_eq!(NGramDictionary::load(&path, p).unwrap(), d);
    }

    #[test]
    fn token_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("words.txt");
        let seqs = vec![
            TokenSequence::new("u1", TokenLevel::Word, vec!["x".into(), "y".into()]).unwrap(),
            TokenSequence::new("u2", TokenLevel::Word, vec!["z".into()]).unwrap(),
        ];
        write_token_file(&path, &seqs).unwrap();
        assert_eq!(read_token_file(&path, TokenLevel::Word).unwrap(), seqs);
    }

    #[test]
    fn representative_examples() {
        let e0 = SparseVector::from_sorted(4, vec![(0, 1)]).unwrap();
        let e1 = SparseVector::from_sorted(4, vec![(1, 1)]).unwrap();
        let reps = representative_vectors::<f64>(&[vec![&e0, &e1], vec![&e1]]).unwrap();
        assert_eq!(reps[0].mean.to_vec(), vec![0.5, 0.5, 0.0, 0.0]);
        assert_eq!(reps[1].mean, e1.to_dense::<f64>());
        assert_eq!(reps[1].count, 1);
        assert!(matches!(
            representative_vectors::<f64>(&[vec![&e0], vec![]]),
            Err(Error::EmptyDialect(_))
        ));
    }

    #[test]
    fn representative_matches_direct_mean() {
        let mut rng = seeded_rng(21);
        let vecs: Vec<SparseVector> = (0..17)
            .map(|_| {
                let dense = Array1::from_iter((0..30).map(|_| {
                    if rng.random_bool(0.3) {
                        rng.random_range(1..9) as f64
                    } else {
                        0.0
                    }
                }));
                SparseVector::from_dense(&dense).unwrap()
            })
            .collect();
        let reps = representative_vectors::<f64>(&[vecs.iter().collect()]).unwrap();
        for i in 0..30 {
            let direct: f64 = vecs.iter().map(|v| v.get(i) as f64).sum::<f64>() / 17.0;
            assert!((reps[0].mean[i] - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn cosine_baseline_examples() {
        let v = SparseVector::from_sorted(3, vec![(0, 2), (2, 1)]).unwrap();
        let same = RepresentativeVector { dialect: 0, mean: v.to_dense::<f64>(), count: 1 };
        let ortho = RepresentativeVector { dialect: 1, mean: Array1::from(vec![0.0, 3.0, 0.0]), count: 1 };
        let s = cosine_score_baseline(&v, &[same, ortho.clone()]).unwrap();
        assert!((s[0] - 1.0).abs() < 1e-12);
        assert_eq!(s[1], 0.0);
        assert_eq!(cosine_score_baseline(&SparseVector::zeros(3), &[ortho]).unwrap()[0], 0.0);
    }

    #[test]
    fn cosine_baseline_matches_direct_oracle() {
        let mut rng = seeded_rng(5);
        for _ in 0..50 {
            let dense: Array1<f64> = Array1::from_iter((0..12).map(|_| rng.random_range(0..4) as f64));
            let v = SparseVector::from_dense(&dense).unwrap();
            let mean = Array1::from_iter((0..12).map(|_| rng.random_range(0.0..2.0)));
            let rep = RepresentativeVector { dialect: 0, mean: mean.clone(), count: 3 };
            let s = cosine_score_baseline(&v, &[rep]).unwrap()[0];
            let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
            for i in 0..12 {
                dot += dense[i] * mean[i];
                na += dense[i] * dense[i];
                nb += mean[i] * mean[i];
            }
            let oracle = if na == 0.0 { 0.0 } else { dot / (na.sqrt() * nb.sqrt()) };
            assert!((s - oracle).abs() < 1e-12);
        }
    }

    fn token_strategy() -> impl Strategy<Value = Vec<String>> {
        proptest::collection::vec(prop_oneof!["a", "b", "c", "d"].prop_map(String::from), 0..25)
    }

    proptest! {
        #[test]
        fn counts_match_sliding_window(tokens in token_strategy(), n in 1usize..4) {
            let policy = NGramPolicy { level: TokenLevel::Phone, n, boundary_markers: false };
            let s = TokenSequence::new("u", TokenLevel::Phone, tokens.clone()).unwrap();
            let vocab = TokenSequence::new("v", TokenLevel::Phone, "a b c a".split(' ').map(String::from).collect()).unwrap();
            let d = NGramDictionary::build(&[vocab], policy).unwrap();
            let (v, dropped) = d.vectorize(&s).unwrap();
            for (i, g) in d.grams().iter().enumerate() {
                let gram: Vec<String> = g.split(' ').map(String::from).collect();
                prop_assert_eq!(v.get(i), brute_count(&tokens, &gram));
            }
            let windows = (tokens.len() + 1).saturating_sub(n);
            prop_assert_eq!(v.total() as usize, windows - dropped);
        }

        #[test]
        fn repeated_sequence_counts_grow(tokens in token_strategy(), k in 1usize..4) {
            let policy = NGramPolicy::for_level(TokenLevel::Phone);
            let s = TokenSequence::new("u", TokenLevel::Phone, tokens.clone()).unwrap();
            let rep = TokenSequence::new("r", TokenLevel::Phone, (0..k).flat_map(|_| tokens.iter().cloned()).collect()).unwrap();
            if let Ok(d) = NGramDictionary::build(&[rep.clone()], policy) {
                let (one, _) = d.vectorize(&s).unwrap();
                let (many, _) = d.vectorize(&rep).unwrap();
                for &(i, c) in one.entries() {
                    prop_assert!(many.get(i) >= c * k as u32);
                }
            }
        }

        #[test]
        fn sparse_dense_round_trip(counts in proptest::collection::vec(0u32..5, 0..40)) {
            let dense = Array1::from_iter(counts.iter().map(|&c| c as f64));
            let s = SparseVector::from_dense(&dense).unwrap();
            prop_assert_eq!(s.to_dense::<f64>(), dense);
            prop_assert_eq!(SparseVector::from_dense(&s.to_dense::<f32>()).unwrap(), s);
        }
    }
}
