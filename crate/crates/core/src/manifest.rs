//! Corpus manifests: one row per utterance with label, split and provenance.
//!
//! On disk a manifest is a UTF-8 CSV with the header
//! `utterance_id,path,label,split,provenance`. An optional first line
//! `# labels: A,B,C` declares the label set and its order; without it the
//! five MGB-3 dialects are assumed. Paths are resolved relative to the
//! manifest's directory.

use std::collections::HashSet;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MGB3_LABELS: [&str; 5] = ["EGY", "LEV", "GLF", "NOR", "MSA"];

const HEADER: [&str; 5] = ["utterance_id", "path", "label", "split", "provenance"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "TRAIN",
            Split::Dev => "DEV",
            Split::Test => "TEST",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "TRAIN" => Ok(Split::Train),
            "DEV" => Ok(Split::Dev),
            "TEST" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split `{other}`"))),
        }
    }
}

/// How a manifest row was derived from the original corpus.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Provenance {
    Original,
    Speed(f64),
    Volume(f64),
}

impl Provenance {
    pub fn is_original(&self) -> bool {
        matches!(self, Provenance::Original)
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::Original => f.write_str("original"),
            Provenance::Speed(v) => write!(f, "speed={v}"),
            Provenance::Volume(v) => write!(f, "vol={v}"),
        }
    }
}

impl FromStr for Provenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() || s == "original" {
            return Ok(Provenance::Original);
        }
        let bad = || Error::InvalidArgument(format!("bad provenance `{s}`"));
        let (key, value) = s.split_once('=').ok_or_else(bad)?;
        let value: f64 = value.parse().map_err(|_| bad())?;
        if !(value.is_finite() && value > 0.0) {
            return Err(bad());
        }
        match key {
            "speed" => Ok(Provenance::Speed(value)),
            "vol" => Ok(Provenance::Volume(value)),
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub path: PathBuf,
    pub label: String,
    pub split: Split,
    pub provenance: Provenance,
}

impl ManifestEntry {
    /// Id of the original utterance this entry was derived from.
    pub fn source_id(&self) -> &str {
        if self.provenance.is_original() {
            return &self.id;
        }
        let suffix = format!("@{}", self.provenance);
        self.id.strip_suffix(suffix.as_str()).unwrap_or(&self.id)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    labels: Vec<String>,
    entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(labels: Vec<String>, entries: Vec<ManifestEntry>) -> Result<Self> {
        if labels.len() < 2 {
            return Err(Error::InvalidArgument("a manifest needs at least two labels".into()));
        }
        let m = Self { labels, entries };
        m.check_ids_and_labels()?;
        Ok(m)
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    fn check_ids_and_labels(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::DuplicateId(e.id.clone()));
            }
            if self.label_index(&e.label).is_none() {
                return Err(Error::UnknownLabel {
                    id: e.id.clone(),
                    label: e.label.clone(),
                });
            }
        }
        Ok(())
    }

    /// Fail if any file referenced by the manifest is missing.
    pub fn check_files(&self) -> Result<()> {
        for e in &self.entries {
            if !e.path.is_file() {
                return Err(Error::MissingFile {
                    id: e.id.clone(),
                    path: e.path.clone(),
                });
            }
        }
        Ok(())
    }

    /// Fail unless every one of `splits` has at least one row.
    pub fn require_splits(&self, splits: &[Split]) -> Result<()> {
        for &s in splits {
            if self.split(s).next().is_none() {
                return Err(Error::EmptySplit(s.to_string()));
            }
        }
        Ok(())
    }

    /// Full validation: ids, labels, files and non-empty TRAIN/DEV/TEST.
    pub fn validate(&self) -> Result<()> {
        self.check_ids_and_labels()?;
        self.check_files()?;
        self.require_splits(&Split::ALL)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::parse(&text, base, &path.display().to_string())
    }

    pub fn parse(text: &str, base: &Path, context: &str) -> Result<Self> {
        let mut labels: Vec<String> = MGB3_LABELS.iter().map(|s| s.to_string()).collect();
        let mut body = text;
        if let Some(first) = text.lines().next() {
            if let Some(rest) = first.trim().strip_prefix('#') {
                if let Some(list) = rest.trim().strip_prefix("labels:") {
                    labels = list
                        .split(',')
                        .map(|l| l.trim().to_string())
                        .filter(|l| !l.is_empty())
                        .collect();
                }
                body = text.split_once('\n').map(|(_, b)| b).unwrap_or("");
            }
        }
        let parse_err = |message: String| Error::Parse {
            context: context.to_string(),
            message,
        };
        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(body.as_bytes());
        let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
        if header != HEADER {
            return Err(parse_err(format!(
                "expected header `{}`, found `{}`",
                HEADER.join(","),
                header.join(",")
            )));
        }
        let mut entries = Vec::new();
        for (line, rec) in reader.records().enumerate() {
            let rec = rec?;
            if rec.len() != HEADER.len() {
                return Err(parse_err(format!("row {} has {} fields", line + 1, rec.len())));
            }
            let rel = PathBuf::from(&rec[1]);
            entries.push(ManifestEntry {
                id: rec[0].to_string(),
                path: if rel.is_absolute() { rel } else { base.join(rel) },
                label: rec[2].to_string(),
                split: rec[3].parse()?,
                provenance: rec[4].parse()?,
            });
        }
        Self::new(labels, entries)
    }

    /// Serialize with paths written relative to `base` where possible.
    pub fn to_csv(&self, base: &Path) -> Result<String> {
        let mut out = Vec::new();
        writeln!(out, "# labels: {}", self.labels.join(","))?;
        {
            let mut w = csv::Writer::from_writer(&mut out);
            w.write_record(HEADER)?;
            for e in &self.entries {
                let p = e.path.strip_prefix(base).unwrap_or(&e.path);
                w.write_record([
                    e.id.as_str(),
                    &p.to_string_lossy(),
                    e.label.as_str(),
                    e.split.as_str(),
                    &e.provenance.to_string(),
                ])?;
            }
            w.flush()?;
        }
        String::from_utf8(out).map_err(|e| Error::Parse {
            context: "manifest".into(),
            message: e.to_string(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        std::fs::write(path, self.to_csv(base)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(id: &str, label: &str, split: Split) -> ManifestEntry {
        ManifestEntry {
            id: id.into(),
            path: PathBuf::from(format!("{id}.wav")),
            label: label.into(),
            split,
            provenance: Provenance::Original,
        }
    }

    fn labels() -> Vec<String> {
        vec!["A".into(), "B".into()]
    }

    #[test]
    fn rejections_are_distinct() {
        let dup = Manifest::new(labels(), vec![entry("u1", "A", Split::Train), entry("u1", "B", Split::Dev)]);
        assert!(matches!(dup, Err(Error::DuplicateId(id)) if id == "u1"));

        let unknown = Manifest::new(labels(), vec![entry("u1", "Z", Split::Train)]);
        assert!(matches!(unknown, Err(Error::UnknownLabel { .. })));

        let m = Manifest::new(labels(), vec![entry("u1", "A", Split::Train)]).unwrap();
        assert!(matches!(m.check_files(), Err(Error::MissingFile { .. })));
        assert!(matches!(m.require_splits(&Split::ALL), Err(Error::EmptySplit(s)) if s == "DEV"));
    }

    #[test]
    fn csv_round_trip_with_label_directive() {
        let mut e = entry("u1@speed=0.9", "B", Split::Dev);
        e.provenance = Provenance::Speed(0.9);
        let base = Path::new("/data");
        e.path = base.join("u1.wav");
        let m = Manifest::new(labels(), vec![e]).unwrap();
        let text = m.to_csv(base).unwrap();
        assert!(text.starts_with("# labels: A,B\n"));
        let back = Manifest::parse(&text, base, "test").unwrap();
        assert_eq!(back, m);
        assert_eq!(back.entries()[0].source_id(), "u1");
    }

    #[test]
    fn default_label_set_is_mgb3() {
        let text = "utterance_id,path,label,split,provenance\nx,x.wav,GLF,TEST,original\n";
        let m = Manifest::parse(text, Path::new("."), "t").unwrap();
        assert_eq!(m.labels(), MGB3_LABELS);
    }

    #[test]
    fn bad_header_is_a_parse_error() {
        let text = "id,path\nx,y\n";
        assert!(matches!(Manifest::parse(text, Path::new("."), "t"), Err(Error::Parse { .. })));
    }
}
