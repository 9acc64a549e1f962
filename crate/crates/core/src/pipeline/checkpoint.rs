//! Self-describing binary container for model parameters and feature
//! matrices.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "DIDKCKPT" | version u32 | kind str | n_meta u32 | (key str, value str)*
//! | n_tensors u32 | (name str, ndim u32, dims u64*, f32 data)*
//! ```
//!
//! A `str` is a u32 byte length followed by UTF-8 bytes. Metadata is kept
//! sorted by key so identical contents serialize to identical bytes.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::audio::{FeatureKind, FeatureMatrix};
use crate::e2e::{E2eModel, E2eTopology};
use crate::error::{Error, Result};
use crate::nn::Parameterized;
use crate::scalar::Real;
use crate::siamese::{SiameseModel, SiameseTopology};

pub const MAGIC: &[u8; 8] = b"DIDKCKPT";
pub const VERSION: u32 = 1;

pub const KIND_E2E: &str = "e2e";
pub const KIND_SIAMESE: &str = "siamese";
pub const KIND_FEATURES: &str = "features";

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub kind: String,
    pub metadata: BTreeMap<String, String>,
    pub tensors: Vec<Tensor>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| bad("truncated file"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| bad("string is not UTF-8"))
    }
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            ..Self::default()
        }
    }

    pub fn with_meta(mut self, key: impl Into<String>, value: impl ToString) -> Self {
        self.metadata.insert(key.into(), value.to_string());
        self
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| bad(format!("missing metadata `{key}`")))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| bad(format!("missing tensor `{name}`")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.kind);
        out.extend_from_slice(&(self.metadata.len() as u32).to_le_bytes());
        for (k, v) in &self.metadata {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            put_str(&mut out, &t.name);
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut c = Cursor { buf, pos: 0 };
        if c.take(8).ok() != Some(MAGIC.as_slice()) {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = c.u32()?;
        if version != VERSION {
            return Err(bad(format!("unsupported format version {version}, expected {VERSION}")));
        }
        let kind = c.str()?;
        let mut metadata = BTreeMap::new();
        for _ in 0..c.u32()? {
            let k = c.str()?;
            metadata.insert(k, c.str()?);
        }
        let n = c.u32()? as usize;
        let mut tensors = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            let name = c.str()?;
            let ndim = c.u32()? as usize;
            let shape: Vec<usize> = (0..ndim).map(|_| c.u64().map(|d| d as usize)).collect::<Result<_>>()?;
            let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| bad("shape overflow"))?;
            let raw = c.take(len.checked_mul(4).ok_or_else(|| bad("shape overflow"))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            tensors.push(Tensor { name, shape, data });
        }
        if c.pos != buf.len() {
            return Err(bad("trailing bytes after last tensor"));
        }
        Ok(Self { kind, metadata, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(bad(format!("expected a `{kind}` checkpoint, found `{}`", self.kind)));
        }
        Ok(())
    }

    fn put_params<T: Real, M: Parameterized<T>>(&mut self, model: &M) {
        for p in model.params() {
            self.tensors.push(Tensor {
                name: p.name,
                shape: p.shape,
                data: p.data.iter().map(|v| v.as_f64() as f32).collect(),
            });
        }
    }

    fn fill_params<T: Real, M: Parameterized<T>>(&self, model: &mut M) -> Result<()> {
        let shapes: Vec<(String, Vec<usize>)> = model.params().into_iter().map(|p| (p.name, p.shape)).collect();
        if shapes.len() != self.tensors.len() {
            return Err(bad(format!(
                "checkpoint holds {} tensors, model expects {}",
                self.tensors.len(),
                shapes.len()
            )));
        }
        for ((name, slot), (_, shape)) in model.params_mut().into_iter().zip(&shapes) {
            let t = self.tensor(&name)?;
            if &t.shape != shape {
                return Err(bad(format!("tensor `{name}` has shape {:?}, model expects {shape:?}", t.shape)));
            }
            for (d, &s) in slot.iter_mut().zip(&t.data) {
                *d = T::lit(s as f64);
            }
        }
        Ok(())
    }
}

fn to_toml<S: serde::Serialize>(v: &S) -> String {
    toml::to_string(v).expect("topology serializes")
}

fn from_toml<S: serde::de::DeserializeOwned>(s: &str) -> Result<S> {
    toml::from_str(s).map_err(|e| bad(format!("bad topology: {e}")))
}

/// E2E parameters plus free-form metadata (seed, epoch, selection, …).
pub fn e2e_to_checkpoint<T: Real>(model: &E2eModel<T>, meta: &[(&str, String)]) -> Checkpoint {
    let mut c = Checkpoint::new(KIND_E2E).with_meta("topology", to_toml(model.topology()));
    for (k, v) in meta {
        c.metadata.insert(k.to_string(), v.clone());
    }
    c.put_params(model);
    c
}

pub fn e2e_from_checkpoint<T: Real>(c: &Checkpoint) -> Result<E2eModel<T>> {
    c.expect_kind(KIND_E2E)?;
    let topology: E2eTopology = from_toml(c.meta("topology")?)?;
    let mut m = E2eModel::zeros(topology)?;
    c.fill_params(&mut m)?;
    Ok(m)
}

pub fn siamese_to_checkpoint<T: Real>(model: &SiameseModel<T>, meta: &[(&str, String)]) -> Checkpoint {
    let mut c = Checkpoint::new(KIND_SIAMESE).with_meta("topology", to_toml(model.topology()));
    for (k, v) in meta {
        c.metadata.insert(k.to_string(), v.clone());
    }
    c.put_params(model);
    c
}

pub fn siamese_from_checkpoint<T: Real>(c: &Checkpoint) -> Result<SiameseModel<T>> {
    c.expect_kind(KIND_SIAMESE)?;
    let topology: SiameseTopology = from_toml(c.meta("topology")?)?;
    let mut m = SiameseModel::zeros(topology)?;
    c.fill_params(&mut m)?;
    Ok(m)
}

pub fn features_to_checkpoint<T: Real>(f: &FeatureMatrix<T>, meta: &[(&str, String)]) -> Checkpoint {
    let mut c = Checkpoint::new(KIND_FEATURES).with_meta("feature_kind", f.kind());
    for (k, v) in meta {
        c.metadata.insert(k.to_string(), v.clone());
    }
    c.tensors.push(Tensor {
        name: "frames".into(),
        shape: vec![f.num_frames(), f.dim()],
        data: f.frames().iter().map(|v| v.as_f64() as f32).collect(),
    });
    c
}

pub fn features_from_checkpoint<T: Real>(c: &Checkpoint) -> Result<FeatureMatrix<T>> {
    c.expect_kind(KIND_FEATURES)?;
    let kind: FeatureKind = c.meta("feature_kind")?.parse()?;
    let t = c.tensor("frames")?;
    if t.shape.len() != 2 {
        return Err(bad("feature tensor must be 2-d"));
    }
    let frames = Array2::from_shape_vec((t.shape[0], t.shape[1]), t.data.iter().map(|&v| T::lit(v as f64)).collect())
        .map_err(|e| bad(e.to_string()))?;
    FeatureMatrix::new(kind, frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;

    fn toy() -> E2eModel<f64> {
        let topo = E2eTopology::scaled(FeatureKind::Mfcc, 3, 100).unwrap();
        let mut m = E2eModel::new(topo, &mut seeded_rng(1)).unwrap();
        m.round_to_storage();
        m
    }

    #[test]
    fn e2e_round_trip_is_exact() {
        let m = toy();
        let c = e2e_to_checkpoint(&m, &[("seed", "1".into())]);
        let back: E2eModel<f64> = e2e_from_checkpoint(&Checkpoint::from_bytes(&c.to_bytes()).unwrap()).unwrap();
        assert_eq!(back, m);
        assert_eq!(c.meta("seed").unwrap(), "1");
    }

    #[test]
    fn siamese_round_trip_is_exact() {
        let topo = SiameseTopology {
            input_dim: 7,
            layers: vec![5, 4, 3],
        };
        let mut m = SiameseModel::<f64>::new(topo, &mut seeded_rng(2)).unwrap();
        m.round_to_storage();
        let c = siamese_to_checkpoint(&m, &[]);
        assert_eq!(siamese_from_checkpoint::<f64>(&c).unwrap(), m);
    }

    #[test]
    fn version_and_magic_checked() {
        let mut b = e2e_to_checkpoint(&toy(), &[]).to_bytes();
        b[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&b), Err(Error::Checkpoint(m)) if m.contains("version")));
        b[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&b), Err(Error::Checkpoint(m)) if m.contains("magic")));
    }

    #[test]
    fn truncation_and_kind_checked() {
        let c = e2e_to_checkpoint(&toy(), &[]);
        let b = c.to_bytes();
        assert!(Checkpoint::from_bytes(&b[..b.len() - 3]).is_err());
        assert!(siamese_from_checkpoint::<f64>(&c).is_err());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut c = e2e_to_checkpoint(&toy(), &[]);
        c.tensors[0].shape[0] += 1;
        assert!(matches!(e2e_from_checkpoint::<f64>(&c), Err(Error::Checkpoint(m)) if m.contains("shape")));
    }

    #[test]
    fn features_round_trip() {
        let frames = Array2::from_shape_fn((3, 40), |(i, j)| (i * 40 + j) as f64 * 0.25);
        let f = FeatureMatrix::new(FeatureKind::Fbank, frames).unwrap();
        let back: FeatureMatrix<f64> = features_from_checkpoint(&features_to_checkpoint(&f, &[])).unwrap();
        assert_eq!(back, f);
    }
}
