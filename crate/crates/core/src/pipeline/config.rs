//! Declarative run configuration: one TOML file with a section per stage,
//! overridable key by key.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::audio::{FeatureKind, FrameConfig};
use crate::augment::AugmentPolicy;
use crate::e2e::E2eTrainConfig;
use crate::error::{Error, Result};
use crate::eval::{CostModel, FusionConfig};
use crate::manifest::Split;
use crate::pipeline::synth::SynthConfig;
use crate::siamese::SiameseTrainConfig;
use crate::vsm::{NGramPolicy, TokenLevel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeaturesSection {
    pub kind: FeatureKind,
    /// Per-utterance mean and variance normalization.
    pub normalize: bool,
    pub frame: FrameConfig,
    /// Worker threads for per-utterance stages; 0 uses all cores.
    pub workers: usize,
}

impl Default for FeaturesSection {
    fn default() -> Self {
        Self {
            kind: FeatureKind::Fbank,
            normalize: true,
            frame: FrameConfig::default(),
            workers: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VsmSection {
    pub level: TokenLevel,
    /// 0 picks the level's default order.
    pub n: usize,
    pub boundary_markers: bool,
}

impl Default for VsmSection {
    fn default() -> Self {
        Self {
            level: TokenLevel::Word,
            n: 0,
            boundary_markers: true,
        }
    }
}

impl VsmSection {
    pub fn policy(&self) -> NGramPolicy {
        let mut p = NGramPolicy::for_level(self.level);
        if self.n > 0 {
            p.n = self.n;
        }
        p.boundary_markers = self.boundary_markers;
        p
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub cost: CostModel,
    /// Split whose scores provide the Z-norm statistics.
    pub znorm_cohort: Split,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            cost: CostModel::default(),
            znorm_cohort: Split::Dev,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub features: FeaturesSection,
    pub augment: AugmentPolicy,
    pub e2e: E2eTrainConfig,
    pub vsm: VsmSection,
    pub siamese: SiameseTrainConfig,
    pub eval: EvalSection,
    pub fusion: FusionConfig,
    pub synth: SynthConfig,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Effective configuration, as written next to every output.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Apply `section.key=value` overrides. Values are parsed as TOML
    /// literals, falling back to a bare string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut root = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            let value = parse_value(raw.trim());
            let path: Vec<&str> = key.trim().split('.').collect();
            let (last, sections) = path.split_last().expect("split yields one part");
            let mut table = root.as_table_mut().expect("config is a table");
            for part in sections {
                table = table
                    .get_mut(*part)
                    .and_then(toml::Value::as_table_mut)
                    .ok_or_else(|| Error::Config(format!("unknown config section `{part}` in `{key}`")))?;
            }
            if !table.contains_key(*last) && !is_optional_key(last) {
                return Err(Error::Config(format!("unknown config key `{key}`")));
            }
            table.insert(last.to_string(), value);
        }
        let merged: Self = root.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        merged.validate()?;
        Ok(merged)
    }

    pub fn validate(&self) -> Result<()> {
        self.features.frame.validate()?;
        self.augment.validate()?;
        self.e2e.validate()?;
        self.siamese.validate()?;
        self.synth.validate()?;
        if !(self.eval.cost.p_target > 0.0 && self.eval.cost.p_target < 1.0) {
            return Err(Error::Config("eval.cost.p_target must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Keys that serialize to nothing when unset.
fn is_optional_key(k: &str) -> bool {
    k == "stop_at_validation_accuracy"
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let c = PipelineConfig::default();
        assert_eq!(PipelineConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let c = PipelineConfig::from_toml("[e2e]\nbatch_size = 8\n[vsm]\nlevel = \"char\"\n").unwrap();
        assert_eq!(c.e2e.batch_size, 8);
        assert_eq!(c.e2e.max_epochs, 30);
        assert_eq!(c.vsm.policy().n, 3);
    }

    #[test]
    fn overrides() {
        let c = PipelineConfig::default()
            .with_overrides(&[
                "e2e.sgd.learning_rate=0.01",
                "features.kind=mfcc",
                "e2e.stop_at_validation_accuracy=0.95",
                "augment.speed_factors=[0.9]",
            ])
            .unwrap();
        assert_eq!(c.e2e.sgd.learning_rate, 0.01);
        assert_eq!(c.features.kind, FeatureKind::Mfcc);
        assert_eq!(c.e2e.stop_at_validation_accuracy, Some(0.95));
        assert_eq!(c.augment.speed_factors, vec![0.9]);
    }

    #[test]
    fn bad_overrides_rejected() {
        let c = PipelineConfig::default();
        assert!(matches!(c.with_overrides(&["e2e.nope=1"]), Err(Error::Config(_))));
        assert!(matches!(c.with_overrides(&["e2e.batch_size"]), Err(Error::Config(_))));
        assert!(matches!(c.with_overrides(&["e2e.batch_size=0"]), Err(Error::Config(_))));
        assert!(matches!(c.with_overrides(&["e2e.batch_size=\"x\""]), Err(Error::Config(_))));
        assert!(PipelineConfig::from_toml("[e2e]\nbatch_size = -1").is_err());
    }
}
