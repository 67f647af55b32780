//! Run configuration: one JSON document with a block per pipeline stage.
//!
//! Every block has defaults, so `{}` is a valid config. Unknown keys are
//! rejected at every level.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use liftprune::data::FixtureSpec;
use liftprune::deeplift::{ReferenceSpec, TargetSpec};
use liftprune::mpq::MpqOptions;
use liftprune::profiler::ProfileOptions;
use liftprune::pruner::PruneConfig;
use liftprune::sensitivity::SensitivityConfig;
use liftprune::trainer::TrainConfig;
use liftprune::wsq::WsqConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Synthetic class-clustered images, split after a seeded shuffle.
    Fixture { spec: FixtureSpec },
    /// IDX image/label files with a separate test pair.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Training share of a fixture dataset.
    pub train_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Fixture {
                spec: FixtureSpec::default(),
            },
            train_fraction: 0.75,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    FixtureCnn,
    ResidualCnn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub kind: Arch,
    /// Channel width of `residual_cnn`.
    pub width: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            kind: Arch::FixtureCnn,
            width: 8,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttributeConfig {
    pub reference: ReferenceSpec,
    pub target: TargetSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneMode {
    /// Sensitivity-driven structured pruning over several rounds.
    Global,
    /// Global weight-level pruning.
    Unstructured,
    /// One layer at a list of amounts, without fine-tuning.
    Local,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalSweep {
    /// Layer to prune; defaults to the last convolution.
    pub layer: Option<usize>,
    pub amounts: Vec<f64>,
    /// Add an ℓ1-norm series to the amount curve.
    pub compare_l1: bool,
}

impl Default for LocalSweep {
    fn default() -> Self {
        Self {
            layer: None,
            amounts: vec![0.25, 0.5, 0.75],
            compare_l1: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneBlock {
    pub mode: PruneMode,
    pub config: PruneConfig,
    pub local: LocalSweep,
}

impl Default for PruneBlock {
    fn default() -> Self {
        Self {
            mode: PruneMode::Global,
            config: PruneConfig::default(),
            local: LocalSweep::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpqBlock {
    pub options: MpqOptions,
    /// Run the per-layer refinement after the coarse search.
    pub fine_search: bool,
}

impl Default for MpqBlock {
    fn default() -> Self {
        Self {
            options: MpqOptions::default(),
            fine_search: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfileBlock {
    pub options: ProfileOptions,
    /// Prune mask JSON to profile against.
    pub mask: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabeledPath {
    pub label: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportBlock {
    /// Report JSON files written by `prune`, `quantize-ws` and `quantize-int`.
    pub inputs: Vec<LabeledPath>,
    /// Models evaluated per class on the test split.
    pub per_class: Vec<LabeledPath>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Input model for every command except `train`.
    pub model: Option<PathBuf>,
    pub data: DataConfig,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub attribute: AttributeConfig,
    pub sensitivity: SensitivityConfig,
    pub prune: PruneBlock,
    pub wsq: WsqConfig,
    pub mpq: MpqBlock,
    pub profile: ProfileBlock,
    pub report: ReportBlock,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: None,
            data: DataConfig::default(),
            arch: ArchConfig::default(),
            train: TrainConfig {
                epochs: 20,
                ..TrainConfig::default()
            },
            attribute: AttributeConfig::default(),
            sensitivity: SensitivityConfig::default(),
            prune: PruneBlock::default(),
            wsq: WsqConfig::default(),
            mpq: MpqBlock::default(),
            profile: ProfileBlock::default(),
            report: ReportBlock::default(),
        }
    }
}

fn invalid(msg: String) -> liftprune::Error {
    liftprune::Error::InvalidConfig(msg)
}

impl RunConfig {
    pub fn from_value(v: Value) -> Result<Self> {
        serde_json::from_value(v).map_err(|e| invalid(e.to_string()).into())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let v: Value = serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        Self::from_value(v)
    }

    /// Applies `a.b.c=value` overrides. The value is parsed as JSON and
    /// taken as a string if that fails.
    pub fn with_overrides(self, sets: &[String]) -> Result<Self> {
        if sets.is_empty() {
            return Ok(self);
        }
        let mut root = serde_json::to_value(&self)?;
        for s in sets {
            let (path, raw) = s
                .split_once('=')
                .ok_or_else(|| invalid(format!("override `{s}` is not key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut node = &mut root;
            let keys: Vec<&str> = path.split('.').collect();
            for (i, key) in keys.iter().enumerate() {
                let obj = node
                    .as_object_mut()
                    .ok_or_else(|| invalid(format!("override `{path}`: `{key}` is not inside an object")))?;
                if i + 1 == keys.len() {
                    obj.insert(key.to_string(), value.clone());
                    break;
                }
                node = obj.entry(key.to_string()).or_insert_with(|| Value::Object(Default::default()));
            }
        }
        Self::from_value(root)
    }

    /// Sets every seed in the configuration.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        if let DataSource::Fixture { spec } = &mut self.data.source {
            spec.seed = seed;
        }
        self.train.seed = seed;
        self.attribute.reference.seed = seed;
        self.sensitivity.seed = seed;
        let p = &mut self.prune.config;
        p.reference.seed = seed;
        p.sensitivity.seed = seed;
        p.train.seed = seed;
        self.wsq.seed = seed;
        self.wsq.reference.seed = seed;
        if let Some(t) = &mut self.wsq.fine_tune {
            t.seed = seed;
        }
        if let Some(t) = &mut self.mpq.options.fine_tune {
            t.seed = seed;
        }
    }

    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let c = RunConfig::from_value(serde_json::json!({})).unwrap();
        assert_eq!(c, RunConfig::default());
    }

    #[test]
    fn printed_config_parses_back() {
        let c = RunConfig::default();
        let back = RunConfig::from_value(serde_json::from_str(&c.to_pretty_json()).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_are_rejected_at_depth() {
        assert!(RunConfig::from_value(serde_json::json!({"bogus": 1})).is_err());
        assert!(RunConfig::from_value(serde_json::json!({"prune": {"config": {"objective": {"rounds": 3}}}})).is_err());
        assert!(RunConfig::from_value(serde_json::json!({"data": {"source": {"kind": "fixture", "spec": {"colour": 1}}}})).is_err());
    }

    #[test]
    fn overrides_reach_nested_defaults() {
        let c = RunConfig::default()
            .with_overrides(&[
                "prune.config.objective.criteria=macs".into(),
                "wsq.bits=4".into(),
                "model=net.lpm".into(),
            ])
            .unwrap();
        assert_eq!(c.prune.config.objective.criteria, liftprune::pruner::Objective::Macs);
        assert_eq!(c.wsq.bits, 4);
        assert_eq!(c.model, Some(PathBuf::from("net.lpm")));
        assert!(RunConfig::default().with_overrides(&["wsq.nope=1".into()]).is_err());
    }

    #[test]
    fn seed_reaches_every_module() {
        let mut c = RunConfig::default();
        c.apply_seed(9);
        assert_eq!((c.train.seed, c.wsq.seed, c.sensitivity.seed, c.prune.config.train.seed), (9, 9, 9, 9));
        let DataSource::Fixture { spec } = &c.data.source else { unreachable!() };
        assert_eq!(spec.seed, 9);
    }
}
