//! Run configuration: one JSON document covering model, training, data and
//! explanation settings. Unknown keys are rejected and every default is
//! written out in the persisted copy.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::attribution::CamMethod;
use crate::error::{bail, Result};
use crate::metrics::DEFAULT_STEPS;
use crate::model::ModelConfig;
use crate::synth::SynthConfig;
use crate::training::{Stage, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub synth: SynthConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_train: 400,
            n_val: 100,
            n_test: 100,
            synth: SynthConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct XaiConfig {
    pub method: CamMethod,
    pub layer_id: String,
    /// Deletion / insertion curve resolution.
    pub steps: usize,
}

impl Default for XaiConfig {
    fn default() -> Self {
        XaiConfig {
            method: CamMethod::GradCam,
            layer_id: "fusion".into(),
            steps: DEFAULT_STEPS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed for data, initialization and shuffling.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    /// Stage I settings.
    pub pretrain: TrainConfig,
    /// Stage II settings.
    pub finetune: TrainConfig,
    pub data: DataConfig,
    pub xai: XaiConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::from_value(Value::Object(Default::default())).expect("defaults are valid")
    }
}

fn fill(obj: &mut serde_json::Map<String, Value>, key: &str, value: Value) {
    obj.entry(key.to_string()).or_insert(value);
}

impl RunConfig {
    /// Parses a config document. Missing training seeds inherit the master
    /// seed and missing stages follow the block (`pretrain` segments,
    /// `finetune` classifies).
    pub fn from_value(mut doc: Value) -> Result<Self> {
        let Some(obj) = doc.as_object_mut() else {
            bail!(Config, "config must be a JSON object");
        };
        fill(obj, "seed", Value::from(0u64));
        fill(obj, "out_dir", Value::from("runs/sail"));
        for key in ["model", "data", "xai"] {
            fill(obj, key, Value::Object(Default::default()));
        }
        let seed = obj["seed"].clone();
        for (key, stage) in [("pretrain", "segmentation"), ("finetune", "classification")] {
            fill(obj, key, Value::Object(Default::default()));
            let Some(block) = obj.get_mut(key).and_then(Value::as_object_mut) else {
                bail!(Config, "'{key}' must be an object");
            };
            fill(block, "seed", seed.clone());
            fill(block, "stage", Value::from(stage));
        }
        let mut cfg: RunConfig = serde_json::from_value(doc).map_err(|e| crate::SailError::Config(e.to_string()))?;
        cfg.model.materialize();
        cfg.data.synth.materialize();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: Value = serde_json::from_str(text).map_err(|e| crate::SailError::Config(format!("invalid JSON: {e}")))?;
        RunConfig::from_value(doc)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| crate::SailError::Config(format!("cannot read config {}: {e}", path.display())))?;
        RunConfig::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.synth.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        if self.pretrain.stage != Stage::Segmentation || self.finetune.stage != Stage::Classification {
            bail!(Config, "pretrain must use stage segmentation and finetune stage classification");
        }
        let s = &self.data.synth;
        if self.model.input_size != [s.height, s.width] {
            bail!(Config, "model input {:?} differs from scene size {}x{}", self.model.input_size, s.height, s.width);
        }
        if self.model.num_seg_classes != s.layers + 1 {
            bail!(Config, "num_seg_classes must be layers + 1 = {}", s.layers + 1);
        }
        if self.model.num_cls_classes != SynthConfig::NUM_CLASSES {
            bail!(Config, "synthetic data has {} classes", SynthConfig::NUM_CLASSES);
        }
        if self.data.n_train == 0 || self.data.n_val == 0 || self.data.n_test == 0 {
            bail!(Config, "split sizes must be at least 1");
        }
        if self.xai.steps < 2 {
            bail!(Config, "xai.steps must be at least 2");
        }
        let ids = self.model.layer_ids();
        if !ids.contains(&self.xai.layer_id) {
            bail!(Config, "unknown layer '{}'; valid ids: {}", self.xai.layer_id, ids.join(", "));
        }
        Ok(())
    }

    /// Sets the master seed and both training seeds.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.pretrain.seed = seed;
        self.finetune.seed = seed;
    }

    /// Pretty JSON with every field present.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    /// The config as stored in artifacts: identical to [`Self::to_json`]
    /// except that the output directory is blanked, so runs that differ only
    /// in where they write produce identical artifacts.
    pub fn canonical_json(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        serde_json::to_string(&c).expect("config serializes")
    }

    /// Hex SHA-256 of [`Self::canonical_json`].
    pub fn hash(&self) -> String {
        Sha256::digest(self.canonical_json().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}
