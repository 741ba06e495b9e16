//! Run configuration: one TOML file with a section per module. Unknown keys
//! are rejected and all of them are reported together.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::{ClipSetConfig, ManipulationTag, Quality};
use crate::error::{invalid, Error, Result};
use crate::evaluation::EvalOptions;
use crate::heads::HeadsConfig;
use crate::model::{Ablation, ModelConfig};
use crate::msh::MshConfig;
use crate::temporal::HornSchunck;
use crate::training::{OptimizerSchedule, PretrainSettings, TrainSettings};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train: ClipSetConfig,
    pub val: ClipSetConfig,
    pub test: ClipSetConfig,
    pub camera_models: usize,
    pub camera_frames_per_model: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        let split = |a, m| ClipSetConfig { authentic: a, manipulated: m, ..ClipSetConfig::default() };
        Self { train: split(100, 100), val: split(8, 8), test: split(16, 16), camera_models: 4, camera_frames_per_model: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub qualities: Vec<Quality>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { qualities: Quality::LADDER.to_vec() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default = "one")]
    pub workers: usize,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub ablation: Ablation,
    #[serde(default)]
    pub flow: HornSchunck,
    #[serde(default)]
    pub pretrain: PretrainSettings,
    #[serde(default)]
    pub train: TrainSettings,
    #[serde(default)]
    pub eval: EvalOptions,
    #[serde(default)]
    pub sweep: SweepConfig,
}

fn one() -> usize {
    1
}

impl RunConfig {
    /// Module defaults with the given seed.
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            workers: 1,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            ablation: Ablation::default(),
            flow: HornSchunck::default(),
            pretrain: PretrainSettings::default(),
            train: TrainSettings::default(),
            eval: EvalOptions::default(),
            sweep: SweepConfig::default(),
        }
    }

    /// Settings sized for a single CPU core: 64×64 clips, a narrow hierarchy
    /// over scales {0..3}, and learning rates large enough to move in a few
    /// dozen epochs.
    pub fn desk(seed: u64) -> Self {
        let mut c = Self::with_seed(seed);
        c.model.msh = MshConfig { scales: vec![0, 1, 2, 3], embed_dim: 64, heads: 4, layers_per_scale: 1, flat_layers: 2, mlp_ratio: 2 };
        c.model.heads = HeadsConfig { detect_hidden: 32, localize_hidden: 32 };
        c.pretrain.epochs = 20;
        c.pretrain.schedule = OptimizerSchedule { initial_lr: 0.3, decay: 0.9, ..OptimizerSchedule::pretrain() };
        c.train.epochs = 30;
        c.train.frames_per_clip = Some(3);
        c.train.schedule = OptimizerSchedule { initial_lr: 0.01, decay: 0.9, ..OptimizerSchedule::full() };
        c
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let mut check = |what: &str, r: Result<()>| {
            if let Err(e) = r {
                problems.push(format!("{what}: {e}"));
            }
        };
        check("model", self.model.validate());
        check("pretrain.schedule", self.pretrain.schedule.validate());
        check("pretrain.head", self.pretrain.head.validate());
        check("train.schedule", self.train.schedule.validate());
        if self.workers == 0 {
            problems.push("workers: must be at least 1".into());
        }
        for (name, split) in [("data.train", &self.data.train), ("data.val", &self.data.val), ("data.test", &self.data.test)] {
            if split.height % 32 != 0 || split.width % 32 != 0 {
                problems.push(format!("{name}: frame size {}x{} is not divisible by 32", split.height, split.width));
            }
            if split.kinds.contains(&ManipulationTag::Authentic) {
                problems.push(format!("{name}.kinds: authentic is not a manipulation kind"));
            }
        }
        if self.train.batch_size == 0 || self.pretrain.batch_size == 0 || self.eval.batch_size == 0 {
            problems.push("batch sizes must be positive".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let value: toml::Value = toml::from_str(text).map_err(|e| Error::Config(vec![e.message().to_string()]))?;
        Self::from_value(value)
    }

    pub fn from_value(value: toml::Value) -> Result<Self> {
        let reference = serde_json::to_value(Self::with_seed(0)).map_err(|e| invalid!("{e}"))?;
        let user = serde_json::to_value(&value).map_err(|e| invalid!("{e}"))?;
        let mut unknown = Vec::new();
        unknown_keys(&user, &reference, "", &mut unknown);
        if !unknown.is_empty() {
            return Err(Error::Config(unknown.into_iter().map(|k| format!("unknown key {k}")).collect()));
        }
        let cfg: Self = value.try_into().map_err(|e: toml::de::Error| Error::Config(vec![e.message().to_string()]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Layers a preset (its seed dropped), an optional TOML file and
    /// `key=value` overrides, then validates the result.
    pub fn compose(preset: Option<&RunConfig>, file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut doc = match preset {
            Some(p) => toml::Value::try_from(p).map_err(|e| invalid!("cannot serialise preset: {e}"))?,
            None => toml::Value::Table(Default::default()),
        };
        if let Some(t) = doc.as_table_mut() {
            t.remove("seed");
        }
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let user: toml::Value =
                toml::from_str(&text).map_err(|e| Error::Config(vec![format!("{}: {}", path.display(), e.message())]))?;
            merge(&mut doc, user);
        }
        apply_overrides(&mut doc, overrides)?;
        if doc.get("seed").is_none() {
            return Err(Error::Config(vec!["seed is mandatory".into()]));
        }
        Self::from_value(doc)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| invalid!("cannot serialise config: {e}"))
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config is serialisable")
    }
}

/// Applies `a.b.c=value` overrides (the value parsed as a TOML literal,
/// falling back to a string) to a parsed config document.
pub fn apply_overrides(doc: &mut toml::Value, overrides: &[String]) -> Result<()> {
    for o in overrides {
        let (path, raw) = o.split_once('=').ok_or_else(|| invalid!("override {o:?} is not key=value"))?;
        let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let keys: Vec<&str> = path.trim().split('.').collect();
        let mut node = &mut *doc;
        for (i, k) in keys.iter().enumerate() {
            let table = node.as_table_mut().ok_or_else(|| invalid!("override {path}: {k} is not inside a table"))?;
            if i + 1 == keys.len() {
                table.insert(k.to_string(), value.clone());
                break;
            }
            node = table.entry(k.to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
        }
    }
    Ok(())
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn unknown_keys(user: &serde_json::Value, reference: &serde_json::Value, prefix: &str, out: &mut Vec<String>) {
    let (Some(u), Some(r)) = (user.as_object(), reference.as_object()) else { return };
    for (k, v) in u {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match r.get(k) {
            None => out.push(path),
            Some(rv) => unknown_keys(v, rv, &path, out),
        }
    }
}
