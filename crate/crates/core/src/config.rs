//! Run configuration: one TOML file with dotted keys (`train.epochs = 30`,
//! `segment.fusion.stage = "early"`), layered over a preset and followed by
//! `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::data::BandId;
use crate::detect::DetectConfig;
use crate::error::{Error, Result};
use crate::segment::SegConfig;
use crate::synthetic::WeakLabelConfig;
use crate::train::{Task, TrainConfig};

/// Base values every file is layered on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Full-size networks and the published hyperparameters.
    #[default]
    Full,
    /// Small networks and patches that train on one CPU core.
    Desk,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Resolves the relative manifest paths below; falls back to the
    /// data-root environment variable.
    pub root: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub test: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub workers: usize,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub detect: DetectConfig,
    pub segment: SegConfig,
    pub weak: WeakLabelConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset(Preset::Full)
    }
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let (detect, segment) = match preset {
            Preset::Full => (DetectConfig::default(), SegConfig::default()),
            Preset::Desk => (
                DetectConfig::desk(Vec::new()),
                SegConfig::desk(Vec::new(), SegConfig::default().class_set),
            ),
        };
        Self {
            preset,
            seed: 0,
            workers: 1,
            data: DataConfig::default(),
            train: TrainConfig::default(),
            detect,
            segment,
            weak: WeakLabelConfig::default(),
        }
    }

    /// Reads `path` (if any), applies `overrides` and checks every key.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut user = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                text.parse::<Table>()
                    .map_err(|e| Error::config(p.display().to_string(), e.message().to_string()))?
            }
            None => Table::new(),
        };
        for o in overrides {
            let (key, value) = parse_override(o)?;
            set_path(&mut user, &key, value)?;
        }
        Self::from_table(user)
    }

    pub fn from_table(user: Table) -> Result<Self> {
        let preset = match user.get("preset") {
            None => Preset::Full,
            Some(Value::String(s)) if s == "full" => Preset::Full,
            Some(Value::String(s)) if s == "desk" => Preset::Desk,
            Some(v) => return Err(Error::config("preset", format!("expected \"full\" or \"desk\", got {v}"))),
        };
        let mut merged = Table::try_from(Self::preset(preset)).expect("defaults serialize");
        merge(&mut merged, user);
        let mut unknown = Vec::new();
        let cfg: RunConfig = serde_ignored::deserialize(Value::Table(merged), |p| unknown.push(p.to_string()))
            .map_err(|e| Error::config(error_key(&e.to_string()), e.to_string()))?;
        if let Some(k) = unknown.first() {
            return Err(Error::config(k.clone(), "unknown key"));
        }
        if cfg.workers == 0 {
            return Err(Error::config("workers", "must be >= 1"));
        }
        Ok(cfg)
    }

    /// Training settings for `task` with the run-level seed applied.
    pub fn train_for(&self, task: Task) -> Result<TrainConfig> {
        let mut t = self.train.clone();
        t.task = task;
        t.seed = self.seed;
        t.validate()?;
        Ok(t)
    }

    /// Detection settings, taking the dataset's bands when none are listed.
    pub fn detect_for(&self, bands: &[BandId]) -> Result<DetectConfig> {
        let mut d = self.detect.clone();
        if d.bands.is_empty() {
            d.bands = bands.to_vec();
        }
        d.validate()?;
        Ok(d)
    }

    pub fn segment_for(&self, bands: &[BandId], class_set: &[String]) -> Result<SegConfig> {
        let mut s = self.segment.clone();
        if s.bands.is_empty() {
            s.bands = bands.to_vec();
        }
        if s.class_set != class_set {
            if s.class_weights.len() != class_set.len() {
                s.class_weights = vec![1.0; class_set.len()];
            }
            s.class_set = class_set.to_vec();
        }
        s.validate()?;
        Ok(s)
    }

    /// Data paths with the root applied; `env_root` is used when the file
    /// sets none.
    pub fn resolve_data(&self, env_root: Option<&Path>) -> DataConfig {
        let root = self.data.root.clone().or_else(|| env_root.map(Path::to_path_buf));
        let join = |p: &Option<PathBuf>| match (&root, p) {
            (Some(r), Some(p)) if p.is_relative() => Some(r.join(p)),
            (_, p) => p.clone(),
        };
        DataConfig {
            train: join(&self.data.train),
            val: join(&self.data.val),
            test: join(&self.data.test),
            root,
        }
    }

    /// The fully resolved configuration as TOML; loading it back gives the
    /// same configuration.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn parse_override(s: &str) -> Result<(String, Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::config(s, "override must look like key=value"))?;
    let k = k.trim();
    if k.is_empty() {
        return Err(Error::config(s, "empty key"));
    }
    // Anything that is not a TOML literal is taken as a bare string.
    let value = format!("v = {}", v.trim())
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(v.trim().to_string()));
    Ok((k.to_string(), value))
}

fn set_path(t: &mut Table, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = t;
    for p in &parts[..parts.len() - 1] {
        let next = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = match next {
            Value::Table(t) => t,
            _ => return Err(Error::config(key, format!("`{p}` is not a table"))),
        };
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Best-effort key path from a deserializer message.
fn error_key(msg: &str) -> String {
    msg.split('`').nth(1).unwrap_or("config").to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::{FusionOp, FusionStage};

    fn load_str(text: &str, overrides: &[&str]) -> Result<RunConfig> {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, text).unwrap();
        let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
        RunConfig::load(Some(&p), &o)
    }

    #[test]
    fn dotted_keys_and_sections_both_work() {
        let a = load_str("train.epochs = 7\nsegment.fusion.stage = \"early\"\n", &[]).unwrap();
        let b = load_str("[train]\nepochs = 7\n[segment.fusion]\nstage = \"early\"\n", &[]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train.epochs, Some(7));
        assert_eq!(a.segment.fusion.stage, FusionStage::Early);
    }

    #[test]
    fn overrides_apply_after_the_file() {
        let c = load_str("seed = 1\ndetect.fusion.op = \"concat\"\n", &["seed=5", "detect.fusion.op=add"]).unwrap();
        assert_eq!(c.seed, 5);
        assert_eq!(c.detect.fusion.op, FusionOp::Add);
    }

    #[test]
    fn desk_preset_changes_the_base() {
        let c = load_str("preset = \"desk\"\n", &[]).unwrap();
        assert_eq!(c.segment.patch_size, SegConfig::desk(vec![], vec![]).patch_size);
        let p = load_str("", &[]).unwrap();
        assert_eq!(p.segment.patch_size, 224);
    }

    #[test]
    fn unknown_and_ill_typed_keys_are_named() {
        let e = load_str("train.epoch = 3\n", &[]).unwrap_err().to_string();
        assert!(e.contains("train.epoch"), "{e}");
        let e = load_str("", &["train.batch_size=\"four\""]).unwrap_err().to_string();
        assert!(e.contains("batch_size"), "{e}");
        let e = load_str("", &["noequals"]).unwrap_err().to_string();
        assert!(e.contains("key=value"), "{e}");
    }

    #[test]
    fn resolved_snapshot_round_trips() {
        let c = load_str("preset = \"desk\"\ntrain.learning_rate = 0.001\nseed = 3\n", &[]).unwrap();
        let text = c.to_toml();
        let back = RunConfig::from_table(text.parse().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_toml(), text);
    }

    #[test]
    fn relative_data_paths_use_the_root() {
        let mut c = RunConfig::default();
        c.data.train = Some("train/manifest.json".into());
        c.data.test = Some("/abs/test.json".into());
        let d = c.resolve_data(Some(Path::new("/data")));
        assert_eq!(d.train.unwrap(), Path::new("/data/train/manifest.json"));
        assert_eq!(d.test.unwrap(), Path::new("/abs/test.json"));
    }
}
