//! Run configuration: `key=value` lines with dotted keys, `#` comments.
//!
//! ```text
//! seed=7
//! model.name=lambda-resnet18
//! data.subtask=10
//! train.lr0=0.05
//! augment.noise.p=0.5
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::augment::AugmentationPolicy;
use crate::dataset::{Composition, Subtask};
use crate::error::{KwsError, Result};
use crate::model::ModelSpec;
use crate::train::TrainConfig;

/// Spec fields a config may override on top of the named model.
const MODEL_KEYS: [&str; 8] =
    ["stem_channels", "stage_channels", "blocks_per_stage", "block_strides", "kernel", "heads", "key_depth", "scope"];

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub subtask: Subtask,
    /// Extracted dataset; `None` means "pass it on the command line".
    pub root: Option<PathBuf>,
    /// Keep at most this many clips per class; 0 keeps everything.
    pub clips_per_class: usize,
    pub composition: Composition,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { subtask: Subtask::Ten, root: None, clips_per_class: 0, composition: Composition::default() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model_name: String,
    pub model_overrides: Vec<(String, String)>,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub augment: AugmentationPolicy,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            model_name: "lambda-resnet18".into(),
            model_overrides: Vec::new(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            augment: AugmentationPolicy::recipe(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| KwsError::config(format!("{key}: cannot parse {value:?}")))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| KwsError::config(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
            c.set(k.trim(), v.trim())?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| KwsError::io(path, e))?;
        Self::parse(&text)
    }

    /// Sets one dotted key. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "seed" => self.seed = parse(key, value)?,
            "model.name" => {
                ModelSpec::by_name(value, 2)?;
                self.model_name = value.into();
            }
            "data.subtask" => self.data.subtask = parse(key, value)?,
            "data.root" => self.data.root = (!value.is_empty()).then(|| PathBuf::from(value)),
            "data.clips_per_class" => self.data.clips_per_class = parse(key, value)?,
            "data.unknown_fraction" => self.data.composition.unknown_fraction = parse(key, value)?,
            "data.silence_fraction" => self.data.composition.silence_fraction = parse(key, value)?,
            "train.batch_size" => t.batch_size = parse(key, value)?,
            "train.max_epochs" => t.max_epochs = parse(key, value)?,
            "train.lr0" => t.lr0 = parse(key, value)?,
            "train.lr_decay" => t.lr_decay = parse(key, value)?,
            "train.momentum" => t.momentum = parse(key, value)?,
            "train.weight_decay" => t.weight_decay = parse(key, value)?,
            "train.patience" => t.patience = parse(key, value)?,
            "train.augment" => t.augment = parse(key, value)?,
            _ => {
                if let Some(field) = key.strip_prefix("model.").filter(|f| MODEL_KEYS.contains(f)) {
                    self.model_overrides.retain(|(k, _)| k != field);
                    self.model_overrides.push((field.into(), value.into()));
                    return Ok(());
                }
                let target = key.strip_prefix("augment.").and_then(|rest| rest.split_once('.')).and_then(
                    |(name, field)| {
                        let d = self.augment.entries_mut().into_iter().find(|(n, _)| *n == name)?.1;
                        match field {
                            "p" => Some(&mut d.p),
                            "lo" => Some(&mut d.lo),
                            "hi" => Some(&mut d.hi),
                            _ => None,
                        }
                    },
                );
                match target {
                    Some(slot) => *slot = parse(key, value)?,
                    None => return Err(KwsError::config(format!("unknown config key {key:?}"))),
                }
            }
        }
        Ok(())
    }

    /// Applies `key=value` overrides in order, then re-validates.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) =
                o.split_once('=').ok_or_else(|| KwsError::config(format!("override {o:?} is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.data.composition.validate()?;
        self.augment.validate()?;
        self.model_spec(self.data.subtask).map(|_| ())
    }

    /// The named architecture with overrides applied, sized for `subtask`.
    pub fn model_spec(&self, subtask: Subtask) -> Result<ModelSpec> {
        self.model_spec_with_classes(crate::dataset::SubtaskVocabulary::new(subtask).num_classes())
    }

    pub fn model_spec_with_classes(&self, classes: usize) -> Result<ModelSpec> {
        let base = ModelSpec::by_name(&self.model_name, classes)?;
        base.validate()?;
        if self.model_overrides.is_empty() {
            return Ok(base);
        }
        let mut text = String::new();
        for line in base.to_text().lines() {
            let key = line.split('=').next().unwrap_or("");
            match self.model_overrides.iter().find(|(k, _)| k == key) {
                Some((k, v)) => {
                    let _ = writeln!(text, "{k}={v}");
                }
                None => {
                    let _ = writeln!(text, "{line}");
                }
            }
        }
        ModelSpec::from_text(&text)
    }

    /// Every key with its resolved value; parsing it gives back `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        put("seed", self.seed.to_string());
        put("model.name", self.model_name.clone());
        for (k, v) in &self.model_overrides {
            put(&format!("model.{k}"), v.clone());
        }
        put("data.subtask", self.data.subtask.to_string());
        put("data.root", self.data.root.as_ref().map(|p| p.display().to_string()).unwrap_or_default());
        put("data.clips_per_class", self.data.clips_per_class.to_string());
        put("data.unknown_fraction", self.data.composition.unknown_fraction.to_string());
        put("data.silence_fraction", self.data.composition.silence_fraction.to_string());
        let t = &self.train;
        put("train.batch_size", t.batch_size.to_string());
        put("train.max_epochs", t.max_epochs.to_string());
        put("train.lr0", t.lr0.to_string());
        put("train.lr_decay", t.lr_decay.to_string());
        put("train.momentum", t.momentum.to_string());
        put("train.weight_decay", t.weight_decay.to_string());
        put("train.patience", t.patience.to_string());
        put("train.augment", t.augment.to_string());
        for (name, d) in self.augment.entries() {
            put(&format!("augment.{name}.p"), d.p.to_string());
            put(&format!("augment.{name}.lo"), d.lo.to_string());
            put(&format!("augment.{name}.hi"), d.hi.to_string());
        }
        s
    }

    pub fn write_snapshot(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| KwsError::io(path, e))
    }
}
