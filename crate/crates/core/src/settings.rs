//! The full set of configuration keys, their defaults, and typed views of a
//! parsed configuration.

use std::path::{Path, PathBuf};

use crate::config::KvConfig;
use crate::error::{Error, IoContext, Result};
use crate::model::{ModelConfig, ModelVariant, Task};
use crate::scene::dataset::parse_splits;
use crate::scene::{DatasetConfig, DatasetKind};

pub struct KeySpec {
    pub key: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

const fn k(key: &'static str, default: &'static str, help: &'static str) -> KeySpec {
    KeySpec { key, default, help }
}

pub const KEYS: &[KeySpec] = &[
    k("data_dir", "data", "root of generated datasets (standard/ and unseen/ below it)"),
    k("run_dir", "runs", "root of run directories and the pretrained encoder"),
    k("image_size", "100", "square image side in pixels; a multiple of 20"),
    k("scenes_per_ratio", "1000", "scenes generated per ratio class"),
    k("splits", "", "train,val,test fractions (empty: 0.7,0.1,0.2 standard, 0.8,0.1,0.1 unseen)"),
    k("jitter", "false", "offset sprites randomly inside their cells"),
    k("data_seed", "1", "master seed for dataset generation"),
    k("dataset", "standard", "dataset trained on: standard or unseen"),
    k("variant", "multi-task-prop", "one-task-frozen, one-task-end2end, multi-task-prop, multi-task-number, multi-task-reversed"),
    k("task", "", "task of a one-task variant: setcomp, vagueq, proptarg, ntarg"),
    k("lr", "0.01", "SGD learning rate"),
    k("epochs", "100", "training epochs (all run; the lowest validation loss is selected)"),
    k("batch_size", "8", "minibatch size"),
    k("seed", "1", "training seed (initialisation and shuffling)"),
    k("sequential", "false", "one SGD step per task loss instead of one summed step"),
    k("loss_weights", "", "comma-separated per-task loss weights in task order (empty: all 1)"),
    k("conv1", "16", "channels of the first encoder convolution"),
    k("conv2", "32", "channels of the second encoder convolution"),
    k("feature_dim", "64", "width D of the 5x5 encoder feature vectors"),
    k("stage1_hidden", "48", "hidden width of trunk stage 1"),
    k("trunk_width", "32", "output width of every trunk stage"),
    k("head_width", "64", "reduction width of each task head"),
    k("encoder_init", "pretrained", "starting encoder of end-to-end variants: pretrained (fine-tuned) or random"),
    k("encoder", "", "pretrained encoder archive for frozen variants, relative to run_dir (empty: derived from the pretraining keys)"),
    k("pretrain_seed", "1", "seed of encoder pretraining"),
    k("pretrain_epochs", "50", "maximum pretraining epochs"),
    k("pretrain_lr", "0.1", "pretraining learning rate"),
    k("pretrain_per_class", "20", "training images per sprite variant during pretraining"),
    k("pretrain_val_per_class", "4", "validation images per sprite variant during pretraining"),
    k("pretrain_target", "0.9", "validation accuracy at which pretraining stops"),
    k("seeds", "1,2,3", "training seeds of a suite"),
    k("jobs", "1", "runs trained concurrently by a suite"),
];

/// Keys that determine the outcome of a training run (and so its hash).
pub const TRAIN_KEYS: &[&str] = &[
    "dataset",
    "variant",
    "task",
    "lr",
    "epochs",
    "batch_size",
    "seed",
    "sequential",
    "loss_weights",
    "image_size",
    "conv1",
    "conv2",
    "feature_dim",
    "stage1_hidden",
    "trunk_width",
    "head_width",
    "encoder_init",
    "pretrain_seed",
    "pretrain_epochs",
    "pretrain_lr",
    "pretrain_per_class",
    "pretrain_val_per_class",
    "pretrain_target",
];

pub const PRETRAIN_KEYS: &[&str] = &[
    "image_size",
    "conv1",
    "conv2",
    "feature_dim",
    "pretrain_seed",
    "pretrain_epochs",
    "pretrain_lr",
    "pretrain_per_class",
    "pretrain_val_per_class",
    "pretrain_target",
];

pub fn key_names() -> Vec<&'static str> {
    KEYS.iter().map(|k| k.key).collect()
}

/// A complete configuration: every known key present, defaults filled in.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Settings {
    kv: KvConfig,
}

impl Default for Settings {
    fn default() -> Self {
        let mut kv = KvConfig::default();
        for spec in KEYS {
            kv.set(spec.key, spec.default);
        }
        Settings { kv }
    }
}

impl Settings {
    /// Defaults overlaid with `overrides`; unknown keys are rejected.
    pub fn from_kv(overrides: &KvConfig) -> Result<Self> {
        overrides.check_known(&key_names())?;
        let mut s = Settings::default();
        s.kv.merge(overrides);
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Settings::from_kv(&KvConfig::parse(&std::fs::read_to_string(path).at(path)?)?)
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<()> {
        if !key_names().contains(&key) {
            return Err(Error::Config(format!("unknown key `{key}`")));
        }
        self.kv.set(key, value);
        self.validate()
    }

    pub fn get(&self, key: &str) -> &str {
        self.kv.get(key).expect("all keys present")
    }

    pub fn kv(&self) -> &KvConfig {
        &self.kv
    }

    /// The listed keys only, in the given order.
    pub fn restrict(&self, keys: &[&str]) -> KvConfig {
        let mut kv = KvConfig::default();
        for k in keys {
            kv.set(k, self.get(k));
        }
        kv
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.kv.require(key)
    }

    fn validate(&self) -> Result<()> {
        self.dataset_config()?;
        self.dataset_kind()?;
        self.model_config()?;
        self.variant()?;
        self.loss_weights()?;
        self.seeds()?;
        for key in ["lr", "pretrain_lr", "pretrain_target"] {
            let v: f64 = self.parse(key)?;
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{key} must be a non-negative number")));
            }
        }
        for key in ["epochs", "batch_size", "jobs", "pretrain_per_class", "pretrain_val_per_class"] {
            if self.parse::<usize>(key)? == 0 {
                return Err(Error::Config(format!("{key} must be positive")));
            }
        }
        for key in ["seed", "data_seed", "pretrain_seed"] {
            self.parse::<u64>(key)?;
        }
        self.parse::<usize>("pretrain_epochs")?;
        self.parse::<bool>("sequential")?;
        self.pretrained_init()?;
        Ok(())
    }

    pub fn data_dir(&self) -> PathBuf {
        PathBuf::from(self.get("data_dir"))
    }

    pub fn run_dir(&self) -> PathBuf {
        PathBuf::from(self.get("run_dir"))
    }

    pub fn dataset_kind(&self) -> Result<DatasetKind> {
        match self.get("dataset") {
            "standard" => Ok(DatasetKind::Standard),
            "unseen" => Ok(DatasetKind::Unseen),
            other => Err(Error::Config(format!("dataset must be standard or unseen, got `{other}`"))),
        }
    }

    pub fn dataset_path(&self, kind: DatasetKind) -> PathBuf {
        self.data_dir().join(match kind {
            DatasetKind::Standard => "standard",
            DatasetKind::Unseen => "unseen",
        })
    }

    pub fn dataset_config(&self) -> Result<DatasetConfig> {
        let splits = match self.get("splits") {
            "" => None,
            s => Some(parse_splits(s)?),
        };
        let cfg = DatasetConfig {
            image_size: self.parse("image_size")?,
            scenes_per_ratio: self.parse("scenes_per_ratio")?,
            splits,
            jitter: self.parse("jitter")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn data_seed(&self) -> u64 {
        self.parse("data_seed").expect("validated")
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        ModelConfig::from_kv(&self.kv)
    }

    pub fn task(&self) -> Result<Option<Task>> {
        match self.get("task") {
            "" => Ok(None),
            t => t.parse().map(Some),
        }
    }

    pub fn variant(&self) -> Result<ModelVariant> {
        ModelVariant::parse(self.get("variant"), self.task()?)
    }

    pub fn set_variant(&mut self, v: ModelVariant) {
        self.kv.set("variant", v.kind());
        self.kv.set("task", v.task().map_or("", |t| t.slug()));
    }

    /// Per-task weights for `n` tasks.
    pub fn loss_weights_for(&self, n: usize) -> Result<Vec<f64>> {
        match self.loss_weights()? {
            None => Ok(vec![1.0; n]),
            Some(w) if w.len() == n => Ok(w),
            Some(w) => Err(Error::Config(format!("loss_weights has {} entries for {n} tasks", w.len()))),
        }
    }

    fn loss_weights(&self) -> Result<Option<Vec<f64>>> {
        match self.get("loss_weights") {
            "" => Ok(None),
            s => s
                .split(',')
                .map(|p| {
                    p.trim()
                        .parse::<f64>()
                        .ok()
                        .filter(|w| w.is_finite() && *w >= 0.0)
                        .ok_or_else(|| Error::Config(format!("bad loss weight `{p}`")))
                })
                .collect::<Result<Vec<_>>>()
                .map(Some),
        }
    }

    pub fn seeds(&self) -> Result<Vec<u64>> {
        self.get("seeds")
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("bad seed `{s}` in seeds")))
            })
            .collect()
    }

    pub fn usize(&self, key: &str) -> usize {
        self.parse(key).expect("validated")
    }

    pub fn f64(&self, key: &str) -> f64 {
        self.parse(key).expect("validated")
    }

    pub fn u64(&self, key: &str) -> u64 {
        self.parse(key).expect("validated")
    }

    pub fn bool(&self, key: &str) -> bool {
        self.parse(key).expect("validated")
    }

    /// Whether end-to-end encoders start from the pretrained weights.
    pub fn pretrained_init(&self) -> Result<bool> {
        match self.get("encoder_init") {
            "pretrained" => Ok(true),
            "random" => Ok(false),
            other => Err(Error::Config(format!("encoder_init must be pretrained or random, got `{other}`"))),
        }
    }

    pub fn encoder_path(&self) -> PathBuf {
        match self.get("encoder") {
            "" => self
                .run_dir()
                .join(format!("encoder-{}.params", self.restrict(PRETRAIN_KEYS).digest())),
            p => self.run_dir().join(p),
        }
    }
}

/// Help text listing every key with its default.
pub fn describe_keys() -> String {
    let width = KEYS.iter().map(|k| k.key.len()).max().unwrap_or(0);
    let mut s = String::new();
    for spec in KEYS {
        let def = if spec.default.is_empty() { "\"\"" } else { spec.default };
        s.push_str(&format!("  {:width$}  {}  [default: {def}]\n", spec.key, spec.help));
    }
    s
}
