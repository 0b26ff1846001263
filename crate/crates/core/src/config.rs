//! Run configuration: defaults, dataset presets, flat key-value files and
//! command-line overrides, applied in that order.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use toml::Value;

use crate::encoding::DEFAULT_TRUNCATE_LENGTH;
use crate::gradcheck::GradcheckConfig;
use crate::losses::LossConfig;
use crate::sampler::PathOrder;
use crate::synth::SyntheticSpec;
use crate::verbalizer::Mode;

pub const SEED_ENV: &str = "HIERVERB_SEED";

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config key `{key}`: {message}")]
    Value { key: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Wos,
    Dbpedia,
    Rcv1,
}

impl FromStr for Preset {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, ConfigError> {
        match s {
            "wos" => Ok(Preset::Wos),
            "dbpedia" => Ok(Preset::Dbpedia),
            "rcv1" => Ok(Preset::Rcv1),
            other => Err(ConfigError::Value {
                key: "preset".into(),
                message: format!("expected wos, dbpedia or rcv1, got `{other}`"),
            }),
        }
    }
}

/// Dev-set report field used as the early-stopping signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopMetric {
    #[default]
    MicroF1,
    MacroF1,
    CmicroF1,
    PmicroF1,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub r: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { r: 32, dropout: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub hierarchy: PathBuf,
    pub dataset: PathBuf,
    pub out_dir: PathBuf,
    pub support: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub k: usize,
    /// Shots for the dev sample; `None` reuses `k`.
    pub dev_k: Option<usize>,
    pub seed: u64,
    pub order: PathOrder,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub verbalizer_lr: f64,
    pub warmup_steps: usize,
    pub patience: usize,
    pub stop_metric: StopMetric,
    pub threshold: f64,
    pub truncate_length: usize,
    pub encoder: EncoderConfig,
    pub loss: LossConfig,
    pub synth: SyntheticSpec,
    pub gradcheck: GradcheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = Self {
            hierarchy: PathBuf::from("hierarchy.json"),
            dataset: PathBuf::from("dataset.jsonl"),
            out_dir: PathBuf::from("out"),
            support: None,
            dev: None,
            test: None,
            checkpoint: None,
            k: 1,
            dev_k: None,
            seed: 0,
            order: PathOrder::Asc,
            epochs: 0,
            batch_size: 0,
            lr: 0.0,
            verbalizer_lr: 0.0,
            warmup_steps: 0,
            patience: 0,
            stop_metric: StopMetric::MicroF1,
            threshold: 0.5,
            truncate_length: DEFAULT_TRUNCATE_LENGTH,
            encoder: EncoderConfig::default(),
            loss: LossConfig::default(),
            synth: SyntheticSpec::default(),
            gradcheck: GradcheckConfig::default(),
        };
        cfg.apply_preset(Preset::Wos);
        cfg
    }
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut Vec<(String, Value)>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            other => out.push((key, other.clone())),
        }
    }
}

/// Dotted keys of a TOML document with nested tables flattened.
pub fn flat_entries(text: &str) -> Result<Vec<(String, Value)>, ConfigError> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
    let mut out = Vec::new();
    flatten("", &table, &mut out);
    Ok(out)
}

fn bad(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Value {
        key: key.to_string(),
        message: message.into(),
    }
}

fn as_f64(key: &str, v: &Value) -> Result<f64, ConfigError> {
    match v {
        Value::Float(f) => Ok(*f),
        Value::Integer(i) => Ok(*i as f64),
        Value::String(s) => s.trim().parse().map_err(|_| bad(key, format!("expected a number, got `{s}`"))),
        _ => Err(bad(key, "expected a number")),
    }
}

fn as_u64(key: &str, v: &Value) -> Result<u64, ConfigError> {
    match v {
        Value::Integer(i) if *i >= 0 => Ok(*i as u64),
        Value::String(s) => s.trim().parse().map_err(|_| bad(key, format!("expected an integer >= 0, got `{s}`"))),
        _ => Err(bad(key, "expected an integer >= 0")),
    }
}

fn as_usize(key: &str, v: &Value) -> Result<usize, ConfigError> {
    as_u64(key, v).map(|n| n as usize)
}

fn as_bool(key: &str, v: &Value) -> Result<bool, ConfigError> {
    match v {
        Value::Boolean(b) => Ok(*b),
        Value::String(s) => s.trim().parse().map_err(|_| bad(key, format!("expected true or false, got `{s}`"))),
        _ => Err(bad(key, "expected true or false")),
    }
}

fn as_path(key: &str, v: &Value) -> Result<PathBuf, ConfigError> {
    match v {
        Value::String(s) => Ok(PathBuf::from(s)),
        _ => Err(bad(key, "expected a path string")),
    }
}

fn as_enum<T: for<'de> Deserialize<'de>>(key: &str, v: &Value) -> Result<T, ConfigError> {
    v.clone().try_into().map_err(|e: toml::de::Error| bad(key, e.message().to_string()))
}

/// Accepts `[3, 4]` or `"3,4"`.
fn as_usize_list(key: &str, v: &Value) -> Result<Vec<usize>, ConfigError> {
    match v {
        Value::Array(items) => items.iter().map(|i| as_usize(key, i)).collect(),
        Value::String(s) => s
            .split(',')
            .map(|p| p.trim().parse().map_err(|_| bad(key, format!("expected integers, got `{s}`"))))
            .collect(),
        _ => Err(bad(key, "expected a list of integers")),
    }
}

impl RunConfig {
    /// Overwrites the training hyperparameters a preset defines.
    pub fn apply_preset(&mut self, preset: Preset) {
        match preset {
            Preset::Wos | Preset::Dbpedia => {
                self.epochs = 20;
                self.lr = 5e-5;
                self.verbalizer_lr = 1e-4;
                self.loss.lambda2 = 1e-2;
                self.loss.beta = 1.0;
                self.loss.mode = Mode::SinglePath;
            }
            Preset::Rcv1 => {
                self.epochs = 1000;
                self.lr = 3e-5;
                self.verbalizer_lr = 3e-5;
                self.loss.lambda2 = 1e-4;
                self.loss.beta = 1e-2;
                self.loss.mode = Mode::MultiPath;
            }
        }
        self.batch_size = 5;
        self.warmup_steps = 0;
        self.patience = 10;
        self.loss.lambda1 = 1.0;
        self.loss.alpha = 1.0;
    }

    pub fn set(&mut self, key: &str, v: &Value) -> Result<(), ConfigError> {
        match key {
            "hierarchy" => self.hierarchy = as_path(key, v)?,
            "dataset" => self.dataset = as_path(key, v)?,
            "out_dir" => self.out_dir = as_path(key, v)?,
            "support" => self.support = Some(as_path(key, v)?),
            "dev" => self.dev = Some(as_path(key, v)?),
            "test" => self.test = Some(as_path(key, v)?),
            "checkpoint" => self.checkpoint = Some(as_path(key, v)?),
            "k" | "K" => self.k = as_usize(key, v)?,
            "dev_k" => self.dev_k = Some(as_usize(key, v)?),
            "seed" => self.seed = as_u64(key, v)?,
            "order" | "sample.order" => self.order = as_enum(key, v)?,
            "epochs" => self.epochs = as_usize(key, v)?,
            "batch_size" => self.batch_size = as_usize(key, v)?,
            "lr" => self.lr = as_f64(key, v)?,
            "verbalizer_lr" => self.verbalizer_lr = as_f64(key, v)?,
            "warmup_steps" => self.warmup_steps = as_usize(key, v)?,
            "patience" => self.patience = as_usize(key, v)?,
            "stop_metric" => self.stop_metric = as_enum(key, v)?,
            "threshold" => self.threshold = as_f64(key, v)?,
            "truncate_length" => self.truncate_length = as_usize(key, v)?,
            "mode" | "loss.mode" => self.loss.mode = as_enum(key, v)?,
            "encoder.r" => self.encoder.r = as_usize(key, v)?,
            "encoder.dropout" => self.encoder.dropout = as_f64(key, v)?,
            "loss.lambda1" => self.loss.lambda1 = as_f64(key, v)?,
            "loss.lambda2" => self.loss.lambda2 = as_f64(key, v)?,
            "loss.alpha" => self.loss.alpha = as_f64(key, v)?,
            "loss.beta" => self.loss.beta = as_f64(key, v)?,
            "loss.tau" => self.loss.tau = as_f64(key, v)?,
            "loss.fhc_variant" => self.loss.fhc_variant = as_enum(key, v)?,
            "loss.hcc_source" => self.loss.hcc_source = as_enum(key, v)?,
            "loss.fhc_include_self" => self.loss.fhc_include_self = as_bool(key, v)?,
            "synth.branching" => self.synth.branching = as_usize_list(key, v)?,
            "synth.docs_per_path" => self.synth.docs_per_path = as_usize(key, v)?,
            "synth.tokens_per_doc" => self.synth.tokens_per_doc = as_usize(key, v)?,
            "synth.signal" => self.synth.signal = as_f64(key, v)?,
            "synth.noise_vocab" => self.synth.noise_vocab = as_usize(key, v)?,
            "gradcheck.r" => self.gradcheck.hidden = as_usize(key, v)?,
            "gradcheck.branching" => self.gradcheck.branching = as_usize_list(key, v)?,
            "gradcheck.batch" => self.gradcheck.batch = as_usize(key, v)?,
            "gradcheck.step" => self.gradcheck.step = as_f64(key, v)?,
            "gradcheck.tolerance" => self.gradcheck.tolerance = as_f64(key, v)?,
            "gradcheck.seed" => self.gradcheck.seed = as_u64(key, v)?,
            "gradcheck.lambda1" => self.gradcheck.lambda1 = as_f64(key, v)?,
            "gradcheck.lambda2" => self.gradcheck.lambda2 = as_f64(key, v)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Defaults, then the preset (`preset` argument, else the file's `preset`
    /// key), then the file's remaining keys.
    pub fn from_toml(text: &str, preset: Option<Preset>) -> Result<Self, ConfigError> {
        let entries = flat_entries(text)?;
        let file_preset = entries
            .iter()
            .find(|(k, _)| k == "preset")
            .map(|(_, v)| match v {
                Value::String(s) => s.parse::<Preset>(),
                _ => Err(bad("preset", "expected a string")),
            })
            .transpose()?;
        let mut cfg = Self::default();
        if let Some(p) = preset.or(file_preset) {
            cfg.apply_preset(p);
        }
        for (k, v) in entries.iter().filter(|(k, _)| k != "preset") {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    /// File and preset as in [`RunConfig::from_toml`], then the seed from
    /// `env_seed`, then the explicit `seed` and `k` overrides.
    pub fn resolve(
        file: Option<&str>,
        preset: Option<Preset>,
        env_seed: Option<&str>,
        seed: Option<u64>,
        k: Option<usize>,
    ) -> Result<Self, ConfigError> {
        let mut cfg = Self::from_toml(file.unwrap_or(""), preset)?;
        if let Some(s) = env_seed {
            cfg.seed = s
                .trim()
                .parse()
                .map_err(|_| bad(SEED_ENV, format!("expected an integer, got `{s}`")))?;
        }
        if let Some(s) = seed {
            cfg.seed = s;
        }
        if let Some(k) = k {
            cfg.k = k;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if self.batch_size == 0 {
            return invalid("batch_size must be >= 1".into());
        }
        if self.epochs == 0 {
            return invalid("epochs must be >= 1".into());
        }
        if self.k == 0 || self.dev_k == Some(0) {
            return invalid("k and dev_k must be >= 1".into());
        }
        if !(self.lr.is_finite() && self.lr >= 0.0 && self.verbalizer_lr.is_finite() && self.verbalizer_lr >= 0.0) {
            return invalid("learning rates must be finite and >= 0".into());
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return invalid(format!("threshold must lie in (0, 1), got {}", self.threshold));
        }
        if self.encoder.r == 0 {
            return invalid("encoder.r must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.encoder.dropout) {
            return invalid(format!("encoder.dropout must lie in [0, 1), got {}", self.encoder.dropout));
        }
        self.loss.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.synth.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    fn in_out(&self, explicit: &Option<PathBuf>, name: &str) -> PathBuf {
        explicit.clone().unwrap_or_else(|| self.out_dir.join(name))
    }

    pub fn support_path(&self) -> PathBuf {
        self.in_out(&self.support, "support.jsonl")
    }

    pub fn dev_path(&self) -> PathBuf {
        self.in_out(&self.dev, "dev.jsonl")
    }

    pub fn test_path(&self) -> PathBuf {
        self.in_out(&self.test, "test.jsonl")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.in_out(&self.checkpoint, "checkpoint.json")
    }

    pub fn out(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    /// Resolves relative data paths against `base` (the config file's directory).
    pub fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.hierarchy);
        fix(&mut self.dataset);
        fix(&mut self.out_dir);
        for p in [&mut self.support, &mut self.dev, &mut self.test, &mut self.checkpoint].into_iter().flatten() {
            fix(p);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{FhcVariant, HccSource};

    #[test]
    fn defaults_are_the_wos_preset() {
        let c = RunConfig::default();
        assert_eq!((c.epochs, c.batch_size, c.patience, c.warmup_steps), (20, 5, 10, 0));
        assert_eq!((c.lr, c.verbalizer_lr), (5e-5, 1e-4));
        assert_eq!((c.loss.lambda1, c.loss.lambda2, c.loss.alpha, c.loss.beta), (1.0, 1e-2, 1.0, 1.0));
        assert_eq!(c.truncate_length, 512);
        assert_eq!(c.loss.mode, Mode::SinglePath);
    }

    #[test]
    fn rcv1_preset() {
        let c = RunConfig::from_toml("", Some(Preset::Rcv1)).unwrap();
        assert_eq!((c.epochs, c.lr, c.verbalizer_lr, c.patience), (1000, 3e-5, 3e-5, 10));
        assert_eq!((c.loss.lambda2, c.loss.beta), (1e-4, 1e-2));
        assert_eq!(c.loss.mode, Mode::MultiPath);
    }

    #[test]
    fn file_overrides_preset_and_nested_tables_flatten() {
        let text = r#"
            preset = "rcv1"
            epochs = 7
            k = 4
            mode = "single_path"
            [loss]
            fhc_variant = "infonce"
            hcc_source = "recursive"
            lambda2 = 0
            [encoder]
            r = 16
            [synth]
            branching = "2, 3"
        "#;
        let c = RunConfig::from_toml(text, None).unwrap();
        assert_eq!(c.epochs, 7);
        assert_eq!(c.lr, 3e-5);
        assert_eq!(c.k, 4);
        assert_eq!(c.loss.mode, Mode::SinglePath);
        assert_eq!(c.loss.fhc_variant, FhcVariant::Infonce);
        assert_eq!(c.loss.hcc_source, HccSource::Recursive);
        assert_eq!(c.loss.lambda2, 0.0);
        assert_eq!(c.encoder.r, 16);
        assert_eq!(c.synth.branching, vec![2, 3]);

        let dotted = RunConfig::from_toml("\"loss.beta\" = 0.5\nencoder.dropout = 0.2", None).unwrap();
        assert_eq!(dotted.loss.beta, 0.5);
        assert_eq!(dotted.encoder.dropout, 0.2);
    }

    #[test]
    fn cli_preset_beats_file_preset() {
        let c = RunConfig::from_toml("preset = \"rcv1\"", Some(Preset::Wos)).unwrap();
        assert_eq!(c.epochs, 20);
    }

    #[test]
    fn seed_precedence() {
        let file = Some("seed = 3");
        assert_eq!(RunConfig::resolve(file, None, None, None, None).unwrap().seed, 3);
        assert_eq!(RunConfig::resolve(file, None, Some("9"), None, None).unwrap().seed, 9);
        assert_eq!(RunConfig::resolve(file, None, Some("9"), Some(11), None).unwrap().seed, 11);
        assert_eq!(RunConfig::resolve(None, None, None, None, Some(8)).unwrap().k, 8);
        assert!(RunConfig::resolve(None, None, Some("x"), None, None).is_err());
    }

    #[test]
    fn rejects_bad_input() {
        assert_eq!(
            RunConfig::from_toml("nonsense = 1", None).unwrap_err(),
            ConfigError::UnknownKey("nonsense".into())
        );
        assert!(RunConfig::from_toml("epochs = \"many\"", None).is_err());
        assert!(RunConfig::from_toml("loss.fhc_variant = \"other\"", None).is_err());
        assert!(RunConfig::resolve(Some("batch_size = 0"), None, None, None, None).is_err());
        assert!(RunConfig::resolve(Some("loss.beta = 2"), None, None, None, None).is_err());
        assert!(RunConfig::resolve(Some("threshold = 1.0"), None, None, None, None).is_err());
    }

    #[test]
    fn output_paths_default_into_out_dir() {
        let mut c = RunConfig::from_toml("out_dir = \"runs/a\"\ntest = \"/data/t.jsonl\"", None).unwrap();
        assert_eq!(c.support_path(), PathBuf::from("runs/a/support.jsonl"));
        assert_eq!(c.test_path(), PathBuf::from("/data/t.jsonl"));
        c.rebase(Path::new("/cfg"));
        assert_eq!(c.checkpoint_path(), PathBuf::from("/cfg/runs/a/checkpoint.json"));
        assert_eq!(c.test_path(), PathBuf::from("/data/t.jsonl"));
    }
}
