//! `key=value` run configuration.
//!
//! A config file holds one `section.key = value` pair per line. Lines may
//! also sit under a `[section]` header, in which case bare keys are
//! prefixed with that section. `#` starts a comment. Every key has a
//! default, and unknown keys are rejected.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use addrop::attribution::AttributionConfig;
use addrop::data::{SyntheticSpec, TaskKind, TsvSchema};
use addrop::masking::{DiscardPolicy, DropMode};
use addrop::metrics::MetricKind;
use addrop::model::ModelConfig;
use addrop::trainer::TrainConfig;

/// Every accepted key with its default value.
pub const KEYS: &[(&str, &str)] = &[
    ("data.source", "synthetic"),
    ("data.task", "classify"),
    ("data.seed", "0"),
    ("data.vocab_size", "50"),
    ("data.min_len", "8"),
    ("data.max_len", "23"),
    ("data.num_train", "256"),
    ("data.num_dev", "512"),
    ("data.num_test", "512"),
    ("data.window", "3"),
    ("data.noise", "0.1"),
    ("data.schema", "single_text"),
    ("data.train", ""),
    ("data.dev", ""),
    ("data.test", ""),
    ("model.num_layers", "2"),
    ("model.num_heads", "4"),
    ("model.hidden_size", "64"),
    ("model.head_size", "16"),
    ("model.ffn_size", "128"),
    ("model.max_len", "32"),
    ("model.hidden_dropout", "0.1"),
    ("train.procedure", "addrop"),
    ("train.learning_rate", "0.001"),
    ("train.batch_size", "32"),
    ("train.max_epochs", "30"),
    ("train.early_stop_patience", "0"),
    ("train.cross_tuning", "true"),
    ("train.second_pass_stochastic", "true"),
    ("train.first_pass_stochastic", "false"),
    ("train.seed", "0"),
    ("train.metric", ""),
    ("policy.p", "0.3"),
    ("policy.q", "0.3"),
    ("policy.mode", "high"),
    ("policy.layers", "0"),
    ("attribution.method", "ga"),
    ("attribution.label_mode", "pseudo"),
    ("attribution.steps", "20"),
    ("attribution.scaling", "layer"),
    ("grid.p_min", "0.1"),
    ("grid.p_max", "0.9"),
    ("grid.p_step", "0.1"),
    ("grid.q_min", "0.1"),
    ("grid.q_max", "0.9"),
    ("grid.q_step", "0.1"),
    ("prior.modes", "high,low,random,none"),
    ("prior.train_rate", "0.3"),
    ("prior.curve_layers", "0"),
    ("prior.rates", "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9"),
    ("prior.sweep_layers", "0,1"),
    ("eval.checkpoint", ""),
    ("eval.split", "dev"),
];

#[derive(Debug, PartialEq)]
pub enum ConfigError {
    /// The config file could not be read.
    Missing { path: PathBuf, reason: String },
    UnknownKey { key: String, origin: String },
    Syntax { origin: String, line: String },
    Invalid { key: String, value: String, reason: String },
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Missing { path, reason } => write!(f, "cannot read config file {}: {reason}", path.display()),
            ConfigError::UnknownKey { key, origin } => write!(f, "unknown config key '{key}' ({origin})"),
            ConfigError::Syntax { origin, line } => write!(f, "expected key=value at {origin}: '{line}'"),
            ConfigError::Invalid { key, value, reason } => write!(f, "invalid value '{value}' for {key}: {reason}"),
        }
    }
}

impl std::error::Error for ConfigError {}

/// Resolved key/value map; iteration is in key order.
#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl Settings {
    /// Reads a `key=value` file, or the `config` object of a run manifest
    /// when the path ends in `.json`.
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Missing {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let mut s = Self::default();
        if path.extension().is_some_and(|e| e == "json") {
            s.apply_manifest(&text, path)?;
        } else {
            s.apply_text(&text, &path.display().to_string())?;
        }
        Ok(s)
    }

    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), ConfigError> {
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = format!("{origin}:{}", i + 1);
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                origin: at.clone(),
                line: line.to_string(),
            })?;
            let k = k.trim();
            let key = if section.is_empty() || k.contains('.') {
                k.to_string()
            } else {
                format!("{section}.{k}")
            };
            self.set(&key, v.trim(), &at)?;
        }
        Ok(())
    }

    fn apply_manifest(&mut self, text: &str, path: &Path) -> Result<(), ConfigError> {
        let bad = |reason: String| ConfigError::Invalid {
            key: "config".into(),
            value: path.display().to_string(),
            reason,
        };
        let doc: serde_json::Value = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
        let map = doc
            .get("config")
            .and_then(|c| c.as_object())
            .ok_or_else(|| bad("manifest has no config object".into()))?;
        for (k, v) in map {
            let v = v.as_str().ok_or_else(|| bad(format!("value of {k} is not a string")))?;
            self.set(k, v, &path.display().to_string())?;
        }
        Ok(())
    }

    /// Applies one `key=value` override.
    pub fn apply_override(&mut self, pair: &str) -> Result<(), ConfigError> {
        let (k, v) = pair.split_once('=').ok_or_else(|| ConfigError::Syntax {
            origin: "--set".into(),
            line: pair.to_string(),
        })?;
        self.set(k.trim(), v.trim(), "--set")
    }

    pub fn set(&mut self, key: &str, value: &str, origin: &str) -> Result<(), ConfigError> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(ConfigError::UnknownKey {
                key: key.to_string(),
                origin: origin.to_string(),
            }),
        }
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).expect("key comes from KEYS")
    }

    pub fn values(&self) -> &BTreeMap<String, String> {
        &self.values
    }

    /// The resolved settings in file form, one `key = value` per line.
    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    fn parse<T: FromStr>(&self, key: &str) -> Result<T, ConfigError>
    where
        T::Err: fmt::Display,
    {
        let raw = self.get(key);
        raw.parse().map_err(|e: T::Err| ConfigError::Invalid {
            key: key.into(),
            value: raw.into(),
            reason: e.to_string(),
        })
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, ConfigError>
    where
        T::Err: fmt::Display,
    {
        let raw = self.get(key);
        raw.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse().map_err(|e: T::Err| ConfigError::Invalid {
                    key: key.into(),
                    value: raw.into(),
                    reason: e.to_string(),
                })
            })
            .collect()
    }

    fn optional_path(&self, key: &str) -> Option<PathBuf> {
        Some(self.get(key)).filter(|s| !s.is_empty()).map(PathBuf::from)
    }

    pub fn resolve(&self) -> Result<RunConfig, ConfigError> {
        let task: TaskKind = self.parse("data.task")?;
        let data = match self.get("data.source") {
            "synthetic" => DataSource::Synthetic(SyntheticSpec {
                task,
                vocab_size: self.parse("data.vocab_size")?,
                min_len: self.parse("data.min_len")?,
                max_len: self.parse("data.max_len")?,
                num_train: self.parse("data.num_train")?,
                num_dev: self.parse("data.num_dev")?,
                num_test: self.parse("data.num_test")?,
                window: self.parse("data.window")?,
                noise: self.parse("data.noise")?,
                seed: self.parse("data.seed")?,
            }),
            "tsv" => {
                let need = |key: &str| {
                    self.optional_path(key).ok_or_else(|| ConfigError::Invalid {
                        key: key.into(),
                        value: String::new(),
                        reason: "required when data.source = tsv".into(),
                    })
                };
                DataSource::Tsv {
                    task,
                    schema: self.parse("data.schema")?,
                    train: need("data.train")?,
                    dev: need("data.dev")?,
                    test: self.optional_path("data.test"),
                }
            }
            other => {
                return Err(ConfigError::Invalid {
                    key: "data.source".into(),
                    value: other.into(),
                    reason: "expected synthetic or tsv".into(),
                })
            }
        };
        let shape = ModelShape {
            num_layers: self.parse("model.num_layers")?,
            num_heads: self.parse("model.num_heads")?,
            hidden_size: self.parse("model.hidden_size")?,
            head_size: self.parse("model.head_size")?,
            ffn_size: self.parse("model.ffn_size")?,
            max_len: self.parse("model.max_len")?,
            hidden_dropout: self.parse("model.hidden_dropout")?,
        };
        let metric = match self.get("train.metric") {
            "" => None,
            _ => Some(self.parse::<MetricKind>("train.metric")?),
        };
        let train = TrainConfig {
            learning_rate: self.parse("train.learning_rate")?,
            batch_size: self.parse("train.batch_size")?,
            max_epochs: self.parse("train.max_epochs")?,
            early_stop_patience: self.parse("train.early_stop_patience")?,
            policy: DiscardPolicy {
                p: self.parse("policy.p")?,
                q: self.parse("policy.q")?,
                mode: self.parse("policy.mode")?,
                layers: self.list("policy.layers")?,
            },
            attribution: AttributionConfig {
                method: self.parse("attribution.method")?,
                label_mode: self.parse("attribution.label_mode")?,
                steps: self.parse("attribution.steps")?,
                scaling: self.parse("attribution.scaling")?,
            },
            cross_tuning: self.parse("train.cross_tuning")?,
            second_pass_stochastic: self.parse("train.second_pass_stochastic")?,
            first_pass_stochastic: self.parse("train.first_pass_stochastic")?,
            seed: self.parse("train.seed")?,
            metric,
        };
        let procedure = match self.get("train.procedure") {
            "addrop" => Procedure::Addrop,
            "finetune" => Procedure::Finetune,
            other => {
                return Err(ConfigError::Invalid {
                    key: "train.procedure".into(),
                    value: other.into(),
                    reason: "expected addrop or finetune".into(),
                })
            }
        };
        let grid = GridAxes {
            p: self.range("grid.p")?,
            q: self.range("grid.q")?,
        };
        let prior = PriorConfig {
            modes: self.list::<DropMode>("prior.modes")?,
            train_rate: self.parse("prior.train_rate")?,
            curve_layers: self.list("prior.curve_layers")?,
            rates: self.list("prior.rates")?,
            sweep_layers: self.list("prior.sweep_layers")?,
        };
        let split = match self.get("eval.split") {
            "dev" => Split::Dev,
            "test" => Split::Test,
            other => {
                return Err(ConfigError::Invalid {
                    key: "eval.split".into(),
                    value: other.into(),
                    reason: "expected dev or test".into(),
                })
            }
        };
        Ok(RunConfig {
            data,
            shape,
            train,
            procedure,
            grid,
            prior,
            eval: EvalConfig {
                checkpoint: self.optional_path("eval.checkpoint"),
                split,
            },
        })
    }

    /// `min, min + step, ..., max`, rounded to 1e-9 so keys print cleanly.
    fn range(&self, prefix: &str) -> Result<Vec<f64>, ConfigError> {
        let (lo, hi, step): (f64, f64, f64) = (
            self.parse(&format!("{prefix}_min"))?,
            self.parse(&format!("{prefix}_max"))?,
            self.parse(&format!("{prefix}_step"))?,
        );
        if !(step > 0.0 && lo <= hi) {
            return Err(ConfigError::Invalid {
                key: format!("{prefix}_step"),
                value: step.to_string(),
                reason: format!("need step > 0 and min <= max (got {lo}..{hi})"),
            });
        }
        let n = ((hi - lo) / step + 1e-9).floor() as usize + 1;
        Ok((0..n).map(|i| ((lo + i as f64 * step) * 1e9).round() / 1e9).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Tsv {
        task: TaskKind,
        schema: TsvSchema,
        train: PathBuf,
        dev: PathBuf,
        test: Option<PathBuf>,
    },
}

/// Model hyperparameters; vocabulary and label counts come from the data.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelShape {
    pub num_layers: usize,
    pub num_heads: usize,
    pub hidden_size: usize,
    pub head_size: usize,
    pub ffn_size: usize,
    pub max_len: usize,
    pub hidden_dropout: f64,
}

impl ModelShape {
    pub fn build(&self, task: TaskKind, vocab_size: usize, num_classes: usize) -> ModelConfig {
        ModelConfig {
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            hidden_size: self.hidden_size,
            head_size: self.head_size,
            ffn_size: self.ffn_size,
            vocab_size,
            max_len: self.max_len,
            num_classes,
            task,
            hidden_dropout: self.hidden_dropout,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Procedure {
    Addrop,
    Finetune,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridAxes {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PriorConfig {
    pub modes: Vec<DropMode>,
    pub train_rate: f64,
    pub curve_layers: Vec<usize>,
    pub rates: Vec<f64>,
    pub sweep_layers: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Dev,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub checkpoint: Option<PathBuf>,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: DataSource,
    pub shape: ModelShape,
    pub train: TrainConfig,
    pub procedure: Procedure,
    pub grid: GridAxes,
    pub prior: PriorConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn task(&self) -> TaskKind {
        match &self.data {
            DataSource::Synthetic(s) => s.task,
            DataSource::Tsv { task, .. } => *task,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve() {
        let cfg = Settings::default().resolve().unwrap();
        assert_eq!(cfg.grid.p.len(), 9);
        assert_eq!(cfg.grid.q[2], 0.3);
        assert_eq!(cfg.train.policy, DiscardPolicy::default());
        assert_eq!(cfg.prior.modes.len(), 4);
        assert_eq!(cfg.procedure, Procedure::Addrop);
    }

    #[test]
    fn sections_and_dotted_keys_mix() {
        let mut s = Settings::default();
        s.apply_text("[policy]\nq = 0.5 # inline\nmodel.num_layers=3\n\n[train]\nseed=9\n", "t")
            .unwrap();
        assert_eq!(s.get("policy.q"), "0.5");
        assert_eq!(s.get("model.num_layers"), "3");
        assert_eq!(s.get("train.seed"), "9");
    }

    #[test]
    fn unknown_keys_are_named() {
        let mut s = Settings::default();
        let err = s.apply_override("policy.z=1").unwrap_err();
        assert!(err.to_string().contains("policy.z"));
        let err = s.apply_text("[train]\nspeed = 2\n", "f.cfg").unwrap_err();
        assert_eq!(
            err,
            ConfigError::UnknownKey {
                key: "train.speed".into(),
                origin: "f.cfg:2".into()
            }
        );
    }

    #[test]
    fn invalid_values_are_reported() {
        let mut s = Settings::default();
        s.apply_override("policy.mode=sideways").unwrap();
        assert!(matches!(s.resolve(), Err(ConfigError::Invalid { key, .. }) if key == "policy.mode"));
        let mut s = Settings::default();
        s.apply_override("grid.p_step=0").unwrap();
        assert!(s.resolve().is_err());
    }

    #[test]
    fn text_form_round_trips() {
        let mut s = Settings::default();
        s.apply_override("policy.layers=0,1").unwrap();
        let mut back = Settings::default();
        back.apply_text(&s.to_text(), "echo").unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn ranges_have_clean_endpoints() {
        let mut s = Settings::default();
        s.apply_override("grid.p_min=0.2").unwrap();
        s.apply_override("grid.p_max=0.8").unwrap();
        s.apply_override("grid.p_step=0.3").unwrap();
        assert_eq!(s.resolve().unwrap().grid.p, vec![0.2, 0.5, 0.8]);
    }
}
