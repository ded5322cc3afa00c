//! `key = value` configuration files with `#` comments and dotted keys.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::embeddings::SyntheticSpec;
use crate::interpreter::InterpreterConfig;
use crate::protocol::PlanKind;
use crate::training::TrainConfig;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Read { path: String, message: String },
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: duplicate key `{key}` (first set on line {first})")]
    Duplicate { line: usize, key: String, first: usize },
    #[error("line {line}: `{key}`: {message}")]
    Value { line: usize, key: String, message: String },
    #[error("`{key}`: {message}")]
    Invalid { key: String, message: String },
}

const RUN_KEYS: &[&str] = &[
    "seed",
    "data.source",
    "data.train",
    "data.test",
    "data.labels",
    "synth.classes",
    "synth.train_per_class",
    "synth.test_per_class",
    "synth.dim",
    "synth.separation",
    "synth.noise_std",
    "plan.kind",
    "plan.ways",
    "plan.shots",
    "plan.base_classes",
    "plan.sessions",
    "plan.stop_after",
    "interpreter.model_dim",
    "interpreter.layers",
    "interpreter.heads",
    "interpreter.feed_forward_dim",
    "interpreter.vocab_size",
    "interpreter.max_sequence_len",
    "interpreter.embedding_std",
    "interpreter.weight_std",
    "prompt.length",
    "prompt.suffix",
    "train.learning_rate",
    "train.batch_size",
    "train.epochs_base",
    "train.epochs_incremental",
    "train.penalty_weight",
    "train.logit_scale",
    "train.normalize_gamma",
    "output.dir",
    "output.record_wall_time",
    "resume",
    "check.model_dim",
    "check.prompt_length",
    "check.layers",
    "check.heads",
    "check.vocab_size",
    "check.max_sequence_len",
    "check.classes",
    "check.batch",
    "check.penalty_weight",
    "check.step",
    "check.tolerance",
    "check.inject_fault",
];

#[derive(Debug, Clone)]
struct Entry {
    value: String,
    line: usize,
}

/// Raw parsed key/value pairs plus the directory relative paths resolve
/// against.
#[derive(Debug, Clone, Default)]
pub struct Settings {
    entries: BTreeMap<String, Entry>,
    base_dir: PathBuf,
}

impl Settings {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let mut entries: BTreeMap<String, Entry> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line,
                message: format!("expected `key = value`, got {content:?}"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() {
                return Err(ConfigError::Syntax {
                    line,
                    message: "missing key before `=`".into(),
                });
            }
            if !RUN_KEYS.contains(&key) {
                return Err(ConfigError::UnknownKey {
                    line,
                    key: key.into(),
                });
            }
            if let Some(first) = entries.get(key) {
                return Err(ConfigError::Duplicate {
                    line,
                    key: key.into(),
                    first: first.line,
                });
            }
            let value = value
                .strip_prefix('"')
                .and_then(|v| v.strip_suffix('"'))
                .unwrap_or(value);
            entries.insert(
                key.into(),
                Entry {
                    value: value.into(),
                    line,
                },
            );
        }
        Ok(Self {
            entries,
            base_dir: base_dir.to_path_buf(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: Display,
    {
        self.entries
            .get(key)
            .map(|e| {
                e.value.parse().map_err(|err: T::Err| ConfigError::Value {
                    line: e.line,
                    key: key.into(),
                    message: format!("{:?}: {err}", e.value),
                })
            })
            .transpose()
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T, ConfigError>
    where
        T::Err: Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn text(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|e| e.value.as_str())
    }

    /// A path value resolved against the config file's directory.
    pub fn path(&self, key: &str) -> Option<PathBuf> {
        self.text(key).map(|v| self.base_dir.join(v))
    }

    fn fail(&self, key: &str, message: impl Into<String>) -> ConfigError {
        match self.entries.get(key) {
            Some(e) => ConfigError::Value {
                line: e.line,
                key: key.into(),
                message: message.into(),
            },
            None => ConfigError::Invalid {
                key: key.into(),
                message: message.into(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Files {
        train: PathBuf,
        test: PathBuf,
        labels: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSource,
    pub plan: PlanKind,
    pub stop_after: Option<usize>,
    pub interpreter: InterpreterConfig,
    pub prompt_len: usize,
    pub suffix: Option<String>,
    pub train: TrainConfig,
    pub output_dir: PathBuf,
    pub record_wall_time: bool,
    pub resume: Option<PathBuf>,
}

fn interpreter_from(s: &Settings, prefix: &str, defaults: InterpreterConfig) -> Result<InterpreterConfig, ConfigError> {
    let key = |k: &str| format!("{prefix}.{k}");
    let model_dim = s.get_or(&key("model_dim"), defaults.model_dim)?;
    Ok(InterpreterConfig {
        model_dim,
        layers: s.get_or(&key("layers"), defaults.layers)?,
        heads: s.get_or(&key("heads"), defaults.heads)?,
        feed_forward_dim: s.get_or(&key("feed_forward_dim"), 4 * model_dim)?,
        vocab_size: s.get_or(&key("vocab_size"), defaults.vocab_size)?,
        max_sequence_len: s.get_or(&key("max_sequence_len"), defaults.max_sequence_len)?,
        embedding_std: s.get_or(&key("embedding_std"), defaults.embedding_std)?,
        weight_std: s.get(&key("weight_std"))?.or(defaults.weight_std),
        seed: 0,
    })
}

fn train_from(s: &Settings) -> Result<TrainConfig, ConfigError> {
    let d = TrainConfig::default();
    let config = TrainConfig {
        learning_rate: s.get_or("train.learning_rate", d.learning_rate)?,
        batch_size: s.get_or("train.batch_size", d.batch_size)?,
        epochs_base: s.get_or("train.epochs_base", d.epochs_base)?,
        epochs_incremental: s.get_or("train.epochs_incremental", d.epochs_incremental)?,
        penalty_weight: s.get_or("train.penalty_weight", d.penalty_weight)?,
        logit_scale: s.get_or("train.logit_scale", d.logit_scale)?,
        normalize_gamma: s.get_or("train.normalize_gamma", d.normalize_gamma)?,
        seed: 0,
    };
    config
        .validate()
        .map_err(|e| ConfigError::Invalid {
            key: "train".into(),
            message: e.to_string(),
        })?;
    Ok(config)
}

impl RunConfig {
    pub fn from_settings(s: &Settings) -> Result<Self, ConfigError> {
        let seed = s.get_or("seed", 0u64)?;
        let interpreter = interpreter_from(s, "interpreter", InterpreterConfig::default())?;
        let prompt_len = s.get_or("prompt.length", 16usize)?;
        interpreter
            .validate(prompt_len)
            .map_err(|e| ConfigError::Invalid {
                key: "interpreter".into(),
                message: e.to_string(),
            })?;

        let source = s.text("data.source").unwrap_or("synthetic");
        let data = match source {
            "synthetic" => {
                for key in ["data.train", "data.test", "data.labels"] {
                    if s.contains(key) {
                        return Err(s.fail(key, "file paths need `data.source = files`"));
                    }
                }
                let d = SyntheticSpec::default();
                let dim = s.get_or("synth.dim", interpreter.model_dim)?;
                if dim != interpreter.model_dim {
                    return Err(s.fail(
                        "synth.dim",
                        format!("synthetic dim {dim} differs from interpreter.model_dim {}", interpreter.model_dim),
                    ));
                }
                DataSource::Synthetic(SyntheticSpec {
                    classes: s.get_or("synth.classes", d.classes)?,
                    train_per_class: s.get_or("synth.train_per_class", d.train_per_class)?,
                    test_per_class: s.get_or("synth.test_per_class", d.test_per_class)?,
                    dim,
                    separation: s.get_or("synth.separation", d.separation)?,
                    noise_std: s.get_or("synth.noise_std", d.noise_std)?,
                    seed: 0,
                })
            }
            "files" => {
                if let Some(key) = RUN_KEYS.iter().find(|k| k.starts_with("synth.") && s.contains(k)) {
                    return Err(s.fail(key, "synthetic settings need `data.source = synthetic`"));
                }
                let mut paths = Vec::new();
                for key in ["data.train", "data.test", "data.labels"] {
                    let path = s.path(key).ok_or_else(|| ConfigError::Invalid {
                        key: key.into(),
                        message: "required when `data.source = files`".into(),
                    })?;
                    if !path.is_file() {
                        return Err(s.fail(key, format!("file {} does not exist", path.display())));
                    }
                    paths.push(path);
                }
                let labels = paths.pop().expect("three paths");
                let test = paths.pop().expect("three paths");
                let train = paths.pop().expect("three paths");
                DataSource::Files { train, test, labels }
            }
            other => return Err(s.fail("data.source", format!("expected synthetic or files, got {other:?}"))),
        };

        let plan = match s.text("plan.kind").unwrap_or("custom") {
            "cifar_like" => PlanKind::CifarLike,
            "cub_like" => PlanKind::CubLike,
            "custom" => PlanKind::Custom {
                ways: s.get_or("plan.ways", 2usize)?,
                shots: s.get_or("plan.shots", 5usize)?,
                base: s.get_or("plan.base_classes", 10usize)?,
                sessions: s.get("plan.sessions")?,
            },
            other => {
                return Err(s.fail(
                    "plan.kind",
                    format!("expected cifar_like, cub_like or custom, got {other:?}"),
                ))
            }
        };
        if !matches!(plan, PlanKind::Custom { .. }) {
            if let Some(key) = ["plan.ways", "plan.shots", "plan.base_classes", "plan.sessions"]
                .into_iter()
                .find(|k| s.contains(k))
            {
                return Err(s.fail(key, "only applies to `plan.kind = custom`"));
            }
        }
        let stop_after = s.get::<usize>("plan.stop_after")?;
        if stop_after == Some(0) {
            return Err(s.fail("plan.stop_after", "must be at least 1"));
        }

        let resume = s.path("resume");
        if let Some(path) = &resume {
            if !path.is_file() {
                return Err(s.fail("resume", format!("checkpoint {} does not exist", path.display())));
            }
        }
        let suffix = s.text("prompt.suffix").filter(|v| !v.trim().is_empty()).map(str::to_owned);

        Ok(Self {
            seed,
            data,
            plan,
            stop_after,
            interpreter,
            prompt_len,
            suffix,
            train: train_from(s)?,
            output_dir: s.path("output.dir").unwrap_or_else(|| s.base_dir.join("out")),
            record_wall_time: s.get_or("output.record_wall_time", false)?,
            resume,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InjectedFault {
    GeluSlope,
}

impl FromStr for InjectedFault {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gelu_slope" => Ok(Self::GeluSlope),
            other => Err(format!("unknown fault {other:?}, expected gelu_slope")),
        }
    }
}

/// Settings for `grad-check`. Dimensions come from `check.*` keys and
/// default to a tiny interpreter; run dimensions are ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckConfig {
    pub seed: u64,
    pub interpreter: InterpreterConfig,
    pub prompt_len: usize,
    pub suffix: Option<String>,
    pub classes: usize,
    pub batch: usize,
    pub logit_scale: f64,
    pub penalty_weight: f64,
    pub normalize_gamma: bool,
    pub step: f64,
    pub tolerance: f64,
    pub fault: Option<InjectedFault>,
}

impl CheckConfig {
    pub fn tiny_interpreter() -> InterpreterConfig {
        InterpreterConfig {
            model_dim: 16,
            layers: 1,
            heads: 2,
            feed_forward_dim: 64,
            vocab_size: 64,
            max_sequence_len: 8,
            ..InterpreterConfig::default()
        }
    }

    pub fn from_settings(s: &Settings) -> Result<Self, ConfigError> {
        let interpreter = interpreter_from(s, "check", Self::tiny_interpreter())?;
        let prompt_len = s.get_or("check.prompt_length", 2usize)?;
        interpreter
            .validate(prompt_len)
            .map_err(|e| ConfigError::Invalid {
                key: "check".into(),
                message: e.to_string(),
            })?;
        let classes = s.get_or("check.classes", 4usize)?;
        if classes < 2 {
            return Err(s.fail("check.classes", "at least 2 classes are needed"));
        }
        let config = Self {
            seed: s.get_or("seed", 0u64)?,
            interpreter,
            prompt_len,
            suffix: s.text("prompt.suffix").filter(|v| !v.trim().is_empty()).map(str::to_owned),
            classes,
            batch: s.get_or("check.batch", 6usize)?,
            logit_scale: s.get_or("train.logit_scale", 10.0)?,
            penalty_weight: s.get_or("check.penalty_weight", 10.0)?,
            normalize_gamma: s.get_or("train.normalize_gamma", true)?,
            step: s.get_or("check.step", crate::numerics::gradcheck::DEFAULT_STEP)?,
            tolerance: s.get_or("check.tolerance", 1e-4)?,
            fault: s.get("check.inject_fault")?,
        };
        if config.batch == 0 {
            return Err(s.fail("check.batch", "must be positive"));
        }
        if !(config.step > 0.0) {
            return Err(s.fail("check.step", "must be positive"));
        }
        Ok(config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        RunConfig::from_settings(&Settings::parse(text, Path::new("/tmp"))?)
    }

    #[test]
    fn defaults_follow_reported_hyperparameters() {
        let c = parse("").unwrap();
        assert_eq!(c.train.learning_rate, 0.02);
        assert_eq!(c.train.batch_size, 256);
        assert_eq!(c.prompt_len, 16);
        assert_eq!(c.interpreter.model_dim, 512);
        assert_eq!(c.interpreter.feed_forward_dim, 2048);
        assert!(matches!(c.data, DataSource::Synthetic(ref s) if s.dim == 512));
    }

    #[test]
    fn dotted_keys_comments_and_quotes() {
        let c = parse(
            "# experiment\nseed = 7\ninterpreter.model_dim = 64   # small\nprompt.suffix = \"a type of bird\"\nplan.kind = cifar_like\n",
        )
        .unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.interpreter.feed_forward_dim, 256);
        assert_eq!(c.suffix.as_deref(), Some("a type of bird"));
        assert_eq!(c.plan, PlanKind::CifarLike);
        assert_eq!(c.output_dir, Path::new("/tmp/out"));
    }

    #[test]
    fn located_diagnostics() {
        assert_eq!(
            parse("seed = 1\nbogus\n").unwrap_err(),
            ConfigError::Syntax {
                line: 2,
                message: "expected `key = value`, got \"bogus\"".into()
            }
        );
        assert!(matches!(parse("train.lr = 1\n"), Err(ConfigError::UnknownKey { line: 1, .. })));
        assert!(matches!(
            parse("seed = 1\nseed = 2\n"),
            Err(ConfigError::Duplicate { line: 2, first: 1, .. })
        ));
        assert!(matches!(
            parse("\ntrain.batch_size = many\n"),
            Err(ConfigError::Value { line: 2, .. })
        ));
        assert!(matches!(parse("plan.kind = weird\n"), Err(ConfigError::Value { line: 1, .. })));
        assert!(matches!(parse("train.learning_rate = -1\n"), Err(ConfigError::Invalid { .. })));
        assert!(matches!(parse("interpreter.heads = 5\n"), Err(ConfigError::Invalid { .. })));
    }

    #[test]
    fn file_source_requires_existing_files() {
        let err = parse("data.source = files\ndata.train = a.mfse\ndata.test = b.mfse\ndata.labels = l.tsv\n").unwrap_err();
        assert!(matches!(err, ConfigError::Value { line: 2, .. }));
        assert!(matches!(
            parse("data.source = files\n"),
            Err(ConfigError::Invalid { .. })
        ));
        assert!(matches!(
            parse("synth.dim = 32\ninterpreter.model_dim = 64\n"),
            Err(ConfigError::Value { line: 1, .. })
        ));
    }

    #[test]
    fn check_defaults_are_tiny() {
        let c = CheckConfig::from_settings(&Settings::default()).unwrap();
        assert_eq!(c.interpreter.model_dim, 16);
        assert_eq!(c.interpreter.vocab_size, 64);
        assert_eq!(c.prompt_len, 2);
        assert_eq!(c.fault, None);
        let s = Settings::parse("check.inject_fault = gelu_slope\n", Path::new(".")).unwrap();
        assert_eq!(CheckConfig::from_settings(&s).unwrap().fault, Some(InjectedFault::GeluSlope));
    }
}
