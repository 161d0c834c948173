//! Experiment configuration: flat key=value text with section headers.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::Serialize;

use lordd_core::corpus::Dialect;

/// Environment variable naming the default data root.
pub const DATA_DIR_ENV: &str = "LORDD_DATA_DIR";

/// Parsed key=value file: keys are `section.key`, values trimmed strings.
/// Lines starting with `#` or `;` are comments.
#[derive(Debug, Clone, Default)]
pub struct KeyValueFile {
    values: BTreeMap<String, String>,
}

impl KeyValueFile {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut section = String::new();
        let mut values = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                anyhow!(
                    "{}:{}: expected `key = value` or `[section]`, got {raw:?}",
                    origin.display(),
                    idx + 1
                )
            })?;
            let full = if section.is_empty() {
                key.trim().to_string()
            } else {
                format!("{section}.{}", key.trim())
            };
            values.insert(full, value.trim().to_string());
        }
        Ok(KeyValueFile { values })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text, path)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.values.insert(key.to_string(), value.into());
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        match self.get(key) {
            None => Ok(default),
            Some(raw) => raw
                .parse()
                .map_err(|e| anyhow!("config key {key} = {raw:?}: {e}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Skyline,
    InDialect,
    CrossDialect,
    Lordd,
    Ablation,
}

impl Method {
    pub fn parse(tag: &str) -> Result<Self> {
        Ok(match tag {
            "skyline" => Method::Skyline,
            "in_dialect" => Method::InDialect,
            "cross_dialect" => Method::CrossDialect,
            "lordd" => Method::Lordd,
            "ablation" => Method::Ablation,
            other => bail!("unknown method {other:?}"),
        })
    }

    pub fn tag(self) -> &'static str {
        match self {
            Method::Skyline => "skyline",
            Method::InDialect => "in_dialect",
            Method::CrossDialect => "cross_dialect",
            Method::Lordd => "lordd",
            Method::Ablation => "ablation",
        }
    }

    /// Whether this method trains and stacks a dialect adapter.
    pub fn uses_dialect_adapter(self) -> bool {
        self == Method::Lordd
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// The task-adapter training pool: one subset, or an augmented pair where a
/// `us_fraction` sample of the first subset joins the second.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingData {
    Single(Dialect),
    Augmented { source: Dialect, focus: Dialect },
}

impl TrainingData {
    pub fn parse(spec: &str) -> Result<Self> {
        if let Some((a, b)) = spec.split_once('+') {
            Ok(TrainingData::Augmented {
                source: Dialect::parse(a.trim())?,
                focus: Dialect::parse(b.trim())?,
            })
        } else {
            Ok(TrainingData::Single(Dialect::parse(spec.trim())?))
        }
    }

    pub fn label(&self) -> String {
        match self {
            TrainingData::Single(d) => d.tag().to_string(),
            TrainingData::Augmented { source, focus } => {
                format!("{} + {}", source.tag(), focus.tag())
            }
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BackendSection {
    pub layers: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub context_len: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AdapterSection {
    pub rank: usize,
    pub alpha: f64,
    pub init_std: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TaskSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DialectSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub margin: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PairsSection {
    /// Which split feeds the pseudo-parallel corpus.
    pub split: String,
    pub max_negatives: usize,
    /// Which corpus side provides the frozen representation: "a" or "b".
    pub frozen_side: String,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalSection {
    pub max_new: usize,
    pub split: String,
}

/// Fully resolved experiment configuration.
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentConfig {
    pub method: Method,
    pub test_dialect: Dialect,
    pub training_data: TrainingData,
    pub parallel_corpus: Option<(Dialect, Dialect)>,
    pub us_fraction: f64,
    pub backend_id: String,
    pub seed: u64,
    pub data_root: PathBuf,
    pub backend: BackendSection,
    pub adapter: AdapterSection,
    pub task_train: TaskSection,
    pub dialect_train: DialectSection,
    pub pairs: PairsSection,
    pub eval: EvalSection,
}

impl ExperimentConfig {
    /// Resolves a parsed file into a typed config, applying defaults. The
    /// optional `seed_override` (the global --seed flag) replaces the
    /// experiment seed, which in turn seeds every section that does not pin
    /// its own.
    pub fn from_file(file: &KeyValueFile, seed_override: Option<u64>) -> Result<Self> {
        let method = Method::parse(
            file.get("experiment.method")
                .ok_or_else(|| anyhow!("config is missing experiment.method"))?,
        )?;
        let test_dialect = Dialect::parse(
            file.get("experiment.test_dialect")
                .ok_or_else(|| anyhow!("config is missing experiment.test_dialect"))?,
        )
        .map_err(|e| anyhow!("{e}"))?;
        let training_data = TrainingData::parse(
            file.get("experiment.training_data")
                .ok_or_else(|| anyhow!("config is missing experiment.training_data"))?,
        )?;
        let parallel_corpus = match file.get("experiment.parallel_corpus") {
            None => None,
            Some("none") | Some("") => None,
            Some(spec) => {
                let (a, b) = spec
                    .split_once("||")
                    .ok_or_else(|| anyhow!("parallel_corpus must look like \"en-US || en-IN\""))?;
                Some((
                    Dialect::parse(a.trim()).map_err(|e| anyhow!("{e}"))?,
                    Dialect::parse(b.trim()).map_err(|e| anyhow!("{e}"))?,
                ))
            }
        };
        let seed = match seed_override {
            Some(s) => s,
            None => file.parsed("experiment.seed", 13u64)?,
        };
        let data_root = match file.get("data.root") {
            Some(dir) => PathBuf::from(dir),
            None => std::env::var(DATA_DIR_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|_| PathBuf::from(".")),
        };
        let backend = BackendSection {
            layers: file.parsed("backend.layers", 2usize)?,
            hidden_dim: file.parsed("backend.hidden_dim", 64usize)?,
            heads: file.parsed("backend.heads", 4usize)?,
            context_len: file.parsed("backend.context_len", 256usize)?,
            seed: file.parsed("backend.seed", seed)?,
        };
        let backend_id = file
            .get("experiment.backend_id")
            .map(str::to_string)
            .unwrap_or_else(|| {
                format!(
                    "tiny-l{}h{}s{}",
                    backend.layers, backend.hidden_dim, backend.seed
                )
            });
        let config = ExperimentConfig {
            method,
            test_dialect,
            training_data,
            parallel_corpus,
            us_fraction: file.parsed("experiment.us_fraction", 1.0f64)?,
            backend_id,
            seed,
            data_root,
            backend,
            adapter: AdapterSection {
                rank: file.parsed("adapter.rank", 16usize)?,
                alpha: file.parsed("adapter.alpha", 32.0f64)?,
                init_std: file.parsed("adapter.init_std", 0.02f64)?,
            },
            task_train: TaskSection {
                epochs: file.parsed("train.task.epochs", 20usize)?,
                batch_size: file.parsed("train.task.batch_size", 32usize)?,
                learning_rate: file.parsed("train.task.learning_rate", 2e-4f64)?,
                weight_decay: file.parsed("train.task.weight_decay", 0.0f64)?,
                seed: file.parsed("train.task.seed", seed)?,
            },
            dialect_train: DialectSection {
                epochs: file.parsed("train.dialect.epochs", 10usize)?,
                batch_size: file.parsed("train.dialect.batch_size", 8usize)?,
                learning_rate: file.parsed("train.dialect.learning_rate", 2e-5f64)?,
                weight_decay: file.parsed("train.dialect.weight_decay", 0.0f64)?,
                margin: file.parsed("train.dialect.margin", 0.25f64)?,
                seed: file.parsed("train.dialect.seed", seed)?,
            },
            pairs: PairsSection {
                split: file.parsed("pairs.split", "train".to_string())?,
                max_negatives: file.parsed("pairs.max_negatives", 133usize)?,
                frozen_side: file.parsed("pairs.frozen_side", "a".to_string())?,
                seed: file.parsed("pairs.seed", seed)?,
            },
            eval: EvalSection {
                max_new: file.parsed("eval.max_new", 8usize)?,
                split: file.parsed("eval.split", "test".to_string())?,
            },
        };
        config.validate()?;
        Ok(config)
    }

    /// The cross-method invariants: lordd needs a parallel corpus, the plain
    /// baselines must not have one.
    pub fn validate(&self) -> Result<()> {
        match self.method {
            Method::Lordd => {
                if self.parallel_corpus.is_none() {
                    bail!("method lordd requires experiment.parallel_corpus");
                }
            }
            Method::InDialect | Method::CrossDialect => {
                if self.parallel_corpus.is_some() {
                    bail!(
                        "method {} does not take a parallel corpus; set experiment.parallel_corpus = none",
                        self.method
                    );
                }
            }
            Method::Skyline | Method::Ablation => {
                if self.parallel_corpus.is_some() {
                    bail!(
                        "method {} skips the dialect stage; set experiment.parallel_corpus = none",
                        self.method
                    );
                }
            }
        }
        if !(0.0..=1.0).contains(&self.us_fraction) {
            bail!("experiment.us_fraction must lie in [0, 1]");
        }
        if self.pairs.frozen_side != "a" && self.pairs.frozen_side != "b" {
            bail!("pairs.frozen_side must be \"a\" or \"b\"");
        }
        Ok(())
    }

    pub fn conversations_path(&self, dialect: Dialect) -> PathBuf {
        self.data_root
            .join(format!("{}.conversations.jsonl", dialect.tag()))
    }
}
