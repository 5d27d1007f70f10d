//! Declarative run configuration (TOML) with `key=value` overrides.
//!
//! ```toml
//! [model]
//! mixer = "ssm"
//! layers = 2
//!
//! [train]
//! seq_len = 32
//! steps = 20000
//! carry = { kind = "previous" }
//!
//! [data]
//! source = { kind = "topic", len = 1200000 }
//! holdout = 0.1
//!
//! [eval]
//! start = 32
//! end = 2048
//! ```
//!
//! Every section is optional and every key has a default; unknown keys are
//! rejected with the dotted path of the offending key.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::carry::{BatchMode, CarryKind};
use crate::corpus::{load_corpus, markov_sample, periodic, split_holdout, topic_text, uniform_bytes, TopicTextConfig};
use crate::error::{Error, Result};
use crate::evaluator::entropy::MarkovLanguageSpec;
use crate::evaluator::{doubling_lengths, EvalOptions, Positions};
use crate::kernellab::{FitMethod, MemoryKernel, Upper};
use crate::models::ModelConfig;
use crate::ndcore::Precision;
use crate::provenance::short_hash;
use crate::stability::StabilityBudget;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub kernel: KernelConfig,
    pub stability: StabilityConfig,
    pub sweep: SweepConfig,
    pub oracle: OracleConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    File { path: PathBuf },
    Topic {
        len: usize,
        seed: u64,
        #[serde(default)]
        text: TopicTextConfig,
    },
    Markov {
        len: usize,
        seed: u64,
        /// Number of chain states; the alphabet supplies one byte per state.
        states: usize,
        /// Dirichlet concentration of the random transition rows.
        #[serde(default = "default_concentration")]
        concentration: f64,
        /// Symmetric two-state chain with this stay probability instead of a random one.
        #[serde(default)]
        stay: Option<f64>,
        #[serde(default = "default_alphabet")]
        alphabet: String,
    },
    Uniform { len: usize, seed: u64 },
    Periodic { pattern: String, len: usize },
}

fn default_concentration() -> f64 {
    0.5
}

fn default_alphabet() -> String {
    "abcdefghijklmnopqrstuvwxyz".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    /// Tail fraction held out for validation and evaluation.
    pub holdout: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Topic {
                len: 1_200_000,
                seed: 0,
                text: TopicTextConfig::default(),
            },
            holdout: 0.1,
        }
    }
}

impl DataConfig {
    /// Markov chain behind a `markov` source.
    pub fn markov_spec(&self) -> Result<Option<MarkovLanguageSpec>> {
        match &self.source {
            DataSource::Markov {
                seed,
                states,
                concentration,
                stay,
                alphabet,
                ..
            } => {
                if alphabet.len() < *states {
                    return Err(Error::Config {
                        key: "data.source.alphabet".into(),
                        msg: format!("needs at least {states} bytes"),
                    });
                }
                let spec = match stay {
                    Some(p) if *states == 2 => MarkovLanguageSpec::symmetric_two_state(*p)?,
                    Some(_) => {
                        return Err(Error::Config {
                            key: "data.source.stay".into(),
                            msg: "only valid with states = 2".into(),
                        })
                    }
                    None => MarkovLanguageSpec::random(*states, *concentration, &mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed))?,
                };
                Ok(Some(spec))
            }
            _ => Ok(None),
        }
    }

    pub fn tokens(&self) -> Result<Vec<u8>> {
        Ok(match &self.source {
            DataSource::File { path } => load_corpus(path)?,
            DataSource::Topic { len, seed, text } => topic_text(*len, *seed, text)?,
            DataSource::Markov { len, seed, alphabet, .. } => {
                let spec = self.markov_spec()?.expect("markov source");
                markov_sample(&spec, &alphabet.as_bytes()[..spec.states], *len, *seed)?
            }
            DataSource::Uniform { len, seed } => uniform_bytes(*len, *seed),
            DataSource::Periodic { pattern, len } => periodic(pattern.as_bytes(), *len),
        })
    }

    /// `(train, held_out)`.
    pub fn split(&self) -> Result<(Vec<u8>, Vec<u8>)> {
        split_holdout(&self.tokens()?, self.holdout)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Explicit lengths; when empty, doubling from `start` to `end`.
    pub lengths: Vec<usize>,
    pub start: usize,
    pub end: usize,
    pub mode: BatchMode,
    pub carry: bool,
    pub positions: Positions,
    pub batch: usize,
    pub chunk: usize,
    pub max_tokens: Option<usize>,
    pub precision: Precision,
    /// Classification threshold on ppl differences.
    pub epsilon: f64,
    /// Classify over lengths `≥ t0`; defaults to the training length.
    pub t0: Option<usize>,
    pub svg: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            lengths: Vec::new(),
            start: 32,
            end: 2048,
            mode: BatchMode::Contiguous,
            carry: false,
            positions: Positions::All,
            batch: 16,
            chunk: 256,
            max_tokens: None,
            precision: Precision::F64,
            epsilon: 0.01,
            t0: None,
            svg: true,
        }
    }
}

impl EvalConfig {
    pub fn lengths(&self) -> Vec<usize> {
        if self.lengths.is_empty() {
            doubling_lengths(self.start, self.end)
        } else {
            self.lengths.clone()
        }
    }

    pub fn options(&self, seed: u64) -> EvalOptions {
        EvalOptions {
            mode: self.mode,
            carry: self.carry,
            positions: self.positions,
            batch: self.batch,
            chunk: self.chunk,
            max_tokens: self.max_tokens,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FitKind {
    #[default]
    Fixed,
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KernelConfig {
    /// `power_law:α`, `exp:c@λ,...` or `gaussian:center,width`.
    pub target: String,
    /// Number of exponentials; several values give an overfit sweep.
    pub m: Vec<usize>,
    /// Fitting window `T`.
    pub window: f64,
    /// Evaluation horizon `t`; unset means infinity.
    pub horizon: Option<f64>,
    /// Fitting grid points per exponential (at least 10).
    pub grid_factor: usize,
    pub quad_n: usize,
    pub fit: FitKind,
    pub iters: usize,
    pub lr: f64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            target: "power_law:2".into(),
            m: vec![8],
            window: 5.0,
            horizon: None,
            grid_factor: 40,
            quad_n: 200_000,
            fit: FitKind::Fixed,
            iters: 500,
            lr: 1e-2,
        }
    }
}

impl KernelConfig {
    pub fn target(&self) -> Result<MemoryKernel> {
        MemoryKernel::parse(&self.target).map_err(|e| Error::Config {
            key: "kernel.target".into(),
            msg: e.to_string(),
        })
    }

    pub fn upper(&self) -> Upper {
        self.horizon.map_or(Upper::Infinity, Upper::At)
    }

    pub fn method(&self) -> FitMethod {
        match self.fit {
            FitKind::Fixed => FitMethod::FixedRates,
            FitKind::Joint => FitMethod::Joint {
                iters: self.iters,
                lr: self.lr,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StabilityConfig {
    /// Budget `M` on `|h|_∞`.
    pub max_value: f64,
    pub u_norm1: f64,
    pub x_sup: f64,
    pub h0_inf: f64,
    /// Decay to evaluate the bound at; defaults to the safe decay.
    pub lambda: Option<f64>,
    /// Horizon for the bound; `None` means infinity.
    pub steps: Option<u64>,
}

impl Default for StabilityConfig {
    fn default() -> Self {
        Self {
            max_value: 100.0,
            u_norm1: 1.0,
            x_sup: 1.0,
            h0_inf: 0.0,
            lambda: None,
            steps: None,
        }
    }
}

impl StabilityConfig {
    pub fn budget(&self, lambda: f64) -> StabilityBudget {
        StabilityBudget {
            max_value: self.max_value,
            lambda,
            u_norm1: self.u_norm1,
            x_sup: self.x_sup,
            h0_inf: self.h0_inf,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub seq_lens: Vec<usize>,
    pub carries: Vec<CarryKind>,
    /// Model presets; empty means the `[model]` section.
    pub models: Vec<String>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            seq_lens: vec![16, 64],
            carries: vec![CarryKind::Zero, CarryKind::Previous],
            models: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    pub states: usize,
    /// Stay probability of a symmetric two-state chain; otherwise random chains.
    pub stay: Option<f64>,
    pub k_max: usize,
    pub tolerance: f64,
    /// Number of random chains to check.
    pub random: usize,
    pub concentration: f64,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            states: 2,
            stay: None,
            k_max: 10,
            tolerance: 1e-9,
            random: 1,
            concentration: 1.0,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let value: toml::Value = toml::from_str(text).map_err(|e| Error::Config {
            key: String::new(),
            msg: e.message().to_string(),
        })?;
        Self::from_value(value)
    }

    pub fn from_value(value: toml::Value) -> Result<Self> {
        let cfg: Self = serde_path_to_error::deserialize(value).map_err(|e| Error::Config {
            key: e.path().to_string(),
            msg: e.inner().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` (or starts from defaults) and applies `key=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::Config {
                    key: String::new(),
                    msg: format!("cannot read {}: {e}", p.display()),
                })?;
                toml::from_str(&text).map_err(|e| Error::Config {
                    key: String::new(),
                    msg: format!("{}: {}", p.display(), e.message()),
                })?
            }
            None => toml::Value::Table(Default::default()),
        };
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        Self::from_value(value)
    }

    pub fn validate(&self) -> Result<()> {
        let keyed = |key: &str, e: Error| match e {
            Error::Config { .. } => e,
            other => Error::Config {
                key: key.into(),
                msg: other.to_string(),
            },
        };
        self.model.validate().map_err(|e| keyed("model", e))?;
        self.train.validate()?;
        if !(0.0..1.0).contains(&self.data.holdout) {
            return Err(Error::Config {
                key: "data.holdout".into(),
                msg: "must lie in [0, 1)".into(),
            });
        }
        if self.eval.lengths().is_empty() {
            return Err(Error::Config {
                key: "eval.start".into(),
                msg: "no evaluation lengths".into(),
            });
        }
        Ok(())
    }

    /// Identity of a training run: model, training and data sections.
    pub fn train_hash(&self) -> String {
        let v = serde_json::json!({"model": self.model, "train": self.train, "data": self.data});
        short_hash(v.to_string().as_bytes())
    }

    /// Identity of the whole configuration.
    pub fn hash(&self) -> String {
        short_hash(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    pub fn run_dir(&self, root: &Path) -> PathBuf {
        root.join(format!("{}-s{}", self.train_hash(), self.train.seed))
    }
}

/// Applies `a.b.c=value`, parsing `value` as a TOML literal and falling back to a string.
pub fn apply_override(root: &mut toml::Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment.split_once('=').ok_or_else(|| Error::Config {
        key: assignment.into(),
        msg: "override must look like key=value".into(),
    })?;
    let key = key.trim();
    let parsed = toml::from_str::<toml::Table>(&format!("v = {}", raw.trim()))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().into()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = node.as_table_mut().ok_or_else(|| Error::Config {
            key: parts[..i].join("."),
            msg: "is not a table".into(),
        })?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), parsed);
            return Ok(());
        }
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    unreachable!("split yields at least one part")
}
