//! Run configuration: defaults, then the config file, then `--set` overrides,
//! then the dedicated flags.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mtgrec_core::curriculum::CurriculumConfig;
use mtgrec_core::evaluation::EvalConfig;
use mtgrec_core::nn::Activation;
use mtgrec_core::recommender::ModelConfig;
use mtgrec_core::rqvae::RqVaeConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::synth::SynthConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Working directory for every artifact.
    pub run_dir: PathBuf,
    /// Interaction log; relative paths resolve against `run_dir`.
    pub data: PathBuf,
    /// Embedding matrix; relative paths resolve against `run_dir`.
    pub embeddings: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            run_dir: "run".into(),
            data: "interactions.tsv".into(),
            embeddings: "embeddings.mtge".into(),
        }
    }
}

impl Paths {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.run_dir.join(p)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataBlock {
    pub min_count: usize,
    /// Items kept in each history.
    pub max_len: usize,
}

impl Default for DataBlock {
    fn default() -> Self {
        Self {
            min_count: 5,
            max_len: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RqvaeBlock {
    pub levels: usize,
    pub codebook_size: usize,
    pub codebook_dim: usize,
    pub hidden: Vec<usize>,
    pub beta: f64,
    pub ema_decay: f64,
    pub dead_after: usize,
    pub collision_capacity: usize,
    pub activation: Activation,
    /// Output dimension of the whitening step; 0 keeps the input dimension.
    pub whiten_dim: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Checkpoints kept from the end of training.
    pub keep_last: usize,
}

impl Default for RqvaeBlock {
    fn default() -> Self {
        Self {
            levels: 3,
            codebook_size: 8,
            codebook_dim: 8,
            hidden: vec![32, 16],
            beta: 0.25,
            ema_decay: 0.99,
            dead_after: 3,
            collision_capacity: 0,
            activation: Activation::Relu,
            whiten_dim: 0,
            epochs: 200,
            lr: 0.001,
            batch_size: 64,
            keep_last: 30,
        }
    }
}

impl RqvaeBlock {
    pub fn rqvae_config(&self) -> RqVaeConfig {
        RqVaeConfig {
            levels: self.levels,
            codebook_size: self.codebook_size,
            codebook_dim: self.codebook_dim,
            hidden: self.hidden.clone(),
            beta: self.beta,
            ema_decay: self.ema_decay,
            dead_after: self.dead_after,
            collision_capacity: self.collision_capacity,
            activation: self.activation,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FamilyBlock {
    pub n: usize,
}

impl Default for FamilyBlock {
    fn default() -> Self {
        Self { n: 5 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub synth: SynthConfig,
    pub data: DataBlock,
    pub rqvae: RqvaeBlock,
    pub family: FamilyBlock,
    pub model: ModelConfig,
    pub curriculum: CurriculumConfig,
    pub eval: EvalConfig,
}

/// Command-line inputs to config resolution.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub run_dir: Option<PathBuf>,
    pub set: Vec<String>,
}

impl RunConfig {
    pub fn resolve(overrides: &Overrides) -> Result<Self> {
        let mut table = match Value::try_from(RunConfig::default())? {
            Value::Table(t) => t,
            _ => unreachable!("a struct serializes to a table"),
        };
        if let Some(path) = &overrides.config {
            if !path.exists() {
                return Err(crate::MissingInput(path.clone()).into());
            }
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let file: Table = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            merge(&mut table, file);
        }
        for item in &overrides.set {
            let (key, raw) = item
                .split_once('=')
                .with_context(|| format!("--set expects KEY=VALUE, got `{item}`"))?;
            set_dotted(&mut table, key.trim(), parse_value(raw.trim()))?;
        }
        let mut config: RunConfig = Value::Table(table).try_into().context("invalid configuration")?;
        if let Some(seed) = overrides.seed {
            config.seed = seed;
        }
        if let Some(dir) = &overrides.run_dir {
            config.paths.run_dir = dir.clone();
        }
        config.curriculum.seed = config.seed;
        Ok(config)
    }

    pub fn dump(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
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

fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_dotted(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("malformed config key `{key}`");
    }
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => bail!("config key `{key}`: `{part}` is not a table"),
        };
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
