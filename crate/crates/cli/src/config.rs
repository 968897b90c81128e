//! Run configuration documents.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use bbscale::data::{ColumnSpec, DEFAULT_BLOCK_SIZE};
use bbscale::engines::{EngineConfig, Method};
use bbscale::functionals::{FunctionalSpec, MixedWeightMatrix};

fn default_block_size() -> usize {
    DEFAULT_BLOCK_SIZE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// CSV path, relative to the config file.
    pub path: PathBuf,
    pub columns: Vec<ColumnSpec>,
    #[serde(default = "default_block_size")]
    pub block_size: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default)]
    pub dir: Option<PathBuf>,
    #[serde(default)]
    pub workers: Option<usize>,
    /// `error`, `warn`, `info`, `debug` or `trace`.
    #[serde(default)]
    pub verbosity: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub functional: FunctionalSpec,
    /// A single engine ...
    #[serde(default)]
    pub engine: Option<EngineConfig>,
    /// ... or several, run in order on the same data.
    #[serde(default)]
    pub engines: Vec<EngineConfig>,
    #[serde(default)]
    pub output: OutputConfig,
}

/// Command-line values that replace config leaves.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub method: Option<Method>,
    pub gamma: Option<f64>,
    pub b: Option<usize>,
    pub r: Option<usize>,
    pub s: Option<usize>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub time_budget: Option<f64>,
    pub mixed_weight_matrix: Option<MixedWeightMatrix>,
    pub out: Option<PathBuf>,
}

/// Parse a TOML document; errors carry the dotted path of the bad key.
pub fn parse_toml<T: DeserializeOwned>(text: &str) -> Result<T> {
    let de = toml::Deserializer::parse(text).map_err(|e| anyhow!("invalid TOML: {}", e.message()))?;
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        if path == "." {
            anyhow!("{}", inner.message())
        } else {
            anyhow!("{path}: {}", inner.message())
        }
    })
}

pub fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    parse_toml(&text).with_context(|| format!("in {}", path.display()))
}

impl RunConfig {
    pub fn load(path: &Path, ov: &Overrides) -> Result<Self> {
        let mut cfg: RunConfig = read_toml(path)?;
        if cfg.data.path.is_relative() {
            let base = path.parent().unwrap_or(Path::new("."));
            cfg.data.path = base.join(&cfg.data.path);
        }
        cfg.apply(ov)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, ov: &Overrides) -> Result<()> {
        if let Some(e) = self.engine.take() {
            if !self.engines.is_empty() {
                bail!("engine: give either [engine] or [[engines]], not both");
            }
            self.engines.push(e);
        }
        if self.engines.is_empty() {
            match ov.method {
                Some(m) => self.engines.push(EngineConfig::new(m)),
                None => bail!("engine: no engine configured (add [engine] or pass --method)"),
            }
        }
        for e in &mut self.engines {
            if let Some(m) = ov.method {
                e.method = m;
            }
            // A subset-size flag replaces whichever rule the config used.
            if let Some(g) = ov.gamma {
                e.gamma = Some(g);
                e.b = None;
            }
            if let Some(b) = ov.b {
                e.b = Some(b);
                e.gamma = None;
            }
            if let Some(r) = ov.r {
                e.r = r;
            }
            if let Some(s) = ov.s {
                e.s = Some(s);
            }
            if let Some(seed) = ov.seed {
                e.seed = seed;
            }
            if let Some(t) = ov.time_budget {
                e.time_budget = Some(t);
            }
        }
        if let Some(w) = ov.mixed_weight_matrix {
            self.functional.mixed_weight_matrix = w;
        }
        if let Some(w) = ov.workers {
            self.output.workers = Some(w);
        }
        if let Some(d) = &ov.out {
            self.output.dir = Some(d.clone());
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        if self.data.block_size == 0 {
            bail!("data.block_size must be at least 1");
        }
        if self.data.columns.is_empty() {
            bail!("data.columns is empty");
        }
        self.functional.validate()?;
        let many = self.engines.len() > 1;
        for (i, e) in self.engines.iter().enumerate() {
            e.validate().map_err(|err| {
                if many {
                    anyhow!("engines[{i}]: {err}")
                } else {
                    anyhow!("{err}")
                }
            })?;
        }
        if self.output.workers == Some(0) {
            bail!("output.workers must be at least 1");
        }
        Ok(())
    }

    /// SHA-256 over everything that determines the results. The output
    /// directory, worker count and verbosity are left out.
    pub fn hash(&self) -> String {
        let key = serde_json::json!({
            "data": self.data,
            "functional": self.functional,
            "engines": self.engines,
        });
        let digest = Sha256::digest(key.to_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
