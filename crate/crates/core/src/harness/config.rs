//! Declarative experiment configuration (JSON).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{generate_banana, generate_solar, generate_toy, load_csv, BatchSchedule, ColumnSpec, Dataset, ToySpec};
use crate::error::{GpError, Result};
use crate::fit::StepConfig;
use crate::likelihood::LikelihoodSpec;
use crate::math::Kernel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Toy(ToySpec),
    /// Two interleaved crescents with binary labels.
    Banana {
        n: usize,
        #[serde(default = "default_banana_noise")]
        noise: f64,
    },
    /// Cyclic monthly counts, optionally mapped through `log(1 + y)`.
    Solar {
        n: usize,
        #[serde(default)]
        log1p: bool,
    },
    Csv { path: PathBuf, columns: Vec<ColumnSpec> },
}

fn default_banana_noise() -> f64 {
    0.15
}

impl DatasetSpec {
    pub fn n_channels(&self) -> Option<usize> {
        match self {
            DatasetSpec::Toy(spec) => Some(spec.n_outputs()),
            DatasetSpec::Banana { .. } | DatasetSpec::Solar { .. } => Some(1),
            DatasetSpec::Csv { columns, .. } => columns
                .iter()
                .filter_map(|c| match c.role {
                    crate::data::ColumnRole::Output(d) => Some(d + 1),
                    _ => None,
                })
                .max(),
        }
    }

    pub fn load(&self, seed: u64) -> Result<Dataset> {
        match self {
            DatasetSpec::Toy(spec) => Ok(generate_toy(spec, seed)?.dataset),
            DatasetSpec::Banana { n, noise } => generate_banana(*n, *noise, seed),
            DatasetSpec::Solar { n, log1p } => {
                let raw = generate_solar(*n, seed)?;
                if !log1p {
                    return Ok(raw);
                }
                Dataset::single(raw.x().clone(), raw.y(0).iter().map(|v| v.ln_1p()).collect())
            }
            DatasetSpec::Csv { path, columns } => load_csv(path, columns),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    Single { kernel: Kernel, likelihood: LikelihoodSpec },
    /// One kernel per latent function, one likelihood per output channel.
    Multi {
        kernels: Vec<Kernel>,
        likelihoods: Vec<LikelihoodSpec>,
    },
}

impl ModelSpec {
    pub fn n_channels(&self) -> usize {
        match self {
            ModelSpec::Single { .. } => 1,
            ModelSpec::Multi { likelihoods, .. } => likelihoods.len(),
        }
    }

    pub fn likelihood(&self, d: usize) -> LikelihoodSpec {
        match self {
            ModelSpec::Single { likelihood, .. } => *likelihood,
            ModelSpec::Multi { likelihoods, .. } => likelihoods[d],
        }
    }

    fn kernels(&self) -> Vec<Kernel> {
        match self {
            ModelSpec::Single { kernel, .. } => vec![*kernel],
            ModelSpec::Multi { kernels, .. } => kernels.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSpec {
    /// Monte Carlo samples per predictive density.
    pub nlpd_samples: usize,
    pub replicas: usize,
}

impl Default for MetricsSpec {
    fn default() -> Self {
        MetricsSpec {
            nlpd_samples: 1000,
            replicas: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    pub schedule: BatchSchedule,
    pub step: StepConfig,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default)]
    pub metrics: MetricsSpec,
    /// Drives data generation and the train/test split; replica seeds derive from it.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Write `curves_t<k>.csv` files.
    #[serde(default = "default_true")]
    pub curves: bool,
}

fn default_name() -> String {
    "experiment".into()
}

fn default_test_fraction() -> f64 {
    0.3
}

fn default_true() -> bool {
    true
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| GpError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parse a config file; relative CSV paths resolve against the file's directory.
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| GpError::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        if let (DatasetSpec::Csv { path: csv, .. }, Some(dir)) = (&mut cfg.dataset, path.parent()) {
            if csv.is_relative() {
                *csv = dir.join(&*csv);
            }
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| GpError::Config(e.to_string()))
    }

    /// Checks everything that can be checked without loading data.
    pub fn validate(&self) -> Result<()> {
        let config = |e: GpError| match e {
            GpError::Config(m) | GpError::Parameter(m) => GpError::Config(m),
            other => GpError::Config(other.to_string()),
        };
        for k in self.model.kernels() {
            Kernel::new(k.family, k.lengthscale, k.amplitude).map_err(config)?;
        }
        if self.model.kernels().is_empty() {
            return Err(GpError::Config("model needs at least one latent kernel".into()));
        }
        let d = self.model.n_channels();
        if d == 0 {
            return Err(GpError::Config("model needs at least one likelihood".into()));
        }
        for i in 0..d {
            self.model.likelihood(i).validate().map_err(config)?;
        }
        if let Some(dd) = self.dataset.n_channels() {
            if dd != d {
                return Err(GpError::Config(format!("dataset has {dd} output channels but the model has {d} likelihoods")));
            }
        }
        match &self.dataset {
            DatasetSpec::Toy(spec) => {
                spec.validate().map_err(config)?;
                self.schedule.validate(spec.n, d).map_err(config)?;
            }
            DatasetSpec::Banana { n, .. } | DatasetSpec::Solar { n, .. } => {
                self.schedule.validate(*n, d).map_err(config)?;
            }
            DatasetSpec::Csv { .. } => self.schedule.validate(usize::MAX, d).map_err(config)?,
        }
        self.step.optimizer.validate().map_err(config)?;
        if let Some(v) = &self.step.vem {
            v.validate().map_err(config)?;
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(GpError::Config(format!("test_fraction must lie in (0, 1), got {}", self.test_fraction)));
        }
        if self.metrics.nlpd_samples == 0 || self.metrics.replicas == 0 {
            return Err(GpError::Config("nlpd_samples and replicas must be at least 1".into()));
        }
        Ok(())
    }
}
