//! Experiment configuration read from TOML.

use std::path::Path;

use icreg_core::datagen::{CovariateSpec, DataSpec, DensityKind, HolderSpec, NoiseSpec};
use icreg_core::training::Optimizer;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub rates: RatesConfig,
    pub compare: CompareConfig,
    pub train: TrainSection,
    pub covering: CoveringConfig,
    pub simulate: SimulateConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            data: DataConfig::default(),
            rates: RatesConfig::default(),
            compare: CompareConfig::default(),
            train: TrainSection::default(),
            covering: CoveringConfig::default(),
            simulate: SimulateConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub dim: usize,
    pub smoothness: f64,
    pub bound: f64,
    /// Fourier terms per sampled task.
    pub terms: usize,
    pub noise_half_width: f64,
    pub covariates: DensityKind,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { dim: 1, smoothness: 2.0, bound: 1.0, terms: 8, noise_half_width: 0.5, covariates: DensityKind::Uniform }
    }
}

impl DataConfig {
    pub fn data_spec(&self) -> CliResult<DataSpec> {
        let holder = HolderSpec::new(self.dim, self.smoothness, self.bound)?;
        let covariates = match self.covariates {
            DensityKind::Uniform => CovariateSpec::uniform(self.dim),
            DensityKind::Tilted => CovariateSpec::tilted(self.dim),
        };
        Ok(DataSpec::new(holder, covariates, NoiseSpec::new(self.noise_half_width)?, self.terms)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RatesConfig {
    pub n_grid: Vec<usize>,
    pub tasks: usize,
    pub lambda_threshold: f64,
    /// Also evaluate the constructed transformer at every grid point.
    pub include_transformer: bool,
}

impl Default for RatesConfig {
    fn default() -> Self {
        Self { n_grid: vec![128, 256, 512, 1024, 2048, 4096], tasks: 200, lambda_threshold: 0.01, include_transformer: false }
    }
}

/// Optional overrides of the calibrated construction.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConstructionOverrides {
    pub steps: Option<usize>,
    pub depth_multiplier: Option<usize>,
    pub step_size: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareConfig {
    pub n: usize,
    /// Non-degenerate prompts to collect.
    pub prompts: usize,
    /// Give up after this many draws.
    pub max_prompts: usize,
    pub lambda_threshold: f64,
    #[serde(flatten)]
    pub overrides: ConstructionOverrides,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self { n: 200, prompts: 200, max_prompts: 2000, lambda_threshold: 0.05, overrides: ConstructionOverrides::default() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    /// Start from the constructed transformer.
    Warm,
    /// Random entries of magnitude `init_scale`.
    Cold,
    Zero,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub n: usize,
    pub gamma: usize,
    pub init: InitKind,
    pub init_scale: f64,
    pub embed_dim: usize,
    pub ffn_width: usize,
    pub depth: usize,
    pub optimizer: Optimizer,
    pub step_size: f64,
    pub decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Defaults to the construction's bound for warm starts and 10 otherwise.
    pub param_bound: Option<f64>,
    pub tolerance: f64,
    pub eval_tasks: usize,
    #[serde(flatten)]
    pub overrides: ConstructionOverrides,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            n: 64,
            gamma: 2000,
            init: InitKind::Cold,
            init_scale: 0.05,
            embed_dim: 6,
            ffn_width: 8,
            depth: 2,
            optimizer: Optimizer::AdaptiveMoment,
            step_size: 1e-3,
            decay: 0.0,
            batch_size: 32,
            epochs: 20,
            param_bound: None,
            tolerance: 0.0,
            eval_tasks: 2000,
            overrides: ConstructionOverrides::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoveringConfig {
    pub n_grid: Vec<usize>,
    pub gamma_grid: Vec<usize>,
    /// The constant in `L = ⌈C log(en)⌉` and `B = C n²`.
    pub constant: f64,
    pub tail_constant: f64,
}

impl Default for CoveringConfig {
    fn default() -> Self {
        Self {
            n_grid: vec![64, 256, 1024, 4096],
            gamma_grid: vec![1_000, 10_000, 100_000, 1_000_000],
            constant: 1.0,
            tail_constant: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub n: usize,
    pub gamma: usize,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self { n: 64, gamma: 100 }
    }
}

fn strictly_increasing(name: &str, grid: &[usize]) -> CliResult<()> {
    if grid.is_empty() {
        return Err(CliError::Config(format!("{name} is empty")));
    }
    if grid[0] == 0 || grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(CliError::Config(format!("{name} must be positive and strictly increasing, got {grid:?}")));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.data.data_spec()?;
        strictly_increasing("rates.n_grid", &self.rates.n_grid)?;
        strictly_increasing("covering.n_grid", &self.covering.n_grid)?;
        strictly_increasing("covering.gamma_grid", &self.covering.gamma_grid)?;
        if self.rates.tasks < 2 {
            return Err(CliError::Config("rates.tasks must be at least 2".into()));
        }
        if self.compare.prompts == 0 || self.compare.max_prompts < self.compare.prompts {
            return Err(CliError::Config("compare.max_prompts must be at least compare.prompts ≥ 1".into()));
        }
        if self.train.gamma == 0 || self.simulate.gamma == 0 {
            return Err(CliError::Config("gamma must be positive".into()));
        }
        if !(self.covering.constant > 0.0) {
            return Err(CliError::Config("covering.constant must be positive".into()));
        }
        Ok(())
    }
}
