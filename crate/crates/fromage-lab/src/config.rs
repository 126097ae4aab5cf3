//! Run configuration: a TOML file with shared sections (`dataset`, `net`,
//! `optimizer`, `schedule`) and one section per command. Unknown keys are
//! errors, so a typo fails fast instead of silently training the wrong
//! thing.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use crate::data::{load_mnist_idx, synthetic_gaussian_classes, DataError, Dataset};
use crate::net::{Init, LossKind, MlpConfig, NetError, Nonlinearity};
use crate::optim::{OptimError, OptimizerKind, OptimizerState, Schedule};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config io: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse: {0}")]
    Toml(#[from] toml::de::Error),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error("bias terms are not supported: layers are pure matrix maps, so the \
             layerwise relative-trust analysis applies exactly; remove `bias` from [net]")]
    BiasUnsupported,
    #[error("command `{command}` needs a [{section}] section in the config")]
    MissingSection {
        command: &'static str,
        section: &'static str,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("referenced path does not exist: {0}")]
    MissingPath(PathBuf),
}

/// Mixes a base seed with a stream tag so independent consumers (dataset,
/// init, epochs, sweep cells) never share an RNG stream. SplitMix64 step.
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    let mut z = base ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub mod seed_tags {
    pub const DATASET: u64 = 1;
    pub const NET_INIT: u64 = 2;
    pub const EPOCH_BASE: u64 = 3;
    pub const SWEEP_CELL: u64 = 4;
    pub const NORM_GROWTH: u64 = 5;
    pub const TRIALS: u64 = 6;
    pub const DESCENT_TRIALS: u64 = 7;
    pub const SUBSET: u64 = 8;
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub label: Option<String>,
    #[serde(default)]
    pub dataset: Option<DatasetConfig>,
    #[serde(default)]
    pub net: Option<NetConfig>,
    #[serde(default)]
    pub optimizer: Option<OptimizerConfig>,
    #[serde(default)]
    pub schedule: Option<ScheduleConfig>,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub perturb_sweep: Option<PerturbSweepConfig>,
    #[serde(default)]
    pub norm_growth: Option<NormGrowthConfig>,
    #[serde(default)]
    pub depth_sweep: Option<DepthSweepConfig>,
    #[serde(default)]
    pub verify_bounds: Option<VerifyBoundsConfig>,
    #[serde(default)]
    pub lr_grid: Option<LrGridConfig>,
}

impl RunConfig {
    /// Parses a config file, returning the config and the raw bytes (the
    /// bytes feed the config hash recorded in every run summary).
    pub fn from_path(path: &Path) -> Result<(Self, Vec<u8>), ConfigError> {
        let bytes = fs::read(path)?;
        let text = String::from_utf8_lossy(&bytes);
        let cfg: RunConfig = toml::from_str(&text)?;
        Ok((cfg, bytes))
    }

    pub fn dataset(&self, command: &'static str) -> Result<&DatasetConfig, ConfigError> {
        self.dataset.as_ref().ok_or(ConfigError::MissingSection {
            command,
            section: "dataset",
        })
    }

    pub fn net(&self, command: &'static str) -> Result<&NetConfig, ConfigError> {
        self.net.as_ref().ok_or(ConfigError::MissingSection {
            command,
            section: "net",
        })
    }

    pub fn optimizer(&self, command: &'static str) -> Result<&OptimizerConfig, ConfigError> {
        self.optimizer.as_ref().ok_or(ConfigError::MissingSection {
            command,
            section: "optimizer",
        })
    }

    pub fn schedule_or_constant(&self) -> Result<Schedule, ConfigError> {
        match &self.schedule {
            Some(s) => s.build(),
            None => Ok(Schedule::Constant),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, tag = "source", rename_all = "snake_case")]
pub enum DatasetConfig {
    /// IDX image/label pair on disk.
    Mnist {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default)]
        subset_size: Option<usize>,
    },
    /// Gaussian classes around scaled unit vectors; the desk-scale stand-in
    /// when no IDX files are available.
    Synthetic {
        num_classes: usize,
        dim: usize,
        per_class: usize,
        separation: f64,
        #[serde(default)]
        subset_size: Option<usize>,
    },
}

impl DatasetConfig {
    pub fn load(&self, run_seed: u64) -> Result<Dataset, ConfigError> {
        let seed = derive_seed(run_seed, seed_tags::DATASET);
        let (full, subset_size) = match self {
            DatasetConfig::Mnist {
                images,
                labels,
                subset_size,
            } => {
                for p in [images, labels] {
                    if !p.exists() {
                        return Err(ConfigError::MissingPath(p.clone()));
                    }
                }
                (load_mnist_idx(images, labels)?, *subset_size)
            }
            DatasetConfig::Synthetic {
                num_classes,
                dim,
                per_class,
                separation,
                subset_size,
            } => (
                synthetic_gaussian_classes(*num_classes, *dim, *per_class, *separation, seed)?,
                *subset_size,
            ),
        };
        match subset_size {
            Some(n) if n < full.len() => {
                Ok(full.subset(n, derive_seed(seed, seed_tags::SUBSET))?)
            }
            Some(n) if n > full.len() => Err(ConfigError::Invalid(format!(
                "subset_size {n} exceeds dataset size {}",
                full.len()
            ))),
            _ => Ok(full),
        }
    }

    pub fn describe(&self) -> String {
        match self {
            DatasetConfig::Mnist { images, .. } => format!("mnist idx ({})", images.display()),
            DatasetConfig::Synthetic {
                num_classes,
                dim,
                per_class,
                separation,
                ..
            } => format!(
                "synthetic gaussian classes (classes={num_classes}, dim={dim}, \
                 per_class={per_class}, separation={separation})"
            ),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NonlinearityConfig {
    Relu,
    LeakyRelu,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitConfig {
    GlorotUniform,
    Orthogonal,
    ScaledGaussian,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub depth: usize,
    pub hidden_width: usize,
    #[serde(default = "default_nonlinearity")]
    pub nonlinearity: NonlinearityConfig,
    /// Slope for leaky_relu; defaults to 0.5.
    #[serde(default)]
    pub leaky_alpha: Option<f64>,
    /// Apply the nonlinearity after the final layer too. Classification
    /// runs keep this off (linear logits under softmax cross-entropy).
    #[serde(default)]
    pub final_nonlinearity: bool,
    #[serde(default = "default_init")]
    pub init: InitConfig,
    #[serde(default)]
    pub sigma: Option<f64>,
    /// Rejected if present in any form; layers carry no bias terms.
    #[serde(default)]
    pub bias: Option<toml::Value>,
}

fn default_nonlinearity() -> NonlinearityConfig {
    NonlinearityConfig::Relu
}

fn default_init() -> InitConfig {
    InitConfig::GlorotUniform
}

impl NetConfig {
    pub fn nonlinearity(&self) -> Result<Nonlinearity, ConfigError> {
        match self.nonlinearity {
            NonlinearityConfig::Relu => Ok(Nonlinearity::Relu),
            NonlinearityConfig::LeakyRelu => {
                Ok(Nonlinearity::leaky_relu(self.leaky_alpha.unwrap_or(0.5))?)
            }
            NonlinearityConfig::Identity => Ok(Nonlinearity::Identity),
        }
    }

    pub fn init(&self) -> Result<Init, ConfigError> {
        match self.init {
            InitConfig::GlorotUniform => Ok(Init::GlorotUniform),
            InitConfig::Orthogonal => Ok(Init::Orthogonal),
            InitConfig::ScaledGaussian => match self.sigma {
                Some(sigma) => Ok(Init::ScaledGaussian { sigma }),
                None => Err(ConfigError::Invalid(
                    "init = \"scaled_gaussian\" needs a `sigma`".to_string(),
                )),
            },
        }
    }

    /// Widths `[input, hidden x (depth - 1), output]` for the given data
    /// dimensions.
    pub fn to_mlp_config(
        &self,
        input_dim: usize,
        output_dim: usize,
        seed: u64,
    ) -> Result<MlpConfig, ConfigError> {
        if self.bias.is_some() {
            return Err(ConfigError::BiasUnsupported);
        }
        if self.depth == 0 {
            return Err(ConfigError::Invalid("depth must be positive".to_string()));
        }
        if self.leaky_alpha.is_some() && self.nonlinearity != NonlinearityConfig::LeakyRelu {
            return Err(ConfigError::Invalid(
                "leaky_alpha only applies to nonlinearity = \"leaky_relu\"".to_string(),
            ));
        }
        if self.sigma.is_some() && self.init != InitConfig::ScaledGaussian {
            return Err(ConfigError::Invalid(
                "sigma only applies to init = \"scaled_gaussian\"".to_string(),
            ));
        }
        let mut widths = Vec::with_capacity(self.depth + 1);
        widths.push(input_dim);
        for _ in 1..self.depth {
            widths.push(self.hidden_width);
        }
        widths.push(output_dim);
        let cfg = MlpConfig {
            widths,
            nonlinearity: self.nonlinearity()?,
            use_final_nonlinearity: self.final_nonlinearity,
            init: self.init()?,
            seed: derive_seed(seed, seed_tags::NET_INIT),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub eta: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub weight_decay: f64,
    /// Cap each layer's norm at its initial value after every step.
    #[serde(default)]
    pub clamp: bool,
}

fn default_momentum() -> f64 {
    0.9
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_epsilon() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn build(&self) -> Result<OptimizerState, ConfigError> {
        self.build_with_eta(self.eta)
    }

    pub fn build_with_eta(&self, eta: f64) -> Result<OptimizerState, ConfigError> {
        let state = match self.kind {
            OptimizerKind::Fromage => OptimizerState::fromage(eta)?,
            OptimizerKind::Lars => OptimizerState::lars(eta, self.weight_decay)?,
            OptimizerKind::Sgd => OptimizerState::sgd(eta, self.momentum)?,
            OptimizerKind::Adam => {
                OptimizerState::adam(eta, self.beta1, self.beta2, self.epsilon)?
            }
        };
        Ok(state)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Constant,
    Exponential,
    DecayOnPlateau,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    #[serde(default)]
    pub gamma: Option<f64>,
    #[serde(default = "default_plateau_factor")]
    pub factor: f64,
    #[serde(default = "default_patience")]
    pub patience: usize,
}

fn default_plateau_factor() -> f64 {
    0.1
}

fn default_patience() -> usize {
    5
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<Schedule, ConfigError> {
        let schedule = match self.kind {
            ScheduleKind::Constant => Schedule::Constant,
            ScheduleKind::Exponential => Schedule::Exponential {
                gamma: self.gamma.ok_or_else(|| {
                    ConfigError::Invalid("exponential schedule needs a `gamma`".to_string())
                })?,
            },
            ScheduleKind::DecayOnPlateau => Schedule::DecayOnPlateau {
                factor: self.factor,
                patience: self.patience,
            },
        };
        schedule.validate()?;
        Ok(schedule)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossConfig {
    SoftmaxCrossEntropy,
    MeanSquaredError,
}

impl LossConfig {
    pub fn kind(&self) -> LossKind {
        match self {
            LossConfig::SoftmaxCrossEntropy => LossKind::SoftmaxCrossEntropy,
            LossConfig::MeanSquaredError => LossKind::MeanSquaredError,
        }
    }
}

fn default_loss() -> LossConfig {
    LossConfig::SoftmaxCrossEntropy
}

fn default_batch_size() -> usize {
    250
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_loss")]
    pub loss: LossConfig,
    /// Number of checkpoints spread over training (the initial state is
    /// always checkpointed in addition).
    #[serde(default = "default_checkpoint_count")]
    pub checkpoint_count: usize,
    /// Place half the checkpoints inside the first epoch, where most of the
    /// learning happens for shallow networks.
    #[serde(default)]
    pub checkpoint_front_loaded: bool,
}

fn default_checkpoint_count() -> usize {
    10
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbSweepConfig {
    /// Directory of `.frmg` checkpoints (or a single file).
    pub checkpoints: PathBuf,
    #[serde(default = "default_perturb_etas")]
    pub etas: Vec<f64>,
}

fn default_perturb_etas() -> Vec<f64> {
    vec![0.0, 0.001, 0.01, 0.05, 0.1]
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormGrowthConfig {
    pub steps: usize,
    pub eta: f64,
    #[serde(default = "default_true")]
    pub with_prefactor: bool,
    #[serde(default = "default_layer_dim")]
    pub rows: usize,
    #[serde(default = "default_layer_dim")]
    pub cols: usize,
}

fn default_true() -> bool {
    true
}

fn default_layer_dim() -> usize {
    16
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgoGrid {
    pub kind: OptimizerKind,
    pub etas: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DepthSweepConfig {
    pub depths: Vec<usize>,
    pub algos: Vec<AlgoGrid>,
    #[serde(default = "default_sweep_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_sweep_width")]
    pub hidden_width: usize,
    /// Per-epoch exponential decay applied in every cell.
    #[serde(default = "default_sweep_gamma")]
    pub gamma: f64,
}

fn default_sweep_epochs() -> usize {
    30
}

fn default_sweep_width() -> usize {
    256
}

fn default_sweep_gamma() -> f64 {
    0.95
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyBoundsConfig {
    #[serde(default = "default_trials")]
    pub trials: u64,
    #[serde(default = "default_depths")]
    pub depths: Vec<usize>,
    #[serde(default = "default_slopes")]
    pub leaky_slopes: Vec<f64>,
    #[serde(default = "default_relative_sizes")]
    pub relative_sizes: Vec<f64>,
    #[serde(default = "default_trial_width")]
    pub width: usize,
    /// Also run relu cells; they are reported with `hypothesis_violated`
    /// and never counted as violations.
    #[serde(default)]
    pub include_relu: bool,
    /// Harness self-test: halve every bound so the suite must fail.
    #[serde(default)]
    pub inject_fault: bool,
}

fn default_trials() -> u64 {
    1000
}

fn default_depths() -> Vec<usize> {
    vec![1, 2, 4, 8]
}

fn default_slopes() -> Vec<f64> {
    vec![0.25, 0.5, 1.0]
}

fn default_relative_sizes() -> Vec<f64> {
    vec![0.001, 0.01, 0.1]
}

fn default_trial_width() -> usize {
    8
}

impl Default for VerifyBoundsConfig {
    fn default() -> Self {
        VerifyBoundsConfig {
            trials: default_trials(),
            depths: default_depths(),
            leaky_slopes: default_slopes(),
            relative_sizes: default_relative_sizes(),
            width: default_trial_width(),
            include_relu: false,
            inject_fault: false,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrGridConfig {
    #[serde(default = "default_lr_grid")]
    pub etas: Vec<f64>,
    #[serde(default = "default_lr_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
}

fn default_lr_grid() -> Vec<f64> {
    vec![1e-4, 1e-3, 1e-2, 1e-1, 1e0]
}

fn default_lr_epochs() -> usize {
    5
}
