//! Experiment commands: training runs, perturbation sweeps, the norm-growth
//! lesion, depth sweeps, bound verification and learning-rate grids.
//!
//! Every command writes CSV files plus a `summary.json` under
//! `<out>/<command>/<label>/`. CSV content is a pure function of config and
//! seed — wall-clock time and other environment facts go only to the
//! summary, so re-running a command with the same inputs reproduces the CSV
//! byte for byte.

pub mod depth_sweep;
pub mod lr_grid;
pub mod norm_growth;
pub mod perturb;
pub mod runner;
pub mod train;
pub mod verify_bounds;

pub use depth_sweep::{cmd_depth_sweep, DepthSweepOutcome};
pub use lr_grid::{cmd_lr_grid, LrGridOutcome};
pub use norm_growth::{cmd_norm_growth, NormGrowthOutcome};
pub use perturb::{cmd_perturb_sweep, PerturbOutcome};
pub use train::{cmd_train, TrainOutcome};
pub use verify_bounds::{cmd_verify_bounds, VerifyOutcome};

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bounds::BoundsError;
use crate::config::ConfigError;
use crate::data::DataError;
use crate::linalg::LinalgError;
use crate::net::NetError;
use crate::optim::OptimError;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Bounds(#[from] BoundsError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Invalid(String),
}

/// Output directory, seed and config hash for one command invocation.
pub struct RunContext {
    pub out_dir: PathBuf,
    pub seed: u64,
    pub config_sha256: String,
    started: Instant,
}

impl RunContext {
    /// Creates `<base>/<command>/<label>/` (label defaults to a timestamp)
    /// and records the config hash.
    pub fn create(
        base_out: &Path,
        command: &str,
        label: Option<&str>,
        seed: u64,
        config_bytes: &[u8],
    ) -> Result<Self, ExperimentError> {
        let label = match label {
            Some(l) => l.to_string(),
            None => timestamp_label(),
        };
        let out_dir = base_out.join(command).join(label);
        fs::create_dir_all(&out_dir)?;
        let mut hasher = Sha256::new();
        hasher.update(config_bytes);
        hasher.update(seed.to_le_bytes());
        let config_sha256 = format!("{:x}", hasher.finalize());
        Ok(RunContext {
            out_dir,
            seed,
            config_sha256,
            started: Instant::now(),
        })
    }

    /// Opens a CSV file in the run directory and writes its header.
    pub fn csv(&self, name: &str, header: &[&str]) -> Result<CsvSink, ExperimentError> {
        CsvSink::create(self.out_dir.join(name), header)
    }

    /// Writes `summary.json` with the shared metadata plus per-command
    /// fields. Wall time lives here, never in the CSVs.
    pub fn write_summary(
        &self,
        command: &str,
        extra: serde_json::Value,
    ) -> Result<(), ExperimentError> {
        let mut doc = serde_json::json!({
            "command": command,
            "seed": self.seed,
            "config_sha256": self.config_sha256,
            "build": build_id(),
            "wall_time_secs": self.started.elapsed().as_secs_f64(),
        });
        if let (Some(obj), Some(more)) = (doc.as_object_mut(), extra.as_object()) {
            for (k, v) in more {
                obj.insert(k.clone(), v.clone());
            }
        }
        fs::write(
            self.out_dir.join("summary.json"),
            serde_json::to_vec_pretty(&doc)?,
        )?;
        Ok(())
    }
}

/// CSV writer with RFC-4180 quoting and an always-present header.
pub struct CsvSink {
    writer: csv::Writer<fs::File>,
    path: PathBuf,
}

impl CsvSink {
    pub fn create(path: PathBuf, header: &[&str]) -> Result<Self, ExperimentError> {
        let file = fs::File::create(&path)?;
        let mut writer = csv::Writer::from_writer(file);
        writer.write_record(header)?;
        Ok(CsvSink { writer, path })
    }

    pub fn write_row<I, S>(&mut self, fields: I) -> Result<(), ExperimentError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        self.writer.write_record(fields)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<PathBuf, ExperimentError> {
        self.writer.flush()?;
        Ok(self.path)
    }
}

/// Shortest-roundtrip float formatting; deterministic per platform.
pub fn fmt(x: f64) -> String {
    format!("{x}")
}

pub fn fmt_bool(b: bool) -> String {
    b.to_string()
}

/// Build identifier recorded in summaries, overridable at compile time.
pub fn build_id() -> String {
    match option_env!("FROMAGE_BUILD_ID") {
        Some(id) => id.to_string(),
        None => format!("{}-v{}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION")),
    }
}

fn timestamp_label() -> String {
    let now = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .unwrap_or_default();
    format!("{}.{:09}", now.as_secs(), now.subsec_nanos())
}
