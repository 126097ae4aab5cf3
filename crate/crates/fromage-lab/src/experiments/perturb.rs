//! `perturb-sweep`: from each checkpoint, push every layer a relative
//! distance `eta` along its negative full-batch gradient and record how the
//! loss and the input layer's gradient respond.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::config::RunConfig;
use crate::data::Dataset;
use crate::linalg::Matrix;
use crate::net::{load_checkpoint, loss_and_gradients, loss_value, LossKind, Mlp};
use crate::optim::EPSILON_FLOOR;

use super::{fmt, fmt_bool, ExperimentError, RunContext};

#[derive(Debug, Clone)]
pub struct PerturbRow {
    pub checkpoint: String,
    pub eta: f64,
    pub baseline_loss: f64,
    pub perturbed_loss: f64,
    /// `|g~_1 - g_1|_F / |g_1|_F` for the input layer on the full batch.
    pub input_grad_change: f64,
    pub final_phi: bool,
}

#[derive(Debug)]
pub struct PerturbOutcome {
    pub rows: Vec<PerturbRow>,
    pub csv_path: PathBuf,
}

/// `.frmg` files under `path` (or `path` itself), sorted by name.
fn list_checkpoints(path: &Path) -> Result<Vec<PathBuf>, ExperimentError> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(path)?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().map_or(false, |ext| ext == "frmg"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(ExperimentError::Invalid(format!(
            "no .frmg checkpoints under {}",
            path.display()
        )));
    }
    Ok(files)
}

/// Full-batch gradients, then for each eta the perturbed network
/// `W_l - eta * (|W_l|_F / |g_l|_F) * g_l` across every layer.
fn sweep_checkpoint(
    path: &Path,
    dataset: &Dataset,
    etas: &[f64],
    loss_kind: LossKind,
) -> Result<Vec<PerturbRow>, ExperimentError> {
    let net = load_checkpoint(path)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    let indices: Vec<usize> = (0..dataset.len()).collect();
    let (x, labels) = dataset.gather(&indices);
    let targets = dataset.targets_for(labels);

    let (baseline_loss, grads) = loss_and_gradients(&net, &x, &targets, loss_kind)?;
    if grads.norm(1) < EPSILON_FLOOR {
        return Err(ExperimentError::Invalid(format!(
            "checkpoint {name}: input-layer gradient is zero; relative change undefined"
        )));
    }

    let final_phi = net.config().use_final_nonlinearity;
    let mut rows = Vec::with_capacity(etas.len());
    for &eta in etas {
        let deltas: Result<Vec<Matrix>, ExperimentError> = (1..=net.depth())
            .map(|l| {
                let g_norm = grads.norm(l);
                let w = net.weight(l);
                if g_norm < EPSILON_FLOOR {
                    return Ok(Matrix::zeros(w.rows(), w.cols()));
                }
                let scale = -eta * w.frobenius_norm() / g_norm;
                Ok(grads.grad(l).scale(scale)?)
            })
            .collect();
        let perturbed = net.perturb(&deltas?)?;
        let perturbed_loss = loss_value(&perturbed, &x, &targets, loss_kind)?;
        let (_, perturbed_grads) = loss_and_gradients(&perturbed, &x, &targets, loss_kind)?;
        let input_grad_change =
            perturbed_grads.grad(1).sub(grads.grad(1))?.frobenius_norm() / grads.norm(1);
        rows.push(PerturbRow {
            checkpoint: name.clone(),
            eta,
            baseline_loss,
            perturbed_loss,
            input_grad_change,
            final_phi,
        });
    }
    Ok(rows)
}

pub fn cmd_perturb_sweep(
    cfg: &RunConfig,
    ctx: &RunContext,
) -> Result<PerturbOutcome, ExperimentError> {
    let pcfg = cfg
        .perturb_sweep
        .as_ref()
        .ok_or(crate::config::ConfigError::MissingSection {
            command: "perturb-sweep",
            section: "perturb_sweep",
        })?;
    let dataset = cfg.dataset("perturb-sweep")?.load(ctx.seed)?;
    let loss_kind = cfg
        .train
        .as_ref()
        .map(|t| t.loss.kind())
        .unwrap_or(LossKind::SoftmaxCrossEntropy);
    let checkpoints = list_checkpoints(&pcfg.checkpoints)?;

    // Checkpoints are independent jobs; results merge in listed order.
    let per_checkpoint: Result<Vec<Vec<PerturbRow>>, ExperimentError> = checkpoints
        .par_iter()
        .map(|path| sweep_checkpoint(path, &dataset, &pcfg.etas, loss_kind))
        .collect();
    let rows: Vec<PerturbRow> = per_checkpoint?.into_iter().flatten().collect();

    let mut csv = ctx.csv(
        "perturb_sweep.csv",
        &[
            "checkpoint",
            "eta",
            "baseline_loss",
            "perturbed_loss",
            "input_grad_change",
            "final_phi",
        ],
    )?;
    for row in &rows {
        csv.write_row([
            row.checkpoint.clone(),
            fmt(row.eta),
            fmt(row.baseline_loss),
            fmt(row.perturbed_loss),
            fmt(row.input_grad_change),
            fmt_bool(row.final_phi),
        ])?;
    }
    let csv_path = csv.finish()?;

    ctx.write_summary(
        "perturb-sweep",
        serde_json::json!({
            "dataset": cfg.dataset("perturb-sweep")?.describe(),
            "checkpoints": checkpoints.len(),
            "etas": pcfg.etas,
        }),
    )?;

    Ok(PerturbOutcome { rows, csv_path })
}
