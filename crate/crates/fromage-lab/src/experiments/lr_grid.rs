//! `lr-grid`: train one cell per learning rate for a fixed epoch budget and
//! normalize each cell's error by the best cell's (1.0 marks the winner).
//! No decay schedule is applied inside the cells.

use std::path::PathBuf;

use rayon::prelude::*;

use crate::config::{derive_seed, seed_tags, RunConfig};
use crate::net::Mlp;
use crate::optim::Schedule;

use super::runner::{run_training_loop, LoopSpec, RowStatus};
use super::{fmt, ExperimentError, RunContext};

#[derive(Debug, Clone)]
pub struct LrCell {
    pub eta: f64,
    pub final_loss: f64,
    pub diverged: bool,
    /// `best_error / error`, in (0, 1]; absent for diverged cells or when
    /// every cell diverged.
    pub score: Option<f64>,
}

#[derive(Debug)]
pub struct LrGridOutcome {
    pub cells: Vec<LrCell>,
    pub csv_path: PathBuf,
}

pub fn cmd_lr_grid(cfg: &RunConfig, ctx: &RunContext) -> Result<LrGridOutcome, ExperimentError> {
    let gcfg = cfg
        .lr_grid
        .as_ref()
        .ok_or(crate::config::ConfigError::MissingSection {
            command: "lr-grid",
            section: "lr_grid",
        })?;
    if gcfg.etas.is_empty() {
        return Err(ExperimentError::Invalid(
            "lr_grid.etas must be nonempty".to_string(),
        ));
    }
    let dataset = cfg.dataset("lr-grid")?.load(ctx.seed)?;
    let net_cfg = cfg.net("lr-grid")?;
    let opt_cfg = cfg.optimizer("lr-grid")?;
    let loss = cfg
        .train
        .as_ref()
        .map(|t| t.loss.kind())
        .unwrap_or(crate::net::LossKind::SoftmaxCrossEntropy);
    let sweep_seed = derive_seed(ctx.seed, seed_tags::SWEEP_CELL);

    let raw: Result<Vec<(f64, bool)>, ExperimentError> = gcfg
        .etas
        .par_iter()
        .enumerate()
        .map(|(cell_idx, &eta)| {
            let cell_seed = derive_seed(sweep_seed, cell_idx as u64);
            let mlp_config =
                net_cfg.to_mlp_config(dataset.dim(), dataset.num_classes(), cell_seed)?;
            let net = Mlp::new(mlp_config)?;
            let outcome = run_training_loop(
                LoopSpec {
                    dataset: &dataset,
                    net,
                    optimizer: opt_cfg.build_with_eta(eta)?,
                    schedule: Schedule::Constant,
                    epochs: gcfg.epochs,
                    batch_size: gcfg.batch_size,
                    run_seed: cell_seed,
                    loss,
                    clamp: opt_cfg.clamp,
                },
                |_, _| Ok(()),
            )?;
            Ok((outcome.final_loss, outcome.diverged))
        })
        .collect();
    let raw = raw?;

    let best_error = raw
        .iter()
        .filter(|(loss, diverged)| !diverged && loss.is_finite())
        .map(|(loss, _)| *loss)
        .fold(f64::INFINITY, f64::min);

    let cells: Vec<LrCell> = gcfg
        .etas
        .iter()
        .zip(&raw)
        .map(|(&eta, &(final_loss, diverged))| {
            let score = if diverged || !final_loss.is_finite() || !best_error.is_finite() {
                None
            } else {
                Some(best_error / final_loss.max(f64::MIN_POSITIVE))
            };
            LrCell {
                eta,
                final_loss,
                diverged,
                score,
            }
        })
        .collect();

    let mut csv = ctx.csv(
        "lr_grid.csv",
        &["eta", "final_train_loss", "score", "status"],
    )?;
    for c in &cells {
        csv.write_row([
            fmt(c.eta),
            fmt(c.final_loss),
            c.score.map(fmt).unwrap_or_default(),
            if c.diverged {
                RowStatus::Diverged.as_str().to_string()
            } else {
                RowStatus::Ok.as_str().to_string()
            },
        ])?;
    }
    let csv_path = csv.finish()?;

    ctx.write_summary(
        "lr-grid",
        serde_json::json!({
            "dataset": cfg.dataset("lr-grid")?.describe(),
            "etas": gcfg.etas,
            "epochs": gcfg.epochs,
            "best_error": if best_error.is_finite() { Some(best_error) } else { None },
        }),
    )?;

    Ok(LrGridOutcome { cells, csv_path })
}
