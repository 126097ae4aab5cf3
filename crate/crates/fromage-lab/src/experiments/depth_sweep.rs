//! `depth-sweep`: train every (depth, optimizer, eta) cell of a grid and
//! report final train accuracy, plus each algorithm's best-over-eta curve.

use std::path::PathBuf;

use rayon::prelude::*;

use crate::config::{derive_seed, seed_tags, RunConfig};
use crate::net::{LossKind, Mlp, MlpConfig};
use crate::optim::{OptimizerKind, OptimizerState, Schedule};

use super::runner::{run_training_loop, LoopSpec, RowStatus};
use super::{fmt, ExperimentError, RunContext};

#[derive(Debug, Clone)]
pub struct CellResult {
    pub depth: usize,
    pub kind: OptimizerKind,
    pub eta: f64,
    pub final_accuracy: f64,
    pub final_loss: f64,
    pub diverged: bool,
    pub cell_seed: u64,
}

#[derive(Debug, Clone)]
pub struct BestRow {
    pub depth: usize,
    pub kind: OptimizerKind,
    pub best_eta: f64,
    pub best_accuracy: f64,
}

#[derive(Debug)]
pub struct DepthSweepOutcome {
    pub cells: Vec<CellResult>,
    pub best: Vec<BestRow>,
    pub cells_csv: PathBuf,
    pub best_csv: PathBuf,
}

fn kind_name(kind: OptimizerKind) -> &'static str {
    match kind {
        OptimizerKind::Fromage => "fromage",
        OptimizerKind::Lars => "lars",
        OptimizerKind::Sgd => "sgd",
        OptimizerKind::Adam => "adam",
    }
}

fn build_state(kind: OptimizerKind, eta: f64) -> Result<OptimizerState, ExperimentError> {
    // Protocol hyperparameters: heavy-ball momentum 0.9, Adam betas
    // 0.9/0.999 with epsilon 1e-8, LARS without weight decay.
    Ok(match kind {
        OptimizerKind::Fromage => OptimizerState::fromage(eta)?,
        OptimizerKind::Lars => OptimizerState::lars(eta, 0.0)?,
        OptimizerKind::Sgd => OptimizerState::sgd(eta, 0.9)?,
        OptimizerKind::Adam => OptimizerState::adam(eta, 0.9, 0.999, 1e-8)?,
    })
}

pub fn cmd_depth_sweep(
    cfg: &RunConfig,
    ctx: &RunContext,
) -> Result<DepthSweepOutcome, ExperimentError> {
    let scfg = cfg
        .depth_sweep
        .as_ref()
        .ok_or(crate::config::ConfigError::MissingSection {
            command: "depth-sweep",
            section: "depth_sweep",
        })?;
    if scfg.depths.is_empty() || scfg.algos.is_empty() {
        return Err(ExperimentError::Invalid(
            "depth_sweep needs at least one depth and one algorithm".to_string(),
        ));
    }
    let dataset = cfg.dataset("depth-sweep")?.load(ctx.seed)?;
    let net_cfg = cfg.net("depth-sweep")?;
    let nonlinearity = net_cfg.nonlinearity()?;
    let init = net_cfg.init()?;
    let schedule = Schedule::Exponential { gamma: scfg.gamma };
    schedule.validate()?;

    // The grid in deterministic order: depths x algos x etas.
    let mut grid: Vec<(usize, OptimizerKind, f64)> = Vec::new();
    for &depth in &scfg.depths {
        for algo in &scfg.algos {
            for &eta in &algo.etas {
                grid.push((depth, algo.kind, eta));
            }
        }
    }
    let sweep_seed = derive_seed(ctx.seed, seed_tags::SWEEP_CELL);

    let cells: Result<Vec<CellResult>, ExperimentError> = grid
        .par_iter()
        .enumerate()
        .map(|(cell_idx, &(depth, kind, eta))| {
            let cell_seed = derive_seed(sweep_seed, cell_idx as u64);
            let mut widths = Vec::with_capacity(depth + 1);
            widths.push(dataset.dim());
            for _ in 1..depth {
                widths.push(scfg.hidden_width);
            }
            widths.push(dataset.num_classes());
            let net = Mlp::new(MlpConfig {
                widths,
                nonlinearity,
                use_final_nonlinearity: net_cfg.final_nonlinearity,
                init,
                seed: derive_seed(cell_seed, seed_tags::NET_INIT),
            })?;
            let outcome = run_training_loop(
                LoopSpec {
                    dataset: &dataset,
                    net,
                    optimizer: build_state(kind, eta)?,
                    schedule: schedule.clone(),
                    epochs: scfg.epochs,
                    batch_size: scfg.batch_size,
                    run_seed: cell_seed,
                    loss: LossKind::SoftmaxCrossEntropy,
                    clamp: false,
                },
                |_, _| Ok(()),
            )?;
            log::info!(
                "depth-sweep cell depth={depth} {}@{eta}: accuracy {:.4}{}",
                kind_name(kind),
                outcome.final_accuracy,
                if outcome.diverged { " (diverged)" } else { "" }
            );
            Ok(CellResult {
                depth,
                kind,
                eta,
                final_accuracy: outcome.final_accuracy,
                final_loss: outcome.final_loss,
                diverged: outcome.diverged,
                cell_seed,
            })
        })
        .collect();
    let cells = cells?;

    // Best-over-eta per (depth, algorithm), in grid order. Diverged cells
    // keep their last recorded accuracy, so a universally failing algorithm
    // still produces a (poor) best entry rather than a hole.
    let mut best: Vec<BestRow> = Vec::new();
    for &depth in &scfg.depths {
        for algo in &scfg.algos {
            let group: Vec<&CellResult> = cells
                .iter()
                .filter(|c| c.depth == depth && c.kind == algo.kind)
                .collect();
            if let Some(top) = group.iter().max_by(|a, b| {
                a.final_accuracy
                    .partial_cmp(&b.final_accuracy)
                    .unwrap_or(std::cmp::Ordering::Equal)
            }) {
                best.push(BestRow {
                    depth,
                    kind: algo.kind,
                    best_eta: top.eta,
                    best_accuracy: top.final_accuracy,
                });
            }
        }
    }

    let mut cells_csv = ctx.csv(
        "depth_sweep.csv",
        &[
            "depth",
            "optimizer",
            "eta",
            "final_train_accuracy",
            "final_train_loss",
            "status",
            "cell_seed",
        ],
    )?;
    for c in &cells {
        cells_csv.write_row([
            c.depth.to_string(),
            kind_name(c.kind).to_string(),
            fmt(c.eta),
            fmt(c.final_accuracy),
            fmt(c.final_loss),
            if c.diverged {
                RowStatus::Diverged.as_str().to_string()
            } else {
                RowStatus::Ok.as_str().to_string()
            },
            c.cell_seed.to_string(),
        ])?;
    }
    let cells_path = cells_csv.finish()?;

    let mut best_csv = ctx.csv(
        "depth_sweep_best.csv",
        &["depth", "optimizer", "best_eta", "best_train_accuracy"],
    )?;
    for b in &best {
        best_csv.write_row([
            b.depth.to_string(),
            kind_name(b.kind).to_string(),
            fmt(b.best_eta),
            fmt(b.best_accuracy),
        ])?;
    }
    let best_path = best_csv.finish()?;

    ctx.write_summary(
        "depth-sweep",
        serde_json::json!({
            "dataset": cfg.dataset("depth-sweep")?.describe(),
            "depths": scfg.depths,
            "epochs": scfg.epochs,
            "hidden_width": scfg.hidden_width,
            "cells": cells.len(),
            "diverged_cells": cells.iter().filter(|c| c.diverged).count(),
        }),
    )?;

    Ok(DepthSweepOutcome {
        cells,
        best,
        cells_csv: cells_path,
        best_csv: best_path,
    })
}
