//! `train`: the full training loop with checkpoints and per-epoch CSV rows.

use std::collections::BTreeSet;
use std::fs;
use std::path::PathBuf;

use crate::config::RunConfig;
use crate::net::{save_checkpoint, Mlp};

use super::runner::{epoch_csv_header, epoch_csv_row, run_training_loop, LoopSpec};
use super::{ExperimentError, RunContext};

#[derive(Debug)]
pub struct TrainOutcome {
    pub csv_path: PathBuf,
    pub checkpoint_paths: Vec<PathBuf>,
    pub diverged: bool,
    pub final_loss: f64,
    pub final_accuracy: f64,
    pub net: Mlp,
}

/// Global step indices at which to checkpoint. `front_loaded` packs half the
/// snapshots into the first epoch (shallow networks do most of their
/// learning there); otherwise snapshots spread evenly over all steps.
pub fn checkpoint_steps(
    count: usize,
    epochs: usize,
    steps_per_epoch: usize,
    front_loaded: bool,
) -> BTreeSet<usize> {
    let mut steps = BTreeSet::new();
    let total = epochs * steps_per_epoch;
    if count == 0 || total == 0 {
        return steps;
    }
    if front_loaded && epochs >= 2 && count >= 2 {
        let first_half = count - count / 2;
        for i in 1..=first_half {
            steps.insert(((i * steps_per_epoch) / first_half).max(1));
        }
        let rest = count / 2;
        let remaining = total - steps_per_epoch;
        for i in 1..=rest {
            steps.insert(steps_per_epoch + (i * remaining) / rest);
        }
    } else {
        for i in 1..=count {
            steps.insert(((i * total) / count).max(1));
        }
    }
    steps
}

pub fn cmd_train(cfg: &RunConfig, ctx: &RunContext) -> Result<TrainOutcome, ExperimentError> {
    let tcfg = cfg
        .train
        .as_ref()
        .ok_or(crate::config::ConfigError::MissingSection {
            command: "train",
            section: "train",
        })?;
    let dataset = cfg.dataset("train")?.load(ctx.seed)?;
    let net_cfg = cfg.net("train")?;
    let mlp_config = net_cfg.to_mlp_config(dataset.dim(), dataset.num_classes(), ctx.seed)?;
    let final_phi = mlp_config.use_final_nonlinearity;
    let depth = mlp_config.depth();
    let net = Mlp::new(mlp_config)?;
    let optimizer = cfg.optimizer("train")?.build()?;
    let clamp = cfg.optimizer("train")?.clamp;
    let schedule = cfg.schedule_or_constant()?;

    let ckpt_dir = ctx.out_dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir)?;
    let mut checkpoint_paths = Vec::new();
    let initial = ckpt_dir.join("ckpt_step_000000.frmg");
    save_checkpoint(&net, &initial)?;
    checkpoint_paths.push(initial);

    let steps_per_epoch = dataset.len().div_ceil(tcfg.batch_size);
    let ckpt_steps = checkpoint_steps(
        tcfg.checkpoint_count,
        tcfg.epochs,
        steps_per_epoch,
        tcfg.checkpoint_front_loaded,
    );

    let header = epoch_csv_header(depth);
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut csv = ctx.csv("train.csv", &header_refs)?;

    let outcome = run_training_loop(
        LoopSpec {
            dataset: &dataset,
            net,
            optimizer,
            schedule,
            epochs: tcfg.epochs,
            batch_size: tcfg.batch_size,
            run_seed: ctx.seed,
            loss: tcfg.loss.kind(),
            clamp,
        },
        |step, net| {
            if ckpt_steps.contains(&step) {
                let path = ckpt_dir.join(format!("ckpt_step_{step:06}.frmg"));
                save_checkpoint(net, &path)?;
                checkpoint_paths.push(path);
            }
            Ok(())
        },
    )?;

    for row in &outcome.rows {
        csv.write_row(epoch_csv_row(row, final_phi))?;
    }
    let csv_path = csv.finish()?;

    ctx.write_summary(
        "train",
        serde_json::json!({
            "dataset": cfg.dataset("train")?.describe(),
            "final_phi": final_phi,
            "diverged": outcome.diverged,
            "final_loss": outcome.final_loss,
            "final_accuracy": outcome.final_accuracy,
            "total_steps": outcome.total_steps,
            "checkpoints": checkpoint_paths.len(),
        }),
    )?;

    Ok(TrainOutcome {
        csv_path,
        checkpoint_paths,
        diverged: outcome.diverged,
        final_loss: outcome.final_loss,
        final_accuracy: outcome.final_accuracy,
        net: outcome.net,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_steps_spread_evenly() {
        let steps = checkpoint_steps(5, 10, 4, false);
        assert_eq!(steps.len(), 5);
        assert!(steps.contains(&40));
        assert!(steps.iter().all(|&s| s >= 1 && s <= 40));
    }

    #[test]
    fn front_loaded_packs_half_into_first_epoch() {
        let steps = checkpoint_steps(10, 10, 4, true);
        let in_first_epoch = steps.iter().filter(|&&s| s <= 4).count();
        assert!(in_first_epoch >= 4, "{steps:?}");
        assert!(steps.contains(&40));
    }

    #[test]
    fn zero_epochs_mean_no_checkpoints() {
        assert!(checkpoint_steps(10, 0, 4, true).is_empty());
    }
}
