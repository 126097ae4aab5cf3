//! The shared epoch/batch training loop.
//!
//! One loop serves `train`, `depth-sweep` and `lr-grid`. Per-epoch rows
//! report running means over the epoch's batches (measured before each
//! update, as the batch is consumed). A run ends early with a marked final
//! row when it diverges: non-finite loss, a non-finite value surfacing from
//! the linear algebra, or training accuracy stuck below 15% for three
//! consecutive epochs past half the epoch budget.

use crate::config::{derive_seed, seed_tags};
use crate::data::Dataset;
use crate::linalg::{LinalgError, Matrix};
use crate::net::{
    accuracy, loss_and_gradients_with_output, loss_value, LossKind, Mlp, NetError,
};
use crate::optim::{apply_norm_clamp, schedule_eta, OptimError, OptimizerState, Schedule};

use super::ExperimentError;

pub const DIVERGENCE_ACCURACY_FLOOR: f64 = 0.15;
pub const DIVERGENCE_PATIENCE: usize = 3;

/// Everything one training run needs.
pub struct LoopSpec<'a> {
    pub dataset: &'a Dataset,
    pub net: Mlp,
    pub optimizer: OptimizerState,
    pub schedule: Schedule,
    pub epochs: usize,
    pub batch_size: usize,
    /// Epoch permutations derive from this; reuse the run seed.
    pub run_seed: u64,
    pub loss: LossKind,
    /// Cap each layer's norm at its initial value after every step.
    pub clamp: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowStatus {
    Ok,
    Diverged,
}

impl RowStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            RowStatus::Ok => "ok",
            RowStatus::Diverged => "diverged",
        }
    }
}

/// One CSV row of a training run.
#[derive(Debug, Clone)]
pub struct EpochRow {
    pub epoch: usize,
    /// Global step count at the end of the epoch.
    pub step: usize,
    pub eta: f64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub status: RowStatus,
    pub weight_norms: Vec<f64>,
    /// Per-layer `|W_end - W_start|_F / |W_start|_F` over the epoch.
    pub relative_weight_change: Vec<f64>,
}

#[derive(Debug)]
pub struct LoopOutcome {
    pub net: Mlp,
    pub rows: Vec<EpochRow>,
    pub diverged: bool,
    /// Full-train-set loss and accuracy after the last completed epoch (the
    /// last running means when the run diverged).
    pub final_loss: f64,
    pub final_accuracy: f64,
    pub total_steps: usize,
}

/// Errors rooted in a non-finite value are a property of the run, not of the
/// harness: they mark divergence instead of aborting the command.
fn is_divergence(err: &ExperimentError) -> bool {
    fn linalg(e: &LinalgError) -> bool {
        matches!(e, LinalgError::NonFinite { .. })
    }
    fn net(e: &NetError) -> bool {
        matches!(e, NetError::Linalg(inner) if linalg(inner))
    }
    match err {
        ExperimentError::Linalg(e) => linalg(e),
        ExperimentError::Net(e) => net(e),
        ExperimentError::Optim(OptimError::NonFiniteGradient { .. }) => true,
        ExperimentError::Optim(OptimError::Linalg(e)) => linalg(e),
        ExperimentError::Optim(OptimError::Net(e)) => net(e),
        _ => false,
    }
}

/// Mean loss and accuracy over the whole dataset, evaluated in chunks.
pub fn evaluate_full(
    net: &Mlp,
    dataset: &Dataset,
    loss: LossKind,
) -> Result<(f64, f64), ExperimentError> {
    let chunk = 1024usize;
    let n = dataset.len();
    let mut loss_sum = 0.0;
    let mut acc_sum = 0.0;
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let indices: Vec<usize> = (start..end).collect();
        let (x, labels) = dataset.gather(&indices);
        let targets = dataset.targets_for(labels.clone());
        let batch_loss = loss_value(net, &x, &targets, loss)?;
        let trace = net.forward(&x)?;
        let batch_acc = accuracy(trace.output(), &labels)?;
        let weight = (end - start) as f64;
        loss_sum += batch_loss * weight;
        acc_sum += batch_acc * weight;
        start = end;
    }
    Ok((loss_sum / n as f64, acc_sum / n as f64))
}

/// Runs the loop. `on_step` fires after every successful optimizer step with
/// the global step index and the updated network (checkpoint hook).
pub fn run_training_loop(
    spec: LoopSpec,
    mut on_step: impl FnMut(usize, &Mlp) -> Result<(), ExperimentError>,
) -> Result<LoopOutcome, ExperimentError> {
    let LoopSpec {
        dataset,
        net,
        optimizer,
        schedule,
        epochs,
        batch_size,
        run_seed,
        loss,
        clamp,
    } = spec;
    let mut net = net;
    let mut optimizer = optimizer;
    let base_eta = optimizer.eta();
    let clamp_caps = if clamp { Some(net.weight_norms()) } else { None };
    let epoch_seed_base = derive_seed(run_seed, seed_tags::EPOCH_BASE);

    let mut rows: Vec<EpochRow> = Vec::with_capacity(epochs);
    let mut history: Vec<f64> = Vec::with_capacity(epochs);
    let mut diverged = false;
    let mut low_accuracy_streak = 0usize;
    let mut global_step = 0usize;
    let mut last_loss = f64::NAN;
    let mut last_accuracy = f64::NAN;

    'epochs: for epoch in 0..epochs {
        let eta = schedule_eta(&schedule, &history, epoch, base_eta);
        optimizer.set_eta(eta)?;
        let start_weights: Vec<Matrix> = net.weights().to_vec();
        let batches = dataset.batches(batch_size, derive_seed(epoch_seed_base, epoch as u64))?;

        let mut loss_sum = 0.0;
        let mut acc_sum = 0.0;
        let mut seen = 0usize;
        for batch in &batches {
            let (x, labels) = dataset.gather(&batch.indices);
            let targets = dataset.targets_for(labels.clone());
            let step = (|| -> Result<Option<(f64, f64, Mlp)>, ExperimentError> {
                let (batch_loss, grads, output) =
                    loss_and_gradients_with_output(&net, &x, &targets, loss)?;
                if !batch_loss.is_finite() {
                    return Ok(None);
                }
                let batch_acc = accuracy(&output, &labels)?;
                let mut next = optimizer.step(&net, &grads)?;
                if let Some(caps) = &clamp_caps {
                    next = apply_norm_clamp(&next, caps)?;
                }
                Ok(Some((batch_loss, batch_acc, next)))
            })();
            match step {
                Ok(Some((batch_loss, batch_acc, next))) => {
                    net = next;
                    global_step += 1;
                    loss_sum += batch_loss * batch.len() as f64;
                    acc_sum += batch_acc * batch.len() as f64;
                    seen += batch.len();
                    on_step(global_step, &net)?;
                }
                Ok(None) => {
                    diverged = true;
                }
                Err(e) if is_divergence(&e) => {
                    diverged = true;
                }
                Err(e) => return Err(e),
            }
            if diverged {
                let (epoch_loss, epoch_acc) = if seen > 0 {
                    (loss_sum / seen as f64, acc_sum / seen as f64)
                } else {
                    (f64::NAN, f64::NAN)
                };
                last_loss = epoch_loss;
                last_accuracy = epoch_acc;
                rows.push(EpochRow {
                    epoch,
                    step: global_step,
                    eta,
                    train_loss: epoch_loss,
                    train_accuracy: epoch_acc,
                    status: RowStatus::Diverged,
                    weight_norms: net.weight_norms(),
                    relative_weight_change: relative_change(&start_weights, &net),
                });
                break 'epochs;
            }
        }

        let epoch_loss = loss_sum / seen as f64;
        let epoch_acc = acc_sum / seen as f64;
        history.push(epoch_loss);
        last_loss = epoch_loss;
        last_accuracy = epoch_acc;

        // Accuracy-floor rule: only meaningful once the run has had half
        // the budget to get off the ground.
        if epoch >= epochs / 2 && epoch_acc < DIVERGENCE_ACCURACY_FLOOR {
            low_accuracy_streak += 1;
        } else {
            low_accuracy_streak = 0;
        }
        if low_accuracy_streak >= DIVERGENCE_PATIENCE {
            diverged = true;
        }

        rows.push(EpochRow {
            epoch,
            step: global_step,
            eta,
            train_loss: epoch_loss,
            train_accuracy: epoch_acc,
            status: if diverged {
                RowStatus::Diverged
            } else {
                RowStatus::Ok
            },
            weight_norms: net.weight_norms(),
            relative_weight_change: relative_change(&start_weights, &net),
        });
        if diverged {
            break;
        }
    }

    let (final_loss, final_accuracy) = if diverged {
        (last_loss, last_accuracy)
    } else if epochs == 0 {
        (f64::NAN, f64::NAN)
    } else {
        evaluate_full(&net, dataset, loss)?
    };

    Ok(LoopOutcome {
        net,
        rows,
        diverged,
        final_loss,
        final_accuracy,
        total_steps: global_step,
    })
}

fn relative_change(start: &[Matrix], net: &Mlp) -> Vec<f64> {
    start
        .iter()
        .zip(net.weights())
        .map(|(w0, w1)| match w1.sub(w0) {
            Ok(d) => {
                let denom = w0.frobenius_norm();
                if denom > 0.0 {
                    d.frobenius_norm() / denom
                } else {
                    f64::NAN
                }
            }
            Err(_) => f64::NAN,
        })
        .collect()
}

/// Column names for per-epoch CSV rows at a given depth.
pub fn epoch_csv_header(depth: usize) -> Vec<String> {
    let mut header = vec![
        "epoch".to_string(),
        "step".to_string(),
        "eta".to_string(),
        "train_loss".to_string(),
        "train_accuracy".to_string(),
        "status".to_string(),
        "final_phi".to_string(),
    ];
    for l in 1..=depth {
        header.push(format!("w_norm_{l}"));
    }
    for l in 1..=depth {
        header.push(format!("rel_dw_{l}"));
    }
    header
}

/// Serializes one epoch row to match [`epoch_csv_header`].
pub fn epoch_csv_row(row: &EpochRow, final_phi: bool) -> Vec<String> {
    let mut fields = vec![
        row.epoch.to_string(),
        row.step.to_string(),
        super::fmt(row.eta),
        super::fmt(row.train_loss),
        super::fmt(row.train_accuracy),
        row.status.as_str().to_string(),
        super::fmt_bool(final_phi),
    ];
    fields.extend(row.weight_norms.iter().map(|v| super::fmt(*v)));
    fields.extend(row.relative_weight_change.iter().map(|v| super::fmt(*v)));
    fields
}
