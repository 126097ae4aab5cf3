//! `verify-bounds`: randomized sweeps of the functional, Jacobian and
//! matrix-conditioning comparisons. Exits nonzero on any violation and
//! prints the offending trial seed for replay. Relu cells (when requested)
//! are reported but never asserted; the transmission hypothesis excludes
//! them.

use std::path::PathBuf;

use rayon::prelude::*;

use crate::bounds::trials::{lemma_b1_trial, theorem1_trial, Theorem1Config, Theorem1Outcome};
use crate::bounds::{BoundComparison, BoundsError};
use crate::config::{derive_seed, seed_tags, RunConfig, VerifyBoundsConfig};
use crate::net::Nonlinearity;

use super::{fmt, fmt_bool, ExperimentError, RunContext};

#[derive(Debug)]
pub struct VerifyOutcome {
    pub theorem1_trials: u64,
    pub lemma_b1_trials: u64,
    pub violations: u64,
    pub first_violation_seed: Option<u64>,
    pub csv_paths: Vec<PathBuf>,
}

const CSV_HEADER: [&str; 11] = [
    "trial",
    "depth",
    "layer",
    "alpha",
    "beta",
    "kappa",
    "r_max",
    "measured",
    "bound",
    "satisfied",
    "hypothesis_violated",
];

fn opt_fmt(v: Option<f64>) -> String {
    v.map(fmt).unwrap_or_default()
}

fn opt_usize(v: Option<usize>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn comparison_row(trial: u64, cmp: &BoundComparison) -> Vec<String> {
    vec![
        trial.to_string(),
        opt_usize(cmp.context.depth),
        opt_usize(cmp.context.layer),
        opt_fmt(cmp.context.alpha),
        opt_fmt(cmp.context.beta),
        opt_fmt(cmp.context.kappa),
        opt_fmt(cmp.context.r_max),
        fmt(cmp.measured),
        fmt(cmp.bound),
        fmt_bool(cmp.satisfied),
        fmt_bool(cmp.context.hypothesis_violated),
    ]
}

fn apply_fault(cmp: BoundComparison, inject: bool) -> BoundComparison {
    if inject {
        let halved = cmp.bound * 0.5;
        cmp.with_bound(halved)
    } else {
        cmp
    }
}

pub fn cmd_verify_bounds(
    cfg: &RunConfig,
    ctx: &RunContext,
) -> Result<VerifyOutcome, ExperimentError> {
    let vcfg: VerifyBoundsConfig = cfg.verify_bounds.clone().unwrap_or_default();
    if vcfg.trials == 0 {
        return Err(ExperimentError::Invalid(
            "verify_bounds.trials must be at least 1".to_string(),
        ));
    }

    let mut grid: Vec<Theorem1Config> = Vec::new();
    for &depth in &vcfg.depths {
        for &slope in &vcfg.leaky_slopes {
            for &r in &vcfg.relative_sizes {
                grid.push(Theorem1Config {
                    depth,
                    width: vcfg.width,
                    nonlinearity: Nonlinearity::leaky_relu(slope).map_err(BoundsError::from)?,
                    relative_size: r,
                });
            }
        }
    }
    if vcfg.include_relu {
        for &depth in &vcfg.depths {
            for &r in &vcfg.relative_sizes {
                grid.push(Theorem1Config {
                    depth,
                    width: vcfg.width,
                    nonlinearity: Nonlinearity::Relu,
                    relative_size: r,
                });
            }
        }
    }

    let base = derive_seed(ctx.seed, seed_tags::TRIALS);
    let theorem_jobs: Vec<(u64, Theorem1Config)> = grid
        .iter()
        .flat_map(|cell| (0..vcfg.trials).map(move |t| (t, *cell)))
        .enumerate()
        .map(|(global, (_, cell))| (base.wrapping_add(global as u64), cell))
        .collect();

    let theorem_results: Result<Vec<(u64, Theorem1Outcome)>, ExperimentError> = theorem_jobs
        .par_iter()
        .map(|&(seed, cell)| {
            let outcome = theorem1_trial(&cell, seed)?;
            Ok((seed, outcome))
        })
        .collect();
    let theorem_results = theorem_results?;

    let b1_base = base.wrapping_add(theorem_jobs.len() as u64);
    let b1_results: Result<Vec<(u64, BoundComparison)>, ExperimentError> = (0..vcfg.trials)
        .into_par_iter()
        .map(|t| {
            let seed = b1_base.wrapping_add(t);
            Ok((seed, lemma_b1_trial(seed)?))
        })
        .collect();
    let b1_results = b1_results?;

    let mut csv_a = ctx.csv("theorem1a.csv", &CSV_HEADER)?;
    let mut csv_b = ctx.csv("theorem1b.csv", &CSV_HEADER)?;
    let mut csv_b1 = ctx.csv("lemma_b1.csv", &CSV_HEADER)?;

    let mut violations = 0u64;
    let mut first_violation_seed: Option<u64> = None;
    let mut note_violation = |seed: u64,
                              cmp: &BoundComparison,
                              violations: &mut u64,
                              first: &mut Option<u64>| {
        if !cmp.satisfied && !cmp.context.hypothesis_violated {
            *violations += 1;
            if first.is_none() {
                *first = Some(seed);
            }
        }
    };

    for (seed, outcome) in &theorem_results {
        let functional = apply_fault(outcome.functional.clone(), vcfg.inject_fault);
        note_violation(*seed, &functional, &mut violations, &mut first_violation_seed);
        csv_a.write_row(comparison_row(*seed, &functional))?;
        for jac in &outcome.jacobians {
            let jac = apply_fault(jac.clone(), vcfg.inject_fault);
            note_violation(*seed, &jac, &mut violations, &mut first_violation_seed);
            csv_b.write_row(comparison_row(*seed, &jac))?;
        }
    }
    for (seed, cmp) in &b1_results {
        let cmp = apply_fault(cmp.clone(), vcfg.inject_fault);
        note_violation(*seed, &cmp, &mut violations, &mut first_violation_seed);
        csv_b1.write_row(comparison_row(*seed, &cmp))?;
    }

    let csv_paths = vec![csv_a.finish()?, csv_b.finish()?, csv_b1.finish()?];

    let theorem1_trials = theorem_jobs.len() as u64;
    let lemma_b1_trials = vcfg.trials;
    ctx.write_summary(
        "verify-bounds",
        serde_json::json!({
            "grid_cells": grid.len(),
            "theorem1_trials": theorem1_trials,
            "lemma_b1_trials": lemma_b1_trials,
            "violations": violations,
            "first_violation_seed": first_violation_seed,
            "inject_fault": vcfg.inject_fault,
        }),
    )?;

    Ok(VerifyOutcome {
        theorem1_trials,
        lemma_b1_trials,
        violations,
        first_violation_seed,
        csv_paths,
    })
}
