//! `norm-growth`: the scale-invariant-layer lesion.
//!
//! A synthetic layer receives gradients with their component along `W`
//! projected out, exactly as a rescaling-invariant layer would. With the
//! Fromage prefactor the weight norm stays put; without it (LARS) the norm
//! compounds as `(1 + eta^2)^(t/2)`.

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::{derive_seed, seed_tags, RunConfig};
use crate::linalg::Matrix;
use crate::net::{GradientSet, Init, Mlp, MlpConfig, Nonlinearity};
use crate::optim::OptimizerState;

use super::{fmt, ExperimentError, RunContext};

#[derive(Debug)]
pub struct NormGrowthOutcome {
    pub initial_norm: f64,
    /// `|W|_F` after each step, `norms[t]` for step `t + 1`.
    pub norms: Vec<f64>,
    pub eta: f64,
    pub with_prefactor: bool,
    pub csv_path: PathBuf,
}

pub fn cmd_norm_growth(
    cfg: &RunConfig,
    ctx: &RunContext,
) -> Result<NormGrowthOutcome, ExperimentError> {
    let gcfg = cfg
        .norm_growth
        .as_ref()
        .ok_or(crate::config::ConfigError::MissingSection {
            command: "norm-growth",
            section: "norm_growth",
        })?;
    if gcfg.steps == 0 {
        return Err(ExperimentError::Invalid(
            "norm_growth.steps must be at least 1".to_string(),
        ));
    }

    let seed = derive_seed(ctx.seed, seed_tags::NORM_GROWTH);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Mlp::new(MlpConfig {
        widths: vec![gcfg.cols, gcfg.rows],
        nonlinearity: Nonlinearity::Identity,
        use_final_nonlinearity: true,
        init: Init::ScaledGaussian { sigma: 0.5 },
        seed: derive_seed(seed, seed_tags::NET_INIT),
    })?;
    let initial_norm = net.weight(1).frobenius_norm();

    let mut state = if gcfg.with_prefactor {
        OptimizerState::fromage(gcfg.eta)?
    } else {
        OptimizerState::lars(gcfg.eta, 0.0)?
    };

    let mut csv = ctx.csv("norm_growth.csv", &["step", "norm", "predicted_norm"])?;
    let mut norms = Vec::with_capacity(gcfg.steps);
    for step in 1..=gcfg.steps {
        let w = net.weight(1);
        let mut raw = Matrix::zeros(gcfg.rows, gcfg.cols);
        for i in 0..gcfg.rows {
            for j in 0..gcfg.cols {
                raw.set(i, j, StandardNormal.sample(&mut rng));
            }
        }
        // Project out the component along W: the gradient of a
        // rescaling-invariant loss is orthogonal to the weights.
        let coeff = raw.inner_product_frobenius(w)? / w.inner_product_frobenius(w)?;
        let grad = raw.sub(&w.scale(coeff)?)?;
        net = state.step(&net, &GradientSet::new(vec![grad]))?;

        let norm = net.weight(1).frobenius_norm();
        let predicted = if gcfg.with_prefactor {
            initial_norm
        } else {
            (1.0 + gcfg.eta * gcfg.eta).powf(step as f64 / 2.0) * initial_norm
        };
        csv.write_row([step.to_string(), fmt(norm), fmt(predicted)])?;
        norms.push(norm);
    }
    let csv_path = csv.finish()?;

    ctx.write_summary(
        "norm-growth",
        serde_json::json!({
            "steps": gcfg.steps,
            "eta": gcfg.eta,
            "with_prefactor": gcfg.with_prefactor,
            "initial_norm": initial_norm,
            "final_norm": norms.last(),
        }),
    )?;

    Ok(NormGrowthOutcome {
        initial_norm,
        norms,
        eta: gcfg.eta,
        with_prefactor: gcfg.with_prefactor,
        csv_path,
    })
}
