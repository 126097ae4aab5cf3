//! Seeded randomized trials for the bound suites.
//!
//! Each trial derives everything from `base_seed + trial_index`, so sweeps
//! can run in any order (or in parallel) and reproduce identically.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::linalg::{singular_extremes, Matrix};
use crate::net::{Init, Mlp, MlpConfig, Nonlinearity};

use super::{
    functional_bound_with, jacobian_bound_with, kappa_note, matrix_conditioning_check,
    measured_kappa, BoundComparison, BoundsError, PerturbationSpec,
};

/// One cell of the Theorem-1 verification grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Theorem1Config {
    pub depth: usize,
    pub width: usize,
    /// Satisfaction is only a theorem for leaky relu and the identity; relu
    /// cells come back flagged `hypothesis_violated`.
    pub nonlinearity: Nonlinearity,
    /// Relative perturbation size applied to every layer.
    pub relative_size: f64,
}

/// Functional (part a) and per-layer Jacobian (part b) comparisons from one
/// random network + perturbation draw.
#[derive(Debug, Clone)]
pub struct Theorem1Outcome {
    pub functional: BoundComparison,
    pub jacobians: Vec<BoundComparison>,
}

impl Theorem1Outcome {
    pub fn all_satisfied(&self) -> bool {
        self.functional.satisfied && self.jacobians.iter().all(|c| c.satisfied)
    }
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            m.set(i, j, StandardNormal.sample(rng));
        }
    }
    m
}

/// Draws a random leaky-relu network, perturbs every layer by exactly
/// `relative_size` in relative Frobenius norm along a random direction, and
/// compares measured functional and Jacobian drift against Theorem 1 with
/// the condition number measured per trial.
pub fn theorem1_trial(cfg: &Theorem1Config, seed: u64) -> Result<Theorem1Outcome, BoundsError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = Mlp::new(MlpConfig {
        widths: vec![cfg.width; cfg.depth + 1],
        nonlinearity: cfg.nonlinearity,
        use_final_nonlinearity: true,
        init: Init::GlorotUniform,
        seed: rng.gen(),
    })?;

    let mut deltas = Vec::with_capacity(net.depth());
    for w in net.weights() {
        let direction = gaussian_matrix(&mut rng, w.rows(), w.cols());
        let dir_norm = direction.frobenius_norm();
        if dir_norm == 0.0 {
            return Err(BoundsError::BadParameter(
                "degenerate zero direction draw".to_string(),
            ));
        }
        deltas.push(direction.scale(cfg.relative_size * w.frobenius_norm() / dir_norm)?);
    }
    let perturbed = net.perturb(&deltas)?;
    let spec = PerturbationSpec::new(&net, deltas)?;
    let (kappa, excluded) = measured_kappa(&net, &perturbed, &spec)?;

    let x = gaussian_matrix(&mut rng, cfg.width, 1);
    let functional =
        functional_bound_with(&net, &perturbed, &x, &spec, kappa, kappa_note(excluded))?;

    let trace = net.forward(&x)?;
    let trace_pert = perturbed.forward(&x)?;
    let mut jacobians = Vec::with_capacity(net.depth());
    for l in 0..net.depth() {
        jacobians.push(jacobian_bound_with(
            &net,
            &perturbed,
            &trace,
            &trace_pert,
            &spec,
            kappa,
            l,
            kappa_note(excluded),
        )?);
    }
    Ok(Theorem1Outcome {
        functional,
        jacobians,
    })
}

/// Draws `M~, M` (condition numbers measured, cap set to their maximum) and
/// `X, Y` including rank-deficient cases, then runs the matrix-matrix
/// conditioning comparison. `M` and `M~` are drawn square or tall: a wide
/// matrix has a kernel, so no finite condition number can lower-bound
/// `|M Y|` and the inequality genuinely fails there.
pub fn lemma_b1_trial(seed: u64) -> Result<BoundComparison, BoundsError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = rng.gen_range(1..=6);
    let n = rng.gen_range(m..=6);
    let p = rng.gen_range(1..=6);
    let q = rng.gen_range(1..=6);

    let mt = gaussian_matrix(&mut rng, n, m);
    let mm = gaussian_matrix(&mut rng, n, m);
    let x = maybe_rank_deficient(&mut rng, m, p);
    let mut y = maybe_rank_deficient(&mut rng, m, q);
    if y.frobenius_norm() == 0.0 {
        y = gaussian_matrix(&mut rng, m, q);
    }

    let cap = singular_extremes(&mt)?
        .kappa
        .max(singular_extremes(&mm)?.kappa);
    matrix_conditioning_check(&mt, &mm, &x, &y, cap)
}

/// Dense, rank-one, or column-zeroed draws in equal proportion. Only `X` and
/// `Y` may be degenerate; the lemma constrains `M` and `M~` alone.
fn maybe_rank_deficient(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    match rng.gen_range(0..3u8) {
        0 => gaussian_matrix(rng, rows, cols),
        1 => {
            let u = gaussian_matrix(rng, rows, 1);
            let v = gaussian_matrix(rng, 1, cols);
            u.matmul(&v).expect("outer product shapes conform")
        }
        _ => {
            let mut m = gaussian_matrix(rng, rows, cols);
            for j in 0..cols {
                if rng.gen_bool(0.5) {
                    for i in 0..rows {
                        m.set(i, j, 0.0);
                    }
                }
            }
            m
        }
    }
}
