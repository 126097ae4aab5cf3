//! Layerwise optimizers and learning-rate schedules.
//!
//! Fromage updates every layer by a fixed relative amount and then applies
//! the `1/sqrt(1 + eta^2)` prefactor that cancels the norm growth LARS
//! suffers on scale-invariant layers. SGD (heavy ball) and Adam are the
//! textbook baselines. A step is a transaction: it consumes `(net, grads)`
//! and produces a fresh network, mutating only the optimizer's own buffers.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{LinalgError, Matrix};
use crate::net::{GradientSet, Mlp, NetError};

/// Frobenius norms below this floor are treated as zero.
pub const EPSILON_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("optimizer is {actual:?}, expected {expected:?}")]
    KindMismatch {
        expected: OptimizerKind,
        actual: OptimizerKind,
    },
    #[error("gradient for layer {layer} is non-finite")]
    NonFiniteGradient { layer: usize },
    #[error("{got} gradients for a depth-{depth} network")]
    GradientCount { got: usize, depth: usize },
    #[error("layer {layer}: gradient is {found_rows}x{found_cols}, weight is {rows}x{cols}")]
    GradientShape {
        layer: usize,
        rows: usize,
        cols: usize,
        found_rows: usize,
        found_cols: usize,
    },
    #[error("invalid hyperparameter: {0}")]
    BadHyper(String),
    #[error("norm clamp carries {got} caps for a depth-{depth} network")]
    ClampCount { got: usize, depth: usize },
    #[error("norm clamp cap for layer {layer} must be positive and finite, got {cap}")]
    BadCap { layer: usize, cap: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Fromage,
    Lars,
    Sgd,
    Adam,
}

#[derive(Debug, Clone)]
enum Algo {
    Fromage,
    Lars {
        weight_decay: f64,
    },
    Sgd {
        momentum: f64,
        velocity: Option<Vec<Matrix>>,
    },
    Adam {
        beta1: f64,
        beta2: f64,
        epsilon: f64,
        first: Option<Vec<Matrix>>,
        second: Option<Vec<Matrix>>,
        step: u64,
    },
}

/// Learning rate, per-layer buffers and optional norm caps for one training
/// run.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    eta: f64,
    epsilon_floor: f64,
    clamp: Option<Vec<f64>>,
    algo: Algo,
}

impl OptimizerState {
    pub fn fromage(eta: f64) -> Result<Self, OptimError> {
        Self::build(eta, Algo::Fromage)
    }

    pub fn lars(eta: f64, weight_decay: f64) -> Result<Self, OptimError> {
        if !(weight_decay.is_finite() && weight_decay >= 0.0) {
            return Err(OptimError::BadHyper(format!(
                "lars weight decay must be finite and nonnegative, got {weight_decay}"
            )));
        }
        Self::build(eta, Algo::Lars { weight_decay })
    }

    pub fn sgd(eta: f64, momentum: f64) -> Result<Self, OptimError> {
        if !(momentum.is_finite() && (0.0..1.0).contains(&momentum)) {
            return Err(OptimError::BadHyper(format!(
                "sgd momentum must lie in [0, 1), got {momentum}"
            )));
        }
        Self::build(
            eta,
            Algo::Sgd {
                momentum,
                velocity: None,
            },
        )
    }

    pub fn adam(eta: f64, beta1: f64, beta2: f64, epsilon: f64) -> Result<Self, OptimError> {
        for (name, b) in [("beta1", beta1), ("beta2", beta2)] {
            if !(b.is_finite() && (0.0..1.0).contains(&b)) {
                return Err(OptimError::BadHyper(format!(
                    "adam {name} must lie in [0, 1), got {b}"
                )));
            }
        }
        if !(epsilon.is_finite() && epsilon > 0.0) {
            return Err(OptimError::BadHyper(format!(
                "adam epsilon must be positive, got {epsilon}"
            )));
        }
        Self::build(
            eta,
            Algo::Adam {
                beta1,
                beta2,
                epsilon,
                first: None,
                second: None,
                step: 0,
            },
        )
    }

    fn build(eta: f64, algo: Algo) -> Result<Self, OptimError> {
        let mut state = OptimizerState {
            eta: 1.0,
            epsilon_floor: EPSILON_FLOOR,
            clamp: None,
            algo,
        };
        state.set_eta(eta)?;
        Ok(state)
    }

    pub fn kind(&self) -> OptimizerKind {
        match self.algo {
            Algo::Fromage => OptimizerKind::Fromage,
            Algo::Lars { .. } => OptimizerKind::Lars,
            Algo::Sgd { .. } => OptimizerKind::Sgd,
            Algo::Adam { .. } => OptimizerKind::Adam,
        }
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn set_eta(&mut self, eta: f64) -> Result<(), OptimError> {
        if !(eta.is_finite() && eta > 0.0) {
            return Err(OptimError::BadHyper(format!(
                "learning rate must be positive and finite, got {eta}"
            )));
        }
        self.eta = eta;
        Ok(())
    }

    /// Adam's step counter; zero until the first step.
    pub fn step_count(&self) -> u64 {
        match self.algo {
            Algo::Adam { step, .. } => step,
            _ => 0,
        }
    }

    /// Records per-layer norm caps for [`apply_norm_clamp`] after each step.
    pub fn enable_clamp(&mut self, initial_norms: Vec<f64>) {
        self.clamp = Some(initial_norms);
    }

    pub fn clamp_norms(&self) -> Option<&[f64]> {
        self.clamp.as_deref()
    }

    /// One optimizer step; dispatches by kind.
    pub fn step(&mut self, net: &Mlp, grads: &GradientSet) -> Result<Mlp, OptimError> {
        validate_grads(net, grads)?;
        let eta = self.eta;
        let floor = self.epsilon_floor;
        let new_weights = match &mut self.algo {
            Algo::Fromage => relative_update(net, grads, eta, floor, true)?,
            Algo::Lars { weight_decay } => {
                let decay = *weight_decay;
                let base = if decay > 0.0 {
                    let scaled: Result<Vec<Matrix>, LinalgError> = net
                        .weights()
                        .iter()
                        .map(|w| w.scale(1.0 - eta * decay))
                        .collect();
                    Some(Mlp::from_parts(net.config().clone(), scaled?)?)
                } else {
                    None
                };
                relative_update(base.as_ref().unwrap_or(net), grads, eta, floor, false)?
            }
            Algo::Sgd { momentum, velocity } => {
                let depth = net.depth();
                let vel = velocity.get_or_insert_with(|| zero_buffers(net));
                ensure_buffer_shapes(net, vel)?;
                let mut new_vel = Vec::with_capacity(depth);
                let mut new_w = Vec::with_capacity(depth);
                for l in 1..=depth {
                    let v = vel[l - 1].scale(*momentum)?.add(grads.grad(l))?;
                    new_w.push(net.weight(l).sub(&v.scale(eta)?)?);
                    new_vel.push(v);
                }
                *velocity = Some(new_vel);
                new_w
            }
            Algo::Adam {
                beta1,
                beta2,
                epsilon,
                first,
                second,
                step,
            } => {
                let depth = net.depth();
                let m = first.get_or_insert_with(|| zero_buffers(net));
                ensure_buffer_shapes(net, m)?;
                let v = second.get_or_insert_with(|| zero_buffers(net));
                ensure_buffer_shapes(net, v)?;
                let t = *step + 1;
                let bc1 = 1.0 - beta1.powi(t as i32);
                let bc2 = 1.0 - beta2.powi(t as i32);
                let (b1, b2, eps) = (*beta1, *beta2, *epsilon);
                let mut new_m = Vec::with_capacity(depth);
                let mut new_v = Vec::with_capacity(depth);
                let mut new_w = Vec::with_capacity(depth);
                for l in 1..=depth {
                    let g = grads.grad(l);
                    let ml = zip(&m[l - 1], g, |mm, gg| b1 * mm + (1.0 - b1) * gg);
                    let vl = zip(&v[l - 1], g, |vv, gg| b2 * vv + (1.0 - b2) * gg * gg);
                    let w = zip3(net.weight(l), &ml, &vl, |ww, mm, vv| {
                        let m_hat = mm / bc1;
                        let v_hat = vv / bc2;
                        ww - eta * m_hat / (v_hat.sqrt() + eps)
                    });
                    new_m.push(ml);
                    new_v.push(vl);
                    new_w.push(w);
                }
                *first = Some(new_m);
                *second = Some(new_v);
                *step = t;
                new_w
            }
        };
        Ok(Mlp::from_parts(net.config().clone(), new_weights)?)
    }
}

/// The shared Fromage/LARS body: `W - eta * (|W|_F / |g|_F) * g`, optionally
/// followed by the `1/sqrt(1 + eta^2)` prefactor. Layers whose gradient norm
/// sits below the floor pass through bitwise unchanged — the prefactor
/// compensates an actual step, so it is skipped along with the step.
fn relative_update(
    net: &Mlp,
    grads: &GradientSet,
    eta: f64,
    floor: f64,
    with_prefactor: bool,
) -> Result<Vec<Matrix>, OptimError> {
    let prefactor = 1.0 / (1.0 + eta * eta).sqrt();
    let mut out = Vec::with_capacity(net.depth());
    for l in 1..=net.depth() {
        let w = net.weight(l);
        let g_norm = grads.norm(l);
        if g_norm < floor {
            out.push(w.clone());
            continue;
        }
        let mut w_norm = w.frobenius_norm();
        if w_norm < floor {
            log::warn!(
                "layer {l}: weight norm {w_norm:e} hit the {floor:e} floor; \
                 relative updates assume nonzero weights"
            );
            w_norm = floor;
        }
        let stepped = w.sub(&grads.grad(l).scale(eta * w_norm / g_norm)?)?;
        out.push(if with_prefactor {
            stepped.scale(prefactor)?
        } else {
            stepped
        });
    }
    Ok(out)
}

/// Fromage step (kind-checked wrapper around [`OptimizerState::step`]).
pub fn fromage_step(
    net: &Mlp,
    grads: &GradientSet,
    state: &mut OptimizerState,
) -> Result<Mlp, OptimError> {
    expect_kind(state, OptimizerKind::Fromage)?;
    state.step(net, grads)
}

pub fn lars_step(
    net: &Mlp,
    grads: &GradientSet,
    state: &mut OptimizerState,
) -> Result<Mlp, OptimError> {
    expect_kind(state, OptimizerKind::Lars)?;
    state.step(net, grads)
}

pub fn sgd_step(
    net: &Mlp,
    grads: &GradientSet,
    state: &mut OptimizerState,
) -> Result<Mlp, OptimError> {
    expect_kind(state, OptimizerKind::Sgd)?;
    state.step(net, grads)
}

pub fn adam_step(
    net: &Mlp,
    grads: &GradientSet,
    state: &mut OptimizerState,
) -> Result<Mlp, OptimError> {
    expect_kind(state, OptimizerKind::Adam)?;
    state.step(net, grads)
}

fn expect_kind(state: &OptimizerState, expected: OptimizerKind) -> Result<(), OptimError> {
    if state.kind() != expected {
        return Err(OptimError::KindMismatch {
            expected,
            actual: state.kind(),
        });
    }
    Ok(())
}

/// Projects each layer back onto its initial norm ball: layers above their
/// cap are rescaled onto it, others pass through bitwise unchanged. The
/// comparison allows 1e-12 relative slack so the projection is idempotent in
/// floating point.
pub fn apply_norm_clamp(net: &Mlp, initial_norms: &[f64]) -> Result<Mlp, OptimError> {
    if initial_norms.len() != net.depth() {
        return Err(OptimError::ClampCount {
            got: initial_norms.len(),
            depth: net.depth(),
        });
    }
    let mut weights = Vec::with_capacity(net.depth());
    for (l, (w, &cap)) in net.weights().iter().zip(initial_norms).enumerate() {
        if !(cap.is_finite() && cap > 0.0) {
            return Err(OptimError::BadCap { layer: l + 1, cap });
        }
        let norm = w.frobenius_norm();
        weights.push(if norm > cap * (1.0 + 1e-12) {
            w.scale(cap / norm)?
        } else {
            w.clone()
        });
    }
    Ok(Mlp::from_parts(net.config().clone(), weights)?)
}

/// Learning-rate schedule over epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    /// `eta * gamma^epoch`.
    Exponential { gamma: f64 },
    /// Multiplies by `factor` whenever the best loss has not improved by at
    /// least 0.1% for `patience` consecutive epochs.
    DecayOnPlateau { factor: f64, patience: usize },
}

impl Schedule {
    pub fn validate(&self) -> Result<(), OptimError> {
        match self {
            Schedule::Constant => Ok(()),
            Schedule::Exponential { gamma } => {
                if !(gamma.is_finite() && *gamma > 0.0 && *gamma < 1.0) {
                    return Err(OptimError::BadHyper(format!(
                        "exponential gamma must lie in (0, 1), got {gamma}"
                    )));
                }
                Ok(())
            }
            Schedule::DecayOnPlateau { factor, patience } => {
                if !(factor.is_finite() && *factor > 0.0 && *factor < 1.0) {
                    return Err(OptimError::BadHyper(format!(
                        "plateau factor must lie in (0, 1), got {factor}"
                    )));
                }
                if *patience == 0 {
                    return Err(OptimError::BadHyper(
                        "plateau patience must be positive".to_string(),
                    ));
                }
                Ok(())
            }
        }
    }
}

/// Learning rate to use at `epoch`, given the per-epoch loss history of all
/// earlier epochs. Pure function of its inputs, so schedules replay
/// identically.
pub fn schedule_eta(schedule: &Schedule, history: &[f64], epoch: usize, base_eta: f64) -> f64 {
    match schedule {
        Schedule::Constant => base_eta,
        Schedule::Exponential { gamma } => base_eta * gamma.powi(epoch as i32),
        Schedule::DecayOnPlateau { factor, patience } => {
            let mut eta = base_eta;
            let mut best = f64::INFINITY;
            let mut stall = 0usize;
            for &loss in history.iter().take(epoch) {
                if loss < best * (1.0 - 1e-3) {
                    best = loss;
                    stall = 0;
                } else {
                    best = best.min(loss);
                    stall += 1;
                    if stall >= *patience {
                        eta *= factor;
                        stall = 0;
                    }
                }
            }
            eta
        }
    }
}

fn validate_grads(net: &Mlp, grads: &GradientSet) -> Result<(), OptimError> {
    if grads.len() != net.depth() {
        return Err(OptimError::GradientCount {
            got: grads.len(),
            depth: net.depth(),
        });
    }
    for l in 1..=net.depth() {
        let (w, g) = (net.weight(l), grads.grad(l));
        if g.shape() != w.shape() {
            return Err(OptimError::GradientShape {
                layer: l,
                rows: w.rows(),
                cols: w.cols(),
                found_rows: g.rows(),
                found_cols: g.cols(),
            });
        }
        if !g.is_finite() {
            return Err(OptimError::NonFiniteGradient { layer: l });
        }
    }
    Ok(())
}

fn zero_buffers(net: &Mlp) -> Vec<Matrix> {
    net.weights()
        .iter()
        .map(|w| Matrix::zeros(w.rows(), w.cols()))
        .collect()
}

fn ensure_buffer_shapes(net: &Mlp, buffers: &[Matrix]) -> Result<(), OptimError> {
    for (l, (w, b)) in net.weights().iter().zip(buffers).enumerate() {
        if w.shape() != b.shape() {
            return Err(OptimError::GradientShape {
                layer: l + 1,
                rows: w.rows(),
                cols: w.cols(),
                found_rows: b.rows(),
                found_cols: b.cols(),
            });
        }
    }
    Ok(())
}

fn zip(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    debug_assert_eq!(a.shape(), b.shape());
    Matrix::from_fn(a.rows(), a.cols(), |i, j| f(a.get(i, j), b.get(i, j)))
}

fn zip3(a: &Matrix, b: &Matrix, c: &Matrix, f: impl Fn(f64, f64, f64) -> f64) -> Matrix {
    debug_assert_eq!(a.shape(), b.shape());
    debug_assert_eq!(a.shape(), c.shape());
    Matrix::from_fn(a.rows(), a.cols(), |i, j| {
        f(a.get(i, j), b.get(i, j), c.get(i, j))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{Init, MlpConfig, Nonlinearity};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_net(seed: u64) -> Mlp {
        Mlp::new(MlpConfig {
            widths: vec![4, 5, 3],
            nonlinearity: Nonlinearity::leaky_relu(0.5).unwrap(),
            use_final_nonlinearity: false,
            init: Init::GlorotUniform,
            seed,
        })
        .unwrap()
    }

    fn random_grads(net: &Mlp, seed: u64) -> GradientSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GradientSet::new(
            net.weights()
                .iter()
                .map(|w| Matrix::from_fn(w.rows(), w.cols(), |_, _| rng.gen_range(-1.0..1.0)))
                .collect(),
        )
    }

    fn zero_grads(net: &Mlp) -> GradientSet {
        GradientSet::new(
            net.weights()
                .iter()
                .map(|w| Matrix::zeros(w.rows(), w.cols()))
                .collect(),
        )
    }

    fn ulps_apart(a: f64, b: f64) -> i64 {
        (a.to_bits() as i64 - b.to_bits() as i64).abs()
    }

    #[test]
    fn fromage_skips_zero_gradient_layers_bitwise() {
        let net = small_net(1);
        let mut state = OptimizerState::fromage(0.01).unwrap();
        let out = fromage_step(&net, &zero_grads(&net), &mut state).unwrap();
        assert_eq!(out.weights(), net.weights());
    }

    #[test]
    fn fromage_pre_prefactor_relative_change_equals_eta() {
        let net = small_net(2);
        let grads = random_grads(&net, 3);
        for eta in [0.001, 0.01, 0.1] {
            let mut lars = OptimizerState::lars(eta, 0.0).unwrap();
            let stepped = lars_step(&net, &grads, &mut lars).unwrap();
            for l in 1..=net.depth() {
                let dw = stepped.weight(l).sub(net.weight(l)).unwrap();
                let rel = dw.frobenius_norm() / net.weight(l).frobenius_norm();
                assert!(
                    (rel - eta).abs() <= 1e-12 * eta,
                    "eta {eta} layer {l}: rel {rel}"
                );
            }
        }
    }

    #[test]
    fn fromage_is_lars_times_prefactor() {
        let net = small_net(4);
        let grads = random_grads(&net, 5);
        let eta = 0.05;
        let mut f = OptimizerState::fromage(eta).unwrap();
        let mut l = OptimizerState::lars(eta, 0.0).unwrap();
        let from = fromage_step(&net, &grads, &mut f).unwrap();
        let lars = lars_step(&net, &grads, &mut l).unwrap();
        let p = 1.0 / (1.0 + eta * eta).sqrt();
        for (a, b) in from.weights().iter().zip(lars.weights()) {
            assert_eq!(a.data(), b.scale(p).unwrap().data());
        }
    }

    #[test]
    fn orthogonal_gradient_norm_behavior() {
        // W = [[1, 0]], g = [[0, 1]]: Fromage preserves the norm exactly,
        // LARS multiplies it by sqrt(1 + eta^2).
        let cfg = MlpConfig {
            widths: vec![2, 1],
            nonlinearity: Nonlinearity::Identity,
            use_final_nonlinearity: true,
            init: Init::GlorotUniform,
            seed: 0,
        };
        let net =
            Mlp::from_parts(cfg, vec![Matrix::from_rows(&[&[1.0, 0.0]]).unwrap()]).unwrap();
        let grads = GradientSet::new(vec![Matrix::from_rows(&[&[0.0, 1.0]]).unwrap()]);
        let eta = 0.01;

        let mut f = OptimizerState::fromage(eta).unwrap();
        let from = fromage_step(&net, &grads, &mut f).unwrap();
        assert!(
            ulps_apart(from.weight(1).frobenius_norm(), 1.0) <= 4,
            "fromage norm {}",
            from.weight(1).frobenius_norm()
        );

        let mut l = OptimizerState::lars(eta, 0.0).unwrap();
        let lars = lars_step(&net, &grads, &mut l).unwrap();
        let expected = (1.0 + eta * eta).sqrt();
        assert!(
            ulps_apart(lars.weight(1).frobenius_norm(), expected) <= 4,
            "lars norm {} vs {expected}",
            lars.weight(1).frobenius_norm()
        );
    }

    #[test]
    fn lars_orthogonal_steps_compound_by_growth_law() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = MlpConfig {
            widths: vec![4, 4],
            nonlinearity: Nonlinearity::Identity,
            use_final_nonlinearity: true,
            init: Init::ScaledGaussian { sigma: 0.5 },
            seed: 8,
        };
        let mut net = Mlp::new(cfg).unwrap();
        let w0 = net.weight(1).frobenius_norm();
        let eta = 0.01;
        let mut state = OptimizerState::lars(eta, 0.0).unwrap();
        let steps = 1000;
        for _ in 0..steps {
            let w = net.weight(1);
            let raw = Matrix::from_fn(4, 4, |_, _| rng.gen_range(-1.0..1.0));
            let coeff =
                raw.inner_product_frobenius(w).unwrap() / w.inner_product_frobenius(w).unwrap();
            let g = raw.sub(&w.scale(coeff).unwrap()).unwrap();
            net = lars_step(&net, &GradientSet::new(vec![g]), &mut state).unwrap();
        }
        let expected = (1.0 + eta * eta).powf(steps as f64 / 2.0) * w0;
        let got = net.weight(1).frobenius_norm();
        assert!(
            (got - expected).abs() <= 1e-6 * expected,
            "{got} vs {expected}"
        );
    }

    #[test]
    fn sgd_without_momentum_is_plain_gradient_descent() {
        let net = small_net(7);
        let grads = random_grads(&net, 8);
        let eta = 0.1;
        let mut state = OptimizerState::sgd(eta, 0.0).unwrap();
        let out = sgd_step(&net, &grads, &mut state).unwrap();
        for l in 1..=net.depth() {
            let expect = net
                .weight(l)
                .sub(&grads.grad(l).scale(eta).unwrap())
                .unwrap();
            assert_eq!(out.weight(l).data(), expect.data());
        }
    }

    #[test]
    fn sgd_momentum_accumulates_velocity() {
        let net = small_net(7);
        let grads = random_grads(&net, 8);
        let (eta, mu) = (0.1, 0.9);
        let mut state = OptimizerState::sgd(eta, mu).unwrap();
        let step1 = state.step(&net, &grads).unwrap();
        let step2 = state.step(&step1, &grads).unwrap();
        // After two constant-gradient steps: W0 - eta*g - eta*(1+mu)*g.
        for l in 1..=net.depth() {
            let g = grads.grad(l);
            let expect = net
                .weight(l)
                .sub(&g.scale(eta).unwrap())
                .unwrap()
                .sub(&g.scale(eta * (1.0 + mu)).unwrap())
                .unwrap();
            let diff = step2.weight(l).sub(&expect).unwrap().frobenius_norm();
            assert!(diff <= 1e-14, "layer {l}: {diff}");
        }
    }

    #[test]
    fn adam_first_step_is_signlike() {
        let net = small_net(10);
        let grads = random_grads(&net, 11);
        let eta = 0.01;
        let mut state = OptimizerState::adam(eta, 0.9, 0.999, 1e-8).unwrap();
        let out = adam_step(&net, &grads, &mut state).unwrap();
        assert_eq!(state.step_count(), 1);
        for l in 1..=net.depth() {
            for (w_new, (w_old, g)) in out
                .weight(l)
                .data()
                .iter()
                .zip(net.weight(l).data().iter().zip(grads.grad(l).data()))
            {
                if g.abs() > 1e-3 {
                    let update = w_new - w_old;
                    let expect = -eta * g.signum();
                    assert!(
                        (update - expect).abs() <= 1e-4 * eta,
                        "update {update} vs {expect} (g = {g})"
                    );
                }
            }
        }
    }

    #[test]
    fn adam_zero_gradient_from_cold_start_leaves_weights() {
        let net = small_net(12);
        let mut state = OptimizerState::adam(0.01, 0.9, 0.999, 1e-8).unwrap();
        let out = adam_step(&net, &zero_grads(&net), &mut state).unwrap();
        assert_eq!(out.weights(), net.weights());
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn adam_step_counter_increments_by_one() {
        let net = small_net(13);
        let grads = random_grads(&net, 14);
        let mut state = OptimizerState::adam(0.001, 0.9, 0.999, 1e-8).unwrap();
        let mut current = net;
        for expected in 1..=5u64 {
            current = state.step(&current, &grads).unwrap();
            assert_eq!(state.step_count(), expected);
        }
    }

    #[test]
    fn nan_gradient_fails_before_any_mutation() {
        let net = small_net(15);
        let mut bad = random_grads(&net, 16).into_matrices();
        bad[0].data_mut()[0] = f64::NAN;
        let grads = GradientSet::new(bad);
        let mut state = OptimizerState::sgd(0.1, 0.9).unwrap();
        assert!(matches!(
            state.step(&net, &grads),
            Err(OptimError::NonFiniteGradient { layer: 1 })
        ));
        // Velocity buffers must not have been touched by the failed step.
        let ok = state.step(&net, &zero_grads(&net)).unwrap();
        assert_eq!(ok.weights(), net.weights());
    }

    #[test]
    fn gradient_shape_mismatch_is_reported() {
        let net = small_net(17);
        let grads = GradientSet::new(vec![Matrix::zeros(5, 4), Matrix::zeros(5, 3)]);
        let mut state = OptimizerState::fromage(0.01).unwrap();
        assert!(matches!(
            state.step(&net, &grads),
            Err(OptimError::GradientShape { layer: 2, .. })
        ));
    }

    #[test]
    fn kind_checked_wrappers_reject_other_states() {
        let net = small_net(18);
        let grads = zero_grads(&net);
        let mut state = OptimizerState::sgd(0.1, 0.0).unwrap();
        assert!(matches!(
            fromage_step(&net, &grads, &mut state),
            Err(OptimError::KindMismatch { .. })
        ));
    }

    #[test]
    fn cold_start_updates_are_descent_directions() {
        let makers: [fn(f64) -> Result<OptimizerState, OptimError>; 4] = [
            |eta| OptimizerState::fromage(eta),
            |eta| OptimizerState::lars(eta, 0.0),
            |eta| OptimizerState::sgd(eta, 0.9),
            |eta| OptimizerState::adam(eta, 0.9, 0.999, 1e-8),
        ];
        for make in makers {
            let net = small_net(19);
            let grads = random_grads(&net, 20);
            let mut state = make(0.01).unwrap();
            let out = state.step(&net, &grads).unwrap();
            for l in 1..=net.depth() {
                let dw = out.weight(l).sub(net.weight(l)).unwrap();
                let ip = dw.inner_product_frobenius(grads.grad(l)).unwrap();
                assert!(ip <= 0.0, "{:?} layer {l}: <dW, g> = {ip}", state.kind());
            }
        }
    }

    #[test]
    fn fromage_scale_equivariance() {
        let net = small_net(21);
        let grads = random_grads(&net, 22);
        let eta = 0.02;
        let c = 3.5;
        let scaled = Mlp::from_parts(
            net.config().clone(),
            net.weights().iter().map(|w| w.scale(c).unwrap()).collect(),
        )
        .unwrap();
        let mut s1 = OptimizerState::lars(eta, 0.0).unwrap();
        let mut s2 = OptimizerState::lars(eta, 0.0).unwrap();
        let step = lars_step(&net, &grads, &mut s1).unwrap();
        let step_scaled = lars_step(&scaled, &grads, &mut s2).unwrap();
        for l in 1..=net.depth() {
            let dw = step.weight(l).sub(net.weight(l)).unwrap();
            let dw_scaled = step_scaled.weight(l).sub(scaled.weight(l)).unwrap();
            let ratio = dw_scaled.frobenius_norm() / dw.frobenius_norm();
            assert!((ratio - c).abs() <= 1e-12 * c, "layer {l}: ratio {ratio}");
            let cos1 = dw.inner_product_frobenius(grads.grad(l)).unwrap()
                / (dw.frobenius_norm() * grads.norm(l));
            let cos2 = dw_scaled.inner_product_frobenius(grads.grad(l)).unwrap()
                / (dw_scaled.frobenius_norm() * grads.norm(l));
            assert!((cos1 - cos2).abs() <= 1e-12);
        }
    }

    #[test]
    fn clamp_within_caps_is_identity() {
        let net = small_net(23);
        let caps: Vec<f64> = net.weight_norms().iter().map(|n| n * 2.0).collect();
        let out = apply_norm_clamp(&net, &caps).unwrap();
        assert_eq!(out.weights(), net.weights());
    }

    #[test]
    fn clamp_projects_onto_cap() {
        let cfg = MlpConfig {
            widths: vec![2, 1],
            nonlinearity: Nonlinearity::Identity,
            use_final_nonlinearity: true,
            init: Init::GlorotUniform,
            seed: 0,
        };
        // Norm 2, cap 1: rescaled to norm exactly 1.
        let net =
            Mlp::from_parts(cfg, vec![Matrix::from_rows(&[&[2.0, 0.0]]).unwrap()]).unwrap();
        let out = apply_norm_clamp(&net, &[1.0]).unwrap();
        assert_eq!(out.weight(1).frobenius_norm(), 1.0);
    }

    #[test]
    fn clamp_is_idempotent_and_never_grows_norms() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        for trial in 0..50 {
            let net = small_net(trial);
            let caps: Vec<f64> = net
                .weight_norms()
                .iter()
                .map(|n| n * rng.gen_range(0.3..1.5))
                .collect();
            let once = apply_norm_clamp(&net, &caps).unwrap();
            let twice = apply_norm_clamp(&once, &caps).unwrap();
            assert_eq!(once.weights(), twice.weights(), "trial {trial}");
            for (w_new, w_old) in once.weights().iter().zip(net.weights()) {
                assert!(w_new.frobenius_norm() <= w_old.frobenius_norm() * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn schedule_constant_and_exponential() {
        assert_eq!(schedule_eta(&Schedule::Constant, &[], 7, 0.01), 0.01);
        let exp = Schedule::Exponential { gamma: 0.9 };
        let eta2 = schedule_eta(&exp, &[], 2, 0.01);
        assert!((eta2 - 0.0081).abs() < 1e-15);
        assert_eq!(schedule_eta(&exp, &[], 0, 0.01), 0.01);
    }

    #[test]
    fn plateau_with_strictly_decreasing_loss_is_constant() {
        let sched = Schedule::DecayOnPlateau {
            factor: 0.1,
            patience: 3,
        };
        let history: Vec<f64> = (0..10).map(|i| 1.0 / (i + 1) as f64).collect();
        assert_eq!(schedule_eta(&sched, &history, 10, 0.5), 0.5);
    }

    #[test]
    fn plateau_decays_after_patience_stalls() {
        let sched = Schedule::DecayOnPlateau {
            factor: 0.1,
            patience: 3,
        };
        // The first epoch sets the running best; three stalls then decay
        // once, the counter resets, and three further stalls decay again.
        let history = [1.0; 7];
        assert!((schedule_eta(&sched, &history, 4, 0.5) - 0.05).abs() < 1e-15);
        assert!((schedule_eta(&sched, &history, 6, 0.5) - 0.05).abs() < 1e-15);
        assert!((schedule_eta(&sched, &history, 7, 0.5) - 0.005).abs() < 1e-15);
    }

    #[test]
    fn hyperparameter_validation() {
        assert!(OptimizerState::fromage(0.0).is_err());
        assert!(OptimizerState::fromage(f64::NAN).is_err());
        assert!(OptimizerState::sgd(0.1, 1.0).is_err());
        assert!(OptimizerState::adam(0.1, 0.9, 1.0, 1e-8).is_err());
        assert!(OptimizerState::adam(0.1, 0.9, 0.999, 0.0).is_err());
        assert!(OptimizerState::lars(0.1, -0.1).is_err());
        assert!(Schedule::Exponential { gamma: 1.0 }.validate().is_err());
        assert!(Schedule::DecayOnPlateau {
            factor: 0.1,
            patience: 0
        }
        .validate()
        .is_err());
    }
}
