//! Perturbation bounds computed side by side with the quantities they bound.
//!
//! Every operation returns a [`BoundComparison`] carrying the measured value,
//! the bound, and a satisfaction flag with a 1e-9 relative tolerance for
//! float round-off. Condition numbers are always measured, never assumed;
//! zero perturbation matrices are excluded from the kappa maximum (they only
//! tighten the true difference) and the exclusion is noted in the report.
//! Relu networks pass through every operation but their reports carry
//! `hypothesis_violated`, since no positive transmission constant exists for
//! relu.

pub mod trials;

use thiserror::Error;

use crate::linalg::{singular_extremes, LinalgError, Matrix};
use crate::net::{
    jacobian_layer_to_output, loss_and_gradients, ForwardTrace, GradientSet, LossKind, Mlp,
    NetError, Targets,
};

/// Relative tolerance absorbing float round-off in `satisfied`.
pub const SATISFACTION_REL_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum BoundsError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("toy bound needs nonzero a and b")]
    ZeroToyParameter,
    #[error("networks differ in architecture: {0}")]
    ArchMismatch(String),
    #[error("relative difference undefined: f(x) = 0")]
    RelativeDifferenceUndefined,
    #[error("transmission hypothesis fails: alpha = 0")]
    TransmissionFails,
    #[error("layer {layer} weight matrix has zero norm")]
    ZeroWeightLayer { layer: usize },
    #[error("layer-{layer}-to-output jacobian is zero")]
    ZeroJacobian { layer: usize },
    #[error("layer {layer} gradient is zero")]
    ZeroGradientLayer { layer: usize },
    #[error("denominator |M Y| is zero")]
    DenominatorZero,
    #[error("{which} has condition number {kappa}, above the stated cap {cap}")]
    KappaCapExceeded {
        which: &'static str,
        kappa: f64,
        cap: f64,
    },
    #[error("bound operations take a single input column, got {cols}")]
    SingleColumnRequired { cols: usize },
    #[error("invalid parameter: {0}")]
    BadParameter(String),
}

/// Where a comparison came from: architecture constants and the measured
/// condition number, when they apply.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundContext {
    pub depth: Option<usize>,
    pub layer: Option<usize>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub kappa: Option<f64>,
    /// Largest per-layer relative perturbation, when one is in play.
    pub r_max: Option<f64>,
    pub hypothesis_violated: bool,
    pub note: Option<String>,
}

impl BoundContext {
    fn bare() -> Self {
        BoundContext {
            depth: None,
            layer: None,
            alpha: None,
            beta: None,
            kappa: None,
            r_max: None,
            hypothesis_violated: false,
            note: None,
        }
    }
}

/// A measured quantity next to the bound that is supposed to dominate it.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundComparison {
    pub measured: f64,
    pub bound: f64,
    pub satisfied: bool,
    /// `bound - measured`.
    pub slack: f64,
    pub context: BoundContext,
}

impl BoundComparison {
    fn new(measured: f64, bound: f64, context: BoundContext) -> Self {
        let satisfied = measured <= bound + SATISFACTION_REL_TOL * bound.abs();
        BoundComparison {
            measured,
            bound,
            satisfied,
            slack: bound - measured,
            context,
        }
    }

    /// Re-evaluates this comparison against a replacement bound. Exists for
    /// the verify-bounds fault-injection self-test, which halves every bound
    /// to prove the harness can fail.
    pub fn with_bound(&self, bound: f64) -> Self {
        Self::new(self.measured, bound, self.context.clone())
    }
}

/// Two-scalar toy bound: for `f(x) = a*b*x` perturbed to
/// `(a+da)(b+db)x`, the relative difference is bounded by
/// `(1 + |da|/|a|)(1 + |db|/|b|) - 1`, with equality when the relative
/// perturbations share signs.
pub fn toy_scalar_bound(a: f64, b: f64, da: f64, db: f64) -> Result<BoundComparison, BoundsError> {
    if a == 0.0 || b == 0.0 {
        return Err(BoundsError::ZeroToyParameter);
    }
    let measured = ((a + da) * (b + db) - a * b).abs() / (a * b).abs();
    let bound = (1.0 + da.abs() / a.abs()) * (1.0 + db.abs() / b.abs()) - 1.0;
    let context = BoundContext {
        depth: Some(2),
        alpha: Some(1.0),
        beta: Some(1.0),
        kappa: Some(1.0),
        ..BoundContext::bare()
    };
    Ok(BoundComparison::new(measured, bound, context))
}

/// Layerwise perturbation deltas together with their relative sizes
/// `r_k = |delta_k|_F / |W_k|_F`.
#[derive(Debug, Clone)]
pub struct PerturbationSpec {
    deltas: Vec<Matrix>,
    relative_sizes: Vec<f64>,
}

impl PerturbationSpec {
    pub fn new(net: &Mlp, deltas: Vec<Matrix>) -> Result<Self, BoundsError> {
        if deltas.len() != net.depth() {
            return Err(BoundsError::ArchMismatch(format!(
                "{} deltas for depth {}",
                deltas.len(),
                net.depth()
            )));
        }
        let mut relative_sizes = Vec::with_capacity(deltas.len());
        for (l, (w, d)) in net.weights().iter().zip(&deltas).enumerate() {
            if w.shape() != d.shape() {
                return Err(BoundsError::ArchMismatch(format!(
                    "layer {}: delta is {}x{}, weight is {}x{}",
                    l + 1,
                    d.rows(),
                    d.cols(),
                    w.rows(),
                    w.cols()
                )));
            }
            let w_norm = w.frobenius_norm();
            if w_norm == 0.0 {
                return Err(BoundsError::ZeroWeightLayer { layer: l + 1 });
            }
            relative_sizes.push(d.frobenius_norm() / w_norm);
        }
        Ok(PerturbationSpec {
            deltas,
            relative_sizes,
        })
    }

    /// Deltas between two architecturally identical networks.
    pub fn between(net: &Mlp, perturbed: &Mlp) -> Result<Self, BoundsError> {
        ensure_same_arch(net, perturbed)?;
        let deltas: Result<Vec<Matrix>, LinalgError> = perturbed
            .weights()
            .iter()
            .zip(net.weights())
            .map(|(wt, w)| wt.sub(w))
            .collect();
        Self::new(net, deltas?)
    }

    pub fn deltas(&self) -> &[Matrix] {
        &self.deltas
    }

    pub fn relative_sizes(&self) -> &[f64] {
        &self.relative_sizes
    }
}

/// Deep-relative-trust distance model: `prod_k (1 + r_k) - 1`.
pub fn drt_model(relative_sizes: &[f64]) -> f64 {
    debug_assert!(relative_sizes.iter().all(|r| *r >= 0.0));
    relative_sizes.iter().fold(1.0, |acc, r| acc * (1.0 + r)) - 1.0
}

/// Largest measured condition number over weights, perturbed weights and
/// nonzero deltas. Returns the kappa and how many zero deltas were skipped.
fn measured_kappa(
    net: &Mlp,
    perturbed: &Mlp,
    spec: &PerturbationSpec,
) -> Result<(f64, usize), BoundsError> {
    let mut kappa = 1.0_f64;
    for w in net.weights().iter().chain(perturbed.weights()) {
        kappa = kappa.max(singular_extremes(w)?.kappa);
    }
    let mut excluded = 0usize;
    for d in spec.deltas() {
        if d.frobenius_norm() == 0.0 {
            excluded += 1;
            continue;
        }
        kappa = kappa.max(singular_extremes(d)?.kappa);
    }
    Ok((kappa, excluded))
}

fn ensure_same_arch(net: &Mlp, perturbed: &Mlp) -> Result<(), BoundsError> {
    if net.config().widths != perturbed.config().widths
        || net.config().nonlinearity != perturbed.config().nonlinearity
        || net.config().use_final_nonlinearity != perturbed.config().use_final_nonlinearity
    {
        return Err(BoundsError::ArchMismatch(format!(
            "{:?} vs {:?}",
            net.config(),
            perturbed.config()
        )));
    }
    Ok(())
}

fn ensure_single_column(x: &Matrix) -> Result<(), BoundsError> {
    if x.cols() != 1 {
        return Err(BoundsError::SingleColumnRequired { cols: x.cols() });
    }
    Ok(())
}

fn transmission(net: &Mlp) -> Result<(f64, f64), BoundsError> {
    let phi = net.config().nonlinearity;
    let (alpha, beta) = (phi.alpha(), phi.beta());
    if alpha == 0.0 {
        return Err(BoundsError::TransmissionFails);
    }
    Ok((alpha, beta))
}

fn kappa_note(excluded: usize) -> Option<String> {
    if excluded > 0 {
        Some(format!(
            "{excluded} zero-perturbation layer(s) excluded from the kappa maximum"
        ))
    } else {
        None
    }
}

/// Relative functional difference `|f~(x) - f(x)| / |f(x)|` against the
/// bound `(beta/alpha * kappa^2)^L * [prod_k (1 + r_k) - 1]`.
pub fn functional_bound(
    net: &Mlp,
    perturbed: &Mlp,
    x: &Matrix,
) -> Result<BoundComparison, BoundsError> {
    let spec = PerturbationSpec::between(net, perturbed)?;
    let (kappa, excluded) = measured_kappa(net, perturbed, &spec)?;
    functional_bound_with(net, perturbed, x, &spec, kappa, kappa_note(excluded))
}

pub(crate) fn functional_bound_with(
    net: &Mlp,
    perturbed: &Mlp,
    x: &Matrix,
    spec: &PerturbationSpec,
    kappa: f64,
    note: Option<String>,
) -> Result<BoundComparison, BoundsError> {
    ensure_single_column(x)?;
    let (alpha, beta) = transmission(net)?;
    let f = net.forward(x)?;
    let ft = perturbed.forward(x)?;
    let f_norm = f.output().frobenius_norm();
    if f_norm == 0.0 {
        return Err(BoundsError::RelativeDifferenceUndefined);
    }
    let measured = ft.output().sub(f.output())?.frobenius_norm() / f_norm;

    let depth = net.depth();
    let product_term = drt_model(spec.relative_sizes());
    // An infinite kappa with a zero product term would produce inf * 0; the
    // bound is genuinely 0 there (identical networks).
    let bound = if product_term == 0.0 {
        0.0
    } else {
        (beta / alpha * kappa * kappa).powi(depth as i32) * product_term
    };
    let context = BoundContext {
        depth: Some(depth),
        layer: None,
        alpha: Some(alpha),
        beta: Some(beta),
        kappa: Some(kappa),
        r_max: max_relative_size(spec),
        hypothesis_violated: net.config().nonlinearity.violates_transmission(),
        note,
    };
    Ok(BoundComparison::new(measured, bound, context))
}

fn max_relative_size(spec: &PerturbationSpec) -> Option<f64> {
    spec.relative_sizes()
        .iter()
        .copied()
        .fold(None, |acc: Option<f64>, r| {
            Some(acc.map_or(r, |a| a.max(r)))
        })
}

/// Relative Jacobian difference `|J~_l - J_l|_F / |J_l|_F` against the bound
/// `(beta/alpha * kappa^2)^(L-l) * [prod_{k=l+1..L} (beta/alpha)(1 + r_k) - 1]`.
pub fn jacobian_bound(
    net: &Mlp,
    perturbed: &Mlp,
    x: &Matrix,
    l: usize,
) -> Result<BoundComparison, BoundsError> {
    let spec = PerturbationSpec::between(net, perturbed)?;
    let (kappa, excluded) = measured_kappa(net, perturbed, &spec)?;
    ensure_single_column(x)?;
    let trace = net.forward(x)?;
    let trace_pert = perturbed.forward(x)?;
    jacobian_bound_with(
        net,
        perturbed,
        &trace,
        &trace_pert,
        &spec,
        kappa,
        l,
        kappa_note(excluded),
    )
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn jacobian_bound_with(
    net: &Mlp,
    perturbed: &Mlp,
    trace: &ForwardTrace,
    trace_pert: &ForwardTrace,
    spec: &PerturbationSpec,
    kappa: f64,
    l: usize,
    note: Option<String>,
) -> Result<BoundComparison, BoundsError> {
    let (alpha, beta) = transmission(net)?;
    let depth = net.depth();
    let j = jacobian_layer_to_output(trace, net, l)?;
    let jt = jacobian_layer_to_output(trace_pert, perturbed, l)?;
    let j_norm = j.frobenius_norm();
    if j_norm == 0.0 {
        return Err(BoundsError::ZeroJacobian { layer: l });
    }
    let measured = jt.sub(&j)?.frobenius_norm() / j_norm;

    let ratio = beta / alpha;
    let tail_product = spec.relative_sizes()[l..]
        .iter()
        .fold(1.0, |acc, r| acc * ratio * (1.0 + r))
        - 1.0;
    let bound = if tail_product == 0.0 {
        0.0
    } else {
        (ratio * kappa * kappa).powi((depth - l) as i32) * tail_product
    };
    let context = BoundContext {
        depth: Some(depth),
        layer: Some(l),
        alpha: Some(alpha),
        beta: Some(beta),
        kappa: Some(kappa),
        r_max: max_relative_size(spec),
        hypothesis_violated: net.config().nonlinearity.violates_transmission(),
        note,
    };
    Ok(BoundComparison::new(measured, bound, context))
}

/// Relative matrix-matrix conditioning: with `kappa(M), kappa(M~) <= cap`,
/// `|M~ X|_F / |M Y|_F <= cap^2 * |M~|_F |X|_F / (|M|_F |Y|_F)`. The caps are
/// verified against measured condition numbers before comparing.
///
/// The inequality lower-bounds `|M Y|` by the smallest singular value of
/// `M`, so it constrains only `M` and `M~`; `X` and `Y` may be arbitrarily
/// rank-deficient. `M` itself must act without a kernel for that step to
/// mean anything: pass `M` with at least as many rows as columns.
pub fn matrix_conditioning_check(
    mt: &Matrix,
    m: &Matrix,
    x: &Matrix,
    y: &Matrix,
    kappa_cap: f64,
) -> Result<BoundComparison, BoundsError> {
    if mt.shape() != m.shape() {
        return Err(BoundsError::ArchMismatch(format!(
            "M~ is {}x{}, M is {}x{}",
            mt.rows(),
            mt.cols(),
            m.rows(),
            m.cols()
        )));
    }
    if !(kappa_cap >= 1.0) {
        return Err(BoundsError::BadParameter(format!(
            "kappa cap must be at least 1, got {kappa_cap}"
        )));
    }
    for (which, matrix) in [("M~", mt), ("M", m)] {
        let kappa = singular_extremes(matrix)?.kappa;
        if !(kappa <= kappa_cap) {
            return Err(BoundsError::KappaCapExceeded {
                which,
                kappa,
                cap: kappa_cap,
            });
        }
    }
    let my_norm = m.matmul(y)?.frobenius_norm();
    if my_norm == 0.0 {
        return Err(BoundsError::DenominatorZero);
    }
    let measured = mt.matmul(x)?.frobenius_norm() / my_norm;
    let bound = kappa_cap * kappa_cap * mt.frobenius_norm() * x.frobenius_norm()
        / (m.frobenius_norm() * y.frobenius_norm());
    let context = BoundContext {
        kappa: Some(kappa_cap),
        ..BoundContext::bare()
    };
    Ok(BoundComparison::new(measured, bound, context))
}

/// Descent threshold `(1 + cos_theta)^(1/L) - 1`: relative step sizes below
/// it guarantee descent under the deep-relative-trust model. Nonpositive
/// values mean no guaranteed descent; `cos_theta = -1` degenerates to -1.
pub fn descent_threshold(depth: usize, cos_theta: f64) -> Result<f64, BoundsError> {
    if depth == 0 {
        return Err(BoundsError::BadParameter(
            "depth must be positive".to_string(),
        ));
    }
    if !(-1.0..=1.0).contains(&cos_theta) {
        return Err(BoundsError::BadParameter(format!(
            "cos_theta must lie in [-1, 1], got {cos_theta}"
        )));
    }
    Ok((1.0 + cos_theta).powf(1.0 / depth as f64) - 1.0)
}

/// Relative gradient breakdown `|g_l(W + dW) - g_l(W)|_F / |g_l(W)|_F` on
/// the provided batch.
pub fn gradient_breakdown_measured(
    net: &Mlp,
    deltas: &[Matrix],
    x: &Matrix,
    targets: &Targets,
    kind: LossKind,
    l: usize,
) -> Result<f64, BoundsError> {
    let (_, base) = loss_and_gradients(net, x, targets, kind)?;
    if base.norm(l) == 0.0 {
        return Err(BoundsError::ZeroGradientLayer { layer: l });
    }
    let perturbed = net.perturb(deltas)?;
    let (_, moved) = loss_and_gradients(&perturbed, x, targets, kind)?;
    Ok(moved.grad(l).sub(base.grad(l))?.frobenius_norm() / base.norm(l))
}

/// Both sides of the fundamental-theorem-of-calculus descent inequality.
///
/// `measured` is the realized loss change `L(W + dW) - L(W)`; `bound` is
/// `-sum_l |g_l| |dW_l| [cos theta_l - max_t |g_l(W + t dW) - g_l| / |g_l|]`
/// with the max taken over a uniform `t` grid on `[0, 1]`. The grid is an
/// approximation: the report notes how much a doubled grid moves the max, so
/// a `satisfied` verdict is evidence rather than proof.
pub fn descent_inequality_check(
    net: &Mlp,
    deltas: &[Matrix],
    x: &Matrix,
    targets: &Targets,
    kind: LossKind,
    t_grid_size: usize,
) -> Result<BoundComparison, BoundsError> {
    if t_grid_size < 2 {
        return Err(BoundsError::BadParameter(format!(
            "t grid needs at least 2 points, got {t_grid_size}"
        )));
    }
    let (loss0, base) = loss_and_gradients(net, x, targets, kind)?;
    let depth = net.depth();
    for l in 1..=depth {
        if base.norm(l) == 0.0 {
            return Err(BoundsError::ZeroGradientLayer { layer: l });
        }
    }
    let spec = PerturbationSpec::new(net, deltas.to_vec())?;

    let grads_at = |t: f64| -> Result<GradientSet, BoundsError> {
        let scaled: Result<Vec<Matrix>, LinalgError> =
            spec.deltas().iter().map(|d| d.scale(t)).collect();
        let shifted = net.perturb(&scaled?)?;
        let (_, g) = loss_and_gradients(&shifted, x, targets, kind)?;
        Ok(g)
    };

    let breakdown_over = |ts: &[f64]| -> Result<Vec<f64>, BoundsError> {
        let mut max_ratio = vec![0.0_f64; depth];
        for &t in ts {
            let g = grads_at(t)?;
            for l in 1..=depth {
                let ratio = g.grad(l).sub(base.grad(l))?.frobenius_norm() / base.norm(l);
                max_ratio[l - 1] = max_ratio[l - 1].max(ratio);
            }
        }
        Ok(max_ratio)
    };

    let coarse_ts: Vec<f64> = (0..t_grid_size)
        .map(|i| i as f64 / (t_grid_size - 1) as f64)
        .collect();
    let breakdown = breakdown_over(&coarse_ts)?;
    // Refinement check: add the grid midpoints and see how far the max moves.
    let midpoints: Vec<f64> = coarse_ts.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
    let mid_breakdown = breakdown_over(&midpoints)?;
    let mut refinement_delta = 0.0_f64;
    for l in 0..depth {
        let refined = breakdown[l].max(mid_breakdown[l]);
        if refined > 0.0 {
            refinement_delta = refinement_delta.max((refined - breakdown[l]) / refined);
        }
    }

    let perturbed = net.perturb(deltas)?;
    let loss1 = crate::net::loss_value(&perturbed, x, targets, kind)?;
    let measured = loss1 - loss0;

    let mut bound = 0.0;
    for l in 1..=depth {
        let d = &spec.deltas()[l - 1];
        let d_norm = d.frobenius_norm();
        if d_norm == 0.0 {
            continue;
        }
        let cos_theta =
            -d.inner_product_frobenius(base.grad(l))? / (d_norm * base.norm(l));
        bound -= base.norm(l) * d_norm * (cos_theta - breakdown[l - 1]);
    }

    let phi = net.config().nonlinearity;
    let context = BoundContext {
        depth: Some(depth),
        layer: None,
        alpha: Some(phi.alpha()),
        beta: Some(phi.beta()),
        kappa: None,
        r_max: max_relative_size(&spec),
        hypothesis_violated: phi.violates_transmission(),
        note: Some(format!(
            "t-grid max is approximate; doubling the grid moved it by {refinement_delta:.3e} relative"
        )),
    };
    Ok(BoundComparison::new(measured, bound, context))
}
