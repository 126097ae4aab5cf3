//! Multilayer perceptrons: forward pass with cached hidden states, exact
//! per-layer gradients, and layer-to-output Jacobians.
//!
//! Networks are bias-free compositions `phi(W_L ... phi(W_1 x))`. The final
//! nonlinearity is optional: classification runs use linear logits under
//! softmax cross-entropy, while bound verification keeps `phi` on every
//! layer. An [`Mlp`] is immutable once built; updates construct new values.

mod checkpoint;
mod grad;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use grad::{
    accuracy, jacobian_layer_to_output, loss_and_gradients, loss_and_gradients_with_output,
    loss_value, LossKind, Targets,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{LinalgError, Matrix};

#[derive(Debug, Error)]
pub enum NetError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("invalid network config: {0}")]
    BadConfig(String),
    #[error("input has {found} rows, network expects {expected}")]
    InputDimMismatch { expected: usize, found: usize },
    #[error("layer {layer}: perturbation is {found_rows}x{found_cols}, weight is {rows}x{cols}")]
    DeltaShapeMismatch {
        layer: usize,
        rows: usize,
        cols: usize,
        found_rows: usize,
        found_cols: usize,
    },
    #[error("layer index {layer} out of range for depth {depth}")]
    LayerIndexOutOfRange { layer: usize, depth: usize },
    #[error("jacobian is defined per input; trace holds {cols} columns")]
    JacobianNeedsSingleColumn { cols: usize },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("label {label} at position {index} out of range for {num_classes} classes")]
    LabelOutOfRange {
        index: usize,
        label: usize,
        num_classes: usize,
    },
    #[error("{loss} loss needs {needs} targets")]
    WrongTargetKind { loss: &'static str, needs: &'static str },
    #[error("targets are {found_rows}x{found_cols}, expected {rows}x{cols}")]
    TargetShapeMismatch {
        rows: usize,
        cols: usize,
        found_rows: usize,
        found_cols: usize,
    },
    #[error("layer {layer} initialized to zero Frobenius norm")]
    InitZeroNorm { layer: usize },
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint sidecar json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("bad checkpoint magic {found:?} at offset 0")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported checkpoint version {found}")]
    BadVersion { found: u32 },
    #[error("checkpoint truncated or oversized at byte offset {offset}")]
    CheckpointLength { offset: usize },
    #[error("checkpoint sidecar widths {sidecar:?} disagree with header widths {header:?}")]
    SidecarMismatch {
        header: Vec<usize>,
        sidecar: Vec<usize>,
    },
}

/// Elementwise nonlinearity with its transmission constants.
///
/// `alpha` and `beta` are the lower and upper bounds on how much the map
/// scales vector norms and differences. Leaky relu with slope `a` transmits
/// between `a` and `1`; the identity transmits exactly. Relu genuinely
/// transmits nothing on half its domain, so it is recorded with the model
/// constants `alpha = beta = 1/2` and flagged via
/// [`Nonlinearity::violates_transmission`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    Relu,
    LeakyRelu(f64),
    Identity,
}

impl Nonlinearity {
    pub fn leaky_relu(a: f64) -> Result<Self, NetError> {
        if !(a > 0.0 && a <= 1.0) {
            return Err(NetError::BadConfig(format!(
                "leaky_relu slope must lie in (0, 1], got {a}"
            )));
        }
        Ok(Nonlinearity::LeakyRelu(a))
    }

    pub fn alpha(&self) -> f64 {
        match self {
            Nonlinearity::Relu => 0.5,
            Nonlinearity::LeakyRelu(a) => *a,
            Nonlinearity::Identity => 1.0,
        }
    }

    pub fn beta(&self) -> f64 {
        match self {
            Nonlinearity::Relu => 0.5,
            Nonlinearity::LeakyRelu(_) => 1.0,
            Nonlinearity::Identity => 1.0,
        }
    }

    /// True when the transmission hypothesis fails (relu zeroes half its
    /// domain, so no positive `alpha` exists).
    pub fn violates_transmission(&self) -> bool {
        matches!(self, Nonlinearity::Relu)
    }

    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        match self {
            Nonlinearity::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Nonlinearity::LeakyRelu(a) => {
                if x >= 0.0 {
                    x
                } else {
                    a * x
                }
            }
            Nonlinearity::Identity => x,
        }
    }

    /// Almost-everywhere derivative. At the kink the convention is fixed so
    /// traces are deterministic: relu'(0) = 0, leaky_relu'(0) = a.
    #[inline]
    pub fn derivative(&self, x: f64) -> f64 {
        match self {
            Nonlinearity::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Nonlinearity::LeakyRelu(a) => {
                if x > 0.0 {
                    1.0
                } else {
                    *a
                }
            }
            Nonlinearity::Identity => 1.0,
        }
    }

    fn validate(&self) -> Result<(), NetError> {
        if let Nonlinearity::LeakyRelu(a) = self {
            Self::leaky_relu(*a)?;
        }
        Ok(())
    }
}

/// Weight initialization scheme.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    GlorotUniform,
    /// Semi-orthogonal rows or columns, whichever fit. Keeps every layer at
    /// condition number 1 at initialization, which deep sweeps are
    /// sensitive to.
    Orthogonal,
    ScaledGaussian { sigma: f64 },
}

/// Architecture plus the seed that determines the initial weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    /// Layer widths `n_0 ..= n_L`; length is depth + 1.
    pub widths: Vec<usize>,
    pub nonlinearity: Nonlinearity,
    /// When false the final layer emits raw pre-activations (logits).
    pub use_final_nonlinearity: bool,
    pub init: Init,
    pub seed: u64,
}

impl MlpConfig {
    pub fn depth(&self) -> usize {
        self.widths.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.widths.len() < 2 {
            return Err(NetError::BadConfig(format!(
                "widths must list input and output, got {:?}",
                self.widths
            )));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(NetError::BadConfig(format!(
                "all widths must be positive, got {:?}",
                self.widths
            )));
        }
        self.nonlinearity.validate()?;
        if let Init::ScaledGaussian { sigma } = self.init {
            if !(sigma.is_finite() && sigma > 0.0) {
                return Err(NetError::BadConfig(format!(
                    "scaled_gaussian sigma must be positive, got {sigma}"
                )));
            }
        }
        Ok(())
    }
}

/// Bias-free multilayer perceptron. `weights[l]` maps width `n_l` to
/// `n_{l+1}` (shape `n_{l+1} x n_l`).
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    config: MlpConfig,
    weights: Vec<Matrix>,
}

impl Mlp {
    /// Builds and initializes a network from its config.
    pub fn new(config: MlpConfig) -> Result<Self, NetError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut weights = Vec::with_capacity(config.depth());
        for l in 0..config.depth() {
            let (fan_out, fan_in) = (config.widths[l + 1], config.widths[l]);
            let w = match config.init {
                Init::GlorotUniform => {
                    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    Matrix::from_fn(fan_out, fan_in, |_, _| rng.gen_range(-limit..limit))
                }
                Init::Orthogonal => orthogonal_matrix(&mut rng, fan_out, fan_in)?,
                Init::ScaledGaussian { sigma } => Matrix::from_fn(fan_out, fan_in, |_, _| {
                    sigma * rng.sample::<f64, _>(StandardNormal)
                }),
            };
            if w.frobenius_norm() == 0.0 {
                return Err(NetError::InitZeroNorm { layer: l + 1 });
            }
            weights.push(w);
        }
        Ok(Mlp { config, weights })
    }

    /// Assembles a network from existing weights, validating shapes against
    /// the config. Used by optimizer steps and checkpoint loading.
    pub fn from_parts(config: MlpConfig, weights: Vec<Matrix>) -> Result<Self, NetError> {
        config.validate()?;
        if weights.len() != config.depth() {
            return Err(NetError::BadConfig(format!(
                "{} weight matrices for depth {}",
                weights.len(),
                config.depth()
            )));
        }
        for (l, w) in weights.iter().enumerate() {
            let expected = (config.widths[l + 1], config.widths[l]);
            if w.shape() != expected {
                return Err(NetError::DeltaShapeMismatch {
                    layer: l + 1,
                    rows: expected.0,
                    cols: expected.1,
                    found_rows: w.rows(),
                    found_cols: w.cols(),
                });
            }
            if !w.is_finite() {
                return Err(LinalgError::NonFinite {
                    op: "from_parts",
                    row: 0,
                    col: 0,
                }
                .into());
            }
        }
        Ok(Mlp { config, weights })
    }

    pub fn config(&self) -> &MlpConfig {
        &self.config
    }

    pub fn depth(&self) -> usize {
        self.config.depth()
    }

    pub fn input_dim(&self) -> usize {
        self.config.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.config.widths.last().expect("validated widths")
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    /// Weight matrix of layer `l` in `1..=depth`.
    pub fn weight(&self, l: usize) -> &Matrix {
        &self.weights[l - 1]
    }

    pub fn weight_norms(&self) -> Vec<f64> {
        self.weights.iter().map(Matrix::frobenius_norm).collect()
    }

    /// Whether layer `l` in `1..=depth` applies the nonlinearity.
    fn layer_applies_phi(&self, l: usize) -> bool {
        l < self.depth() || self.config.use_final_nonlinearity
    }

    /// Runs the network on a batch of column vectors, caching hidden states
    /// and pre-activations.
    pub fn forward(&self, x: &Matrix) -> Result<ForwardTrace, NetError> {
        if x.rows() != self.input_dim() {
            return Err(NetError::InputDimMismatch {
                expected: self.input_dim(),
                found: x.rows(),
            });
        }
        let phi = self.config.nonlinearity;
        let mut hidden = Vec::with_capacity(self.depth() + 1);
        let mut pre = Vec::with_capacity(self.depth());
        hidden.push(x.clone());
        for l in 1..=self.depth() {
            let z = self.weight(l).matmul(hidden.last().expect("nonempty"))?;
            let h = if self.layer_applies_phi(l) {
                z.map(|v| phi.apply(v))
            } else {
                z.clone()
            };
            pre.push(z);
            hidden.push(h);
        }
        Ok(ForwardTrace { hidden, pre })
    }

    /// Returns a fresh network with weights `W_l + delta_l`; the original is
    /// untouched.
    pub fn perturb(&self, deltas: &[Matrix]) -> Result<Mlp, NetError> {
        if deltas.len() != self.depth() {
            return Err(NetError::BadConfig(format!(
                "{} deltas for depth {}",
                deltas.len(),
                self.depth()
            )));
        }
        let mut weights = Vec::with_capacity(self.depth());
        for (l, (w, d)) in self.weights.iter().zip(deltas).enumerate() {
            if w.shape() != d.shape() {
                return Err(NetError::DeltaShapeMismatch {
                    layer: l + 1,
                    rows: w.rows(),
                    cols: w.cols(),
                    found_rows: d.rows(),
                    found_cols: d.cols(),
                });
            }
            weights.push(w.add(d)?);
        }
        Ok(Mlp {
            config: self.config.clone(),
            weights,
        })
    }
}

/// Semi-orthogonal matrix via modified Gram-Schmidt on Gaussian vectors.
fn orthogonal_matrix(
    rng: &mut ChaCha8Rng,
    rows: usize,
    cols: usize,
) -> Result<Matrix, NetError> {
    let (n_vecs, len, transpose) = if rows <= cols {
        (rows, cols, false)
    } else {
        (cols, rows, true)
    };
    let mut vecs: Vec<Vec<f64>> = (0..n_vecs)
        .map(|_| {
            (0..len)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    for i in 0..n_vecs {
        for j in 0..i {
            let dot: f64 = vecs[i].iter().zip(&vecs[j]).map(|(a, b)| a * b).sum();
            let (head, tail) = vecs.split_at_mut(i);
            for (v, &u) in tail[0].iter_mut().zip(&head[j]) {
                *v -= dot * u;
            }
        }
        let norm: f64 = vecs[i].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(NetError::BadConfig(
                "orthogonal init drew degenerate vectors".to_string(),
            ));
        }
        for v in &mut vecs[i] {
            *v /= norm;
        }
    }
    let flat: Vec<f64> = vecs.into_iter().flatten().collect();
    let m = Matrix::from_vec(n_vecs, len, flat).map_err(NetError::from)?;
    Ok(if transpose { m.transpose() } else { m })
}

/// Cached states of one forward pass: `hidden[l] = h_l` (with `h_0 = x`) and
/// `pre[l-1] = z_l = W_l h_{l-1}`.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    hidden: Vec<Matrix>,
    pre: Vec<Matrix>,
}

impl ForwardTrace {
    pub fn input(&self) -> &Matrix {
        &self.hidden[0]
    }

    pub fn output(&self) -> &Matrix {
        self.hidden.last().expect("trace has h_0")
    }

    /// Hidden state `h_l`, `0 <= l <= L`.
    pub fn hidden(&self, l: usize) -> &Matrix {
        &self.hidden[l]
    }

    /// Pre-activation `z_l`, `1 <= l <= L`.
    pub fn pre_activation(&self, l: usize) -> &Matrix {
        &self.pre[l - 1]
    }

    pub fn batch_size(&self) -> usize {
        self.hidden[0].cols()
    }
}

/// Per-layer gradients with cached Frobenius norms.
#[derive(Debug, Clone)]
pub struct GradientSet {
    grads: Vec<Matrix>,
    norms: Vec<f64>,
}

impl GradientSet {
    pub fn new(grads: Vec<Matrix>) -> Self {
        let norms = grads.iter().map(Matrix::frobenius_norm).collect();
        GradientSet { grads, norms }
    }

    pub fn grads(&self) -> &[Matrix] {
        &self.grads
    }

    /// Gradient of layer `l` in `1..=depth`.
    pub fn grad(&self, l: usize) -> &Matrix {
        &self.grads[l - 1]
    }

    pub fn norms(&self) -> &[f64] {
        &self.norms
    }

    pub fn norm(&self, l: usize) -> f64 {
        self.norms[l - 1]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn into_matrices(self) -> Vec<Matrix> {
        self.grads
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(Matrix::is_finite)
    }
}
