//! Loss evaluation, exact per-layer gradients via reverse accumulation, and
//! the layer-to-output Jacobian.

use crate::linalg::Matrix;

use super::{GradientSet, Mlp, NetError, Nonlinearity};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    SoftmaxCrossEntropy,
    MeanSquaredError,
}

/// Supervision for a batch of column vectors.
#[derive(Debug, Clone)]
pub enum Targets {
    /// Class indices for softmax cross-entropy.
    Classes {
        labels: Vec<usize>,
        num_classes: usize,
    },
    /// Dense targets, one column per example, for mean squared error.
    Values(Matrix),
}

/// Mean loss over the batch and the exact gradient of that mean with respect
/// to every weight matrix.
pub fn loss_and_gradients(
    net: &Mlp,
    x: &Matrix,
    targets: &Targets,
    kind: LossKind,
) -> Result<(f64, GradientSet), NetError> {
    let (loss, grads, _) = loss_and_gradients_with_output(net, x, targets, kind)?;
    Ok((loss, grads))
}

/// Like [`loss_and_gradients`] but also hands back the network output, so
/// training loops get batch accuracy out of the same forward pass.
pub fn loss_and_gradients_with_output(
    net: &Mlp,
    x: &Matrix,
    targets: &Targets,
    kind: LossKind,
) -> Result<(f64, GradientSet, Matrix), NetError> {
    let trace = net.forward(x)?;
    let (loss, dldf) = loss_and_output_grad(trace.output(), targets, kind)?;
    let depth = net.depth();
    let phi = net.config().nonlinearity;

    let mut delta = if net.layer_applies_phi(depth) {
        mul_derivative(&dldf, trace.pre_activation(depth), phi)
    } else {
        dldf
    };
    let mut grads: Vec<Matrix> = Vec::with_capacity(depth);
    for l in (1..=depth).rev() {
        grads.push(delta.matmul(&trace.hidden(l - 1).transpose())?);
        if l > 1 {
            let back = net.weight(l).transpose().matmul(&delta)?;
            delta = mul_derivative(&back, trace.pre_activation(l - 1), phi);
        }
    }
    grads.reverse();
    let output = trace.output().clone();
    Ok((loss, GradientSet::new(grads), output))
}

/// Mean loss over the batch without gradients. Shares the forward path with
/// [`loss_and_gradients`].
pub fn loss_value(
    net: &Mlp,
    x: &Matrix,
    targets: &Targets,
    kind: LossKind,
) -> Result<f64, NetError> {
    let trace = net.forward(x)?;
    let (loss, _) = loss_and_output_grad(trace.output(), targets, kind)?;
    Ok(loss)
}

/// Fraction of columns whose argmax output matches the label.
pub fn accuracy(output: &Matrix, labels: &[usize]) -> Result<f64, NetError> {
    if labels.is_empty() {
        return Err(NetError::EmptyBatch);
    }
    if labels.len() != output.cols() {
        return Err(NetError::TargetShapeMismatch {
            rows: output.rows(),
            cols: output.cols(),
            found_rows: 1,
            found_cols: labels.len(),
        });
    }
    let mut hits = 0usize;
    for (j, &label) in labels.iter().enumerate() {
        let mut best = 0usize;
        let mut best_v = f64::NEG_INFINITY;
        for i in 0..output.rows() {
            let v = output.get(i, j);
            if v > best_v {
                best_v = v;
                best = i;
            }
        }
        if best == label {
            hits += 1;
        }
    }
    Ok(hits as f64 / labels.len() as f64)
}

fn mul_derivative(m: &Matrix, z: &Matrix, phi: Nonlinearity) -> Matrix {
    debug_assert_eq!(m.shape(), z.shape());
    Matrix::from_fn(m.rows(), m.cols(), |i, j| {
        m.get(i, j) * phi.derivative(z.get(i, j))
    })
}

fn loss_and_output_grad(
    output: &Matrix,
    targets: &Targets,
    kind: LossKind,
) -> Result<(f64, Matrix), NetError> {
    let batch = output.cols();
    match kind {
        LossKind::SoftmaxCrossEntropy => {
            let (labels, num_classes) = match targets {
                Targets::Classes {
                    labels,
                    num_classes,
                } => (labels, *num_classes),
                Targets::Values(_) => {
                    return Err(NetError::WrongTargetKind {
                        loss: "softmax cross-entropy",
                        needs: "class-index",
                    })
                }
            };
            if labels.is_empty() {
                return Err(NetError::EmptyBatch);
            }
            if labels.len() != batch || num_classes != output.rows() {
                return Err(NetError::TargetShapeMismatch {
                    rows: output.rows(),
                    cols: batch,
                    found_rows: num_classes,
                    found_cols: labels.len(),
                });
            }
            let mut loss = 0.0;
            let mut grad = Matrix::zeros(output.rows(), batch);
            let inv_b = 1.0 / batch as f64;
            for (j, &label) in labels.iter().enumerate() {
                if label >= num_classes {
                    return Err(NetError::LabelOutOfRange {
                        index: j,
                        label,
                        num_classes,
                    });
                }
                let mut max = f64::NEG_INFINITY;
                for i in 0..output.rows() {
                    max = max.max(output.get(i, j));
                }
                let mut sum_exp = 0.0;
                for i in 0..output.rows() {
                    sum_exp += (output.get(i, j) - max).exp();
                }
                let lse = max + sum_exp.ln();
                loss += lse - output.get(label, j);
                for i in 0..output.rows() {
                    let p = (output.get(i, j) - lse).exp();
                    let indicator = if i == label { 1.0 } else { 0.0 };
                    grad.set(i, j, (p - indicator) * inv_b);
                }
            }
            Ok((loss * inv_b, grad))
        }
        LossKind::MeanSquaredError => {
            let values = match targets {
                Targets::Values(v) => v,
                Targets::Classes { .. } => {
                    return Err(NetError::WrongTargetKind {
                        loss: "mean squared error",
                        needs: "dense value",
                    })
                }
            };
            if values.shape() != output.shape() {
                return Err(NetError::TargetShapeMismatch {
                    rows: output.rows(),
                    cols: output.cols(),
                    found_rows: values.rows(),
                    found_cols: values.cols(),
                });
            }
            // L = (1 / 2B) * sum_ij (f_ij - y_ij)^2, so dL/df = (f - y) / B.
            let inv_b = 1.0 / batch as f64;
            let residual = output.sub(values)?;
            let loss = 0.5 * inv_b * residual.inner_product_frobenius(&residual)?;
            let grad = residual.scale(inv_b)?;
            Ok((loss, grad))
        }
    }
}

/// Jacobian of the network output with respect to hidden state `h_l`,
/// `0 <= l <= L - 1`, evaluated on the trace's pre-activations:
/// `Phi'_L W_L * ... * Phi'_{l+1} W_{l+1}` (the final diagonal factor is
/// omitted when the network emits raw logits).
pub fn jacobian_layer_to_output(
    trace: &super::ForwardTrace,
    net: &Mlp,
    l: usize,
) -> Result<Matrix, NetError> {
    let depth = net.depth();
    if l >= depth {
        return Err(NetError::LayerIndexOutOfRange { layer: l, depth });
    }
    if trace.batch_size() != 1 {
        return Err(NetError::JacobianNeedsSingleColumn {
            cols: trace.batch_size(),
        });
    }
    let mut product = jacobian_factor(trace, net, l + 1)?;
    for k in l + 2..=depth {
        product = jacobian_factor(trace, net, k)?.matmul(&product)?;
    }
    Ok(product)
}

/// Single factor `Phi'_k W_k` (or plain `W_k` for a linear final layer).
fn jacobian_factor(
    trace: &super::ForwardTrace,
    net: &Mlp,
    k: usize,
) -> Result<Matrix, NetError> {
    let w = net.weight(k);
    if !net.layer_applies_phi(k) {
        return Ok(w.clone());
    }
    let phi = net.config().nonlinearity;
    let z = trace.pre_activation(k);
    let factors: Vec<f64> = (0..z.rows()).map(|i| phi.derivative(z.get(i, 0))).collect();
    Ok(w.row_scale(&factors)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{Init, MlpConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn config(
        widths: &[usize],
        nonlinearity: Nonlinearity,
        use_final_nonlinearity: bool,
        seed: u64,
    ) -> MlpConfig {
        MlpConfig {
            widths: widths.to_vec(),
            nonlinearity,
            use_final_nonlinearity,
            init: Init::GlorotUniform,
            seed,
        }
    }

    fn random_input(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.5..1.5))
    }

    /// Central finite differences of the loss with respect to every weight
    /// entry, step `1e-6 * (1 + |w|)`. Independent of the backprop path: it
    /// only re-evaluates the loss through fresh forward passes.
    fn finite_difference_grads(
        net: &Mlp,
        x: &Matrix,
        targets: &Targets,
        kind: LossKind,
    ) -> Vec<Matrix> {
        let mut out = Vec::new();
        for l in 0..net.depth() {
            let w = &net.weights()[l];
            let mut fd = Matrix::zeros(w.rows(), w.cols());
            for i in 0..w.rows() {
                for j in 0..w.cols() {
                    let h = 1e-6 * (1.0 + w.get(i, j).abs());
                    let eval = |delta: f64| {
                        let mut weights = net.weights().to_vec();
                        weights[l].set(i, j, w.get(i, j) + delta);
                        let perturbed =
                            Mlp::from_parts(net.config().clone(), weights).unwrap();
                        loss_value(&perturbed, x, targets, kind).unwrap()
                    };
                    fd.set(i, j, (eval(h) - eval(-h)) / (2.0 * h));
                }
            }
            out.push(fd);
        }
        out
    }

    fn assert_grads_match(analytic: &GradientSet, fd: &[Matrix], tol: f64, ctx: &str) {
        for (l, (a, f)) in analytic.grads().iter().zip(fd).enumerate() {
            let diff = a.sub(f).unwrap().frobenius_norm();
            let scale = f.frobenius_norm();
            if scale > 1e-10 {
                assert!(
                    diff <= tol * scale,
                    "{ctx}: layer {} relative error {}",
                    l + 1,
                    diff / scale
                );
            } else {
                assert!(diff <= 1e-8, "{ctx}: layer {} absolute diff {diff}", l + 1);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences_across_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let phis = [
            Nonlinearity::Identity,
            Nonlinearity::leaky_relu(0.5).unwrap(),
            Nonlinearity::Relu,
        ];
        for &depth in &[1usize, 2, 4] {
            for &width in &[3usize, 8] {
                for &phi in &phis {
                    for final_phi in [true, false] {
                        let mut widths = vec![width; depth + 1];
                        widths[0] = 4;
                        *widths.last_mut().unwrap() = 3;
                        let net = Mlp::new(config(
                            &widths,
                            phi,
                            final_phi,
                            rng.gen::<u64>(),
                        ))
                        .unwrap();
                        let x = random_input(&mut rng, 4, 3);
                        let labels: Vec<usize> =
                            (0..3).map(|_| rng.gen_range(0..3)).collect();
                        let ce = Targets::Classes {
                            labels,
                            num_classes: 3,
                        };
                        let (_, grads) =
                            loss_and_gradients(&net, &x, &ce, LossKind::SoftmaxCrossEntropy)
                                .unwrap();
                        let fd = finite_difference_grads(
                            &net,
                            &x,
                            &ce,
                            LossKind::SoftmaxCrossEntropy,
                        );
                        let ctx = format!("ce d={depth} w={width} {phi:?} final={final_phi}");
                        assert_grads_match(&grads, &fd, 1e-5, &ctx);

                        let y = random_input(&mut rng, 3, 3);
                        let mse = Targets::Values(y);
                        let (_, grads) =
                            loss_and_gradients(&net, &x, &mse, LossKind::MeanSquaredError)
                                .unwrap();
                        let fd = finite_difference_grads(
                            &net,
                            &x,
                            &mse,
                            LossKind::MeanSquaredError,
                        );
                        let ctx = format!("mse d={depth} w={width} {phi:?} final={final_phi}");
                        assert_grads_match(&grads, &fd, 1e-5, &ctx);
                    }
                }
            }
        }
    }

    #[test]
    fn deep_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let widths = vec![3, 6, 6, 6, 6, 6, 6, 6, 2];
        let net = Mlp::new(config(
            &widths,
            Nonlinearity::leaky_relu(0.25).unwrap(),
            true,
            9,
        ))
        .unwrap();
        let x = random_input(&mut rng, 3, 2);
        let targets = Targets::Classes {
            labels: vec![0, 1],
            num_classes: 2,
        };
        let (_, grads) =
            loss_and_gradients(&net, &x, &targets, LossKind::SoftmaxCrossEntropy).unwrap();
        let fd = finite_difference_grads(&net, &x, &targets, LossKind::SoftmaxCrossEntropy);
        assert_grads_match(&grads, &fd, 1e-5, "depth 8");
    }

    #[test]
    fn zero_output_layer_with_zero_mse_target_is_stationary() {
        let cfg = config(&[3, 4, 2], Nonlinearity::Relu, false, 5);
        let mut weights = Mlp::new(cfg.clone()).unwrap().weights().to_vec();
        let last = weights.last_mut().unwrap();
        *last = Matrix::zeros(last.rows(), last.cols());
        let net = Mlp::from_parts(cfg, weights).unwrap();
        let x = Matrix::from_fn(3, 2, |i, j| (i + j) as f64 * 0.3 + 0.1);
        let targets = Targets::Values(Matrix::zeros(2, 2));
        let (loss, grads) =
            loss_and_gradients(&net, &x, &targets, LossKind::MeanSquaredError).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(grads.norm(net.depth()), 0.0);
    }

    #[test]
    fn uniform_softmax_loss_is_ln_2() {
        // Zero final weights produce logits [0, 0]; cross-entropy is ln 2.
        let cfg = config(&[2, 2], Nonlinearity::Identity, false, 0);
        let net = Mlp::from_parts(cfg, vec![Matrix::zeros(2, 2)]).unwrap();
        let x = Matrix::from_rows(&[&[0.4], &[-1.0]]).unwrap();
        let targets = Targets::Classes {
            labels: vec![0],
            num_classes: 2,
        };
        let loss = loss_value(&net, &x, &targets, LossKind::SoftmaxCrossEntropy).unwrap();
        assert!((loss - 2.0_f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn loss_is_batch_mean() {
        let net = Mlp::new(config(&[3, 4, 2], Nonlinearity::Relu, false, 8)).unwrap();
        let x1 = Matrix::from_fn(3, 1, |i, _| i as f64 - 0.7);
        let x2 = Matrix::from_fn(3, 2, |i, _| i as f64 - 0.7);
        let t1 = Targets::Classes {
            labels: vec![1],
            num_classes: 2,
        };
        let t2 = Targets::Classes {
            labels: vec![1, 1],
            num_classes: 2,
        };
        let (l1, g1) = loss_and_gradients(&net, &x1, &t1, LossKind::SoftmaxCrossEntropy).unwrap();
        let (l2, g2) = loss_and_gradients(&net, &x2, &t2, LossKind::SoftmaxCrossEntropy).unwrap();
        assert!((l1 - l2).abs() <= 1e-12 * l1.abs().max(1.0));
        for (a, b) in g1.grads().iter().zip(g2.grads()) {
            assert!(a.sub(b).unwrap().frobenius_norm() <= 1e-12);
        }
    }

    #[test]
    fn label_out_of_range_is_reported() {
        let net = Mlp::new(config(&[2, 3], Nonlinearity::Identity, false, 0)).unwrap();
        let x = Matrix::zeros(2, 1);
        let targets = Targets::Classes {
            labels: vec![3],
            num_classes: 3,
        };
        let err =
            loss_and_gradients(&net, &x, &targets, LossKind::SoftmaxCrossEntropy).unwrap_err();
        assert!(matches!(
            err,
            NetError::LabelOutOfRange {
                index: 0,
                label: 3,
                num_classes: 3
            }
        ));
    }

    #[test]
    fn empty_labels_are_reported() {
        let net = Mlp::new(config(&[2, 3], Nonlinearity::Identity, false, 0)).unwrap();
        let x = Matrix::zeros(2, 1);
        let targets = Targets::Classes {
            labels: vec![],
            num_classes: 3,
        };
        let err = loss_value(&net, &x, &targets, LossKind::SoftmaxCrossEntropy).unwrap_err();
        assert!(matches!(err, NetError::EmptyBatch));
    }

    #[test]
    fn jacobian_last_layer_identity_phi_is_weight_matrix() {
        let net = Mlp::new(config(&[3, 4, 2], Nonlinearity::Identity, true, 2)).unwrap();
        let x = Matrix::from_fn(3, 1, |i, _| i as f64 + 1.0);
        let trace = net.forward(&x).unwrap();
        let j = jacobian_layer_to_output(&trace, &net, 1).unwrap();
        assert_eq!(&j, net.weight(2));
    }

    #[test]
    fn jacobian_linear_network_is_weight_product() {
        let net = Mlp::new(config(&[3, 5, 4, 2], Nonlinearity::Identity, true, 3)).unwrap();
        let x = Matrix::from_fn(3, 1, |i, _| 0.2 * i as f64 - 0.1);
        let trace = net.forward(&x).unwrap();
        let j0 = jacobian_layer_to_output(&trace, &net, 0).unwrap();
        let expect = net
            .weight(3)
            .matmul(net.weight(2))
            .unwrap()
            .matmul(net.weight(1))
            .unwrap();
        assert!(j0.sub(&expect).unwrap().frobenius_norm() <= 1e-12);
    }

    #[test]
    fn jacobian_index_and_batch_guards() {
        let net = Mlp::new(config(&[3, 4, 2], Nonlinearity::Relu, true, 2)).unwrap();
        let x1 = Matrix::zeros(3, 1);
        let trace = net.forward(&x1).unwrap();
        assert!(matches!(
            jacobian_layer_to_output(&trace, &net, 2),
            Err(NetError::LayerIndexOutOfRange { layer: 2, depth: 2 })
        ));
        let xb = Matrix::zeros(3, 4);
        let trace_b = net.forward(&xb).unwrap();
        assert!(matches!(
            jacobian_layer_to_output(&trace_b, &net, 0),
            Err(NetError::JacobianNeedsSingleColumn { cols: 4 })
        ));
    }

    /// Finite-difference Jacobian: perturb hidden state `h_l` and replay the
    /// remaining layers by hand.
    fn finite_difference_jacobian(net: &Mlp, trace: &crate::net::ForwardTrace, l: usize) -> Matrix {
        let phi = net.config().nonlinearity;
        let forward_from = |h: &Matrix| -> Matrix {
            let mut cur = h.clone();
            for k in l + 1..=net.depth() {
                let z = net.weight(k).matmul(&cur).unwrap();
                cur = if k < net.depth() || net.config().use_final_nonlinearity {
                    z.map(|v| phi.apply(v))
                } else {
                    z
                };
            }
            cur
        };
        let h = trace.hidden(l);
        let n_l = h.rows();
        let n_out = net.output_dim();
        let mut jac = Matrix::zeros(n_out, n_l);
        let step = 1e-6;
        for j in 0..n_l {
            let mut plus = h.clone();
            plus.set(j, 0, h.get(j, 0) + step);
            let mut minus = h.clone();
            minus.set(j, 0, h.get(j, 0) - step);
            let fp = forward_from(&plus);
            let fm = forward_from(&minus);
            for i in 0..n_out {
                jac.set(i, j, (fp.get(i, 0) - fm.get(i, 0)) / (2.0 * step));
            }
        }
        jac
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for &depth in &[1usize, 2, 4] {
            for &phi in &[
                Nonlinearity::Identity,
                Nonlinearity::leaky_relu(0.5).unwrap(),
                Nonlinearity::Relu,
            ] {
                for final_phi in [true, false] {
                    let mut widths = vec![6usize; depth + 1];
                    widths[0] = 4;
                    *widths.last_mut().unwrap() = 3;
                    let net =
                        Mlp::new(config(&widths, phi, final_phi, rng.gen::<u64>())).unwrap();
                    let x = random_input(&mut rng, 4, 1);
                    let trace = net.forward(&x).unwrap();
                    for l in 0..depth {
                        let analytic = jacobian_layer_to_output(&trace, &net, l).unwrap();
                        let fd = finite_difference_jacobian(&net, &trace, l);
                        let diff = analytic.sub(&fd).unwrap().frobenius_norm();
                        let scale = fd.frobenius_norm().max(1e-10);
                        assert!(
                            diff <= 1e-4 * scale,
                            "depth {depth} {phi:?} final={final_phi} l={l}: {}",
                            diff / scale
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn jacobian_factorizes_one_layer_at_a_time() {
        let net = Mlp::new(config(
            &[4, 5, 5, 3],
            Nonlinearity::leaky_relu(0.5).unwrap(),
            true,
            17,
        ))
        .unwrap();
        let x = Matrix::from_fn(4, 1, |i, _| 0.6 - 0.4 * i as f64);
        let trace = net.forward(&x).unwrap();
        for l in 0..net.depth() - 1 {
            let j_l = jacobian_layer_to_output(&trace, &net, l).unwrap();
            let j_next = jacobian_layer_to_output(&trace, &net, l + 1).unwrap();
            let factor = jacobian_factor(&trace, &net, l + 1).unwrap();
            let composed = j_next.matmul(&factor).unwrap();
            let diff = j_l.sub(&composed).unwrap().frobenius_norm();
            assert!(diff <= 1e-12 * j_l.frobenius_norm().max(1.0), "l = {l}");
        }
    }

    #[test]
    fn accuracy_counts_argmax_matches() {
        let output = Matrix::from_rows(&[&[2.0, 0.0], &[1.0, 3.0]]).unwrap();
        assert_eq!(accuracy(&output, &[0, 1]).unwrap(), 1.0);
        assert_eq!(accuracy(&output, &[1, 1]).unwrap(), 0.5);
    }
}
