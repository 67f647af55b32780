//! Reverse pass shared by gradient computation and DeepLIFT.
//!
//! Linear layers (dense, conv, inference batch norm, average pooling, flatten,
//! residual add) propagate through their Jacobian under both rules. The rules
//! differ only at the nonlinearities: ReLU and max pooling.

use super::forward::{window, ForwardRecord};
use super::ops;
use super::{LayerKind, Model};
use crate::error::{shape_err, Result};

#[derive(Debug, Clone, Copy)]
pub enum Rule<'a> {
    /// Ordinary backpropagation.
    Gradient,
    /// DeepLIFT rescale rule: multipliers `Δy/Δx` relative to `reference`,
    /// falling back to the local gradient where `|Δx| < eps`.
    Rescale {
        reference: &'a ForwardRecord,
        eps: f64,
    },
}

#[derive(Debug, Clone)]
pub struct Backprop {
    /// Gradient (or multiplier) with respect to each layer's output, when kept.
    pub output_grads: Vec<Option<Vec<f64>>>,
    /// Gradient (or multiplier) with respect to the model input.
    pub input_grad: Vec<f64>,
    /// Per layer, per trainable parameter (same order as [`super::Layer::params`]).
    pub param_grads: Vec<Vec<Vec<f64>>>,
}

/// Propagates `seed` (gradient with respect to the logits, flat `[n, classes]`)
/// back to the input of `model` using activations from `record`.
pub fn backprop(
    model: &Model,
    record: &ForwardRecord,
    seed: Vec<f64>,
    rule: Rule<'_>,
    keep_outputs: bool,
    want_params: bool,
) -> Result<Backprop> {
    let layers = &model.layers;
    if record.len() != layers.len() || seed.len() != record.logits().len() {
        return Err(shape_err("backprop: record or seed does not match the model"));
    }
    if let Rule::Rescale { reference, .. } = rule {
        if reference.len() != layers.len() || reference.input.shape() != record.input.shape() {
            return Err(shape_err(format!(
                "reference batch {:?} does not match input batch {:?}",
                reference.input.shape(),
                record.input.shape()
            )));
        }
    }
    let mut pending: Vec<Option<Vec<f64>>> = vec![None; layers.len()];
    let mut output_grads: Vec<Option<Vec<f64>>> = vec![None; layers.len()];
    let mut param_grads: Vec<Vec<Vec<f64>>> = vec![Vec::new(); layers.len()];
    pending[layers.len() - 1] = Some(seed);
    let mut input_grad = Vec::new();

    for i in (0..layers.len()).rev() {
        let x_t = record.pre(i);
        let g = pending[i]
            .take()
            .unwrap_or_else(|| vec![0.0; record.post(i).len()]);
        let item = &x_t.shape()[1..];
        let out_item = &record.post(i).shape()[1..];
        let x = x_t.data();
        let layer = &layers[i];

        let gin: Vec<f64> = match &layer.kind {
            LayerKind::Dense { weight, .. } => {
                let (inputs, outputs) = (item[0], out_item[0]);
                if want_params {
                    let (gw, gb) = ops::dense_backward_params(&g, x, inputs, outputs);
                    param_grads[i] = with_bias(gw, gb, layer.bias().is_some());
                }
                ops::dense_backward_input(&g, weight.data(), inputs, outputs)
            }
            LayerKind::Conv2d { weight, .. } => {
                let win = window(&layer.kind, item, out_item);
                if want_params {
                    let (gw, gb) = ops::conv2d_backward_params(&g, x, win);
                    param_grads[i] = with_bias(gw, gb, layer.bias().is_some());
                }
                ops::conv2d_backward_input(&g, weight.data(), win)
            }
            LayerKind::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
                eps,
            } => {
                let (scale, _) = ops::bn_coefficients(
                    gamma.data(),
                    beta.data(),
                    running_mean.data(),
                    running_var.data(),
                    *eps,
                );
                let c = scale.len();
                let spatial: usize = item[1..].iter().product();
                if want_params {
                    let mut gg = vec![0.0; c];
                    let mut gbeta = vec![0.0; c];
                    for (e, (&ge, &xe)) in g.iter().zip(x).enumerate() {
                        let ch = ops::channel_of(e, c, spatial);
                        let inv = 1.0 / (running_var.data()[ch] as f64 + *eps as f64).sqrt();
                        gg[ch] += ge * (xe as f64 - running_mean.data()[ch] as f64) * inv;
                        gbeta[ch] += ge;
                    }
                    param_grads[i] = vec![gg, gbeta];
                }
                g.iter()
                    .enumerate()
                    .map(|(e, &ge)| ge * scale[ops::channel_of(e, c, spatial)])
                    .collect()
            }
            LayerKind::Relu => match rule {
                Rule::Gradient => g
                    .iter()
                    .zip(x)
                    .map(|(&ge, &xe)| if xe > 0.0 { ge } else { 0.0 })
                    .collect(),
                Rule::Rescale { reference, eps } => {
                    let x0 = reference.pre(i).data();
                    let y = record.post(i).data();
                    let y0 = reference.post(i).data();
                    g.iter()
                        .enumerate()
                        .map(|(e, &ge)| {
                            let dx = x[e] as f64 - x0[e] as f64;
                            let m = if dx.abs() >= eps {
                                (y[e] as f64 - y0[e] as f64) / dx
                            } else if x[e] > 0.0 {
                                1.0
                            } else {
                                0.0
                            };
                            ge * m
                        })
                        .collect()
                }
            },
            LayerKind::MaxPool { .. } => {
                let win = window(&layer.kind, item, out_item);
                let (il, ol) = (win.in_len(), win.out_len());
                let arg = ops::max_pool_argmax(x, win);
                let mut gin = vec![0.0; x.len()];
                match rule {
                    Rule::Gradient => {
                        for (k, &a) in arg.iter().enumerate() {
                            gin[(k / ol) * il + a] += g[k];
                        }
                    }
                    Rule::Rescale { reference, .. } => {
                        let x0 = reference.pre(i).data();
                        let arg0 = ops::max_pool_argmax(x0, win);
                        for k in 0..arg.len() {
                            let base = (k / ol) * il;
                            let (a, b) = (base + arg[k], base + arg0[k]);
                            if a == b {
                                gin[a] += g[k];
                                continue;
                            }
                            // Δy = x[a] - x0[b] lies between Δx[b] and Δx[a]; split the
                            // multiplier so that λ Δx[a] + (1 - λ) Δx[b] = Δy.
                            let dxa = x[a] as f64 - x0[a] as f64;
                            let dxb = x[b] as f64 - x0[b] as f64;
                            let dy = x[a] as f64 - x0[b] as f64;
                            let lambda = if (dxa - dxb).abs() > 0.0 {
                                ((dy - dxb) / (dxa - dxb)).clamp(0.0, 1.0)
                            } else {
                                1.0
                            };
                            gin[a] += g[k] * lambda;
                            gin[b] += g[k] * (1.0 - lambda);
                        }
                    }
                }
                gin
            }
            LayerKind::AvgPool { .. } => ops::avg_pool_backward(&g, window(&layer.kind, item, out_item)),
            LayerKind::Flatten => g.clone(),
            LayerKind::GlobalAvgPool => {
                let spatial = item[1] * item[2];
                let mut gin = vec![0.0; x.len()];
                for (plane, &ge) in gin.chunks_mut(spatial).zip(&g) {
                    plane.iter_mut().for_each(|v| *v = ge / spatial as f64);
                }
                gin
            }
            LayerKind::ResidualAdd { source } => {
                let s = model.index_of(*source)?;
                accumulate(&mut pending[s], &g);
                g.clone()
            }
        };

        if keep_outputs {
            output_grads[i] = Some(g);
        }
        if i == 0 {
            input_grad = gin;
        } else {
            accumulate(&mut pending[i - 1], &gin);
        }
    }

    Ok(Backprop {
        output_grads,
        input_grad,
        param_grads,
    })
}

fn with_bias(gw: Vec<f64>, gb: Vec<f64>, has_bias: bool) -> Vec<Vec<f64>> {
    if has_bias {
        vec![gw, gb]
    } else {
        vec![gw]
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g.to_vec()),
    }
}
