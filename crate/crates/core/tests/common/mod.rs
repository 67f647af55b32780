//! Random network and data generators shared by the integration tests.
#![allow(dead_code)]

use liftprune::{Layer, LayerKind, Model, Tensor};
use rand::Rng;

fn uniform(rng: &mut impl Rng, len: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..len).map(|_| rng.random_range(lo..hi)).collect()
}

/// Batch norm with random affine parameters and running statistics.
pub fn random_batch_norm(id: usize, channels: usize, rng: &mut impl Rng) -> Layer {
    Layer::new(
        id,
        LayerKind::BatchNorm {
            gamma: Tensor::from_vec(uniform(rng, channels, 0.5, 1.5)),
            beta: Tensor::from_vec(uniform(rng, channels, -0.3, 0.3)),
            running_mean: Tensor::from_vec(uniform(rng, channels, -0.3, 0.3)),
            running_var: Tensor::from_vec(uniform(rng, channels, 0.5, 2.0)),
            eps: 1e-5,
        },
    )
}

fn randomize_bias(layer: &mut Layer, rng: &mut impl Rng) {
    if let LayerKind::Dense { bias: Some(b), .. } | LayerKind::Conv2d { bias: Some(b), .. } = &mut layer.kind {
        let v = uniform(rng, b.len(), -0.2, 0.2);
        b.data_mut().copy_from_slice(&v);
    }
}

/// A random feed-forward net with `body` layers drawn from conv, dense,
/// ReLU, batch norm, max pool and average pool, followed by a dense head.
/// Flatten layers are inserted where needed and not counted.
pub fn random_net(rng: &mut impl Rng, body: usize, class_count: usize) -> Model {
    let c = rng.random_range(1..=3);
    let side = rng.random_range(4..=7);
    let input = vec![c, side, side];
    let mut shape = input.clone();
    let mut layers = Vec::new();
    let mut next_id = 0;
    let mut added = 0;
    while added < body {
        let spatial = shape.len() == 3;
        let choice = rng.random_range(0..6);
        let mut layer = match choice {
            0 if spatial && shape[1] >= 2 => {
                let k = rng.random_range(1..=3.min(shape[1] + 2));
                let pad = rng.random_range(0..=k / 2);
                let stride = rng.random_range(1..=2);
                if shape[1] + 2 * pad < k {
                    continue;
                }
                let out = rng.random_range(2..=4);
                let l = Layer::conv2d(next_id, shape[0], out, k, stride, pad, rng.random_bool(0.7), rng);
                shape = l.output_shape(&shape).unwrap();
                l
            }
            1 => {
                if spatial {
                    layers.push(Layer::flatten(next_id));
                    next_id += 1;
                    shape = vec![shape.iter().product()];
                }
                let out = rng.random_range(3..=8);
                let l = Layer::dense(next_id, shape[0], out, rng.random_bool(0.7), rng);
                shape = vec![out];
                l
            }
            2 => Layer::relu(next_id),
            3 => random_batch_norm(next_id, shape[0], rng),
            4 if spatial && shape[1] >= 2 && shape[2] >= 2 => {
                let l = Layer::max_pool(next_id, 2, rng.random_range(1..=2));
                shape = l.output_shape(&shape).unwrap();
                l
            }
            5 if spatial && shape[1] >= 2 && shape[2] >= 2 => {
                let l = Layer::avg_pool(next_id, 2, rng.random_range(1..=2));
                shape = l.output_shape(&shape).unwrap();
                l
            }
            _ => continue,
        };
        randomize_bias(&mut layer, rng);
        layers.push(layer);
        next_id += 1;
        added += 1;
    }
    if shape.len() == 3 {
        layers.push(Layer::flatten(next_id));
        next_id += 1;
        shape = vec![shape.iter().product()];
    }
    let mut head = Layer::dense(next_id, shape[0], class_count, true, rng);
    randomize_bias(&mut head, rng);
    layers.push(head);
    Model::new(layers, input, class_count).unwrap()
}

/// `n` inputs with entries uniform in `[-1, 1)`.
pub fn random_input(rng: &mut impl Rng, model: &Model, n: usize) -> Tensor {
    let item: usize = model.input_shape.iter().product();
    let mut shape = vec![n];
    shape.extend(&model.input_shape);
    Tensor::new(shape, uniform(rng, n * item, -1.0, 1.0)).unwrap()
}

/// Straightforward f64 convolution over an explicitly zero-padded input.
/// Returns the output and the number of multiplications performed.
#[allow(clippy::too_many_arguments)]
pub fn reference_conv(
    x: &[f64],
    (c, h, w): (usize, usize, usize),
    weight: &[f64],
    bias: Option<&[f64]>,
    (out_ch, kh, kw): (usize, usize, usize),
    stride: usize,
    pad: usize,
) -> (Vec<f64>, u64) {
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut padded = vec![0.0; c * ph * pw];
    for ci in 0..c {
        for y in 0..h {
            for xx in 0..w {
                padded[(ci * ph + y + pad) * pw + xx + pad] = x[(ci * h + y) * w + xx];
            }
        }
    }
    let oh = (ph - kh) / stride + 1;
    let ow = (pw - kw) / stride + 1;
    let mut out = vec![0.0; out_ch * oh * ow];
    let mut multiplies = 0u64;
    for o in 0..out_ch {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias.map_or(0.0, |b| b[o]);
                for ci in 0..c {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let wv = weight[((o * c + ci) * kh + ky) * kw + kx];
                            let xv = padded[(ci * ph + oy * stride + ky) * pw + ox * stride + kx];
                            acc += wv * xv;
                            multiplies += 1;
                        }
                    }
                }
                out[(o * oh + oy) * ow + ox] = acc;
            }
        }
    }
    (out, multiplies)
}

/// f64 matrix-vector product `W x + b` with `W` stored `[out, in]`, plus the
/// multiplication count.
pub fn reference_dense(x: &[f64], weight: &[f64], bias: Option<&[f64]>, outputs: usize) -> (Vec<f64>, u64) {
    let inputs = x.len();
    let mut multiplies = 0u64;
    let out = (0..outputs)
        .map(|o| {
            let mut acc = bias.map_or(0.0, |b| b[o]);
            for i in 0..inputs {
                acc += weight[o * inputs + i] * x[i];
                multiplies += 1;
            }
            acc
        })
        .collect();
    (out, multiplies)
}

fn to_f64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

/// f64 forward pass of one item through a net made only of affine layers
/// (dense, conv, batch norm, average pool, flatten). Panics on other kinds.
pub fn reference_affine_forward(model: &Model, item: &[f64]) -> Vec<f64> {
    let mut x = item.to_vec();
    let mut shape = model.input_shape.clone();
    for layer in &model.layers {
        let out_shape = layer.output_shape(&shape).unwrap();
        x = match &layer.kind {
            LayerKind::Dense { weight, bias } => {
                reference_dense(&x, &to_f64(weight), bias.as_ref().map(to_f64).as_deref(), out_shape[0]).0
            }
            LayerKind::Conv2d { weight, bias, stride, pad } => {
                let ws = weight.shape();
                reference_conv(
                    &x,
                    (shape[0], shape[1], shape[2]),
                    &to_f64(weight),
                    bias.as_ref().map(to_f64).as_deref(),
                    (ws[0], ws[2], ws[3]),
                    *stride,
                    *pad,
                )
                .0
            }
            LayerKind::BatchNorm { gamma, beta, running_mean, running_var, eps } => {
                let c = shape[0];
                let spatial = x.len() / c;
                x.iter()
                    .enumerate()
                    .map(|(e, &v)| {
                        let ch = e / spatial;
                        let inv = 1.0 / (running_var.data()[ch] as f64 + *eps as f64).sqrt();
                        gamma.data()[ch] as f64 * (v - running_mean.data()[ch] as f64) * inv + beta.data()[ch] as f64
                    })
                    .collect()
            }
            LayerKind::AvgPool { kh, kw, stride } => {
                let (c, h, w) = (shape[0], shape[1], shape[2]);
                let (oh, ow) = (out_shape[1], out_shape[2]);
                let mut out = vec![0.0; c * oh * ow];
                for ci in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut s = 0.0;
                            for ky in 0..*kh {
                                for kx in 0..*kw {
                                    s += x[(ci * h + oy * stride + ky) * w + ox * stride + kx];
                                }
                            }
                            out[(ci * oh + oy) * ow + ox] = s / (kh * kw) as f64;
                        }
                    }
                }
                out
            }
            LayerKind::Flatten => x,
            other => panic!("not affine: {other:?}"),
        };
        shape = out_shape;
    }
    x
}

/// The default 4-class fixture trained for 20 epochs with `seed`.
pub fn fixture(seed: u64) -> liftprune::zoo::FixtureRun {
    let spec = liftprune::data::FixtureSpec {
        seed,
        ..Default::default()
    };
    let cfg = liftprune::trainer::TrainConfig {
        epochs: 20,
        seed,
        ..Default::default()
    };
    liftprune::zoo::trained_fixture(&spec, seed, &cfg).unwrap()
}
