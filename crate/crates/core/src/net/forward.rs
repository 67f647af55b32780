use super::ops::{self, Window};
use super::{LayerKind, Model};
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Inputs and outputs of every layer for one batch.
#[derive(Debug, Clone)]
pub struct ForwardRecord {
    pub input: Tensor,
    pub outputs: Vec<Tensor>,
}

impl ForwardRecord {
    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }

    /// Input of layer `i` (its pre-activation).
    pub fn pre(&self, i: usize) -> &Tensor {
        if i == 0 {
            &self.input
        } else {
            &self.outputs[i - 1]
        }
    }

    /// Output of layer `i` (its post-activation).
    pub fn post(&self, i: usize) -> &Tensor {
        &self.outputs[i]
    }

    pub fn logits(&self) -> &Tensor {
        self.outputs.last().expect("record is never empty")
    }
}

pub(crate) fn window(kind: &LayerKind, input: &[usize], output: &[usize]) -> Window {
    let (out_ch, kh, kw, stride, pad) = match kind {
        LayerKind::Conv2d {
            weight, stride, pad, ..
        } => {
            let s = weight.shape();
            (s[0], s[2], s[3], *stride, *pad)
        }
        LayerKind::MaxPool { kh, kw, stride } | LayerKind::AvgPool { kh, kw, stride } => {
            (input[0], *kh, *kw, *stride, 0)
        }
        _ => unreachable!("window requested for a non-window layer"),
    };
    Window {
        in_ch: input[0],
        h: input[1],
        w: input[2],
        out_ch,
        kh,
        kw,
        stride,
        pad,
        oh: output[1],
        ow: output[2],
    }
}

fn with_batch(n: usize, item: &[usize]) -> Vec<usize> {
    let mut s = vec![n];
    s.extend_from_slice(item);
    s
}

impl Model {
    /// Logits `[n, class_count]` for a batch `[n, ..input_shape]`.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        let mut outputs = self.run(batch, true, &mut |_, _| {})?;
        Ok(outputs.pop().expect("non-empty model"))
    }

    /// Forward pass that also returns every layer's input and output.
    pub fn forward_recorded(&self, batch: &Tensor) -> Result<(Tensor, ForwardRecord)> {
        let outputs = self.run(batch, false, &mut |_, _| {})?;
        let record = ForwardRecord {
            input: batch.clone(),
            outputs,
        };
        Ok((record.logits().clone(), record))
    }

    /// Forward pass with a hook that may rewrite the input of each layer
    /// (by index) before the layer runs.
    pub fn forward_with_hook(
        &self,
        batch: &Tensor,
        hook: &mut dyn FnMut(usize, &mut Tensor),
    ) -> Result<Tensor> {
        let mut outputs = self.run(batch, true, hook)?;
        Ok(outputs.pop().expect("non-empty model"))
    }

    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        if batch.shape().len() != self.input_shape.len() + 1 || batch.shape()[1..] != self.input_shape[..] {
            return Err(shape_err(format!(
                "batch shape {:?} does not match [n, {:?}]",
                batch.shape(),
                self.input_shape
            )));
        }
        Ok(())
    }

    fn run(
        &self,
        batch: &Tensor,
        drop_unused: bool,
        hook: &mut dyn FnMut(usize, &mut Tensor),
    ) -> Result<Vec<Tensor>> {
        self.check_batch(batch)?;
        self.check_finite()?;
        // outputs consumed later by a residual add must be kept alive
        let mut needed = vec![false; self.layers.len()];
        for l in &self.layers {
            if let LayerKind::ResidualAdd { source } = l.kind {
                needed[self.index_of(source)?] = true;
            }
        }
        let mut outputs: Vec<Tensor> = Vec::with_capacity(self.layers.len());
        for i in 0..self.layers.len() {
            let mut input = if i == 0 {
                batch.clone()
            } else if drop_unused && !needed[i - 1] {
                std::mem::replace(&mut outputs[i - 1], Tensor::zeros(&[1]))
            } else {
                outputs[i - 1].clone()
            };
            hook(i, &mut input);
            let source = match self.layers[i].kind {
                LayerKind::ResidualAdd { source } => Some(&outputs[self.index_of(source)?]),
                _ => None,
            };
            let out = self.run_layer(i, &input, source)?;
            outputs.push(out);
        }
        Ok(outputs)
    }

    /// Applies layer `index` to a batched input. `source` is the output of the
    /// residual source layer and is required for [`LayerKind::ResidualAdd`].
    pub fn run_layer(&self, index: usize, input: &Tensor, source: Option<&Tensor>) -> Result<Tensor> {
        let layer = &self.layers[index];
        let n = input.batch();
        let item = &input.shape()[1..];
        let out_item = layer.output_shape(item)?;
        let x = input.data();
        let data = match &layer.kind {
            LayerKind::Dense { weight, bias } => ops::dense_forward(
                x,
                weight.data(),
                bias.as_ref().map(|b| b.data()),
                item[0],
                out_item[0],
            ),
            LayerKind::Conv2d { weight, bias, .. } => ops::conv2d_forward(
                x,
                weight.data(),
                bias.as_ref().map(|b| b.data()),
                window(&layer.kind, item, &out_item),
            ),
            LayerKind::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
                eps,
            } => {
                let (scale, shift) = ops::bn_coefficients(
                    gamma.data(),
                    beta.data(),
                    running_mean.data(),
                    running_var.data(),
                    *eps,
                );
                ops::bn_forward(x, &scale, &shift, item[1..].iter().product())
            }
            LayerKind::Relu => x.iter().map(|&v| v.max(0.0)).collect(),
            LayerKind::MaxPool { .. } => ops::max_pool_forward(x, window(&layer.kind, item, &out_item)),
            LayerKind::AvgPool { .. } => ops::avg_pool_forward(x, window(&layer.kind, item, &out_item)),
            LayerKind::Flatten => x.to_vec(),
            LayerKind::GlobalAvgPool => ops::global_avg_pool_forward(x, item[1] * item[2]),
            LayerKind::ResidualAdd { source: id } => {
                let src = source.ok_or_else(|| shape_err(format!("residual {}: missing source {id}", layer.id)))?;
                if src.shape() != input.shape() {
                    return Err(shape_err(format!(
                        "residual {}: {:?} vs {:?}",
                        layer.id,
                        src.shape(),
                        input.shape()
                    )));
                }
                x.iter().zip(src.data()).map(|(a, b)| a + b).collect()
            }
        };
        Tensor::new(with_batch(n, &out_item), data)
    }

    /// Recomputes every batch-norm layer's running statistics from the given
    /// images, in order, so that later layers see recalibrated inputs.
    /// Only running mean and variance change.
    pub fn recalibrate_batch_norm(&mut self, images: &Tensor) -> Result<()> {
        self.batch_norm_stats(images, false)
    }

    /// Replaces running statistics with the observed ones while rescaling
    /// `gamma`/`beta` so that the function computed by the model is unchanged.
    pub fn sync_batch_norm(&mut self, images: &Tensor) -> Result<()> {
        self.batch_norm_stats(images, true)
    }

    fn batch_norm_stats(&mut self, images: &Tensor, preserve: bool) -> Result<()> {
        self.check_batch(images)?;
        let mut outputs: Vec<Tensor> = Vec::with_capacity(self.layers.len());
        for i in 0..self.layers.len() {
            let input = if i == 0 { images.clone() } else { outputs[i - 1].clone() };
            if let LayerKind::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
                eps,
            } = &mut self.layers[i].kind
            {
                let (scale, shift) = ops::bn_coefficients(
                    gamma.data(),
                    beta.data(),
                    running_mean.data(),
                    running_var.data(),
                    *eps,
                );
                let c = running_mean.len();
                let spatial: usize = input.shape()[2..].iter().product();
                let mut sum = vec![0.0f64; c];
                let mut sq = vec![0.0f64; c];
                for (e, &v) in input.data().iter().enumerate() {
                    let ch = ops::channel_of(e, c, spatial);
                    sum[ch] += v as f64;
                    sq[ch] += v as f64 * v as f64;
                }
                let count = (input.batch() * spatial) as f64;
                for ch in 0..c {
                    let mean = sum[ch] / count;
                    let var = (sq[ch] / count - mean * mean).max(0.0);
                    running_mean.data_mut()[ch] = mean as f32;
                    running_var.data_mut()[ch] = var as f32;
                    if preserve {
                        let std = (running_var.data()[ch] as f64 + *eps as f64).sqrt();
                        let mean = running_mean.data()[ch] as f64;
                        gamma.data_mut()[ch] = (scale[ch] * std) as f32;
                        beta.data_mut()[ch] = (shift[ch] + scale[ch] * mean) as f32;
                    }
                }
            }
            let source = match self.layers[i].kind {
                LayerKind::ResidualAdd { source } => Some(&outputs[self.index_of(source)?]),
                _ => None,
            };
            let out = self.run_layer(i, &input, source)?;
            outputs.push(out);
        }
        Ok(())
    }
}
