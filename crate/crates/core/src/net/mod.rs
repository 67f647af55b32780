//! Layer graph, forward pass and model file format.
//!
//! A [`Model`] is a topologically ordered chain of layers. Each layer consumes
//! the output of the previous one (the batch itself for the first layer);
//! [`LayerKind::ResidualAdd`] additionally adds the output of an earlier
//! layer. All tensors are NCHW, batched along the leading axis.

mod backward;
mod format;
mod forward;
pub(crate) mod ops;

use rand::Rng;
use rand_distr::{Distribution, Normal};

pub use backward::{backprop, Backprop, Rule};
pub use format::{load_model, read_model, save_model, write_model, FORMAT_MAGIC, FORMAT_VERSION};
pub use forward::ForwardRecord;

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    /// `weight` is `[out, in]`.
    Dense {
        weight: Tensor,
        bias: Option<Tensor>,
    },
    /// `weight` is `[out_ch, in_ch, kh, kw]`.
    Conv2d {
        weight: Tensor,
        bias: Option<Tensor>,
        stride: usize,
        pad: usize,
    },
    /// Inference-mode batch norm over the channel axis (axis 1).
    BatchNorm {
        gamma: Tensor,
        beta: Tensor,
        running_mean: Tensor,
        running_var: Tensor,
        eps: f32,
    },
    Relu,
    MaxPool {
        kh: usize,
        kw: usize,
        stride: usize,
    },
    AvgPool {
        kh: usize,
        kw: usize,
        stride: usize,
    },
    Flatten,
    GlobalAvgPool,
    /// Adds the output of the layer with id `source` to this layer's input.
    ResidualAdd {
        source: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub id: usize,
    pub kind: LayerKind,
}

impl Layer {
    pub fn new(id: usize, kind: LayerKind) -> Self {
        Self { id, kind }
    }

    /// He-initialised dense layer.
    pub fn dense(id: usize, inputs: usize, outputs: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let weight = he_tensor(&[outputs, inputs], inputs, rng);
        let bias = bias.then(|| Tensor::zeros(&[outputs]));
        Self::new(id, LayerKind::Dense { weight, bias })
    }

    /// He-initialised convolution.
    #[allow(clippy::too_many_arguments)]
    pub fn conv2d(
        id: usize,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = he_tensor(&[out_ch, in_ch, kernel, kernel], in_ch * kernel * kernel, rng);
        let bias = bias.then(|| Tensor::zeros(&[out_ch]));
        Self::new(
            id,
            LayerKind::Conv2d {
                weight,
                bias,
                stride,
                pad,
            },
        )
    }

    /// Batch norm with identity statistics (mean 0, variance 1, gamma 1, beta 0).
    pub fn batch_norm(id: usize, channels: usize) -> Self {
        Self::new(
            id,
            LayerKind::BatchNorm {
                gamma: Tensor::full(&[channels], 1.0),
                beta: Tensor::zeros(&[channels]),
                running_mean: Tensor::zeros(&[channels]),
                running_var: Tensor::full(&[channels], 1.0),
                eps: 1e-5,
            },
        )
    }

    pub fn relu(id: usize) -> Self {
        Self::new(id, LayerKind::Relu)
    }

    pub fn max_pool(id: usize, size: usize, stride: usize) -> Self {
        Self::new(
            id,
            LayerKind::MaxPool {
                kh: size,
                kw: size,
                stride,
            },
        )
    }

    pub fn avg_pool(id: usize, size: usize, stride: usize) -> Self {
        Self::new(
            id,
            LayerKind::AvgPool {
                kh: size,
                kw: size,
                stride,
            },
        )
    }

    pub fn flatten(id: usize) -> Self {
        Self::new(id, LayerKind::Flatten)
    }

    pub fn global_avg_pool(id: usize) -> Self {
        Self::new(id, LayerKind::GlobalAvgPool)
    }

    pub fn residual_add(id: usize, source: usize) -> Self {
        Self::new(id, LayerKind::ResidualAdd { source })
    }

    pub fn kind_name(&self) -> &'static str {
        match self.kind {
            LayerKind::Dense { .. } => "dense",
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::BatchNorm { .. } => "batch_norm",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool { .. } => "max_pool",
            LayerKind::AvgPool { .. } => "avg_pool",
            LayerKind::Flatten => "flatten",
            LayerKind::GlobalAvgPool => "global_avg_pool",
            LayerKind::ResidualAdd { .. } => "residual_add",
        }
    }

    /// Conv and dense layers: the ones that own a weight matrix.
    pub fn is_weighted(&self) -> bool {
        matches!(self.kind, LayerKind::Dense { .. } | LayerKind::Conv2d { .. })
    }

    pub fn is_conv(&self) -> bool {
        matches!(self.kind, LayerKind::Conv2d { .. })
    }

    pub fn weight(&self) -> Option<&Tensor> {
        match &self.kind {
            LayerKind::Dense { weight, .. } | LayerKind::Conv2d { weight, .. } => Some(weight),
            _ => None,
        }
    }

    pub fn weight_mut(&mut self) -> Option<&mut Tensor> {
        match &mut self.kind {
            LayerKind::Dense { weight, .. } | LayerKind::Conv2d { weight, .. } => Some(weight),
            _ => None,
        }
    }

    pub fn bias(&self) -> Option<&Tensor> {
        match &self.kind {
            LayerKind::Dense { bias, .. } | LayerKind::Conv2d { bias, .. } => bias.as_ref(),
            _ => None,
        }
    }

    /// Output units: output channels for conv, neurons for dense.
    pub fn units(&self) -> Option<usize> {
        self.weight().map(|w| w.shape()[0])
    }

    /// Trainable parameters in a fixed order (weight, bias / gamma, beta).
    pub fn params(&self) -> Vec<&Tensor> {
        match &self.kind {
            LayerKind::Dense { weight, bias } | LayerKind::Conv2d { weight, bias, .. } => {
                std::iter::once(weight).chain(bias.iter()).collect()
            }
            LayerKind::BatchNorm { gamma, beta, .. } => vec![gamma, beta],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match &mut self.kind {
            LayerKind::Dense { weight, bias } | LayerKind::Conv2d { weight, bias, .. } => {
                std::iter::once(weight).chain(bias.iter_mut()).collect()
            }
            LayerKind::BatchNorm { gamma, beta, .. } => vec![gamma, beta],
            _ => Vec::new(),
        }
    }

    /// Every stored tensor with its name, including non-trainable statistics.
    pub fn named_tensors(&self) -> Vec<(&'static str, &Tensor)> {
        match &self.kind {
            LayerKind::Dense { weight, bias } | LayerKind::Conv2d { weight, bias, .. } => {
                let mut v = vec![("weight", weight)];
                if let Some(b) = bias {
                    v.push(("bias", b));
                }
                v
            }
            LayerKind::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
                ..
            } => vec![
                ("gamma", gamma),
                ("beta", beta),
                ("running_mean", running_mean),
                ("running_var", running_var),
            ],
            _ => Vec::new(),
        }
    }

    /// Output item shape (without batch axis) for a given input item shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let id = self.id;
        match &self.kind {
            LayerKind::Dense { weight, bias } => {
                if weight.shape().len() != 2 {
                    return Err(shape_err(format!("dense {id}: weight must be 2-d")));
                }
                let (out, inp) = (weight.shape()[0], weight.shape()[1]);
                if input != [inp] {
                    return Err(shape_err(format!(
                        "dense {id}: expects input [{inp}], got {input:?}"
                    )));
                }
                check_vec(bias.as_ref(), out, id, "bias")?;
                Ok(vec![out])
            }
            LayerKind::Conv2d {
                weight,
                bias,
                stride,
                pad,
            } => {
                let ws = weight.shape();
                if ws.len() != 4 {
                    return Err(shape_err(format!("conv {id}: weight must be 4-d")));
                }
                if input.len() != 3 || input[0] != ws[1] {
                    return Err(shape_err(format!(
                        "conv {id}: expects [{}, h, w] input, got {input:?}",
                        ws[1]
                    )));
                }
                if *stride == 0 {
                    return Err(shape_err(format!("conv {id}: stride must be >= 1")));
                }
                check_vec(bias.as_ref(), ws[0], id, "bias")?;
                let oh = window_out(input[1], ws[2], *stride, *pad)
                    .ok_or_else(|| shape_err(format!("conv {id}: kernel larger than input")))?;
                let ow = window_out(input[2], ws[3], *stride, *pad)
                    .ok_or_else(|| shape_err(format!("conv {id}: kernel larger than input")))?;
                Ok(vec![ws[0], oh, ow])
            }
            LayerKind::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
                eps,
            } => {
                let c = gamma.len();
                if input.is_empty() || input[0] != c {
                    return Err(shape_err(format!(
                        "batch norm {id}: expects {c} channels, got {input:?}"
                    )));
                }
                for (name, t) in [("beta", beta), ("running_mean", running_mean), ("running_var", running_var)] {
                    check_vec(Some(t), c, id, name)?;
                }
                if running_var.data().iter().any(|&v| v < 0.0) || *eps <= 0.0 {
                    return Err(Error::CorruptModel(format!(
                        "batch norm {id}: negative variance or non-positive eps"
                    )));
                }
                Ok(input.to_vec())
            }
            LayerKind::Relu => Ok(input.to_vec()),
            LayerKind::MaxPool { kh, kw, stride } | LayerKind::AvgPool { kh, kw, stride } => {
                if input.len() != 3 || *stride == 0 {
                    return Err(shape_err(format!("pool {id}: expects [c, h, w], got {input:?}")));
                }
                let oh = window_out(input[1], *kh, *stride, 0)
                    .ok_or_else(|| shape_err(format!("pool {id}: window larger than input")))?;
                let ow = window_out(input[2], *kw, *stride, 0)
                    .ok_or_else(|| shape_err(format!("pool {id}: window larger than input")))?;
                Ok(vec![input[0], oh, ow])
            }
            LayerKind::Flatten => Ok(vec![input.iter().product()]),
            LayerKind::GlobalAvgPool => {
                if input.len() != 3 {
                    return Err(shape_err(format!(
                        "global avg pool {id}: expects [c, h, w], got {input:?}"
                    )));
                }
                Ok(vec![input[0]])
            }
            LayerKind::ResidualAdd { .. } => Ok(input.to_vec()),
        }
    }
}

fn check_vec(t: Option<&Tensor>, len: usize, id: usize, name: &str) -> Result<()> {
    match t {
        Some(t) if t.shape() != [len] => Err(shape_err(format!(
            "layer {id}: {name} must be [{len}], got {:?}",
            t.shape()
        ))),
        _ => Ok(()),
    }
}

/// `floor((size + 2*pad - k) / stride) + 1`, or `None` if the window does not fit.
pub fn window_out(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    (padded >= k).then(|| (padded - k) / stride + 1)
}

fn he_tensor(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| normal.sample(rng) as f32).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub layers: Vec<Layer>,
    pub input_shape: Vec<usize>,
    pub class_count: usize,
}

impl Model {
    /// Builds and validates a model.
    pub fn new(layers: Vec<Layer>, input_shape: Vec<usize>, class_count: usize) -> Result<Self> {
        let model = Self {
            layers,
            input_shape,
            class_count,
        };
        model.validate()?;
        Ok(model)
    }

    /// Checks id uniqueness, residual ordering, shape compatibility and the output head.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(shape_err("model has no layers"));
        }
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(shape_err(format!("invalid input shape {:?}", self.input_shape)));
        }
        let mut seen = std::collections::HashSet::new();
        for l in &self.layers {
            if !seen.insert(l.id) {
                return Err(shape_err(format!("duplicate layer id {}", l.id)));
            }
        }
        let shapes = self.shapes()?;
        let out = shapes.last().expect("non-empty");
        if out != &[self.class_count] {
            return Err(shape_err(format!(
                "model output {out:?} does not match class count {}",
                self.class_count
            )));
        }
        Ok(())
    }

    /// Output item shape of every layer, in order.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(self.layers.len());
        let mut current = self.input_shape.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            if let LayerKind::ResidualAdd { source } = layer.kind {
                let s = self.index_of(source)?;
                if s >= i {
                    return Err(shape_err(format!(
                        "residual {}: source {source} does not precede it",
                        layer.id
                    )));
                }
                if shapes[s] != current {
                    return Err(shape_err(format!(
                        "residual {}: source shape {:?} vs input {current:?}",
                        layer.id, shapes[s]
                    )));
                }
            }
            current = layer.output_shape(&current)?;
            shapes.push(current.clone());
        }
        Ok(shapes)
    }

    /// Input item shape of every layer, in order.
    pub fn input_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let shapes = self.shapes()?;
        let mut v = vec![self.input_shape.clone()];
        v.extend(shapes.into_iter().take(self.layers.len() - 1));
        Ok(v)
    }

    pub fn index_of(&self, id: usize) -> Result<usize> {
        self.layers
            .iter()
            .position(|l| l.id == id)
            .ok_or(Error::UnknownLayer(id))
    }

    pub fn layer(&self, id: usize) -> Result<&Layer> {
        let i = self.index_of(id)?;
        Ok(&self.layers[i])
    }

    pub fn layer_mut(&mut self, id: usize) -> Result<&mut Layer> {
        let i = self.index_of(id)?;
        Ok(&mut self.layers[i])
    }

    /// Ids of conv and dense layers in order.
    pub fn weighted_layer_ids(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter(|l| l.is_weighted())
            .map(|l| l.id)
            .collect()
    }

    /// Id of the last convolution, if any.
    pub fn last_conv_id(&self) -> Option<usize> {
        self.layers.iter().rev().find(|l| l.is_conv()).map(|l| l.id)
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| l.params())
            .map(|t| t.len())
            .sum()
    }

    /// Whether every path from the input to the output passes through the
    /// output of layer `index`, so contributions there sum to the output delta.
    pub fn is_cut(&self, index: usize) -> bool {
        self.layers.iter().enumerate().all(|(k, l)| match l.kind {
            LayerKind::ResidualAdd { source } if k > index => match self.index_of(source) {
                Ok(s) => s >= index,
                Err(_) => false,
            },
            _ => true,
        })
    }

    /// All stored tensor bytes in layer order, for bitwise comparisons.
    pub fn param_bytes(&self) -> Vec<u8> {
        self.layers
            .iter()
            .flat_map(|l| l.named_tensors())
            .flat_map(|(_, t)| t.to_le_bytes())
            .collect()
    }

    pub(crate) fn check_finite(&self) -> Result<()> {
        for l in &self.layers {
            for (name, t) in l.named_tensors() {
                if !t.is_finite() {
                    return Err(Error::CorruptModel(format!(
                        "layer {} {name} contains NaN/Inf",
                        l.id
                    )));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn window_formula() {
        assert_eq!(window_out(5, 3, 1, 0), Some(3));
        assert_eq!(window_out(32, 3, 1, 1), Some(32));
        assert_eq!(window_out(7, 3, 2, 0), Some(3));
        assert_eq!(window_out(2, 3, 1, 0), None);
    }

    #[test]
    fn validate_catches_bad_graphs() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bad_head = Model::new(vec![Layer::dense(0, 4, 3, true, &mut rng)], vec![4], 2);
        assert!(matches!(bad_head, Err(Error::InvalidShape(_))));

        let dup = Model::new(
            vec![Layer::dense(0, 4, 4, true, &mut rng), Layer::dense(0, 4, 2, true, &mut rng)],
            vec![4],
            2,
        );
        assert!(dup.is_err());

        let forward_ref = Model::new(
            vec![
                Layer::residual_add(0, 1),
                Layer::dense(1, 4, 4, true, &mut rng),
                Layer::dense(2, 4, 2, true, &mut rng),
            ],
            vec![4],
            2,
        );
        assert!(forward_ref.is_err());
    }

    #[test]
    fn cut_detection() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = Model::new(
            vec![
                Layer::dense(0, 4, 4, true, &mut rng),
                Layer::relu(1),
                Layer::dense(2, 4, 4, true, &mut rng),
                Layer::residual_add(3, 1),
                Layer::dense(4, 4, 2, true, &mut rng),
            ],
            vec![4],
            2,
        )
        .unwrap();
        assert!(m.is_cut(0));
        assert!(m.is_cut(1));
        assert!(!m.is_cut(2));
        assert!(m.is_cut(3));
    }
}
