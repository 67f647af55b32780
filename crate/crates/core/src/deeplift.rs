//! DeepLIFT attribution with the rescale rule.
//!
//! For a target logit `t`, every unit `x_i` of a layer receives a contribution
//! `C_i = m_i * (x_i - x0_i)` where `x0` is the activation on the reference
//! input and `m_i` the multiplier propagated back from `t`. Multipliers flow
//! through linear layers like gradients; at a ReLU the multiplier is
//! `Δy/Δx` (local gradient when `|Δx| < eps`). Max pooling splits the
//! multiplier between the argmax of the input and of the reference so that
//! the window's `Δy` is reproduced exactly. Contributions over any layer that
//! every path goes through sum to `Δt = t - t0`.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{shape_err, Error, Result};
use crate::mask::Granularity;
use crate::net::{backprop, Model, Rule};
use crate::tensor::Tensor;

/// Threshold below which `Δx` is treated as zero at a ReLU.
pub const RESCALE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ReferenceKind {
    ZeroInput,
    TrainingMean,
    BlurredInput { sigma: f64 },
    NoisyInput { sigma: f64 },
}

impl ReferenceKind {
    pub fn name(&self) -> &'static str {
        match self {
            ReferenceKind::ZeroInput => "zero_input",
            ReferenceKind::TrainingMean => "training_mean",
            ReferenceKind::BlurredInput { .. } => "blurred_input",
            ReferenceKind::NoisyInput { .. } => "noisy_input",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReferenceSpec {
    pub kind: ReferenceKind,
    /// Number of training images used to compute importances.
    pub sample_count: usize,
    /// Seed for [`ReferenceKind::NoisyInput`].
    pub seed: u64,
}

impl Default for ReferenceSpec {
    fn default() -> Self {
        Self {
            kind: ReferenceKind::ZeroInput,
            sample_count: 512,
            seed: 0,
        }
    }
}

impl ReferenceSpec {
    pub fn new(kind: ReferenceKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_count == 0 {
            return Err(Error::InvalidConfig("reference sample_count must be >= 1".into()));
        }
        match self.kind {
            ReferenceKind::BlurredInput { sigma } | ReferenceKind::NoisyInput { sigma }
                if !(sigma > 0.0 && sigma.is_finite()) =>
            {
                Err(Error::InvalidConfig(format!("reference sigma must be > 0, got {sigma}")))
            }
            _ => Ok(()),
        }
    }
}

/// Reference batch with the same shape as `input` (`[n, ..item]`).
pub fn make_reference(spec: &ReferenceSpec, dataset: Option<&Dataset>, input: &Tensor) -> Result<Tensor> {
    spec.validate()?;
    let item = input.item_len();
    match spec.kind {
        ReferenceKind::ZeroInput => Ok(Tensor::zeros(input.shape())),
        ReferenceKind::TrainingMean => {
            let data = dataset.filter(|d| !d.is_empty()).ok_or(Error::EmptyDataset)?;
            if data.item_shape() != &input.shape()[1..] {
                return Err(shape_err(format!(
                    "training images {:?} vs input {:?}",
                    data.item_shape(),
                    &input.shape()[1..]
                )));
            }
            let mut mean = vec![0.0f64; item];
            for img in data.images.data().chunks(item) {
                mean.iter_mut().zip(img).for_each(|(m, &v)| *m += v as f64);
            }
            let n = data.len() as f64;
            let mean: Vec<f32> = mean.iter().map(|m| (m / n) as f32).collect();
            let out = mean.iter().copied().cycle().take(input.len()).collect();
            Tensor::new(input.shape().to_vec(), out)
        }
        ReferenceKind::BlurredInput { sigma } => {
            let s = input.shape();
            if s.len() != 4 {
                return Err(shape_err(format!("blur needs [n, c, h, w] input, got {s:?}")));
            }
            Tensor::new(s.to_vec(), gaussian_blur(input.data(), s[2], s[3], sigma))
        }
        ReferenceKind::NoisyInput { sigma } => {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            let normal = Normal::new(0.0, sigma).expect("validated sigma");
            Ok(input.map(|v| v + normal.sample(&mut rng) as f32))
        }
    }
}

/// Separable Gaussian blur of every `h x w` plane. Taps falling outside the
/// image are dropped and the remaining weights renormalised.
fn gaussian_blur(data: &[f32], h: usize, w: usize, sigma: f64) -> Vec<f32> {
    let radius = ((3.0 * sigma).ceil() as usize).min(h.max(w));
    let taps: Vec<f64> = (0..=radius)
        .map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let blur_1d = |get: &dyn Fn(usize) -> f64, len: usize, i: usize| {
        let lo = i.saturating_sub(radius);
        let hi = (i + radius).min(len - 1);
        let (mut acc, mut norm) = (0.0, 0.0);
        for j in lo..=hi {
            let t = taps[i.abs_diff(j)];
            acc += t * get(j);
            norm += t;
        }
        acc / norm
    };
    let mut out = Vec::with_capacity(data.len());
    for plane in data.chunks(h * w) {
        let mut rows = vec![0.0f64; h * w];
        for y in 0..h {
            for x in 0..w {
                rows[y * w + x] = blur_1d(&|j| plane[y * w + j] as f64, w, x);
            }
        }
        for y in 0..h {
            for x in 0..w {
                out.push(blur_1d(&|j| rows[j * w + x], h, y) as f32);
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "class", rename_all = "snake_case")]
pub enum TargetSpec {
    /// Each sample's own label.
    #[default]
    TrueLabel,
    /// A fixed output class for every sample.
    Class(usize),
    /// One attribution pass per output class.
    AllClasses,
}

/// Contributions for one target assignment over a batch.
#[derive(Debug, Clone)]
pub struct AttributionPass {
    /// Target class per sample.
    pub targets: Vec<usize>,
    /// `t - t0` per sample.
    pub delta_t: Vec<f64>,
    /// Contributions of the input features, flat `[n, ..input_shape]`.
    pub input: Vec<f64>,
    /// Contributions of every layer's output units, flat `[n, ..item]`.
    pub layers: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct AttributionResult {
    pub reference: Option<ReferenceSpec>,
    pub target: TargetSpec,
    pub samples: usize,
    pub layer_ids: Vec<usize>,
    /// Output item shape per layer.
    pub layer_shapes: Vec<Vec<usize>>,
    pub input_shape: Vec<usize>,
    /// Whether contributions at each layer output are complete (sum to `Δt`).
    pub complete: Vec<bool>,
    pub passes: Vec<AttributionPass>,
}

impl AttributionResult {
    fn item_len(shape: &[usize]) -> usize {
        shape.iter().product()
    }

    /// Sum of input contributions for one sample in one pass.
    pub fn input_sum(&self, pass: usize, sample: usize) -> f64 {
        let m = Self::item_len(&self.input_shape);
        self.passes[pass].input[sample * m..(sample + 1) * m].iter().sum()
    }

    /// Sum of contributions at the output of layer `index` for one sample.
    pub fn layer_sum(&self, pass: usize, index: usize, sample: usize) -> f64 {
        let m = Self::item_len(&self.layer_shapes[index]);
        self.passes[pass].layers[index][sample * m..(sample + 1) * m].iter().sum()
    }

    /// Largest `|ΣC - Δt| / max(1, |Δt|)` over samples, passes and complete layers.
    pub fn max_completeness_error(&self) -> f64 {
        let mut worst = 0.0f64;
        for (p, pass) in self.passes.iter().enumerate() {
            for s in 0..self.samples {
                let dt = pass.delta_t[s];
                let scale = dt.abs().max(1.0);
                worst = worst.max((self.input_sum(p, s) - dt).abs() / scale);
                for (i, &complete) in self.complete.iter().enumerate() {
                    if complete {
                        worst = worst.max((self.layer_sum(p, i, s) - dt).abs() / scale);
                    }
                }
            }
        }
        worst
    }

    /// Signed per-unit scores of a layer summed over samples, passes and
    /// spatial positions (channel for conv outputs, neuron for vectors).
    pub fn unit_scores(&self, layer_id: usize) -> Result<Vec<f64>> {
        self.unit_aggregate(layer_id, Granularity::Channel, |c| c)
    }

    fn unit_aggregate(&self, layer_id: usize, granularity: Granularity, f: impl Fn(f64) -> f64) -> Result<Vec<f64>> {
        let index = self
            .layer_ids
            .iter()
            .position(|&id| id == layer_id)
            .ok_or(Error::UnknownLayer(layer_id))?;
        let shape = &self.layer_shapes[index];
        let m = Self::item_len(shape);
        // channel: one score per conv channel or dense neuron; finer: one per element
        let (units, per) = match granularity {
            Granularity::Channel => (shape[0], m / shape[0]),
            Granularity::Neuron | Granularity::Weight => (m, 1),
        };
        let mut out = vec![0.0f64; units];
        for pass in &self.passes {
            for sample in pass.layers[index].chunks(m) {
                for (u, chunk) in sample.chunks(per).enumerate() {
                    out[u] += chunk.iter().map(|&c| f(c)).sum::<f64>();
                }
            }
        }
        Ok(out)
    }

    /// JSON dump: per-layer signed unit scores plus metadata.
    pub fn to_json(&self) -> serde_json::Value {
        let layers: BTreeMap<String, Vec<f64>> = self
            .layer_ids
            .iter()
            .map(|&id| (id.to_string(), self.unit_scores(id).expect("known id")))
            .collect();
        serde_json::json!({
            "reference": self.reference.map(|r| r.kind.name()),
            "reference_spec": self.reference,
            "sample_count": self.samples,
            "target": self.target,
            "layers": layers,
        })
    }
}

fn broadcast_reference(reference: &Tensor, input: &Tensor) -> Result<Tensor> {
    if reference.shape() == input.shape() {
        return Ok(reference.clone());
    }
    let item = &input.shape()[1..];
    let single = reference.shape() == item || (reference.shape()[0] == 1 && &reference.shape()[1..] == item);
    if !single {
        return Err(shape_err(format!(
            "reference {:?} does not match input {:?}",
            reference.shape(),
            input.shape()
        )));
    }
    let data = reference.data().iter().copied().cycle().take(input.len()).collect();
    Tensor::new(input.shape().to_vec(), data)
}

/// DeepLIFT contributions of `inputs` relative to `reference`.
///
/// `reference` is either a full batch matching `inputs` or a single item that
/// is shared by all samples. `labels` is required for [`TargetSpec::TrueLabel`].
pub fn attribute(
    model: &Model,
    inputs: &Tensor,
    labels: Option<&[usize]>,
    reference: &Tensor,
    target: TargetSpec,
) -> Result<AttributionResult> {
    let reference = broadcast_reference(reference, inputs)?;
    let n = inputs.batch();
    let k = model.class_count;
    let target_sets: Vec<Vec<usize>> = match target {
        TargetSpec::TrueLabel => {
            let labels = labels.ok_or_else(|| Error::InvalidConfig("true-label target needs labels".into()))?;
            if labels.len() != n || labels.iter().any(|&l| l >= k) {
                return Err(shape_err("labels do not match the input batch"));
            }
            vec![labels.to_vec()]
        }
        TargetSpec::Class(c) if c < k => vec![vec![c; n]],
        TargetSpec::Class(c) => return Err(Error::InvalidConfig(format!("target class {c} >= {k}"))),
        TargetSpec::AllClasses => (0..k).map(|c| vec![c; n]).collect(),
    };

    let (logits, record) = model.forward_recorded(inputs)?;
    let (ref_logits, ref_record) = model.forward_recorded(&reference)?;
    let input_delta: Vec<f64> = inputs
        .data()
        .iter()
        .zip(reference.data())
        .map(|(&a, &b)| a as f64 - b as f64)
        .collect();
    let layer_deltas: Vec<Vec<f64>> = (0..model.layers.len())
        .map(|i| {
            record
                .post(i)
                .data()
                .iter()
                .zip(ref_record.post(i).data())
                .map(|(&a, &b)| a as f64 - b as f64)
                .collect()
        })
        .collect();

    let mut passes = Vec::with_capacity(target_sets.len());
    for targets in target_sets {
        let mut seed = vec![0.0f64; n * k];
        let mut delta_t = Vec::with_capacity(n);
        for (s, &t) in targets.iter().enumerate() {
            seed[s * k + t] = 1.0;
            delta_t.push(logits.data()[s * k + t] as f64 - ref_logits.data()[s * k + t] as f64);
        }
        let bp = backprop(
            model,
            &record,
            seed,
            Rule::Rescale {
                reference: &ref_record,
                eps: RESCALE_EPS,
            },
            true,
            false,
        )?;
        let input = bp.input_grad.iter().zip(&input_delta).map(|(m, d)| m * d).collect();
        let layers = bp
            .output_grads
            .into_iter()
            .zip(&layer_deltas)
            .map(|(m, d)| {
                m.expect("kept outputs")
                    .iter()
                    .zip(d)
                    .map(|(m, d)| m * d)
                    .collect()
            })
            .collect();
        passes.push(AttributionPass {
            targets,
            delta_t,
            input,
            layers,
        });
    }

    Ok(AttributionResult {
        reference: None,
        target,
        samples: n,
        layer_ids: model.layers.iter().map(|l| l.id).collect(),
        layer_shapes: model.shapes()?,
        input_shape: model.input_shape.clone(),
        complete: (0..model.layers.len()).map(|i| model.is_cut(i)).collect(),
        passes,
    })
}

/// Nonnegative per-unit importances of conv and dense layers, keyed by layer id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ImportanceMap {
    pub layers: BTreeMap<usize, Vec<f64>>,
}

impl ImportanceMap {
    pub fn get(&self, layer_id: usize) -> Result<&[f64]> {
        self.layers
            .get(&layer_id)
            .map(|v| v.as_slice())
            .ok_or(Error::UnknownLayer(layer_id))
    }

    /// Adds another map entry-wise (for chunked accumulation).
    pub fn accumulate(&mut self, other: &ImportanceMap) {
        for (id, v) in &other.layers {
            let e = self.layers.entry(*id).or_insert_with(|| vec![0.0; v.len()]);
            e.iter_mut().zip(v).for_each(|(a, b)| *a += b);
        }
    }
}

/// `importance(u) = Σ_samples Σ_spatial |C_u|` for every conv and dense layer.
pub fn importances(attr: &AttributionResult, model: &Model, granularity: Granularity) -> Result<ImportanceMap> {
    if granularity == Granularity::Weight {
        return Err(Error::InvalidConfig("importances are per unit, not per weight".into()));
    }
    let mut map = ImportanceMap::default();
    for layer in model.layers.iter().filter(|l| l.is_weighted()) {
        map.layers
            .insert(layer.id, attr.unit_aggregate(layer.id, granularity, f64::abs)?);
    }
    Ok(map)
}

/// Channel importances from the first `spec.sample_count` examples of `data`,
/// processed in fixed-size chunks in dataset order.
pub fn dataset_importances(
    model: &Model,
    data: &Dataset,
    spec: &ReferenceSpec,
    target: TargetSpec,
) -> Result<ImportanceMap> {
    spec.validate()?;
    let sample = data.head(spec.sample_count);
    let mut total = ImportanceMap::default();
    let idx: Vec<usize> = (0..sample.len()).collect();
    for chunk in idx.chunks(64) {
        let images = sample.images.select(chunk);
        let labels: Vec<usize> = chunk.iter().map(|&i| sample.labels[i]).collect();
        let reference = make_reference(spec, Some(data), &images)?;
        let attr = attribute(model, &images, Some(&labels), &reference, target)?;
        total.accumulate(&importances(&attr, model, Granularity::Channel)?);
    }
    Ok(total)
}
