//! Layer sensitivity from class separability.
//!
//! Separability contrasts same-class and different-class pairwise Euclidean
//! distances of a representation: `(μ_diff − μ_same) / sqrt((σ²_diff + σ²_same) / 2)`.
//! A layer's sensitivity is the relative loss of separability when that
//! layer alone is distorted.
//!
//! Layers before the probe layer are measured at the probe (restricted to
//! its most important channels). The probe layer and later layers are
//! measured at the model output, where their distortion is visible.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::deeplift::ImportanceMap;
use crate::error::{Error, Result};
use crate::mask::{ChannelGraph, PruneMask};
use crate::mpq::fake_quantize_symmetric;
use crate::net::Model;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DistortionSpec {
    /// Remove the least important `rho` fraction of the layer's units.
    PruneFraction { rho: f64 },
    /// Symmetric per-tensor weight quantization.
    QuantizeBits { bits: u32 },
    /// Zero all weights and biases.
    ZeroLayer,
}

impl DistortionSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            DistortionSpec::PruneFraction { rho } if !(rho > 0.0 && rho <= 1.0) => {
                Err(Error::InvalidConfig(format!("prune fraction {rho} not in (0, 1]")))
            }
            DistortionSpec::QuantizeBits { bits } if !(1..=16).contains(&bits) => {
                Err(Error::InvalidConfig(format!("distortion bits {bits} not in [1, 16]")))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensitivityConfig {
    /// Defaults to the last convolution.
    pub probe_layer: Option<usize>,
    /// Fraction of probe channels (by importance) kept for distances.
    pub top_fraction: f64,
    pub distortion: DistortionSpec,
    pub sample_count: usize,
    pub per_class: usize,
    pub seed: u64,
}

impl Default for SensitivityConfig {
    fn default() -> Self {
        Self {
            probe_layer: None,
            top_fraction: 0.5,
            distortion: DistortionSpec::PruneFraction { rho: 0.5 },
            sample_count: 256,
            per_class: 64,
            seed: 0,
        }
    }
}

impl SensitivityConfig {
    pub fn validate(&self) -> Result<()> {
        self.distortion.validate()?;
        if !(self.top_fraction > 0.0 && self.top_fraction <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "top_fraction {} not in (0, 1]",
                self.top_fraction
            )));
        }
        Ok(())
    }

    /// Balanced, seeded evaluation sample.
    pub fn sample(&self, data: &Dataset) -> Result<Dataset> {
        data.balanced_sample(self.sample_count, self.per_class, self.seed)
    }

    pub fn probe(&self, model: &Model) -> Result<usize> {
        match self.probe_layer {
            Some(id) => model.index_of(id).map(|_| id),
            None => model
                .last_conv_id()
                .ok_or_else(|| Error::InvalidConfig("model has no convolution to probe".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparabilityStats {
    pub same_class_distances: Vec<f64>,
    pub diff_class_distances: Vec<f64>,
    pub score: f64,
}

impl SeparabilityStats {
    /// Scores distances already split by class relation.
    pub fn from_distances(same: Vec<f64>, diff: Vec<f64>) -> Self {
        let stats = |v: &[f64]| {
            let n = v.len().max(1) as f64;
            let mean = v.iter().sum::<f64>() / n;
            let var = v.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n;
            (mean, var)
        };
        let (ms, vs) = stats(&same);
        let (md, vd) = stats(&diff);
        let floor = 1e-6 * (md + ms);
        let denom = ((vd + vs) / 2.0).sqrt().max(floor);
        let score = if denom > 0.0 { (md - ms) / denom } else { 0.0 };
        Self {
            same_class_distances: same,
            diff_class_distances: diff,
            score,
        }
    }

    /// CSV with columns `relation,distance` (`same` or `diff`).
    pub fn distances_csv(&self) -> String {
        let mut s = String::from("relation,distance\n");
        for d in &self.same_class_distances {
            s += &format!("same,{d}\n");
        }
        for d in &self.diff_class_distances {
            s += &format!("diff,{d}\n");
        }
        s
    }
}

/// Separability of flattened representations `reps` (`n` rows of `dim`).
pub fn separability_of(reps: &[f32], dim: usize, labels: &[usize]) -> Result<SeparabilityStats> {
    let mut per_class: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in labels {
        *per_class.entry(l).or_default() += 1;
    }
    let usable = per_class.values().filter(|&&c| c >= 2).count();
    if usable < 2 {
        return Err(Error::InsufficientClasses(usable));
    }
    let n = labels.len();
    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let a = &reps[i * dim..(i + 1) * dim];
            let (mut same, mut diff) = (Vec::new(), Vec::new());
            for j in i + 1..n {
                let b = &reps[j * dim..(j + 1) * dim];
                let d = a
                    .iter()
                    .zip(b)
                    .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
                    .sum::<f64>()
                    .sqrt();
                if labels[i] == labels[j] {
                    same.push(d);
                } else {
                    diff.push(d);
                }
            }
            (same, diff)
        })
        .collect();
    let (mut same, mut diff) = (Vec::new(), Vec::new());
    for (s, d) in rows {
        same.extend(s);
        diff.extend(d);
    }
    Ok(SeparabilityStats::from_distances(same, diff))
}

/// Indices of the `ceil(q * c)` most important channels (ties: lower index).
fn top_channels(scores: &[f64], q: f64) -> Vec<usize> {
    let keep = ((q * scores.len() as f64).ceil() as usize).clamp(1, scores.len());
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(keep);
    order.sort_unstable();
    order
}

/// Separability at the output of `probe_layer`, restricted to its top
/// `top_fraction` channels by importance (all channels if the map has none).
pub fn separability(
    model: &Model,
    probe_layer: usize,
    sample: &Dataset,
    importance: &ImportanceMap,
    top_fraction: f64,
) -> Result<SeparabilityStats> {
    let index = model.index_of(probe_layer)?;
    let (_, record) = model.forward_recorded(&sample.images)?;
    let out = record.post(index);
    let shape = &out.shape()[1..];
    let channels = shape[0];
    let per = shape[1..].iter().product::<usize>();
    let chosen: Vec<usize> = match importance.layers.get(&probe_layer) {
        Some(scores) if scores.len() == channels => top_channels(scores, top_fraction),
        _ => (0..channels).collect(),
    };
    let dim = chosen.len() * per;
    let mut reps = Vec::with_capacity(sample.len() * dim);
    for item in out.data().chunks(channels * per) {
        for &c in &chosen {
            reps.extend_from_slice(&item[c * per..(c + 1) * per]);
        }
    }
    separability_of(&reps, dim, &sample.labels)
}

/// Copy of `model` with `distortion` applied to layer `layer_id` only.
pub fn distort(model: &Model, layer_id: usize, distortion: DistortionSpec, importance: &ImportanceMap) -> Result<Model> {
    distortion.validate()?;
    let mut out = model.clone();
    let index = model.index_of(layer_id)?;
    if !model.layers[index].is_weighted() {
        return Err(Error::NoWeights(layer_id));
    }
    match distortion {
        DistortionSpec::ZeroLayer => {
            for p in out.layers[index].params_mut() {
                p.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        DistortionSpec::QuantizeBits { bits } => {
            let w = out.layers[index].weight_mut().expect("weighted");
            fake_quantize_symmetric(w.data_mut(), bits)?;
        }
        DistortionSpec::PruneFraction { rho } => {
            let graph = ChannelGraph::new(model)?;
            let group = graph.groups().into_iter().find(|g| g.producers.contains(&layer_id));
            match group {
                Some(g) => {
                    let scores = group_scores(model, &g.producers, importance)?;
                    let count = ((rho * g.units as f64).floor() as usize).min(g.units - 1);
                    let mut keep = vec![true; g.units];
                    for u in lowest(&scores, count) {
                        keep[u] = false;
                    }
                    let mut mask = PruneMask::new();
                    mask.set_group(model, &g, keep)?;
                    mask.apply(&mut out)?;
                }
                None => {
                    // not structurally prunable (e.g. the output head): drop the
                    // smallest-magnitude weights instead
                    let w = out.layers[index].weight_mut().expect("weighted");
                    let mags: Vec<f64> = w.data().iter().map(|v| v.abs() as f64).collect();
                    let count = (rho * mags.len() as f64).floor() as usize;
                    for i in lowest(&mags, count) {
                        w.data_mut()[i] = 0.0;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Summed importances of a group's tied producers.
pub(crate) fn group_scores(model: &Model, producers: &[usize], importance: &ImportanceMap) -> Result<Vec<f64>> {
    let mut total: Option<Vec<f64>> = None;
    for &p in producers {
        let units = model.layer(p)?.units().ok_or(Error::NoWeights(p))?;
        let s = importance.get(p)?;
        if s.len() != units {
            return Err(Error::InvalidShape(format!(
                "layer {p} has {units} units but {} importances",
                s.len()
            )));
        }
        match &mut total {
            Some(t) => t.iter_mut().zip(s).for_each(|(a, b)| *a += b),
            None => total = Some(s.to_vec()),
        }
    }
    total.ok_or_else(|| Error::InvalidConfig("empty prune group".into()))
}

/// Indices of the `count` smallest scores (ties: lower index first).
pub(crate) fn lowest(scores: &[f64], count: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    order.truncate(count);
    order
}

/// Where a layer's distortion is measured: the probe, or the model output.
fn measure_at(model: &Model, layer_id: usize, probe: usize) -> Result<usize> {
    if model.index_of(layer_id)? < model.index_of(probe)? {
        Ok(probe)
    } else {
        Ok(model.layers.last().expect("non-empty").id)
    }
}

/// Separability used for sensitivities: top channels at the probe, all
/// logits at the output.
fn measured(model: &Model, at: usize, sample: &Dataset, importance: &ImportanceMap, cfg: &SensitivityConfig) -> Result<f64> {
    let is_output = model.layers.last().is_some_and(|l| l.id == at);
    let q = if is_output { 1.0 } else { cfg.top_fraction };
    Ok(separability(model, at, sample, importance, q)?.score)
}

fn relative_loss(base: f64, distorted: f64) -> Result<f64> {
    if base.is_nan() || base <= 0.0 {
        return Err(Error::DegenerateBaseline(base));
    }
    Ok(((base - distorted) / base).clamp(0.0, 1.0))
}

/// `clamp((S_base − S_distorted) / S_base, 0, 1)` for one layer. The model is
/// not modified.
pub fn layer_sensitivity(
    model: &Model,
    layer_id: usize,
    sample: &Dataset,
    importance: &ImportanceMap,
    cfg: &SensitivityConfig,
) -> Result<f64> {
    cfg.validate()?;
    let probe = cfg.probe(model)?;
    let at = measure_at(model, layer_id, probe)?;
    let base = measured(model, at, sample, importance, cfg)?;
    let distorted_model = distort(model, layer_id, cfg.distortion, importance)?;
    let distorted = measured(&distorted_model, at, sample, importance, cfg)?;
    relative_loss(base, distorted)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityProfile {
    /// Sensitivity in `[0, 1]` per conv/dense layer id.
    pub sensitivities: BTreeMap<usize, f64>,
    pub probe_layer_id: usize,
    pub distortion: DistortionSpec,
    pub sample_count: usize,
}

impl SensitivityProfile {
    /// `{layer_id: sensitivity}`.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(&self.sensitivities).expect("plain map")
    }

    pub fn get(&self, layer_id: usize) -> Result<f64> {
        self.sensitivities
            .get(&layer_id)
            .copied()
            .ok_or(Error::UnknownLayer(layer_id))
    }
}

/// Sensitivity of every conv/dense layer, evaluated independently.
pub fn profile(model: &Model, sample: &Dataset, importance: &ImportanceMap, cfg: &SensitivityConfig) -> Result<SensitivityProfile> {
    cfg.validate()?;
    let probe = cfg.probe(model)?;
    let ids = model.weighted_layer_ids();
    let output = model.layers.last().expect("non-empty").id;
    let mut baselines = BTreeMap::new();
    for at in [probe, output] {
        baselines.insert(at, measured(model, at, sample, importance, cfg)?);
    }
    let values: Vec<Result<(usize, f64)>> = ids
        .par_iter()
        .map(|&id| {
            let at = measure_at(model, id, probe)?;
            let distorted_model = distort(model, id, cfg.distortion, importance)?;
            let distorted = measured(&distorted_model, at, sample, importance, cfg)?;
            Ok((id, relative_loss(baselines[&at], distorted)?))
        })
        .collect();
    Ok(SensitivityProfile {
        sensitivities: values.into_iter().collect::<Result<_>>()?,
        probe_layer_id: probe,
        distortion: cfg.distortion,
        sample_count: sample.len(),
    })
}
