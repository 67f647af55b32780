//! Weight sharing by importance-weighted 1-D k-means.
//!
//! Each conv/dense weight gets a score `h` from the DeepLIFT importance of
//! its output unit, scaled by `N_total / N_layer`. Clustering minimises
//! `Σ h (w − c)²` (DWMSE); plain MSE uses `h = 1`. Biases and batch-norm
//! parameters are left in full precision.

use std::collections::BTreeMap;

use base64::Engine;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::deeplift::{dataset_importances, ImportanceMap, ReferenceSpec, TargetSpec};
use crate::error::{shape_err, Error, Result};
use crate::net::Model;
use crate::trainer::{evaluate, fine_tune, TrainConfig};

/// Floor for zero channel importances.
pub const IMPORTANCE_EPS: f64 = 1e-9;
pub const MAX_LLOYD_ITERATIONS: usize = 100;

/// Per-weight clustering scores keyed by layer id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightImportance {
    pub layers: BTreeMap<usize, Vec<f64>>,
    /// `N_total / N_layer` per layer.
    pub layer_scale: BTreeMap<usize, f64>,
}

/// `h_i = max(importance(unit(i)), ε) * N_total / N_layer` for every weight
/// of every conv/dense layer, where `N` counts weights and biases.
pub fn weight_importances(model: &Model, importance: &ImportanceMap) -> Result<WeightImportance> {
    let weighted: Vec<_> = model.layers.iter().filter(|l| l.is_weighted()).collect();
    let sizes: Vec<usize> = weighted
        .iter()
        .map(|l| l.params().iter().map(|p| p.len()).sum())
        .collect();
    let total: usize = sizes.iter().sum();
    let mut out = WeightImportance {
        layers: BTreeMap::new(),
        layer_scale: BTreeMap::new(),
    };
    for (l, &n) in weighted.iter().zip(&sizes) {
        let w = l.weight().expect("weighted");
        let imp = importance.get(l.id)?;
        let units = w.shape()[0];
        if imp.len() != units {
            return Err(shape_err(format!("layer {} has {units} units, {} importances", l.id, imp.len())));
        }
        let scale = total as f64 / n as f64;
        let per = w.len() / units;
        let h = (0..w.len()).map(|i| imp[i / per].max(IMPORTANCE_EPS) * scale).collect();
        out.layers.insert(l.id, h);
        out.layer_scale.insert(l.id, scale);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansResult {
    pub centroids: Vec<f64>,
    pub assignments: Vec<usize>,
    pub objective: f64,
    /// Objective after seeding and after every Lloyd iteration.
    pub trace: Vec<f64>,
}

fn objective(values: &[f64], weights: &[f64], centroids: &[f64], assign: &[usize]) -> f64 {
    values
        .iter()
        .zip(weights)
        .zip(assign)
        .map(|((v, h), &a)| h * (v - centroids[a]).powi(2))
        .sum()
}

/// Weighted mean relative to the first member, so identical members give
/// back their value exactly.
fn weighted_mean(members: &[(f64, f64)]) -> Option<f64> {
    let base = members.first()?.0;
    let mass: f64 = members.iter().map(|m| m.1).sum();
    if mass <= 0.0 {
        return None;
    }
    Some(base + members.iter().map(|(v, h)| h * (v - base)).sum::<f64>() / mass)
}

fn cluster_cost(members: &[(f64, f64)], c: f64) -> f64 {
    members.iter().map(|(v, h)| h * (v - c).powi(2)).sum()
}

/// Weighted k-means++ seeding: first centre ∝ h, then ∝ h·d².
fn seed_centroids(values: &[f64], weights: &[f64], k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut centroids: Vec<f64> = Vec::with_capacity(k);
    let mut d2 = vec![f64::INFINITY; values.len()];
    while centroids.len() < k {
        let probs: Vec<f64> = if centroids.is_empty() {
            weights.to_vec()
        } else {
            weights.iter().zip(&d2).map(|(h, d)| h * d).collect()
        };
        let total: f64 = probs.iter().sum();
        let pick = if total > 0.0 && total.is_finite() {
            let mut r = rng.random::<f64>() * total;
            let mut idx = probs.len() - 1;
            for (i, p) in probs.iter().enumerate() {
                if *p > 0.0 && r < *p {
                    idx = i;
                    break;
                }
                r -= p;
            }
            // guard against landing on a zero-probability tail
            if probs[idx] <= 0.0 {
                idx = probs.iter().rposition(|&p| p > 0.0).expect("positive total");
            }
            idx
        } else {
            // all remaining mass sits on existing centres: take any new value
            match values.iter().position(|v| !centroids.contains(v)) {
                Some(i) => i,
                None => break,
            }
        };
        let c = values[pick];
        centroids.push(c);
        for (d, v) in d2.iter_mut().zip(values) {
            *d = d.min((v - c).powi(2));
        }
    }
    centroids
}

/// Lloyd iterations on `Σ h (v − c_a)²`, seeded by weighted k-means++.
/// Points move only to strictly closer centres and a centroid update is kept
/// only if it does not raise its cluster's cost. `k` is clamped to the
/// number of distinct values.
pub fn weighted_kmeans(values: &[f64], weights: &[f64], k: usize, seed: u64) -> Result<KMeansResult> {
    if values.is_empty() || values.len() != weights.len() {
        return Err(shape_err(format!(
            "{} values with {} weights",
            values.len(),
            weights.len()
        )));
    }
    if k == 0 {
        return Err(Error::InvalidConfig("k must be >= 1".into()));
    }
    if weights.iter().any(|h| !(h.is_finite() && *h >= 0.0)) || values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidConfig("values and weights must be finite, weights >= 0".into()));
    }
    if weights.iter().all(|&h| h == 0.0) {
        return Err(Error::ZeroMass);
    }
    let mut distinct = values.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let k = if k > distinct.len() {
        log::warn!("k = {k} exceeds {} distinct values; clamping", distinct.len());
        distinct.len()
    } else {
        k
    };
    // run on a canonical (value, weight) order so the result does not depend
    // on the input order
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(weights[a].total_cmp(&weights[b])));
    let sorted_v: Vec<f64> = order.iter().map(|&i| values[i]).collect();
    let sorted_h: Vec<f64> = order.iter().map(|&i| weights[i]).collect();
    let mut r = lloyd(&sorted_v, &sorted_h, k, seed);
    let mut assignments = vec![0; values.len()];
    for (pos, &i) in order.iter().enumerate() {
        assignments[i] = r.assignments[pos];
    }
    r.assignments = assignments;
    Ok(r)
}

fn lloyd(values: &[f64], weights: &[f64], k: usize, seed: u64) -> KMeansResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = seed_centroids(values, weights, k, &mut rng);
    let nearest = |v: f64, cs: &[f64], current: Option<usize>| {
        let mut best = current.unwrap_or(0);
        let mut best_d = (v - cs[best]).powi(2);
        for (j, c) in cs.iter().enumerate() {
            let d = (v - c).powi(2);
            if d < best_d {
                best = j;
                best_d = d;
            }
        }
        best
    };
    let mut assign: Vec<usize> = values.iter().map(|&v| nearest(v, &centroids, None)).collect();
    let mut trace = vec![objective(values, weights, &centroids, &assign)];
    for _ in 0..MAX_LLOYD_ITERATIONS {
        let mut members: Vec<Vec<(f64, f64)>> = vec![Vec::new(); centroids.len()];
        for ((&v, &h), &a) in values.iter().zip(weights).zip(&assign) {
            members[a].push((v, h));
        }
        for (c, m) in centroids.iter_mut().zip(&members) {
            if let Some(mean) = weighted_mean(m) {
                if cluster_cost(m, mean) <= cluster_cost(m, *c) {
                    *c = mean;
                }
            }
        }
        let next: Vec<usize> = values
            .iter()
            .zip(&assign)
            .map(|(&v, &a)| nearest(v, &centroids, Some(a)))
            .collect();
        let stable = next == assign;
        assign = next;
        let obj = objective(values, weights, &centroids, &assign);
        let unchanged = trace.last() == Some(&obj);
        trace.push(obj);
        if stable && unchanged {
            break;
        }
    }
    KMeansResult {
        objective: *trace.last().expect("seeded"),
        centroids,
        assignments: assign,
        trace,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterCriteria {
    Mse,
    Dwmse,
}

impl ClusterCriteria {
    pub fn name(&self) -> &'static str {
        match self {
            ClusterCriteria::Mse => "mse",
            ClusterCriteria::Dwmse => "dwmse",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    pub layer_id: usize,
    pub bits: u32,
    pub centroids: Vec<f32>,
    pub assignments: Vec<u32>,
}

impl Codebook {
    /// Bits per stored index: `ceil(log2 k)`, at least 1.
    pub fn index_width(&self) -> u32 {
        let k = self.centroids.len().max(2) as u32;
        32 - (k - 1).leading_zeros()
    }

    /// JSON with centroids and base64 packed indices.
    pub fn to_json(&self) -> serde_json::Value {
        let width = self.index_width();
        let packed = pack_indices(&self.assignments, width);
        serde_json::json!({
            "layer_id": self.layer_id,
            "bits": self.bits,
            "centroids": self.centroids,
            "count": self.assignments.len(),
            "index_width": width,
            "indices": base64::engine::general_purpose::STANDARD.encode(packed),
        })
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        let bad = |m: &str| Error::InvalidConfig(format!("codebook json: {m}"));
        let field = |k: &str| v.get(k).ok_or_else(|| bad(&format!("missing {k}")));
        let width = field("index_width")?.as_u64().ok_or_else(|| bad("index_width"))? as u32;
        let count = field("count")?.as_u64().ok_or_else(|| bad("count"))? as usize;
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(field("indices")?.as_str().ok_or_else(|| bad("indices"))?)
            .map_err(|e| bad(&e.to_string()))?;
        let centroids: Vec<f32> =
            serde_json::from_value(field("centroids")?.clone()).map_err(|e| bad(&e.to_string()))?;
        let assignments = unpack_indices(&bytes, width, count)?;
        if assignments.iter().any(|&a| a as usize >= centroids.len()) {
            return Err(bad("index out of range"));
        }
        Ok(Self {
            layer_id: field("layer_id")?.as_u64().ok_or_else(|| bad("layer_id"))? as usize,
            bits: field("bits")?.as_u64().ok_or_else(|| bad("bits"))? as u32,
            centroids,
            assignments,
        })
    }
}

/// Packs indices of `width` bits each, least significant bit first, into
/// bytes filled from bit 0 upwards.
pub fn pack_indices(indices: &[u32], width: u32) -> Vec<u8> {
    let total_bits = indices.len() * width as usize;
    let mut out = vec![0u8; total_bits.div_ceil(8)];
    let mut pos = 0usize;
    for &ix in indices {
        for b in 0..width {
            if ix >> b & 1 == 1 {
                out[pos / 8] |= 1 << (pos % 8);
            }
            pos += 1;
        }
    }
    out
}

pub fn unpack_indices(bytes: &[u8], width: u32, count: usize) -> Result<Vec<u32>> {
    if bytes.len() * 8 < count * width as usize {
        return Err(Error::InvalidConfig(format!(
            "{} bytes cannot hold {count} indices of {width} bits",
            bytes.len()
        )));
    }
    let mut out = Vec::with_capacity(count);
    let mut pos = 0usize;
    for _ in 0..count {
        let mut v = 0u32;
        for b in 0..width {
            if bytes[pos / 8] >> (pos % 8) & 1 == 1 {
                v |= 1 << b;
            }
            pos += 1;
        }
        out.push(v);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WsqConfig {
    /// Bits for every conv/dense layer unless overridden.
    pub bits: u32,
    pub layer_bits: BTreeMap<usize, u32>,
    pub criteria: ClusterCriteria,
    /// Recompute batch-norm statistics on the training images afterwards.
    pub recalibrate_bn: bool,
    /// Retrain after sharing, then re-average each cluster's weights.
    pub fine_tune: Option<TrainConfig>,
    pub reference: ReferenceSpec,
    pub target: TargetSpec,
    pub seed: u64,
}

impl Default for WsqConfig {
    fn default() -> Self {
        Self {
            bits: 3,
            layer_bits: BTreeMap::new(),
            criteria: ClusterCriteria::Dwmse,
            recalibrate_bn: false,
            fine_tune: None,
            reference: ReferenceSpec::default(),
            target: TargetSpec::TrueLabel,
            seed: 0,
        }
    }
}

impl WsqConfig {
    pub fn bits_for(&self, layer_id: usize) -> u32 {
        self.layer_bits.get(&layer_id).copied().unwrap_or(self.bits)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WsqReport {
    pub bits: u32,
    pub criteria: ClusterCriteria,
    pub recalibrated: bool,
    pub fine_tuned: bool,
    pub accuracy_before: f64,
    pub accuracy_after: f64,
}

impl WsqReport {
    pub const CSV_HEADER: &'static str = "bits,criteria,recalibrated,fine_tuned,accuracy_before,accuracy_after";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{:.6},{:.6}",
            self.bits,
            self.criteria.name(),
            self.recalibrated,
            self.fine_tuned,
            self.accuracy_before,
            self.accuracy_after
        )
    }
}

#[derive(Debug, Clone)]
pub struct WsqOutcome {
    pub model: Model,
    pub codebooks: Vec<Codebook>,
    pub report: WsqReport,
}

/// Clusters the weights of every conv/dense layer independently.
pub fn share_weights(model: &Model, scores: Option<&WeightImportance>, cfg: &WsqConfig) -> Result<(Model, Vec<Codebook>)> {
    let ids = model.weighted_layer_ids();
    let books: Vec<Result<Codebook>> = ids
        .par_iter()
        .map(|&id| {
            let bits = cfg.bits_for(id);
            if !(1..=8).contains(&bits) {
                return Err(Error::InvalidConfig(format!("layer {id}: bits {bits} not in [1, 8]")));
            }
            let w = model.layer(id)?.weight().expect("weighted");
            let values: Vec<f64> = w.data().iter().map(|&v| v as f64).collect();
            let h = match (cfg.criteria, scores) {
                (ClusterCriteria::Mse, _) => vec![1.0; values.len()],
                (ClusterCriteria::Dwmse, Some(s)) => s.layers.get(&id).ok_or(Error::UnknownLayer(id))?.clone(),
                (ClusterCriteria::Dwmse, None) => {
                    return Err(Error::InvalidConfig("DWMSE needs weight importances".into()))
                }
            };
            let km = weighted_kmeans(&values, &h, 1 << bits, cfg.seed ^ id as u64)?;
            Ok(Codebook {
                layer_id: id,
                bits,
                centroids: km.centroids.iter().map(|&c| c as f32).collect(),
                assignments: km.assignments.iter().map(|&a| a as u32).collect(),
            })
        })
        .collect();
    let books = books.into_iter().collect::<Result<Vec<_>>>()?;
    let mut out = model.clone();
    for b in &books {
        apply_codebook(&mut out, b)?;
    }
    Ok((out, books))
}

/// Writes each weight's centroid into the model.
pub fn apply_codebook(model: &mut Model, book: &Codebook) -> Result<()> {
    let w = model
        .layer_mut(book.layer_id)?
        .weight_mut()
        .ok_or(Error::NoWeights(book.layer_id))?;
    if w.len() != book.assignments.len() {
        return Err(shape_err(format!(
            "codebook for layer {} has {} indices, layer has {} weights",
            book.layer_id,
            book.assignments.len(),
            w.len()
        )));
    }
    for (v, &a) in w.data_mut().iter_mut().zip(&book.assignments) {
        *v = book.centroids[a as usize];
    }
    Ok(())
}

/// Replaces each centroid by the mean of its cluster's current weights.
fn reshare(model: &mut Model, books: &mut [Codebook]) -> Result<()> {
    for b in books.iter_mut() {
        let w = model.layer(b.layer_id)?.weight().expect("weighted");
        let mut sums = vec![(0.0f64, 0usize); b.centroids.len()];
        for (&v, &a) in w.data().iter().zip(&b.assignments) {
            sums[a as usize].0 += v as f64;
            sums[a as usize].1 += 1;
        }
        for (c, (s, n)) in b.centroids.iter_mut().zip(sums) {
            if n > 0 {
                *c = (s / n as f64) as f32;
            }
        }
        apply_codebook(model, b)?;
    }
    Ok(())
}

/// Weight sharing for a trained model. Importances (for DWMSE) and batch-norm
/// recalibration use `train`; accuracies are measured on `test`.
pub fn quantize_weight_sharing(model: &Model, train: &Dataset, test: &Dataset, cfg: &WsqConfig) -> Result<WsqOutcome> {
    let accuracy_before = evaluate(model, test)?.accuracy;
    let scores = match cfg.criteria {
        ClusterCriteria::Dwmse => {
            let imp = dataset_importances(model, train, &cfg.reference, cfg.target)?;
            Some(weight_importances(model, &imp)?)
        }
        ClusterCriteria::Mse => None,
    };
    let (mut out, mut books) = share_weights(model, scores.as_ref(), cfg)?;
    if let Some(tc) = &cfg.fine_tune {
        out = match fine_tune(&out, train, tc, None) {
            Ok(o) => o.model,
            Err(Error::TrainingDiverged { best, .. }) => *best,
            Err(e) => return Err(e),
        };
        reshare(&mut out, &mut books)?;
    }
    if cfg.recalibrate_bn {
        out.recalibrate_batch_norm(&train.images)?;
    }
    Ok(WsqOutcome {
        report: WsqReport {
            bits: cfg.bits,
            criteria: cfg.criteria,
            recalibrated: cfg.recalibrate_bn,
            fine_tuned: cfg.fine_tune.is_some(),
            accuracy_before,
            accuracy_after: evaluate(&out, test)?.accuracy,
        },
        model: out,
        codebooks: books,
    })
}
