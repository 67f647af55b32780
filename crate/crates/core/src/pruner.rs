//! Structured and unstructured pruning driven by DeepLIFT importances.
//!
//! Pruning is realised as exact-zero masking: removed units are zeroed
//! together with their batch-norm terms and consumer input slices, and the
//! profiler treats them as gone.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::deeplift::{dataset_importances, ImportanceMap, ReferenceSpec, TargetSpec};
use crate::error::{Error, Result};
use crate::mask::{ChannelGraph, Granularity, LayerMask, PruneGroup, PruneMask};
use crate::net::{Layer, Model};
use crate::profiler::{profile_cost, Criteria};
use crate::sensitivity::{self, group_scores, lowest, SensitivityConfig};
use crate::trainer::{evaluate, fine_tune, TrainConfig};

/// Floor on a layer's tolerance `1 - s` when allocating a budget.
pub const TOL_EPS: f64 = 0.01;

fn check_amount(amount: f64) -> Result<()> {
    if !(0.0..1.0).contains(&amount) {
        return Err(Error::InvalidAmount(amount));
    }
    Ok(())
}

fn group_of(graph: &ChannelGraph, model: &Model, layer_id: usize) -> Result<PruneGroup> {
    let layer = model.layer(layer_id)?;
    if !layer.is_weighted() {
        return Err(Error::NoWeights(layer_id));
    }
    graph
        .groups()
        .into_iter()
        .find(|g| g.producers.contains(&layer_id))
        .ok_or_else(|| Error::InvalidConfig(format!("layer {layer_id} cannot be pruned structurally")))
}

/// Masks the `floor(amount * units)` least important units of each listed
/// layer (ties: lower index). Tied residual producers are pruned together
/// using their summed importances. No fine-tuning.
pub fn local_prune(model: &Model, layers: &[usize], amount: f64, importance: &ImportanceMap) -> Result<(Model, PruneMask)> {
    check_amount(amount)?;
    let graph = ChannelGraph::new(model)?;
    let mut mask = PruneMask::all_keep(model)?;
    for &id in layers {
        let group = group_of(&graph, model, id)?;
        let scores = group_scores(model, &group.producers, importance)?;
        let count = (amount * group.units as f64).floor() as usize;
        let mut keep = vec![true; group.units];
        for u in lowest(&scores, count) {
            keep[u] = false;
        }
        mask.set_group(model, &group, keep)?;
    }
    let mut out = model.clone();
    mask.apply(&mut out)?;
    Ok((out, mask))
}

/// Per-unit ℓ1 norm of a layer's weights.
pub fn l1_baseline_rank(layer: &Layer) -> Result<Vec<f64>> {
    let w = layer.weight().ok_or(Error::NoWeights(layer.id))?;
    let per = w.len() / w.shape()[0];
    Ok(w.data()
        .chunks(per)
        .map(|row| row.iter().map(|v| v.abs() as f64).sum())
        .collect())
}

/// ℓ1 ranks for every conv/dense layer, in the shape of an importance map.
pub fn l1_importances(model: &Model) -> Result<ImportanceMap> {
    let mut map = ImportanceMap::default();
    for l in model.layers.iter().filter(|l| l.is_weighted()) {
        map.layers.insert(l.id, l1_baseline_rank(l)?);
    }
    Ok(map)
}

/// Splits `budget` across layers in proportion to `max(1 - s, TOL_EPS) * load`
/// with largest-remainder rounding. No layer gets more than `units - 1`;
/// excess is redistributed over the remaining layers.
pub fn allocate_prune_counts(sensitivities: &[f64], loads: &[f64], units: &[usize], budget: usize) -> Result<Vec<usize>> {
    let n = sensitivities.len();
    if loads.len() != n || units.len() != n {
        return Err(Error::InvalidShape(format!(
            "{n} sensitivities, {} loads, {} unit counts",
            loads.len(),
            units.len()
        )));
    }
    let caps: Vec<usize> = units.iter().map(|&u| u.saturating_sub(1)).collect();
    let available: usize = caps.iter().sum();
    if budget > available {
        return Err(Error::BudgetTooLarge { budget, available });
    }
    let mut weights: Vec<f64> = sensitivities
        .iter()
        .zip(loads)
        .map(|(s, l)| (1.0 - s).max(TOL_EPS) * l.max(0.0))
        .collect();
    if weights.iter().all(|&w| w == 0.0) {
        weights = caps.iter().map(|&c| c as f64).collect();
    }
    let mut counts = vec![0usize; n];
    let mut fixed = vec![false; n];
    let mut remaining = budget;
    loop {
        let active: Vec<usize> = (0..n).filter(|&i| !fixed[i] && weights[i] > 0.0).collect();
        let total: f64 = active.iter().map(|&i| weights[i]).sum();
        if active.is_empty() || remaining == 0 {
            break;
        }
        let ideal: Vec<f64> = active.iter().map(|&i| remaining as f64 * weights[i] / total).collect();
        let mut share: Vec<usize> = ideal.iter().map(|x| x.floor() as usize).collect();
        let left = remaining - share.iter().sum::<usize>();
        let mut order: Vec<usize> = (0..active.len()).collect();
        order.sort_by(|&a, &b| {
            let fa = ideal[a] - ideal[a].floor();
            let fb = ideal[b] - ideal[b].floor();
            fb.total_cmp(&fa).then(a.cmp(&b))
        });
        for &k in order.iter().take(left) {
            share[k] += 1;
        }
        let over: Vec<usize> = (0..active.len()).filter(|&k| share[k] > caps[active[k]]).collect();
        if over.is_empty() {
            for (k, &i) in active.iter().enumerate() {
                counts[i] = share[k];
            }
            remaining = 0;
            break;
        }
        for &k in &over {
            let i = active[k];
            counts[i] = caps[i];
            fixed[i] = true;
            remaining -= caps[i];
        }
    }
    if remaining > 0 {
        // only zero-weight layers are left: fill them in index order
        for i in 0..n {
            let add = (caps[i] - counts[i]).min(remaining);
            counts[i] += add;
            remaining -= add;
        }
    }
    Ok(counts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Macs,
    Nps,
    /// Alternate MACs (odd rounds) and NPs (even rounds).
    Both,
}

impl Objective {
    /// Cost criteria used in round `round` (1-based).
    pub fn criteria(&self, round: usize) -> Criteria {
        match self {
            Objective::Macs => Criteria::Macs,
            Objective::Nps => Criteria::Nps,
            Objective::Both if round % 2 == 1 => Criteria::Macs,
            Objective::Both => Criteria::Nps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneObjective {
    pub criteria: Objective,
    /// Stop once test error reaches this.
    pub max_error: f64,
    pub max_iterations: usize,
    /// Fraction of the current cost removed per round.
    pub per_round_reduction: f64,
}

impl Default for PruneObjective {
    fn default() -> Self {
        Self {
            criteria: Objective::Nps,
            max_error: 1.0,
            max_iterations: 3,
            per_round_reduction: 0.125,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneConfig {
    pub objective: PruneObjective,
    pub reference: ReferenceSpec,
    pub target: TargetSpec,
    pub sensitivity: SensitivityConfig,
    pub train: TrainConfig,
    /// Fine-tune with the mask after every round.
    pub fine_tune: bool,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            objective: PruneObjective::default(),
            reference: ReferenceSpec::default(),
            target: TargetSpec::TrueLabel,
            sensitivity: SensitivityConfig::default(),
            train: TrainConfig {
                epochs: 5,
                ..TrainConfig::default()
            },
            fine_tune: true,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        let o = &self.objective;
        if !(0.0..1.0).contains(&o.per_round_reduction) {
            return Err(Error::InvalidConfig(format!(
                "per_round_reduction {} not in [0, 1)",
                o.per_round_reduction
            )));
        }
        if o.max_iterations == 0 {
            return Err(Error::InvalidConfig("max_iterations must be >= 1".into()));
        }
        self.reference.validate()?;
        self.sensitivity.validate()?;
        self.train.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneRow {
    pub iteration: usize,
    /// `baseline`, `macs`, `nps` or `weights`.
    pub criteria: String,
    pub accuracy: f64,
    pub nps: u64,
    pub macs: u64,
    /// Fraction of conv/dense weights that are masked.
    pub sparsity: f64,
    /// Cumulative pruned units (or weights) per producer layer id.
    pub pruned: BTreeMap<usize, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub rows: Vec<PruneRow>,
    pub warnings: Vec<String>,
}

impl PruneReport {
    /// CSV with columns `iteration,criteria,accuracy,nps,macs,sparsity`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,criteria,accuracy,nps,macs,sparsity\n");
        for r in &self.rows {
            s += &format!(
                "{},{},{:.6},{},{},{:.6}\n",
                r.iteration, r.criteria, r.accuracy, r.nps, r.macs, r.sparsity
            );
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct PruneOutcome {
    pub model: Model,
    pub mask: PruneMask,
    pub report: PruneReport,
}

/// Fraction of conv/dense weights that are masked (weight masks) or lie in
/// a masked unit row.
fn sparsity(model: &Model, mask: &PruneMask) -> f64 {
    let mut total = 0usize;
    let mut zeroed = 0usize;
    for l in model.layers.iter().filter(|l| l.is_weighted()) {
        let w = l.weight().expect("weighted");
        total += w.len();
        if let Some(m) = mask.get(l.id) {
            zeroed += match m.granularity {
                Granularity::Weight => m.pruned(),
                _ => m.pruned() * (w.len() / w.shape()[0]),
            };
        }
    }
    zeroed as f64 / total.max(1) as f64
}

fn row(model: &Model, mask: &PruneMask, test: &Dataset, iteration: usize, criteria: &str) -> Result<PruneRow> {
    let cost = profile_cost(model, &model.input_shape, Some(mask))?;
    Ok(PruneRow {
        iteration,
        criteria: criteria.into(),
        accuracy: evaluate(model, test)?.accuracy,
        nps: cost.total_nps,
        macs: cost.total_macs,
        sparsity: sparsity(model, mask),
        pruned: mask.layers.iter().map(|(&id, m)| (id, m.pruned())).collect(),
    })
}

fn tune(model: &Model, train: &Dataset, cfg: &PruneConfig, mask: &PruneMask, warnings: &mut Vec<String>) -> Result<Model> {
    if !cfg.fine_tune {
        return Ok(model.clone());
    }
    match fine_tune(model, train, &cfg.train, Some(mask)) {
        Ok(o) => Ok(o.model),
        Err(Error::TrainingDiverged { epoch, best, .. }) => {
            warnings.push(format!("fine-tuning diverged at epoch {epoch}; kept best checkpoint"));
            let mut m = *best;
            mask.apply(&mut m)?;
            Ok(m)
        }
        Err(e) => Err(e),
    }
}

/// Mask that additionally prunes `counts[g]` of the least important kept
/// units of each group.
fn extend_mask(model: &Model, mask: &PruneMask, groups: &[PruneGroup], scores: &[Vec<f64>], counts: &[usize]) -> Result<PruneMask> {
    let mut next = mask.clone();
    for ((g, s), &count) in groups.iter().zip(scores).zip(counts) {
        let mut keep = mask.get(g.id()).map_or(vec![true; g.units], |m| m.keep.clone());
        let kept: Vec<usize> = (0..g.units).filter(|&u| keep[u]).collect();
        let kept_scores: Vec<f64> = kept.iter().map(|&u| s[u]).collect();
        for k in lowest(&kept_scores, count) {
            keep[kept[k]] = false;
        }
        next.set_group(model, g, keep)?;
    }
    Ok(next)
}

/// Iterative structured pruning: per round, sensitivities and cost loads
/// decide how many units each layer loses, DeepLIFT importances decide
/// which; the smallest budget that removes `per_round_reduction` of the
/// current cost is used. Stops at `max_iterations`, when test error reaches
/// `max_error`, or when no unit can be removed.
pub fn global_prune(model: &Model, train: &Dataset, test: &Dataset, cfg: &PruneConfig) -> Result<PruneOutcome> {
    cfg.validate()?;
    let graph = ChannelGraph::new(model)?;
    let groups = graph.groups();
    let mut model = model.clone();
    let mut mask = PruneMask::all_keep(&model)?;
    let mut report = PruneReport {
        rows: vec![row(&model, &mask, test, 0, "baseline")?],
        warnings: Vec::new(),
    };
    let obj = &cfg.objective;
    for round in 1..=obj.max_iterations {
        if 1.0 - report.rows.last().expect("baseline").accuracy >= obj.max_error {
            break;
        }
        let criteria = obj.criteria.criteria(round);
        let cost = profile_cost(&model, &model.input_shape, Some(&mask))?;
        let current = cost.total(criteria);
        let target = (obj.per_round_reduction * current as f64).ceil() as u64;
        if target == 0 || groups.is_empty() {
            break;
        }
        let importance = dataset_importances(&model, train, &cfg.reference, cfg.target)?;
        let sample = cfg.sensitivity.sample(train)?;
        let sens = sensitivity::profile(&model, &sample, &importance, &cfg.sensitivity)?;

        let kept: Vec<usize> = groups
            .iter()
            .map(|g| mask.get(g.id()).map_or(g.units, |m| m.kept()))
            .collect();
        let group_sens: Vec<f64> = groups
            .iter()
            .map(|g| g.producers.iter().map(|p| sens.sensitivities[p]).fold(0.0, f64::max))
            .collect();
        let group_load: Vec<f64> = groups
            .iter()
            .map(|g| {
                g.producers
                    .iter()
                    .map(|&p| {
                        let l = cost.get(p).expect("profiled");
                        match criteria {
                            Criteria::Macs => l.macs,
                            Criteria::Nps => l.nps,
                        }
                    })
                    .sum::<u64>() as f64
                    / current.max(1) as f64
            })
            .collect();
        let scores: Vec<Vec<f64>> = groups
            .iter()
            .map(|g| group_scores(&model, &g.producers, &importance))
            .collect::<Result<_>>()?;
        let available: usize = kept.iter().map(|k| k - 1).sum();
        if available == 0 {
            break;
        }

        let trial = |budget: usize| -> Result<(PruneMask, u64)> {
            let counts = allocate_prune_counts(&group_sens, &group_load, &kept, budget)?;
            let next = extend_mask(&model, &mask, &groups, &scores, &counts)?;
            let c = profile_cost(&model, &model.input_shape, Some(&next))?.total(criteria);
            Ok((next, current - c))
        };
        // smallest budget reaching the target reduction
        let (mut lo, mut hi) = (1usize, available);
        if trial(hi)?.1 >= target {
            while lo < hi {
                let mid = (lo + hi) / 2;
                if trial(mid)?.1 >= target {
                    hi = mid;
                } else {
                    lo = mid + 1;
                }
            }
        } else {
            report
                .warnings
                .push(format!("round {round}: target reduction unreachable, pruning all available units"));
        }
        let (next, _) = trial(hi)?;
        mask = next;
        mask.apply(&mut model)?;
        model = tune(&model, train, cfg, &mask, &mut report.warnings)?;
        let name = match criteria {
            Criteria::Macs => "macs",
            Criteria::Nps => "nps",
        };
        report.rows.push(row(&model, &mask, test, round, name)?);
    }
    Ok(PruneOutcome { model, mask, report })
}

/// Per-weight score `importance(output unit) * |w|` for every conv/dense layer.
pub fn weight_scores(model: &Model, importance: &ImportanceMap) -> Result<BTreeMap<usize, Vec<f64>>> {
    let mut out = BTreeMap::new();
    for l in model.layers.iter().filter(|l| l.is_weighted()) {
        let w = l.weight().expect("weighted");
        let imp = importance.get(l.id)?;
        let per = w.len() / w.shape()[0];
        let s = w
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| imp[i / per] * v.abs() as f64)
            .collect();
        out.insert(l.id, s);
    }
    Ok(out)
}

/// Iterative unstructured pruning: each round masks `per_round_reduction`
/// of the still-kept weights with the lowest global score
/// `importance(unit) * |w|`. Every layer keeps at least one weight.
pub fn unstructured_prune(model: &Model, train: &Dataset, test: &Dataset, cfg: &PruneConfig) -> Result<PruneOutcome> {
    cfg.validate()?;
    let mut model = model.clone();
    let mut mask = PruneMask::all_keep_weights(&model);
    let mut report = PruneReport {
        rows: vec![row(&model, &mask, test, 0, "baseline")?],
        warnings: Vec::new(),
    };
    let obj = &cfg.objective;
    for round in 1..=obj.max_iterations {
        if 1.0 - report.rows.last().expect("baseline").accuracy >= obj.max_error {
            break;
        }
        let kept_total: usize = mask.layers.values().map(|m| m.kept()).sum();
        let count = (obj.per_round_reduction * kept_total as f64).round() as usize;
        if count == 0 {
            break;
        }
        let importance = dataset_importances(&model, train, &cfg.reference, cfg.target)?;
        let scores = weight_scores(&model, &importance)?;
        let mut candidates: Vec<(f64, usize, usize)> = Vec::with_capacity(kept_total);
        for (&id, s) in &scores {
            let m = mask.get(id).expect("weight mask");
            candidates.extend(s.iter().enumerate().filter(|(i, _)| m.keep[*i]).map(|(i, &v)| (v, id, i)));
        }
        candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut kept_per: BTreeMap<usize, usize> = mask.layers.iter().map(|(&id, m)| (id, m.kept())).collect();
        let mut removed = 0;
        for (_, id, i) in candidates {
            if removed == count {
                break;
            }
            let k = kept_per.get_mut(&id).expect("layer");
            if *k <= 1 {
                continue;
            }
            *k -= 1;
            mask.layers.get_mut(&id).expect("layer").keep[i] = false;
            removed += 1;
        }
        mask.apply(&mut model)?;
        model = tune(&model, train, cfg, &mask, &mut report.warnings)?;
        report.rows.push(row(&model, &mask, test, round, "weights")?);
    }
    Ok(PruneOutcome { model, mask, report })
}

/// Serialises a mask as `{layer_id: {"granularity", "keep": "0101..."}}`.
pub fn mask_to_json(mask: &PruneMask) -> serde_json::Value {
    let layers: BTreeMap<String, serde_json::Value> = mask
        .layers
        .iter()
        .map(|(id, m)| {
            let bits: String = m.keep.iter().map(|&k| if k { '1' } else { '0' }).collect();
            (
                id.to_string(),
                serde_json::json!({ "granularity": m.granularity, "keep": bits }),
            )
        })
        .collect();
    serde_json::json!(layers)
}

pub fn mask_from_json(value: &serde_json::Value) -> Result<PruneMask> {
    let bad = |m: &str| Error::InvalidConfig(format!("mask json: {m}"));
    let obj = value.as_object().ok_or_else(|| bad("expected an object"))?;
    let mut mask = PruneMask::new();
    for (id, entry) in obj {
        let id: usize = id.parse().map_err(|_| bad("layer ids must be integers"))?;
        let granularity: Granularity = serde_json::from_value(entry["granularity"].clone())
            .map_err(|e| bad(&e.to_string()))?;
        let keep = entry["keep"]
            .as_str()
            .ok_or_else(|| bad("keep must be a bit string"))?
            .chars()
            .map(|c| match c {
                '1' => Ok(true),
                '0' => Ok(false),
                _ => Err(bad("keep may only contain 0 and 1")),
            })
            .collect::<Result<Vec<bool>>>()?;
        mask.layers.insert(id, LayerMask { granularity, keep });
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::LayerKind;
    use crate::tensor::Tensor;

    #[test]
    fn allocation_examples() {
        assert_eq!(
            allocate_prune_counts(&[0.8, 0.2], &[1000.0, 3000.0], &[1000, 1000], 400).unwrap(),
            vec![31, 369]
        );
        assert_eq!(
            allocate_prune_counts(&[0.5, 0.5], &[1.0, 1.0], &[20, 20], 10).unwrap(),
            vec![5, 5]
        );
        let c = allocate_prune_counts(&[1.0, 0.0], &[1.0, 1.0], &[200, 200], 100).unwrap();
        assert_eq!(c, vec![1, 99]);
    }

    #[test]
    fn allocation_caps_and_redistributes() {
        let c = allocate_prune_counts(&[0.0, 0.0], &[9.0, 1.0], &[4, 100], 20).unwrap();
        assert_eq!(c, vec![3, 17]);
        assert!(matches!(
            allocate_prune_counts(&[0.0], &[1.0], &[4], 4),
            Err(Error::BudgetTooLarge { budget: 4, available: 3 })
        ));
    }

    #[test]
    fn l1_rank() {
        let l = Layer::new(
            0,
            LayerKind::Dense {
                weight: Tensor::new(vec![2, 2], vec![1.0, 1.0, 3.0, -3.0]).unwrap(),
                bias: None,
            },
        );
        assert_eq!(l1_baseline_rank(&l).unwrap(), vec![2.0, 6.0]);
        assert!(matches!(l1_baseline_rank(&Layer::relu(3)), Err(Error::NoWeights(3))));
    }

    #[test]
    fn both_alternates() {
        assert_eq!(Objective::Both.criteria(1), Criteria::Macs);
        assert_eq!(Objective::Both.criteria(2), Criteria::Nps);
        assert_eq!(Objective::Nps.criteria(1), Criteria::Nps);
    }
}
