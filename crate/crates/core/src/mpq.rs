//! Mixed-precision integer quantization by fake quantization.
//!
//! Weights use a symmetric per-tensor grid, activations an asymmetric grid
//! over a calibrated range. A configuration assigns weight and activation
//! bits to every conv/dense layer; the activation grid applies to the layer's
//! input. The search lowers bits collectively (coarse), then layer by layer in
//! order of ascending sensitivity (fine), and reports cumulative bits (CB).

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::net::{LayerKind, Model};
use crate::sensitivity::SensitivityProfile;
use crate::tensor::Tensor;
use crate::trainer::{fine_tune, TrainConfig};

/// Smallest scale used for all-zero tensors.
pub const SCALE_EPS: f64 = 1e-8;
/// Half-width used to widen a degenerate activation range.
pub const RANGE_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Symmetric,
    Asymmetric,
}

/// Uniform integer grid: `v ≈ (q - zero_point) * scale`, `q ∈ [qmin, qmax]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub scale: f64,
    pub zero_point: i64,
    pub qmin: i64,
    pub qmax: i64,
}

impl Grid {
    pub fn symmetric(max_abs: f64, bits: u32) -> Self {
        let qmax = (1i64 << (bits - 1)) - 1;
        let scale = if max_abs > 0.0 { max_abs / qmax as f64 } else { SCALE_EPS };
        Self {
            scale: scale.max(SCALE_EPS),
            zero_point: 0,
            qmin: -qmax,
            qmax,
        }
    }

    /// Grid over `[lo, hi]` extended to contain 0, so that 0.0 is exact.
    pub fn asymmetric(lo: f64, hi: f64, bits: u32) -> Self {
        let (lo, hi) = (lo.min(0.0), hi.max(0.0));
        let qmax = (1i64 << bits) - 1;
        let scale = ((hi - lo) / qmax as f64).max(SCALE_EPS);
        let zero_point = ((-lo / scale).round() as i64).clamp(0, qmax);
        Self {
            scale,
            zero_point,
            qmin: 0,
            qmax,
        }
    }

    /// Rounds half away from zero and clamps to the integer range.
    pub fn quantize(&self, v: f32) -> i64 {
        ((v as f64 / self.scale).round() as i64 + self.zero_point).clamp(self.qmin, self.qmax)
    }

    pub fn dequantize(&self, q: i64) -> f32 {
        ((q - self.zero_point) as f64 * self.scale) as f32
    }

    pub fn fake(&self, v: f32) -> f32 {
        self.dequantize(self.quantize(v))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quantized {
    pub values: Vec<i64>,
    pub grid: Grid,
}

fn check_bits(bits: u32, lo: u32, hi: u32) -> Result<()> {
    if !(lo..=hi).contains(&bits) {
        return Err(Error::InvalidConfig(format!("bits {bits} outside [{lo}, {hi}]")));
    }
    Ok(())
}

/// Quantizes a tensor on a grid fitted to its own range.
pub fn quantize_tensor(values: &[f32], bits: u32, scheme: Scheme) -> Result<Quantized> {
    check_bits(bits, 2, 16)?;
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidConfig("cannot quantize non-finite values".into()));
    }
    let grid = match scheme {
        Scheme::Symmetric => {
            let max_abs = values.iter().fold(0.0f64, |m, &v| m.max((v as f64).abs()));
            Grid::symmetric(max_abs, bits)
        }
        Scheme::Asymmetric => {
            let lo = values.iter().fold(f64::INFINITY, |m, &v| m.min(v as f64));
            let hi = values.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
            if values.is_empty() {
                Grid::asymmetric(0.0, 0.0, bits)
            } else {
                Grid::asymmetric(lo, hi, bits)
            }
        }
    };
    Ok(Quantized {
        values: values.iter().map(|&v| grid.quantize(v)).collect(),
        grid,
    })
}

/// Replaces `values` by their symmetric fake-quantized versions. One bit
/// binarizes to `sign(v) * mean|v|`.
pub fn fake_quantize_symmetric(values: &mut [f32], bits: u32) -> Result<()> {
    check_bits(bits, 1, 16)?;
    if bits == 1 {
        let mean = values.iter().map(|v| v.abs() as f64).sum::<f64>() / values.len().max(1) as f64;
        values.iter_mut().for_each(|v| *v = (v.signum() as f64 * mean) as f32);
        return Ok(());
    }
    let q = quantize_tensor(values, bits, Scheme::Symmetric)?;
    for (v, &i) in values.iter_mut().zip(&q.values) {
        *v = q.grid.dequantize(i);
    }
    Ok(())
}

/// Clipped activation range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

/// Ranges of the model input and of every layer output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationRanges {
    pub input: Range,
    pub layers: Vec<Range>,
    pub samples: usize,
    pub percentile: f64,
}

impl ActivationRanges {
    /// Range of the input of layer `index`.
    pub fn layer_input(&self, index: usize) -> Range {
        if index == 0 {
            self.input
        } else {
            self.layers[index - 1]
        }
    }
}

fn percentile_range(values: &mut [f32], percentile: f64, relu: bool) -> Range {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    // nearest rank, 1-based
    let rank = |p: f64| ((p / 100.0 * n as f64).ceil() as usize).clamp(1, n) - 1;
    let hi = values[rank(percentile)] as f64;
    let lo = values[rank(100.0 - percentile).min(n - 1)] as f64;
    let lo = if percentile >= 100.0 { values[0] as f64 } else { lo };
    let (mut lo, mut hi) = (lo.min(hi), hi);
    if hi - lo < RANGE_EPS {
        let c = (lo + hi) / 2.0;
        lo = c - RANGE_EPS;
        hi = c + RANGE_EPS;
    }
    if relu {
        lo = 0.0;
        hi = hi.max(RANGE_EPS);
    }
    Range { lo, hi }
}

/// Per-layer ranges at the given percentile of observed values (nearest
/// rank). ReLU outputs get `lo = 0`.
pub fn calibrate_activations(model: &Model, sample: &Tensor, percentile: f64) -> Result<ActivationRanges> {
    if sample.is_empty() || sample.batch() == 0 {
        return Err(Error::EmptyDataset);
    }
    if !(50.0..=100.0).contains(&percentile) {
        return Err(Error::InvalidConfig(format!("percentile {percentile} not in [50, 100]")));
    }
    if sample.batch() < 32 {
        log::warn!("calibrating activations on only {} images", sample.batch());
    }
    let (_, record) = model.forward_recorded(sample)?;
    let mut input = sample.data().to_vec();
    let input = percentile_range(&mut input, percentile, false);
    let layers = (0..model.layers.len())
        .map(|i| {
            let mut v = record.post(i).data().to_vec();
            percentile_range(&mut v, percentile, matches!(model.layers[i].kind, LayerKind::Relu))
        })
        .collect();
    Ok(ActivationRanges {
        input,
        layers,
        samples: sample.batch(),
        percentile,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerQuant {
    pub id: usize,
    pub weight_bits: u32,
    pub act_bits: u32,
    pub weight_scale: f64,
    pub act_scale: f64,
    pub act_zero_point: i64,
    pub act_lo: f64,
    pub act_hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantConfig {
    /// One entry per conv/dense layer in model order.
    pub layers: Vec<LayerQuant>,
    pub calibration_samples: usize,
}

impl QuantConfig {
    /// Uniform bits with scales derived from `model` and `ranges`.
    pub fn uniform(model: &Model, ranges: &ActivationRanges, bits: u32) -> Result<Self> {
        let n = model.weighted_layer_ids().len();
        Self::with_bits(model, ranges, &vec![(bits, bits); n])
    }

    /// Builds a config from per-layer `(weight_bits, act_bits)`.
    pub fn with_bits(model: &Model, ranges: &ActivationRanges, bits: &[(u32, u32)]) -> Result<Self> {
        let ids = model.weighted_layer_ids();
        if bits.len() != ids.len() {
            return Err(Error::InvalidConfig(format!(
                "{} bit pairs for {} quantizable layers",
                bits.len(),
                ids.len()
            )));
        }
        let mut layers = Vec::with_capacity(ids.len());
        for (&id, &(wb, ab)) in ids.iter().zip(bits) {
            check_bits(wb, 2, 16)?;
            check_bits(ab, 2, 16)?;
            let index = model.index_of(id)?;
            let w = model.layers[index].weight().expect("weighted");
            let wg = Grid::symmetric(w.max_abs() as f64, wb);
            let r = ranges.layer_input(index);
            let ag = Grid::asymmetric(r.lo, r.hi, ab);
            layers.push(LayerQuant {
                id,
                weight_bits: wb,
                act_bits: ab,
                weight_scale: wg.scale,
                act_scale: ag.scale,
                act_zero_point: ag.zero_point,
                act_lo: r.lo,
                act_hi: r.hi,
            });
        }
        Ok(Self {
            layers,
            calibration_samples: ranges.samples,
        })
    }

    pub fn bits(&self) -> Vec<(u32, u32)> {
        self.layers.iter().map(|l| (l.weight_bits, l.act_bits)).collect()
    }

    pub fn weight_cb(&self) -> u32 {
        self.layers.iter().map(|l| l.weight_bits).sum()
    }

    pub fn act_cb(&self) -> u32 {
        self.layers.iter().map(|l| l.act_bits).sum()
    }
}

/// Model whose conv/dense weights are replaced by their fake-quantized values.
pub fn quantize_weights(model: &Model, cfg: &QuantConfig) -> Result<Model> {
    let mut out = model.clone();
    for lq in &cfg.layers {
        let w = out.layer_mut(lq.id)?.weight_mut().ok_or(Error::NoWeights(lq.id))?;
        fake_quantize_symmetric(w.data_mut(), lq.weight_bits)?;
    }
    Ok(out)
}

/// Fake-quantized model: weights quantized once, activations on every call.
#[derive(Debug, Clone)]
pub struct QuantizedModel {
    pub model: Model,
    /// Activation grid for the input of each layer index, if quantized.
    grids: Vec<Option<Grid>>,
}

impl QuantizedModel {
    pub fn new(model: &Model, cfg: &QuantConfig) -> Result<Self> {
        let qmodel = quantize_weights(model, cfg)?;
        let mut grids = vec![None; model.layers.len()];
        for lq in &cfg.layers {
            let index = model.index_of(lq.id)?;
            grids[index] = Some(Grid::asymmetric(lq.act_lo, lq.act_hi, lq.act_bits));
        }
        Ok(Self { model: qmodel, grids })
    }

    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        let grids = &self.grids;
        self.model.forward_with_hook(batch, &mut |i, x: &mut Tensor| {
            if let Some(g) = grids[i] {
                x.data_mut().iter_mut().for_each(|v| *v = g.fake(*v));
            }
        })
    }

    pub fn accuracy(&self, data: &Dataset) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut correct = 0usize;
        for (batch, labels) in data.batches(256) {
            let logits = self.forward(&batch)?;
            for (row, &y) in logits.data().chunks(logits.item_len()).zip(labels) {
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                correct += (best == y) as usize;
            }
        }
        Ok(correct as f64 / data.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpqOptions {
    pub start_bits: u32,
    pub min_bits: u32,
    /// Lowest bits for the first and last quantized layer; `None` disables.
    pub first_last_floor: Option<u32>,
    /// Coarse search stops once accuracy falls below this.
    pub acc_floor: f64,
    /// Coarse search also stops once accuracy falls more than this below
    /// the starting configuration's accuracy.
    pub max_drop: f64,
    pub protect_frac: f64,
    pub max_coarse_iterations: usize,
    /// Fine-tune (dequantized weights) between coarse iterations.
    pub fine_tune: Option<TrainConfig>,
    pub per_step_tol: f64,
    pub percentile: f64,
    pub calibration_samples: usize,
}

impl Default for MpqOptions {
    fn default() -> Self {
        Self {
            start_bits: 8,
            min_bits: 2,
            first_last_floor: Some(4),
            acc_floor: 0.0,
            max_drop: 0.03,
            protect_frac: 0.25,
            max_coarse_iterations: 8,
            fine_tune: None,
            per_step_tol: 0.002,
            percentile: 99.9,
            calibration_samples: 256,
        }
    }
}

impl MpqOptions {
    pub fn validate(&self) -> Result<()> {
        check_bits(self.start_bits, 2, 16)?;
        check_bits(self.min_bits, 2, self.start_bits)?;
        if !(0.0..=1.0).contains(&self.protect_frac) {
            return Err(Error::InvalidConfig(format!("protect_frac {} not in [0, 1]", self.protect_frac)));
        }
        if self.max_drop < 0.0 {
            return Err(Error::InvalidConfig("max_drop must be >= 0".into()));
        }
        if self.per_step_tol < 0.0 {
            return Err(Error::InvalidConfig("per_step_tol must be >= 0".into()));
        }
        Ok(())
    }

    fn floors(&self, n: usize) -> Vec<u32> {
        let mut f = vec![self.min_bits; n];
        if let Some(fl) = self.first_last_floor {
            if n > 0 {
                f[0] = f[0].max(fl);
                f[n - 1] = f[n - 1].max(fl);
            }
        }
        f
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchStage {
    Start,
    Coarse,
    Fine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub stage: SearchStage,
    /// Layer changed by a fine step.
    pub layer: Option<usize>,
    /// `"weight"` or `"act"` for fine steps.
    pub target: Option<String>,
    pub weight_cb: u32,
    pub act_cb: u32,
    pub accuracy: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CbReport {
    pub weight_cb: u32,
    pub act_cb: u32,
    pub accuracy: f64,
    pub trace: Vec<TraceStep>,
    pub warnings: Vec<String>,
}

impl CbReport {
    /// CSV with columns `step,stage,layer,target,weight_cb,act_cb,accuracy,accepted`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,stage,layer,target,weight_cb,act_cb,accuracy,accepted\n");
        for (i, t) in self.trace.iter().enumerate() {
            let stage = match t.stage {
                SearchStage::Start => "start",
                SearchStage::Coarse => "coarse",
                SearchStage::Fine => "fine",
            };
            s += &format!(
                "{i},{stage},{},{},{},{},{:.6},{}\n",
                t.layer.map_or(String::new(), |l| l.to_string()),
                t.target.as_deref().unwrap_or(""),
                t.weight_cb,
                t.act_cb,
                t.accuracy,
                t.accepted
            );
        }
        s
    }
}

/// Result of a search: the chosen configuration, the (possibly fine-tuned)
/// float model it applies to, and the report.
#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub model: Model,
    pub config: QuantConfig,
    pub report: CbReport,
}

fn calibration_sample(data: &Dataset, opts: &MpqOptions) -> Result<Tensor> {
    if data.is_empty() || opts.calibration_samples == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok(data.head(opts.calibration_samples).images)
}

fn evaluate_bits(model: &Model, ranges: &ActivationRanges, bits: &[(u32, u32)], eval: &Dataset) -> Result<(QuantConfig, f64)> {
    let cfg = QuantConfig::with_bits(model, ranges, bits)?;
    let acc = QuantizedModel::new(model, &cfg)?.accuracy(eval)?;
    Ok((cfg, acc))
}

/// Sensitivity of each quantizable layer in model order (0 when absent).
fn layer_sensitivities(model: &Model, profile: &SensitivityProfile) -> Vec<f64> {
    model
        .weighted_layer_ids()
        .iter()
        .map(|id| profile.sensitivities.get(id).copied().unwrap_or(0.0))
        .collect()
}

/// Indices of the `count` most sensitive layers (ties: lower index first).
fn most_sensitive(sens: &[f64], count: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..sens.len()).collect();
    order.sort_by(|&a, &b| sens[b].total_cmp(&sens[a]).then(a.cmp(&b)));
    order.truncate(count);
    order
}

/// One collective reduction: every layer loses one bit (respecting floors)
/// except the most sensitive `ceil(protect_frac * L)` layers.
pub fn coarse_step(bits: &[(u32, u32)], sens: &[f64], protect_frac: f64, floors: &[u32]) -> Vec<(u32, u32)> {
    let protect = (protect_frac * bits.len() as f64).ceil() as usize;
    let protected = most_sensitive(sens, protect);
    bits.iter()
        .enumerate()
        .map(|(i, &(w, a))| {
            if protected.contains(&i) {
                (w, a)
            } else {
                ((w - 1).max(floors[i]).min(w), (a - 1).max(floors[i]).min(a))
            }
        })
        .collect()
}

/// Coarse collective bit reduction.
///
/// `calib` provides activation calibration (and fine-tuning) data, `eval`
/// the accuracy used for the stopping rule.
pub fn coarse_search(
    model: &Model,
    calib: &Dataset,
    eval: &Dataset,
    profile: &SensitivityProfile,
    opts: &MpqOptions,
) -> Result<SearchOutcome> {
    opts.validate()?;
    let n = model.weighted_layer_ids().len();
    let sens = layer_sensitivities(model, profile);
    let floors = opts.floors(n);
    let mut model = model.clone();
    let mut ranges = calibrate_activations(&model, &calibration_sample(calib, opts)?, opts.percentile)?;
    let mut bits = vec![(opts.start_bits, opts.start_bits); n];
    let (mut cfg, mut acc) = evaluate_bits(&model, &ranges, &bits, eval)?;
    let mut report = CbReport {
        weight_cb: cfg.weight_cb(),
        act_cb: cfg.act_cb(),
        accuracy: acc,
        trace: vec![TraceStep {
            stage: SearchStage::Start,
            layer: None,
            target: None,
            weight_cb: cfg.weight_cb(),
            act_cb: cfg.act_cb(),
            accuracy: acc,
            accepted: true,
        }],
        warnings: Vec::new(),
    };
    if acc < opts.acc_floor {
        report.warnings.push(format!(
            "NoOp: start accuracy {acc:.4} is already below the floor {:.4}",
            opts.acc_floor
        ));
        return Ok(SearchOutcome { model, config: cfg, report });
    }
    let floor = opts.acc_floor.max(acc - opts.max_drop);
    for _ in 0..opts.max_coarse_iterations {
        let next = coarse_step(&bits, &sens, opts.protect_frac, &floors);
        if next == bits {
            if opts.protect_frac >= 1.0 {
                report.warnings.push("NoChange: every layer is protected".into());
            }
            break;
        }
        let (next_cfg, next_acc) = evaluate_bits(&model, &ranges, &next, eval)?;
        let accepted = next_acc >= floor;
        report.trace.push(TraceStep {
            stage: SearchStage::Coarse,
            layer: None,
            target: None,
            weight_cb: next_cfg.weight_cb(),
            act_cb: next_cfg.act_cb(),
            accuracy: next_acc,
            accepted,
        });
        if !accepted {
            break;
        }
        bits = next;
        cfg = next_cfg;
        acc = next_acc;
        if let Some(tc) = &opts.fine_tune {
            let start = quantize_weights(&model, &cfg)?;
            let tuned = match fine_tune(&start, calib, tc, None) {
                Ok(o) => o.model,
                Err(Error::TrainingDiverged { best, .. }) => {
                    report.warnings.push("fine-tuning diverged; kept best checkpoint".into());
                    *best
                }
                Err(e) => return Err(e),
            };
            let tuned_ranges = calibrate_activations(&tuned, &calibration_sample(calib, opts)?, opts.percentile)?;
            let (c, a) = evaluate_bits(&tuned, &tuned_ranges, &bits, eval)?;
            // a fine-tune that lowers quantized accuracy is discarded
            if a >= acc {
                model = tuned;
                ranges = tuned_ranges;
                cfg = c;
                acc = a;
            } else {
                report.warnings.push(format!("fine-tuning lowered accuracy to {a:.4}; discarded"));
            }
        }
    }
    report.weight_cb = cfg.weight_cb();
    report.act_cb = cfg.act_cb();
    report.accuracy = acc;
    Ok(SearchOutcome { model, config: cfg, report })
}

/// Per-layer refinement. Layers are visited by ascending sensitivity; the
/// weight bits and then the activation bits are lowered by one and the change
/// is kept if accuracy drops by at most `per_step_tol` relative to the current
/// configuration. Passes repeat until one makes no change.
pub fn fine_search(
    model: &Model,
    calib: &Dataset,
    eval: &Dataset,
    profile: &SensitivityProfile,
    start: &QuantConfig,
    opts: &MpqOptions,
) -> Result<SearchOutcome> {
    opts.validate()?;
    let sens = layer_sensitivities(model, profile);
    let floors = opts.floors(sens.len());
    let ranges = calibrate_activations(model, &calibration_sample(calib, opts)?, opts.percentile)?;
    let mut bits = start.bits();
    let (mut cfg, mut acc) = evaluate_bits(model, &ranges, &bits, eval)?;
    let mut trace = vec![TraceStep {
        stage: SearchStage::Start,
        layer: None,
        target: None,
        weight_cb: cfg.weight_cb(),
        act_cb: cfg.act_cb(),
        accuracy: acc,
        accepted: true,
    }];
    let mut order: Vec<usize> = (0..sens.len()).collect();
    order.sort_by(|&a, &b| sens[a].total_cmp(&sens[b]).then(a.cmp(&b)));
    let ids = model.weighted_layer_ids();
    loop {
        let mut changed = false;
        for &i in &order {
            for target in ["weight", "act"] {
                let current = if target == "weight" { bits[i].0 } else { bits[i].1 };
                if current <= floors[i] {
                    continue;
                }
                let mut trial = bits.clone();
                if target == "weight" {
                    trial[i].0 -= 1;
                } else {
                    trial[i].1 -= 1;
                }
                let (tcfg, tacc) = evaluate_bits(model, &ranges, &trial, eval)?;
                let accepted = acc - tacc <= opts.per_step_tol;
                trace.push(TraceStep {
                    stage: SearchStage::Fine,
                    layer: Some(ids[i]),
                    target: Some(target.into()),
                    weight_cb: tcfg.weight_cb(),
                    act_cb: tcfg.act_cb(),
                    accuracy: tacc,
                    accepted,
                });
                if accepted {
                    bits = trial;
                    cfg = tcfg;
                    acc = tacc;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    Ok(SearchOutcome {
        model: model.clone(),
        report: CbReport {
            weight_cb: cfg.weight_cb(),
            act_cb: cfg.act_cb(),
            accuracy: acc,
            trace,
            warnings: Vec::new(),
        },
        config: cfg,
    })
}
