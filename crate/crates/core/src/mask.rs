//! Prune masks and the channel topology they act on.
//!
//! Structured pruning removes output units (conv channels, dense neurons) of
//! "producer" layers. A removed unit is zeroed in its producer, in any batch
//! norm that normalises it, and in the matching input slice of every consumer.
//! Residual adds tie the channel spaces of both branches together; such tied
//! producers form one [`PruneGroup`] and share a single mask.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::net::{LayerKind, Model};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Channel,
    Neuron,
    Weight,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerMask {
    pub granularity: Granularity,
    /// `true` = keep. One entry per unit, or per weight for [`Granularity::Weight`].
    pub keep: Vec<bool>,
}

impl LayerMask {
    pub fn kept(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    pub fn pruned(&self) -> usize {
        self.keep.len() - self.kept()
    }
}

/// Per-layer masks keyed by layer id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PruneMask {
    pub layers: BTreeMap<usize, LayerMask>,
}

/// Unit masks tied together by residual connections.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneGroup {
    /// Producer layer ids (conv/dense) whose output units are tied.
    pub producers: Vec<usize>,
    pub units: usize,
}

impl PruneGroup {
    /// Representative id: the first producer.
    pub fn id(&self) -> usize {
        self.producers[0]
    }
}

/// Channel-space analysis of a model.
#[derive(Debug, Clone)]
pub struct ChannelGraph {
    /// Root space of each layer's input.
    in_space: Vec<usize>,
    /// Consecutive elements per channel in each layer's input (for flattened features).
    in_per_channel: Vec<usize>,
    /// Producer layer indices per root space.
    producers: BTreeMap<usize, Vec<usize>>,
    /// Channel count per root space.
    channels: BTreeMap<usize, usize>,
    prunable: BTreeMap<usize, bool>,
    ids: Vec<usize>,
}

fn find(parent: &mut [usize], x: usize) -> usize {
    let mut r = x;
    while parent[r] != r {
        r = parent[r];
    }
    let mut c = x;
    while parent[c] != r {
        let next = parent[c];
        parent[c] = r;
        c = next;
    }
    r
}

impl ChannelGraph {
    pub fn new(model: &Model) -> Result<Self> {
        let shapes = model.shapes()?;
        let n = model.layers.len();
        // space 0 is the model input; space i + 1 is created by producer layer i
        let mut parent: Vec<usize> = (0..=n).collect();
        let mut channels_of: Vec<usize> = vec![model.input_shape[0]; n + 1];
        let mut out_space = vec![0usize; n];
        let mut out_per_channel = vec![0usize; n];
        let mut in_space_raw = vec![0usize; n];
        let mut in_per_channel = vec![0usize; n];
        let input_per_channel: usize = model.input_shape[1..].iter().product();

        for (i, layer) in model.layers.iter().enumerate() {
            let (sp, per) = if i == 0 {
                (0, input_per_channel.max(1))
            } else {
                (out_space[i - 1], out_per_channel[i - 1])
            };
            in_space_raw[i] = sp;
            in_per_channel[i] = per;
            let out_item = &shapes[i];
            match &layer.kind {
                LayerKind::Dense { .. } | LayerKind::Conv2d { .. } => {
                    out_space[i] = i + 1;
                    channels_of[i + 1] = out_item[0];
                    out_per_channel[i] = out_item[1..].iter().product::<usize>().max(1);
                }
                LayerKind::GlobalAvgPool => {
                    out_space[i] = sp;
                    out_per_channel[i] = 1;
                }
                LayerKind::MaxPool { .. } | LayerKind::AvgPool { .. } => {
                    out_space[i] = sp;
                    out_per_channel[i] = out_item[1..].iter().product();
                }
                LayerKind::ResidualAdd { source } => {
                    let s = model.index_of(*source)?;
                    let (a, b) = (find(&mut parent, sp), find(&mut parent, out_space[s]));
                    if a != b {
                        parent[a.max(b)] = a.min(b);
                    }
                    out_space[i] = sp;
                    out_per_channel[i] = per;
                }
                _ => {
                    out_space[i] = sp;
                    out_per_channel[i] = per;
                }
            }
        }

        let in_space: Vec<usize> = in_space_raw.iter().map(|&s| find(&mut parent, s)).collect();
        let mut producers: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        let mut channels = BTreeMap::new();
        for (i, layer) in model.layers.iter().enumerate() {
            if layer.is_weighted() {
                let root = find(&mut parent, i + 1);
                producers.entry(root).or_default().push(i);
                channels.insert(root, channels_of[i + 1]);
            }
        }
        let output_root = find(&mut parent, out_space[n - 1]);
        let input_root = find(&mut parent, 0);
        let prunable = producers
            .keys()
            .map(|&r| (r, r != output_root && r != input_root))
            .collect();
        Ok(Self {
            in_space,
            in_per_channel,
            producers,
            channels,
            prunable,
            ids: model.layers.iter().map(|l| l.id).collect(),
        })
    }

    /// Groups whose units may be removed by structured pruning.
    pub fn groups(&self) -> Vec<PruneGroup> {
        self.producers
            .iter()
            .filter(|(r, _)| self.prunable[r])
            .map(|(r, p)| PruneGroup {
                producers: p.iter().map(|&i| self.ids[i]).collect(),
                units: self.channels[r],
            })
            .collect()
    }

    fn root_of_producer(&self, index: usize) -> Option<usize> {
        self.producers
            .iter()
            .find(|(_, p)| p.contains(&index))
            .map(|(&r, _)| r)
    }

    /// Whether a layer (by index) reads its input from the given root space.
    fn reads(&self, index: usize, root: usize) -> bool {
        self.in_space[index] == root
    }

    /// Kept-unit mask of the space a layer reads from, if that space is masked.
    fn input_keep<'a>(&self, model: &Model, index: usize, mask: &'a PruneMask) -> Option<(&'a [bool], usize)> {
        let root = self.in_space[index];
        let producers = self.producers.get(&root)?;
        producers.iter().find_map(|&p| {
            mask.layers
                .get(&model.layers[p].id)
                .filter(|m| m.granularity != Granularity::Weight)
                .map(|m| (&m.keep[..], self.in_per_channel[index]))
        })
    }

    /// Effective (kept) input and output unit counts of a weighted layer under a mask.
    /// Input units are counted in input features (channels times elements per channel
    /// for flattened inputs).
    pub(crate) fn kept_io(&self, model: &Model, index: usize, mask: Option<&PruneMask>) -> (usize, usize) {
        let layer = &model.layers[index];
        let w = layer.weight().expect("weighted layer");
        let (out_units, in_units) = (w.shape()[0], w.shape()[1]);
        let Some(mask) = mask else {
            return (in_units, out_units);
        };
        let out_kept = mask
            .layers
            .get(&layer.id)
            .filter(|m| m.granularity != Granularity::Weight)
            .map_or(out_units, |m| m.kept());
        let in_kept = match self.input_keep(model, index, mask) {
            Some((keep, per)) => {
                let k = keep.iter().filter(|&&k| k).count();
                if layer.is_conv() {
                    k
                } else {
                    k * per
                }
            }
            None => in_units,
        };
        (in_kept, out_kept)
    }

    /// Kept channels of the space read by layer `index` (e.g. a batch norm).
    pub(crate) fn kept_input_channels(&self, model: &Model, index: usize, mask: Option<&PruneMask>) -> Option<usize> {
        mask.and_then(|m| self.input_keep(model, index, m))
            .map(|(keep, _)| keep.iter().filter(|&&k| k).count())
    }
}

impl PruneMask {
    pub fn new() -> Self {
        Self::default()
    }

    /// All-keep unit masks for every prunable group.
    pub fn all_keep(model: &Model) -> Result<Self> {
        let graph = ChannelGraph::new(model)?;
        let mut mask = Self::new();
        for g in graph.groups() {
            for &p in &g.producers {
                let granularity = unit_granularity(model, p)?;
                mask.layers.insert(
                    p,
                    LayerMask {
                        granularity,
                        keep: vec![true; g.units],
                    },
                );
            }
        }
        Ok(mask)
    }

    /// Weight-granular all-keep masks for every conv/dense layer.
    pub fn all_keep_weights(model: &Model) -> Self {
        let mut mask = Self::new();
        for l in &model.layers {
            if let Some(w) = l.weight() {
                mask.layers.insert(
                    l.id,
                    LayerMask {
                        granularity: Granularity::Weight,
                        keep: vec![true; w.len()],
                    },
                );
            }
        }
        mask
    }

    pub fn get(&self, layer_id: usize) -> Option<&LayerMask> {
        self.layers.get(&layer_id)
    }

    /// Sets the unit mask of a group (all tied producers at once).
    pub fn set_group(&mut self, model: &Model, group: &PruneGroup, keep: Vec<bool>) -> Result<()> {
        if keep.len() != group.units {
            return Err(shape_err(format!(
                "group {} has {} units, mask has {}",
                group.id(),
                group.units,
                keep.len()
            )));
        }
        for &p in &group.producers {
            self.layers.insert(
                p,
                LayerMask {
                    granularity: unit_granularity(model, p)?,
                    keep: keep.clone(),
                },
            );
        }
        Ok(())
    }

    /// Total masked entries (units or weights) across layers.
    pub fn pruned(&self) -> usize {
        self.layers.values().map(|m| m.pruned()).sum()
    }

    /// Combines two masks: an entry is kept only if both keep it.
    pub fn intersect(&self, other: &PruneMask) -> PruneMask {
        let mut out = self.clone();
        for (id, m) in &other.layers {
            match out.layers.get_mut(id) {
                Some(mine) if mine.granularity == m.granularity => {
                    mine.keep.iter_mut().zip(&m.keep).for_each(|(a, b)| *a &= *b);
                }
                _ => {
                    out.layers.insert(*id, m.clone());
                }
            }
        }
        out
    }

    /// Checks shapes and that no layer is pruned to emptiness.
    pub fn validate(&self, model: &Model) -> Result<()> {
        for (&id, m) in &self.layers {
            let layer = model.layer(id)?;
            let w = layer.weight().ok_or(Error::NoWeights(id))?;
            let expected = match m.granularity {
                Granularity::Weight => w.len(),
                _ => w.shape()[0],
            };
            if m.keep.len() != expected {
                return Err(shape_err(format!(
                    "mask for layer {id} has {} entries, expected {expected}",
                    m.keep.len()
                )));
            }
            if m.kept() == 0 {
                return Err(Error::InvalidConfig(format!("mask would empty layer {id}")));
            }
        }
        Ok(())
    }

    /// Zeroes every masked parameter in place: producer rows and biases,
    /// batch-norm affine terms of removed channels and consumer input slices.
    pub fn apply(&self, model: &mut Model) -> Result<()> {
        self.validate(model)?;
        let graph = ChannelGraph::new(model)?;
        for (&id, m) in &self.layers {
            let index = model.index_of(id)?;
            if m.granularity == Granularity::Weight {
                let w = model.layers[index].weight_mut().expect("validated");
                for (v, &k) in w.data_mut().iter_mut().zip(&m.keep) {
                    if !k {
                        *v = 0.0;
                    }
                }
                continue;
            }
            let Some(root) = graph.root_of_producer(index) else {
                continue;
            };
            let pruned: Vec<usize> = m.keep.iter().enumerate().filter(|(_, &k)| !k).map(|(c, _)| c).collect();
            if pruned.is_empty() {
                continue;
            }
            zero_producer_units(&mut model.layers[index].kind, &pruned);
            for j in 0..model.layers.len() {
                if !graph.reads(j, root) {
                    continue;
                }
                let per = graph.in_per_channel[j];
                match &mut model.layers[j].kind {
                    LayerKind::BatchNorm { gamma, beta, .. } => {
                        for &c in &pruned {
                            gamma.data_mut()[c] = 0.0;
                            beta.data_mut()[c] = 0.0;
                        }
                    }
                    LayerKind::Conv2d { weight, .. } => {
                        let s = weight.shape().to_vec();
                        let k = s[2] * s[3];
                        let data = weight.data_mut();
                        for o in 0..s[0] {
                            for &c in &pruned {
                                let start = (o * s[1] + c) * k;
                                data[start..start + k].iter_mut().for_each(|v| *v = 0.0);
                            }
                        }
                    }
                    LayerKind::Dense { weight, .. } => {
                        let s = weight.shape().to_vec();
                        let data = weight.data_mut();
                        for o in 0..s[0] {
                            for &c in &pruned {
                                let start = o * s[1] + c * per;
                                data[start..start + per].iter_mut().for_each(|v| *v = 0.0);
                            }
                        }
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }
}

fn unit_granularity(model: &Model, id: usize) -> Result<Granularity> {
    let l = model.layer(id)?;
    match l.kind {
        LayerKind::Conv2d { .. } => Ok(Granularity::Channel),
        LayerKind::Dense { .. } => Ok(Granularity::Neuron),
        _ => Err(Error::NoWeights(id)),
    }
}

fn zero_producer_units(kind: &mut LayerKind, units: &[usize]) {
    if let LayerKind::Dense { weight, bias } | LayerKind::Conv2d { weight, bias, .. } = kind {
        let per: usize = weight.shape()[1..].iter().product();
        let data = weight.data_mut();
        for &u in units {
            data[u * per..(u + 1) * per].iter_mut().for_each(|v| *v = 0.0);
        }
        if let Some(b) = bias {
            for &u in units {
                b.data_mut()[u] = 0.0;
            }
        }
    }
}
