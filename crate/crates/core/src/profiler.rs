//! MAC and parameter (NP) accounting, mask aware.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::mask::{ChannelGraph, Granularity, PruneMask};
use crate::net::{LayerKind, Model};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criteria {
    Macs,
    Nps,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub id: usize,
    pub kind: String,
    pub macs: u64,
    pub nps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostProfile {
    pub layers: Vec<LayerCost>,
    pub total_macs: u64,
    pub total_nps: u64,
    pub mask_aware: bool,
}

impl CostProfile {
    pub fn total(&self, criteria: Criteria) -> u64 {
        match criteria {
            Criteria::Macs => self.total_macs,
            Criteria::Nps => self.total_nps,
        }
    }

    pub fn get(&self, id: usize) -> Option<&LayerCost> {
        self.layers.iter().find(|l| l.id == id)
    }

    /// FLOPs, counted as two per MAC.
    pub fn total_flops(&self) -> u64 {
        2 * self.total_macs
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfileOptions {
    /// Count one MAC per element for residual additions.
    pub count_residual_adds: bool,
}

pub fn profile_cost(model: &Model, input_shape: &[usize], mask: Option<&PruneMask>) -> Result<CostProfile> {
    profile_cost_with(model, input_shape, mask, ProfileOptions::default())
}

pub fn profile_cost_with(
    model: &Model,
    input_shape: &[usize],
    mask: Option<&PruneMask>,
    opts: ProfileOptions,
) -> Result<CostProfile> {
    if input_shape != model.input_shape.as_slice() {
        return Err(shape_err(format!(
            "profile input {input_shape:?} does not match model input {:?}",
            model.input_shape
        )));
    }
    let outs = model.shapes()?;
    let ins = model.input_shapes()?;
    let graph = ChannelGraph::new(model)?;
    let mut layers = Vec::with_capacity(model.layers.len());
    for (i, layer) in model.layers.iter().enumerate() {
        let out = &outs[i];
        let spatial_out: u64 = out[1..].iter().product::<usize>() as u64;
        let weight_mask = mask
            .and_then(|m| m.get(layer.id))
            .filter(|m| m.granularity == Granularity::Weight);
        let (macs, nps) = match &layer.kind {
            LayerKind::Dense { bias, .. } | LayerKind::Conv2d { bias, .. } => {
                let w = layer.weight().expect("weighted");
                let per_unit_kernel: u64 = w.shape()[2..].iter().product::<usize>() as u64;
                if let Some(wm) = weight_mask {
                    let kept = wm.kept() as u64;
                    let b = bias.as_ref().map_or(0, |b| b.len() as u64);
                    (kept * spatial_out.max(1), kept + b)
                } else {
                    let (kin, kout) = graph.kept_io(model, i, mask);
                    let (kin, kout) = (kin as u64, kout as u64);
                    let weights = kout * kin * per_unit_kernel;
                    let b = if bias.is_some() { kout } else { 0 };
                    let macs = if layer.is_conv() { weights * spatial_out } else { weights };
                    (macs, weights + b)
                }
            }
            LayerKind::BatchNorm { gamma, .. } => {
                let c = graph
                    .kept_input_channels(model, i, mask)
                    .unwrap_or(gamma.len()) as u64;
                let spatial: u64 = ins[i][1..].iter().product::<usize>() as u64;
                (2 * c * spatial, 2 * c)
            }
            LayerKind::ResidualAdd { .. } if opts.count_residual_adds => {
                (out.iter().product::<usize>() as u64, 0)
            }
            _ => (0, 0),
        };
        layers.push(LayerCost {
            id: layer.id,
            kind: layer.kind_name().to_string(),
            macs,
            nps,
        });
    }
    Ok(CostProfile {
        total_macs: layers.iter().map(|l| l.macs).sum(),
        total_nps: layers.iter().map(|l| l.nps).sum(),
        layers,
        mask_aware: mask.is_some(),
    })
}

/// Each layer's share of the total cost under `criteria`; sums to 1.
pub fn load_vector(profile: &CostProfile, criteria: Criteria) -> Result<Vec<f64>> {
    let total = profile.total(criteria);
    if total == 0 {
        return Err(Error::ZeroCost);
    }
    Ok(profile
        .layers
        .iter()
        .map(|l| {
            let c = match criteria {
                Criteria::Macs => l.macs,
                Criteria::Nps => l.nps,
            };
            c as f64 / total as f64
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::Layer;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn conv_net() -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Model::new(
            vec![
                Layer::conv2d(0, 3, 16, 3, 1, 1, true, &mut rng),
                Layer::relu(1),
                Layer::conv2d(2, 16, 8, 3, 1, 1, true, &mut rng),
                Layer::global_avg_pool(3),
                Layer::dense(4, 8, 10, true, &mut rng),
            ],
            vec![3, 32, 32],
            10,
        )
        .unwrap()
    }

    #[test]
    fn dense_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = Model::new(vec![Layer::dense(0, 100, 10, true, &mut rng)], vec![100], 10).unwrap();
        let p = profile_cost(&m, &[100], None).unwrap();
        assert_eq!((p.layers[0].macs, p.layers[0].nps), (1000, 1010));
        assert_eq!(p.total_flops(), 2000);
    }

    #[test]
    fn conv_formula_and_masked_channels() {
        let m = conv_net();
        let p = profile_cost(&m, &[3, 32, 32], None).unwrap();
        assert_eq!((p.layers[0].macs, p.layers[0].nps), (442_368, 448));
        let full_next = p.layers[2].macs;

        let group = ChannelGraph::new(&m).unwrap().groups()[0].clone();
        let mut mask = PruneMask::new();
        let keep: Vec<bool> = (0..16).map(|c| c % 2 == 0).collect();
        mask.set_group(&m, &group, keep).unwrap();
        let q = profile_cost(&m, &[3, 32, 32], Some(&mask)).unwrap();
        assert_eq!((q.layers[0].macs, q.layers[0].nps), (221_184, 224));
        assert_eq!(q.layers[2].macs * 2, full_next);
        assert!(q.mask_aware);
    }

    #[test]
    fn loads_normalise() {
        let p = CostProfile {
            layers: vec![
                LayerCost { id: 0, kind: "dense".into(), macs: 100, nps: 0 },
                LayerCost { id: 1, kind: "relu".into(), macs: 0, nps: 0 },
                LayerCost { id: 2, kind: "dense".into(), macs: 300, nps: 0 },
            ],
            total_macs: 400,
            total_nps: 0,
            mask_aware: false,
        };
        assert_eq!(load_vector(&p, Criteria::Macs).unwrap(), vec![0.25, 0.0, 0.75]);
        assert!(matches!(load_vector(&p, Criteria::Nps), Err(Error::ZeroCost)));
    }
}
