mod common;

use liftprune::mask::{ChannelGraph, PruneMask};
use liftprune::profiler::{load_vector, profile_cost, CostProfile, Criteria, LayerCost};
use liftprune::{Error, Layer, LayerKind, Model};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(11)
}

#[test]
fn dense_layer_cost() {
    let model = Model::new(vec![Layer::dense(0, 100, 10, true, &mut rng())], vec![100], 10).unwrap();
    let p = profile_cost(&model, &[100], None).unwrap();
    assert_eq!((p.total_macs, p.total_nps), (1000, 1010));
    assert_eq!(p.total_flops(), 2000);
}

fn conv_net() -> Model {
    let mut r = rng();
    Model::new(
        vec![
            Layer::conv2d(0, 3, 16, 3, 1, 1, true, &mut r),
            Layer::relu(1),
            Layer::conv2d(2, 16, 4, 1, 1, 0, false, &mut r),
            Layer::global_avg_pool(3),
            Layer::dense(4, 4, 4, true, &mut r),
        ],
        vec![3, 32, 32],
        4,
    )
    .unwrap()
}

#[test]
fn conv_layer_cost_counts_padded_taps() {
    let model = conv_net();
    let p = profile_cost(&model, &[3, 32, 32], None).unwrap();
    let c = p.get(0).unwrap();
    assert_eq!((c.macs, c.nps), (442_368, 448));
    assert_eq!(p.get(2).unwrap().macs, 16 * 4 * 32 * 32);
}

#[test]
fn masking_half_the_channels_halves_both_sides() {
    let model = conv_net();
    let group = ChannelGraph::new(&model).unwrap().groups().into_iter().find(|g| g.id() == 0).unwrap();
    let mut mask = PruneMask::all_keep(&model).unwrap();
    mask.set_group(&model, &group, (0..16).map(|i| i % 2 == 0).collect()).unwrap();
    let p = profile_cost(&model, &[3, 32, 32], Some(&mask)).unwrap();
    assert!(p.mask_aware);
    assert_eq!((p.get(0).unwrap().macs, p.get(0).unwrap().nps), (221_184, 224));
    assert_eq!(p.get(2).unwrap().macs, 8 * 4 * 32 * 32);
    assert_eq!(p.get(2).unwrap().nps, 8 * 4);
}

#[test]
fn mismatched_input_shape_is_rejected() {
    assert!(profile_cost(&conv_net(), &[3, 28, 28], None).is_err());
}

fn synthetic(costs: &[u64]) -> CostProfile {
    let layers: Vec<LayerCost> = costs
        .iter()
        .enumerate()
        .map(|(id, &c)| LayerCost {
            id,
            kind: "dense".into(),
            macs: c,
            nps: c,
        })
        .collect();
    CostProfile {
        total_macs: costs.iter().sum(),
        total_nps: costs.iter().sum(),
        layers,
        mask_aware: false,
    }
}

#[test]
fn load_vector_examples() {
    assert_eq!(load_vector(&synthetic(&[100, 300]), Criteria::Macs).unwrap(), [0.25, 0.75]);
    assert!(matches!(load_vector(&synthetic(&[0, 0]), Criteria::Nps), Err(Error::ZeroCost)));
}

#[test]
fn relu_adds_no_load() {
    let mut r = rng();
    let a = Model::new(
        vec![Layer::dense(0, 6, 5, true, &mut r), Layer::dense(1, 5, 3, true, &mut r)],
        vec![6],
        3,
    )
    .unwrap();
    let mut with_relu = a.clone();
    with_relu.layers.insert(1, Layer::relu(2));
    let with_relu = Model::new(with_relu.layers, vec![6], 3).unwrap();
    for criteria in [Criteria::Macs, Criteria::Nps] {
        let la = load_vector(&profile_cost(&a, &[6], None).unwrap(), criteria).unwrap();
        let lb = load_vector(&profile_cost(&with_relu, &[6], None).unwrap(), criteria).unwrap();
        assert_eq!(lb, [la[0], 0.0, la[1]]);
    }
}

/// Random conv chain followed by flatten and a dense head.
fn conv_dense_chain(rng: &mut ChaCha8Rng) -> Model {
    let c = rng.random_range(1..=3);
    let side = rng.random_range(3..=8);
    let mut shape = vec![c, side, side];
    let mut layers = Vec::new();
    for id in 0..rng.random_range(1..=3) {
        let k = rng.random_range(1..=3.min(shape[1]));
        let (out, stride, pad) = (rng.random_range(1..=5), rng.random_range(1..=2), rng.random_range(0..=1));
        let l = Layer::conv2d(id, shape[0], out, k, stride, pad, rng.random_bool(0.5), rng);
        shape = l.output_shape(&shape).unwrap();
        layers.push(l);
    }
    let next = layers.len();
    layers.push(Layer::flatten(next));
    let flat = shape.iter().product();
    layers.push(Layer::dense(next + 1, flat, 3, true, rng));
    Model::new(layers, vec![c, side, side], 3).unwrap()
}

fn as_f64(t: &liftprune::Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn macs_match_counted_multiplies(seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let model = conv_dense_chain(&mut r);
        let p = profile_cost(&model, &model.input_shape, None).unwrap();
        let x = common::random_input(&mut r, &model, 1);
        let mut act = as_f64(&x);
        let mut shape = model.input_shape.clone();
        for layer in &model.layers {
            let out_shape = layer.output_shape(&shape).unwrap();
            let counted = match &layer.kind {
                LayerKind::Conv2d { weight, bias, stride, pad } => {
                    let ws = weight.shape();
                    let (y, n) = common::reference_conv(
                        &act,
                        (shape[0], shape[1], shape[2]),
                        &as_f64(weight),
                        bias.as_ref().map(as_f64).as_deref(),
                        (ws[0], ws[2], ws[3]),
                        *stride,
                        *pad,
                    );
                    act = y;
                    n
                }
                LayerKind::Dense { weight, bias } => {
                    let (y, n) = common::reference_dense(&act, &as_f64(weight), bias.as_ref().map(as_f64).as_deref(), out_shape[0]);
                    act = y;
                    n
                }
                _ => 0,
            };
            prop_assert_eq!(p.get(layer.id).unwrap().macs, counted, "layer {}", layer.id);
            shape = out_shape;
        }
    }

    #[test]
    fn pruning_more_never_costs_more(seed in any::<u64>(), body in 2usize..7) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let model = common::random_net(&mut r, body, 3);
        let base = profile_cost(&model, &model.input_shape, None).unwrap();
        let groups = ChannelGraph::new(&model).unwrap().groups();
        let mut mask = PruneMask::all_keep(&model).unwrap();
        let mut prev = base.clone();
        for _ in 0..3 {
            for g in &groups {
                let mut keep = mask.get(g.id()).unwrap().keep.clone();
                let alive: Vec<usize> = (0..keep.len()).filter(|&i| keep[i]).collect();
                if alive.len() > 1 && r.random_bool(0.6) {
                    keep[alive[r.random_range(0..alive.len())]] = false;
                }
                mask.set_group(&model, g, keep).unwrap();
            }
            let now = profile_cost(&model, &model.input_shape, Some(&mask)).unwrap();
            prop_assert!(now.total_macs <= prev.total_macs && now.total_nps <= prev.total_nps);
            for (a, b) in now.layers.iter().zip(&prev.layers) {
                prop_assert!(a.macs <= b.macs && a.nps <= b.nps);
            }
            prev = now;
        }
    }
}
