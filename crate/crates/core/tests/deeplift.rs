mod common;

use liftprune::data::Dataset;
use liftprune::deeplift::{attribute, importances, make_reference, ReferenceKind, ReferenceSpec, TargetSpec};
use liftprune::mask::Granularity;
use liftprune::{Error, Layer, LayerKind, Model, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn zero_reference_is_all_zero() {
    let x = Tensor::full(&[1, 1, 8, 8], 0.4);
    let r = make_reference(&ReferenceSpec::new(ReferenceKind::ZeroInput), None, &x).unwrap();
    assert_eq!(r, Tensor::zeros(&[1, 1, 8, 8]));
}

#[test]
fn training_mean_of_zero_and_two_is_one() {
    let images = Tensor::new(vec![2, 1, 2, 2], [vec![0.0; 4], vec![2.0; 4]].concat()).unwrap();
    let data = Dataset::new(images, vec![0, 1], 2).unwrap();
    let x = Tensor::zeros(&[3, 1, 2, 2]);
    let r = make_reference(&ReferenceSpec::new(ReferenceKind::TrainingMean), Some(&data), &x).unwrap();
    assert_eq!(r, Tensor::full(&[3, 1, 2, 2], 1.0));
    let err = make_reference(&ReferenceSpec::new(ReferenceKind::TrainingMean), None, &x);
    assert!(matches!(err, Err(Error::EmptyDataset)));
}

#[test]
fn blurring_a_constant_image_keeps_it() {
    let x = Tensor::full(&[1, 2, 6, 5], 0.75);
    let r = make_reference(&ReferenceSpec::new(ReferenceKind::BlurredInput { sigma: 50.0 }), None, &x).unwrap();
    assert!(r.data().iter().all(|v| (v - 0.75).abs() < 1e-6));
}

#[test]
fn random_mlp_completeness() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let m = Model::new(
        vec![
            Layer::dense(0, 6, 10, true, &mut rng),
            Layer::relu(1),
            Layer::dense(2, 10, 3, true, &mut rng),
        ],
        vec![6],
        3,
    )
    .unwrap();
    let x = common::random_input(&mut rng, &m, 10);
    let labels: Vec<usize> = (0..10).map(|i| i % 3).collect();
    let attr = attribute(&m, &x, Some(&labels), &Tensor::zeros(&[6]), TargetSpec::TrueLabel).unwrap();
    for s in 0..10 {
        let dt = attr.passes[0].delta_t[s];
        assert!((attr.input_sum(0, s) - dt).abs() / dt.abs().max(1e-12) < 1e-4);
    }
}

#[test]
fn duplicated_channels_get_equal_importance() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut conv = Layer::conv2d(0, 1, 2, 3, 1, 1, true, &mut rng);
    if let LayerKind::Conv2d { weight, bias, .. } = &mut conv.kind {
        let w = weight.data_mut();
        let first: Vec<f32> = w[..9].to_vec();
        w[9..].copy_from_slice(&first);
        bias.as_mut().unwrap().data_mut().copy_from_slice(&[0.1, 0.1]);
    }
    let mut head = Layer::dense(3, 2, 3, true, &mut rng);
    if let LayerKind::Dense { weight, .. } = &mut head.kind {
        let w = weight.data_mut();
        for row in w.chunks_mut(2) {
            row[1] = row[0];
        }
    }
    let m = Model::new(vec![conv, Layer::relu(1), Layer::global_avg_pool(2), head], vec![1, 5, 5], 3).unwrap();
    let x = common::random_input(&mut rng, &m, 6);
    let attr = attribute(&m, &x, None, &Tensor::zeros(&[1, 5, 5]), TargetSpec::AllClasses).unwrap();
    let imp = importances(&attr, &m, Granularity::Channel).unwrap();
    let c = imp.get(0).unwrap();
    assert!((c[0] - c[1]).abs() <= 1e-6 * c[0].max(1.0), "{c:?}");
}

#[test]
fn zero_contributions_give_zero_importance() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let m = common::random_net(&mut rng, 3, 3);
    let x = common::random_input(&mut rng, &m, 2);
    let attr = attribute(&m, &x, None, &x, TargetSpec::AllClasses).unwrap();
    let imp = importances(&attr, &m, Granularity::Channel).unwrap();
    assert!(imp.layers.values().flatten().all(|&v| v == 0.0));
}

#[test]
fn weight_granularity_is_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let m = common::random_net(&mut rng, 2, 3);
    let x = common::random_input(&mut rng, &m, 1);
    let attr = attribute(&m, &x, None, &Tensor::zeros(&m.input_shape), TargetSpec::Class(0)).unwrap();
    assert!(importances(&attr, &m, Granularity::Weight).is_err());
}

#[test]
fn mismatched_reference_is_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let m = common::random_net(&mut rng, 2, 3);
    let x = common::random_input(&mut rng, &m, 2);
    let err = attribute(&m, &x, None, &Tensor::zeros(&[7]), TargetSpec::Class(0));
    assert!(matches!(err, Err(Error::InvalidShape(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn completeness_at_every_complete_layer(seed in any::<u64>(), body in 1usize..5, kind in 0usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = common::random_net(&mut rng, body, 3);
        let x = common::random_input(&mut rng, &m, 3);
        let pool = Dataset::new(common::random_input(&mut rng, &m, 8), vec![0; 8], 3).unwrap();
        let kind = [
            ReferenceKind::ZeroInput,
            ReferenceKind::TrainingMean,
            ReferenceKind::BlurredInput { sigma: 0.8 },
            ReferenceKind::NoisyInput { sigma: 0.2 },
        ][kind];
        let r = make_reference(&ReferenceSpec::new(kind), Some(&pool), &x).unwrap();
        let attr = attribute(&m, &x, None, &r, TargetSpec::AllClasses).unwrap();
        prop_assert!(attr.max_completeness_error() <= 1e-4);
    }

    #[test]
    fn residual_net_completeness(seed in any::<u64>(), width in 2usize..5) {
        let m = liftprune::zoo::residual_cnn(&[2, 5, 5], 3, width, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = common::random_input(&mut rng, &m, 2);
        let attr = attribute(&m, &x, None, &Tensor::zeros(&[2, 5, 5]), TargetSpec::AllClasses).unwrap();
        prop_assert!(attr.max_completeness_error() <= 1e-4);
        prop_assert!(!attr.complete[m.index_of(3).unwrap()]);
    }

    #[test]
    fn identical_input_and_reference_give_nothing(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = common::random_net(&mut rng, 3, 3);
        let x = common::random_input(&mut rng, &m, 2);
        let attr = attribute(&m, &x, None, &x, TargetSpec::AllClasses).unwrap();
        for pass in &attr.passes {
            prop_assert!(pass.delta_t.iter().all(|&d| d == 0.0));
            prop_assert!(pass.input.iter().all(|&c| c == 0.0));
        }
    }
}
