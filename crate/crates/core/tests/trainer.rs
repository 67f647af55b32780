mod common;

use liftprune::data::{Dataset, FixtureSpec};
use liftprune::pruner::{l1_importances, local_prune};
use liftprune::trainer::{evaluate, fine_tune, grad, loss, TrainConfig};
use liftprune::{Layer, LayerKind, Model, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn dense_gradient_matches_finite_differences() {
    let layer = Layer::new(
        0,
        LayerKind::Dense {
            weight: Tensor::new(vec![2, 2], vec![0.3, -0.7, 0.5, 0.2]).unwrap(),
            bias: Some(Tensor::from_vec(vec![0.1, -0.1])),
        },
    );
    let m = Model::new(vec![layer], vec![2], 2).unwrap();
    let x = Tensor::new(vec![1, 2], vec![0.8, -1.1]).unwrap();
    let g = grad(&m, &x, &[1]).unwrap();
    let h = 1e-2f32;
    for p in 0..2 {
        for k in 0..m.layers[0].params()[p].len() {
            let at = |d: f32| {
                let mut c = m.clone();
                c.layers[0].params_mut()[p].data_mut()[k] += d;
                loss(&c, &x, &[1]).unwrap()
            };
            let numeric = (at(h) - at(-h)) / (2.0 * h as f64);
            let analytic = g.layers[0][p].data()[k] as f64;
            assert!((analytic - numeric).abs() <= 1e-3 * analytic.abs().max(numeric.abs()), "{analytic} vs {numeric}");
        }
    }
}

#[test]
fn tiny_cnn_overfits_sixteen_samples() {
    let data = FixtureSpec {
        images_per_class: 4,
        seed: 5,
        ..FixtureSpec::default()
    }
    .generate()
    .unwrap();
    assert_eq!(data.len(), 16);
    let mut model = liftprune::zoo::fixture_cnn(&[1, 10, 10], 4, 5).unwrap();
    model.recalibrate_batch_norm(&data.images).unwrap();
    let cfg = TrainConfig {
        epochs: 200,
        batch_size: 8,
        ..TrainConfig::default()
    };
    let out = fine_tune(&model, &data, &cfg, None).unwrap();
    assert_eq!(evaluate(&out.model, &data).unwrap().accuracy, 1.0);
    assert_eq!(out.epoch_losses.len(), 200);
}

#[test]
fn masked_weights_stay_zero() {
    let run = common::fixture(0);
    let (pruned, mask) = local_prune(&run.model, &[0, 4], 0.5, &l1_importances(&run.model).unwrap()).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        ..TrainConfig::default()
    };
    let tuned = fine_tune(&pruned, &run.train, &cfg, Some(&mask)).unwrap().model;
    let mut reapplied = tuned.clone();
    mask.apply(&mut reapplied).unwrap();
    assert_eq!(reapplied.param_bytes(), tuned.param_bytes());
    assert_ne!(tuned.param_bytes(), pruned.param_bytes());
}

#[test]
fn shuffled_dataset_has_same_accuracy() {
    let run = common::fixture(1);
    let a = evaluate(&run.model, &run.test).unwrap();
    let shuffled: Dataset = run.test.shuffled(77);
    assert_eq!(evaluate(&run.model, &shuffled).unwrap(), a);
    assert_eq!(a.per_class_accuracy.len(), 4);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn schedule_is_geometric(start in 1e-3f64..1.0, ratio in 1.0f64..100.0, epochs in 2usize..50) {
        let cfg = TrainConfig { lr_start: start, lr_end: start / ratio, epochs, ..TrainConfig::default() };
        prop_assert_eq!(cfg.lr_at(0), start);
        for e in 1..epochs - 1 {
            let expected = (cfg.lr_at(e - 1) * cfg.lr_at(e + 1)).sqrt();
            prop_assert!((cfg.lr_at(e) - expected).abs() <= 1e-12 * start);
        }
        prop_assert!((cfg.lr_at(epochs - 1) - start / ratio).abs() <= 1e-12 * start);
    }

    #[test]
    fn gradient_shapes_mirror_parameters(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = common::random_net(&mut rng, 3, 3);
        let x = common::random_input(&mut rng, &m, 2);
        let g = grad(&m, &x, &[0, 2]).unwrap();
        for (layer, grads) in m.layers.iter().zip(&g.layers) {
            let shapes: Vec<&[usize]> = layer.params().iter().map(|p| p.shape()).collect();
            let gshapes: Vec<&[usize]> = grads.iter().map(|p| p.shape()).collect();
            prop_assert_eq!(shapes, gshapes);
        }
    }
}
