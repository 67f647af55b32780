mod common;

use liftprune::net::{load_model, save_model};
use liftprune::{Error, Layer, LayerKind, Model, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: Vec<f32>) -> Tensor {
    Tensor::new(shape.to_vec(), data).unwrap()
}

#[test]
fn identity_dense() {
    let layer = Layer::new(
        0,
        LayerKind::Dense {
            weight: t(&[3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]),
            bias: Some(Tensor::zeros(&[3])),
        },
    );
    let m = Model::new(vec![layer], vec![3], 3).unwrap();
    let y = m.forward(&t(&[1, 3], vec![1., 2., 3.])).unwrap();
    assert_eq!(y.data(), &[1., 2., 3.]);
}

#[test]
fn all_ones_kernel_on_constant_image() {
    let conv = Layer::new(
        0,
        LayerKind::Conv2d {
            weight: Tensor::full(&[1, 1, 3, 3], 1.0),
            bias: None,
            stride: 1,
            pad: 0,
        },
    );
    let m = Model::new(vec![conv, Layer::flatten(1)], vec![1, 5, 5], 9).unwrap();
    let y = m.forward(&Tensor::full(&[1, 1, 5, 5], 1.0)).unwrap();
    assert_eq!(y.data(), &[9.0; 9]);
}

#[test]
fn relu_and_record() {
    let m = Model::new(vec![Layer::relu(0)], vec![3], 3).unwrap();
    let (y, rec) = m.forward_recorded(&t(&[1, 3], vec![-1., 0., 2.])).unwrap();
    assert_eq!(y.data(), &[0., 0., 2.]);
    assert_eq!(rec.pre(0).data(), &[-1., 0., 2.]);
    assert_eq!(rec.post(0).data(), &[0., 0., 2.]);
    assert_eq!(rec.len(), 1);
}

#[test]
fn record_replay_is_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let m = Model::new(
        vec![
            Layer::dense(0, 4, 6, true, &mut rng),
            Layer::relu(1),
            Layer::dense(2, 6, 3, true, &mut rng),
        ],
        vec![4],
        3,
    )
    .unwrap();
    let x = common::random_input(&mut rng, &m, 5);
    let (y, rec) = m.forward_recorded(&x).unwrap();
    assert_eq!(rec.len(), 3);
    let last = m.run_layer(2, rec.pre(2), None).unwrap();
    assert_eq!(last.to_le_bytes(), rec.post(2).to_le_bytes());
    assert_eq!(y.to_le_bytes(), m.forward(&x).unwrap().to_le_bytes());
}

#[test]
fn residual_add_is_elementwise_sum() {
    let m = liftprune::zoo::residual_cnn(&[2, 6, 6], 3, 4, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = common::random_input(&mut rng, &m, 2);
    let (_, rec) = m.forward_recorded(&x).unwrap();
    let add = m.index_of(8).unwrap();
    let src = m.index_of(2).unwrap();
    let manual: Vec<f32> = rec
        .pre(add)
        .data()
        .iter()
        .zip(rec.post(src).data())
        .map(|(a, b)| a + b)
        .collect();
    assert_eq!(rec.post(add).data(), manual.as_slice());
}

#[test]
fn bad_batch_and_nan_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut m = Model::new(vec![Layer::dense(0, 3, 2, true, &mut rng)], vec![3], 2).unwrap();
    assert!(matches!(m.forward(&Tensor::zeros(&[1, 4])), Err(Error::InvalidShape(_))));
    m.layers[0].weight_mut().unwrap().data_mut()[0] = f32::NAN;
    assert!(matches!(m.forward(&Tensor::zeros(&[1, 3])), Err(Error::CorruptModel(_))));
}

#[test]
fn save_load_random_cnn() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bin");
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let m = common::random_net(&mut rng, 3, 4);
    save_model(&m, &path).unwrap();
    let back = load_model(&path).unwrap();
    assert_eq!(back.param_bytes(), m.param_bytes());
    assert_eq!(back, m);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_matches_brute_force(
        c in 1usize..4, h in 1usize..9, w in 1usize..9, out in 1usize..4,
        k in 1usize..4, stride in 1usize..3, pad in 0usize..2, seed in any::<u64>(),
    ) {
        prop_assume!(h + 2 * pad >= k && w + 2 * pad >= k);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let conv = Layer::conv2d(0, c, out, k, stride, pad, true, &mut rng);
        let shape = conv.output_shape(&[c, h, w]).unwrap();
        prop_assert_eq!(shape[1], (h + 2 * pad - k) / stride + 1);
        prop_assert_eq!(shape[2], (w + 2 * pad - k) / stride + 1);
        let flat: usize = shape.iter().product();
        let m = Model::new(vec![conv, Layer::flatten(1)], vec![c, h, w], flat).unwrap();
        let x = common::random_input(&mut rng, &m, 1);
        let LayerKind::Conv2d { weight, bias, .. } = &m.layers[0].kind else { unreachable!() };
        let wf: Vec<f64> = weight.data().iter().map(|&v| v as f64).collect();
        let bf: Vec<f64> = bias.as_ref().unwrap().data().iter().map(|&v| v as f64).collect();
        let xf: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
        let (expected, _) = common::reference_conv(&xf, (c, h, w), &wf, Some(&bf), (out, k, k), stride, pad);
        let got = m.forward(&x).unwrap();
        prop_assert_eq!(got.len(), expected.len());
        for (g, e) in got.data().iter().zip(&expected) {
            prop_assert!((*g as f64 - e).abs() <= 1e-5 * e.abs().max(1.0));
        }
    }

    #[test]
    fn serialization_round_trip(seed in any::<u64>(), body in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = common::random_net(&mut rng, body, 3);
        let mut buf = Vec::new();
        liftprune::net::write_model(&m, &mut buf).unwrap();
        let back = liftprune::net::read_model(buf.as_slice()).unwrap();
        prop_assert_eq!(back.param_bytes(), m.param_bytes());
    }

    #[test]
    fn forward_is_deterministic(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = common::random_net(&mut rng, 3, 3);
        let x = common::random_input(&mut rng, &m, 3);
        prop_assert_eq!(m.forward(&x).unwrap().to_le_bytes(), m.forward(&x).unwrap().to_le_bytes());
    }
}
