//! Small reference architectures and a train-from-scratch helper for fixtures.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, FixtureSpec};
use crate::error::{shape_err, Result};
use crate::net::{Layer, Model};
use crate::trainer::{evaluate, fine_tune, TrainConfig};

/// conv(8) → BN → ReLU → maxpool 2 → conv(16) → BN → ReLU → flatten →
/// dense(32) → ReLU → dense(classes). Layer ids equal positions; the last
/// convolution is layer 4.
pub fn fixture_cnn(input_shape: &[usize], class_count: usize, seed: u64) -> Result<Model> {
    let [c, h, w] = input_shape else {
        return Err(shape_err(format!("fixture cnn needs [c, h, w] input, got {input_shape:?}")));
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (ph, pw) = (h / 2, w / 2);
    Model::new(
        vec![
            Layer::conv2d(0, *c, 8, 3, 1, 1, true, &mut rng),
            Layer::batch_norm(1, 8),
            Layer::relu(2),
            Layer::max_pool(3, 2, 2),
            Layer::conv2d(4, 8, 16, 3, 1, 1, true, &mut rng),
            Layer::batch_norm(5, 16),
            Layer::relu(6),
            Layer::flatten(7),
            Layer::dense(8, 16 * ph * pw, 32, true, &mut rng),
            Layer::relu(9),
            Layer::dense(10, 32, class_count, true, &mut rng),
        ],
        input_shape.to_vec(),
        class_count,
    )
}

/// Stem conv → one residual block (two convs) → global pooling → dense head.
/// The stem and the block's second conv share a prunable channel group.
pub fn residual_cnn(input_shape: &[usize], class_count: usize, width: usize, seed: u64) -> Result<Model> {
    let [c, _, _] = input_shape else {
        return Err(shape_err(format!("residual cnn needs [c, h, w] input, got {input_shape:?}")));
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Model::new(
        vec![
            Layer::conv2d(0, *c, width, 3, 1, 1, false, &mut rng),
            Layer::batch_norm(1, width),
            Layer::relu(2),
            Layer::conv2d(3, width, width, 3, 1, 1, false, &mut rng),
            Layer::batch_norm(4, width),
            Layer::relu(5),
            Layer::conv2d(6, width, width, 3, 1, 1, false, &mut rng),
            Layer::batch_norm(7, width),
            Layer::residual_add(8, 2),
            Layer::relu(9),
            Layer::global_avg_pool(10),
            Layer::dense(11, width, class_count, true, &mut rng),
        ],
        input_shape.to_vec(),
        class_count,
    )
}

/// A trained fixture model with its data split.
#[derive(Debug, Clone)]
pub struct FixtureRun {
    pub model: Model,
    pub train: Dataset,
    pub test: Dataset,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

/// Generates the dataset, splits it 75/25 after a seeded shuffle, trains
/// [`fixture_cnn`] and stores observed batch-norm statistics.
pub fn trained_fixture(spec: &FixtureSpec, model_seed: u64, cfg: &TrainConfig) -> Result<FixtureRun> {
    trained_fixture_split(spec, model_seed, cfg, 0.75)
}

/// As [`trained_fixture`] with the given training fraction.
pub fn trained_fixture_split(spec: &FixtureSpec, model_seed: u64, cfg: &TrainConfig, train_fraction: f64) -> Result<FixtureRun> {
    let data = spec.generate()?.shuffled(spec.seed ^ 0x5eed);
    let (train, test) = data.split(train_fraction)?;
    let shape = train.item_shape().to_vec();
    let mut model = fixture_cnn(&shape, spec.class_count, model_seed)?;
    model.recalibrate_batch_norm(&train.images)?;
    let mut model = fine_tune(&model, &train, cfg, None)?.model;
    model.sync_batch_norm(&train.images)?;
    Ok(FixtureRun {
        train_accuracy: evaluate(&model, &train)?.accuracy,
        test_accuracy: evaluate(&model, &test)?.accuracy,
        model,
        train,
        test,
    })
}
