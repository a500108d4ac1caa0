//! Fixtures shared by the benchmarks.

use comfe_core::losses::Sample;
use comfe_core::prototypes::MultiLabel;
use comfe_core::{ComfeModel, ModelConfig, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Entries uniform in [-1, 1).
pub fn random_tensor(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// A freshly initialized model with default hyperparameters.
pub fn model(classes: usize, dim: usize, seed: u64) -> ComfeModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ComfeModel::init(ModelConfig::new(classes, dim), &mut rng).unwrap()
}

/// Paired-view images with labels cycling through the classes.
pub struct Batch {
    pub views: Vec<(Tensor, Option<Tensor>)>,
    pub labels: Vec<MultiLabel>,
}

impl Batch {
    pub fn random(model: &ComfeModel, size: usize, n_z: usize, seed: u64) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = model.config.dim;
        let views = (0..size)
            .map(|_| (random_tensor(&mut rng, n_z, d), Some(random_tensor(&mut rng, n_z, d))))
            .collect();
        let labels = (0..size)
            .map(|i| model.bank.label(i % model.config.classes).unwrap())
            .collect();
        Batch { views, labels }
    }

    pub fn samples(&self) -> Vec<Sample<'_>> {
        self.views
            .iter()
            .zip(&self.labels)
            .map(|((a, b), y)| Sample {
                view_a: a,
                view_b: b.as_ref(),
                label: y.clone(),
            })
            .collect()
    }
}
