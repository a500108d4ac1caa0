#![allow(dead_code)]

pub mod graph;
pub mod layers;
pub mod ops;
pub mod oracle;

use comfe_core::losses::{total_loss, LossOptions, Sample};
use comfe_core::prototypes::{extend_label, MultiLabel};
use comfe_core::{ComfeModel, ModelConfig, Real, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const FD_STEP: f64 = 1e-3;

pub fn randn(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

pub fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor<f64> {
    let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

pub fn unit_rows<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    let mut out = t.clone();
    for r in 0..out.rows() {
        let row = out.row_slice_mut(r);
        let n = row.iter().map(|&x| x * x).sum::<T>().sqrt();
        for x in row.iter_mut() {
            *x = *x / n;
        }
    }
    out
}

/// Central difference of `f` at `x` along coordinate `i`.
pub fn central_diff(f: &mut impl FnMut(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut xp = x.to_vec();
    xp[i] += h;
    let fp = f(&xp);
    xp[i] = x[i] - h;
    let fm = f(&xp);
    (fp - fm) / (2.0 * h)
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Norm-wise relative error between two gradient vectors.
pub fn rel_err_vec(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(floor)
}

/// Small random problem: a model plus a batch of (view_a, view_b, label).
pub struct Instance {
    pub model: ComfeModel,
    pub views: Vec<(Tensor, Option<Tensor>)>,
    pub labels: Vec<MultiLabel>,
}

impl Instance {
    pub fn random(seed: u64, cfg: ModelConfig, n_z: usize, batch: usize, paired: bool) -> Instance {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = ComfeModel::init(cfg.clone(), &mut rng).unwrap();
        let mut views = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..batch {
            let a = randn(&mut rng, n_z, cfg.dim);
            let b = paired.then(|| randn(&mut rng, n_z, cfg.dim));
            views.push((a, b));
            let class = rng.random_range(0..cfg.classes);
            labels.push(extend_label(class, cfg.classes, cfg.background_prototypes() > 0).unwrap());
        }
        Instance { model, views, labels }
    }

}

pub fn cast_views<T: Real>(views: &[(Tensor, Option<Tensor>)]) -> Vec<(Tensor<T>, Option<Tensor<T>>)> {
    views.iter().map(|(a, b)| (a.cast(), b.as_ref().map(|b| b.cast()))).collect()
}

pub fn make_samples<'a, T: Real>(
    views: &'a [(Tensor<T>, Option<Tensor<T>>)],
    labels: &[MultiLabel],
) -> Vec<Sample<'a, T>> {
    views
        .iter()
        .zip(labels)
        .map(|((a, b), y)| Sample {
            view_a: a,
            view_b: b.as_ref(),
            label: y.clone(),
        })
        .collect()
}

/// Flattened parameters of `model`, canonical order.
pub fn flat_params<T: Real>(model: &ComfeModel<T>) -> Vec<f64> {
    model
        .named_params()
        .iter()
        .flat_map(|(_, t)| t.data().iter().map(|x| x.as_f64()).collect::<Vec<_>>())
        .collect()
}

pub fn set_flat_params<T: Real>(model: &mut ComfeModel<T>, flat: &[f64]) {
    let mut k = 0;
    model.for_each_param_mut(|_, t| {
        for x in t.data_mut() {
            *x = T::of(flat[k]);
            k += 1;
        }
    });
}

pub fn single_threaded() -> LossOptions {
    LossOptions {
        with_grads: false,
        threads: 1,
        dropout_seed: None,
    }
}

pub fn loss_f64(model: &ComfeModel<f64>, samples: &[Sample<'_, f64>]) -> f64 {
    total_loss(model, samples, &single_threaded()).unwrap().breakdown.total
}
