//! Whole-objective gradient check on small random problems.

use comfe_core::losses::{total_loss, LossOptions};
use comfe_core::ModelConfig;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

/// Coordinates sampled per parameter tensor; smaller tensors are checked whole.
pub const COORDS_PER_TENSOR: usize = 6;

pub fn random_config(rng: &mut ChaCha8Rng) -> (ModelConfig, usize) {
    let d = [8usize, 12, 16][rng.random_range(0..3)];
    let classes = rng.random_range(1..=3);
    let mut cfg = ModelConfig::new(classes, d);
    cfg.n_prototypes = rng.random_range(1..=3);
    cfg.per_class = rng.random_range(1..=3);
    cfg.layers = rng.random_range(1..=2);
    cfg.heads = [1, 2, 4][rng.random_range(0..3)];
    cfg.background = rng.random_bool(0.8);
    (cfg, rng.random_range(1..=8))
}

pub struct GraphCheck {
    pub summary: String,
    /// Worst coordinate error, floored at 1% of the gradient norm.
    pub coord_err: f64,
    /// Error of the derivative along one random unit direction.
    pub direction_err: f64,
}

/// f32 analytic gradients of the total loss against 64-bit central
/// differences, for a random configuration drawn from `seed`.
pub fn check_graph(seed: u64) -> GraphCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
    let (cfg, n_z) = random_config(&mut rng);
    let paired = rng.random_bool(0.5);
    let summary = format!(
        "d={} c={} N_P={} per_class={} layers={} heads={} background={} N_Z={n_z} paired={paired}",
        cfg.dim, cfg.classes, cfg.n_prototypes, cfg.per_class, cfg.layers, cfg.heads, cfg.background
    );
    let inst = Instance::random(seed, cfg, n_z, 2, paired);
    let samples = make_samples(&inst.views, &inst.labels);
    let opts = LossOptions {
        with_grads: true,
        threads: 1,
        dropout_seed: None,
    };
    let grads = total_loss(&inst.model, &samples, &opts).unwrap().grads.unwrap();
    let analytic: Vec<f64> = grads.iter().flat_map(|g| g.data().iter().map(|&x| x as f64)).collect();
    let gnorm = analytic.iter().map(|x| x * x).sum::<f64>().sqrt();
    let floor = 1e-2 * gnorm.max(1e-3);

    let mut m64 = inst.model.cast::<f64>();
    let v64 = cast_views::<f64>(&inst.views);
    let s64 = make_samples(&v64, &inst.labels);
    let x0 = flat_params(&m64);
    let mut f = |x: &[f64]| {
        set_flat_params(&mut m64, x);
        loss_f64(&m64, &s64)
    };

    let mut coords = Vec::new();
    let mut start = 0;
    for g in &grads {
        let n = g.len();
        if n <= COORDS_PER_TENSOR {
            coords.extend(start..start + n);
        } else {
            coords.extend(sample(&mut rng, n, COORDS_PER_TENSOR).into_iter().map(|i| start + i));
        }
        start += n;
    }
    let coord_err = coords
        .iter()
        .map(|&i| rel_err(analytic[i], central_diff(&mut f, &x0, i, FD_STEP), floor))
        .fold(0.0, f64::max);

    let u = unit_rows(&uniform(&mut rng, 1, x0.len(), -1.0, 1.0));
    let u = u.data();
    let along = |t: f64| -> Vec<f64> { x0.iter().zip(u).map(|(x, d)| x + t * d).collect() };
    let fd_dir = (f(&along(FD_STEP)) - f(&along(-FD_STEP))) / (2.0 * FD_STEP);
    let an_dir: f64 = analytic.iter().zip(u).map(|(g, d)| g * d).sum();
    let direction_err = rel_err(an_dir, fd_dir, floor);

    GraphCheck {
        summary,
        coord_err,
        direction_err,
    }
}
