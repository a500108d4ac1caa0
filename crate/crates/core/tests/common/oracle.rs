//! Brute-force reference computations, written as plain loops in f64.

use comfe_core::prototypes::build_association_matrix;
use comfe_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{randn, unit_rows};

/// Random posterior inputs: unit patches, prototypes and class prototypes
/// plus a label-smoothed association matrix.
pub struct PosteriorInstance {
    pub z_hat: Tensor,
    pub p_hat: Tensor,
    pub c_hat: Tensor,
    pub phi: Tensor,
    pub classes: usize,
    pub tau1: f32,
    pub tau2: f32,
}

impl PosteriorInstance {
    /// Sizes drawn with N_Z, N_P, c ≤ 8.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = rng.random_range(2..=16);
        let n_z = rng.random_range(1..=8);
        let n_p = rng.random_range(1..=8);
        let classes = rng.random_range(1..=8);
        let per_class = rng.random_range(1..=3);
        let n_bg = rng.random_range(0..=3);
        let alpha = rng.random_range(0.0..0.5);
        let tau1 = rng.random_range(0.05f32..1.0);
        let tau2 = rng.random_range(0.02f32..1.0);
        let phi = build_association_matrix(classes, per_class, n_bg, alpha).unwrap().cast();
        PosteriorInstance {
            z_hat: unit_rows(&randn(&mut rng, n_z, d)),
            p_hat: unit_rows(&randn(&mut rng, n_p, d)),
            c_hat: unit_rows(&randn(&mut rng, classes * per_class + n_bg, d)),
            phi,
            classes,
            tau1,
            tau2,
        }
    }
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// p(P̂_j | Ẑ_i) by an explicit loop.
pub fn patch_proto(z_hat: &Tensor, p_hat: &Tensor, tau1: f64) -> Vec<Vec<f64>> {
    (0..z_hat.rows())
        .map(|i| {
            let logits: Vec<f64> = (0..p_hat.rows())
                .map(|j| dot(z_hat.row_slice(i), p_hat.row_slice(j)) / tau1)
                .collect();
            softmax(&logits)
        })
        .collect()
}

/// p(ν | P̂_j): softmax over class prototypes, then a loop over φ.
pub fn proto_class(p_hat: &Tensor, c_hat: &Tensor, phi: &Tensor, tau2: f64) -> Vec<Vec<f64>> {
    (0..p_hat.rows())
        .map(|j| {
            let logits: Vec<f64> = (0..c_hat.rows())
                .map(|m| dot(p_hat.row_slice(j), c_hat.row_slice(m)) / tau2)
                .collect();
            let w = softmax(&logits);
            (0..phi.cols())
                .map(|l| (0..phi.rows()).map(|m| w[m] * phi.at(m, l) as f64).sum())
                .collect()
        })
        .collect()
}

/// p(ν | Ẑ_i) as the explicit double sum Σ_j p(ν|P̂_j) p(P̂_j|Ẑ_i).
pub fn patch_class(inst: &PosteriorInstance) -> Vec<Vec<f64>> {
    let zp = patch_proto(&inst.z_hat, &inst.p_hat, inst.tau1 as f64);
    let pc = proto_class(&inst.p_hat, &inst.c_hat, &inst.phi, inst.tau2 as f64);
    zp.iter()
        .map(|row| {
            (0..inst.phi.cols())
                .map(|l| row.iter().enumerate().map(|(j, w)| w * pc[j][l]).sum())
                .collect()
        })
        .collect()
}

/// Per-element binary cross-entropy with clamping, summed.
pub fn bce(y: &[f64], s: &[f64], eps: f64) -> f64 {
    y.iter()
        .zip(s)
        .map(|(&y, &s)| {
            let s = s.clamp(eps, 1.0 - eps);
            -(y * s.ln() + (1.0 - y) * (1.0 - s).ln())
        })
        .sum()
}

/// Cosine similarity between unit-normalized copies of `a` and `b`.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    dot(a, b) / (na * nb)
}
