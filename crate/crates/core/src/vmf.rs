//! Posterior computations of the hierarchical von Mises-Fisher mixture.
//!
//! Every density is used only through its log-kernel `x·μ/τ`: the normalizing
//! constant depends on `τ` alone, so it cancels inside each softmax and only
//! shifts the clustering loss by a constant.
//!
//! Each posterior has a tape form (used for training, differentiable) and an
//! eager form over plain tensors that validates its inputs.

use crate::autodiff::{Axis, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Tolerance on row norms accepted as "unit".
pub const UNIT_TOL: f64 = 1e-5;

/// Row-stochastic matrix of probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorMatrix<T: Real = f32> {
    probs: Tensor<T>,
}

impl<T: Real> PosteriorMatrix<T> {
    /// Wraps a matrix after checking it is row-stochastic within `1e-5`.
    pub fn new(probs: Tensor<T>) -> Result<Self> {
        let (m, _) = probs.dims2();
        for r in 0..m {
            let row = probs.row_slice(r);
            if row.iter().any(|&p| p < T::zero() || p > T::one() + T::of(1e-6)) {
                return Err(Error::Data(format!("posterior row {r} has entries outside [0, 1]")));
            }
            let s: T = row.iter().copied().sum();
            if (s.as_f64() - 1.0).abs() > 1e-5 {
                return Err(Error::Data(format!("posterior row {r} sums to {s}")));
            }
        }
        Ok(PosteriorMatrix { probs })
    }

    pub(crate) fn from_tape(probs: Tensor<T>) -> Self {
        PosteriorMatrix { probs }
    }

    pub fn rows(&self) -> usize {
        self.probs.rows()
    }

    pub fn cols(&self) -> usize {
        self.probs.cols()
    }

    pub fn at(&self, r: usize, c: usize) -> T {
        self.probs.at(r, c)
    }

    pub fn row(&self, r: usize) -> &[T] {
        self.probs.row_slice(r)
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.probs
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.probs
    }

    /// Per-row argmax, ties to the lowest index.
    pub fn row_argmax(&self) -> Vec<usize> {
        (0..self.rows()).map(|r| self.probs.row_argmax(r)).collect()
    }
}

/// Image-level label scores: per-label maximum over patches.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelScores<T: Real = f32> {
    pub scores: Vec<T>,
    /// Patch achieving each label's score (lowest index on ties).
    pub argmax_patch: Vec<usize>,
}

fn check_unit(x: &[f64], row: usize) -> Result<()> {
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if (n - 1.0).abs() > UNIT_TOL {
        return Err(Error::NotNormalized { row, norm: n });
    }
    Ok(())
}

fn check_unit_rows<T: Real>(t: &Tensor<T>) -> Result<()> {
    for r in 0..t.rows() {
        let row: Vec<f64> = t.row_slice(r).iter().map(|v| v.as_f64()).collect();
        check_unit(&row, r)?;
    }
    Ok(())
}

/// `(x̂·μ̂)/τ`: the vMF log-density without its normalizing constant.
pub fn vmf_log_kernel<T: Real>(x_hat: &[T], mu_hat: &[T], tau: T) -> Result<T> {
    if x_hat.len() != mu_hat.len() {
        return Err(Error::dim("vmf_log_kernel", &[x_hat.len()], &[mu_hat.len()]));
    }
    if !(tau > T::zero()) {
        return Err(Error::Config(format!("tau must be positive, got {tau}")));
    }
    let xs: Vec<f64> = x_hat.iter().map(|v| v.as_f64()).collect();
    let ms: Vec<f64> = mu_hat.iter().map(|v| v.as_f64()).collect();
    check_unit(&xs, 0)?;
    check_unit(&ms, 1)?;
    let dot: T = x_hat.iter().zip(mu_hat).map(|(&a, &b)| a * b).sum();
    Ok(dot / tau)
}

/// Checks that `phi` is row-stochastic within `1e-6`.
pub fn check_association<T: Real>(phi: &Tensor<T>) -> Result<()> {
    for r in 0..phi.rows() {
        let s: f64 = phi.row_slice(r).iter().map(|v| v.as_f64()).sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::Association { row: r, sum: s });
        }
    }
    Ok(())
}

// ---- tape forms ----

/// Softmax over prototypes of `Ẑ·P̂ᵀ/τ₁`, one row per patch.
pub fn patch_to_prototype_posterior_on<T: Real>(tape: &mut Tape<T>, z_hat: Var, p_hat: Var, tau1: T) -> Result<Var> {
    let logits = tape.matmul_t(z_hat, p_hat)?;
    tape.softmax(logits, Axis::Cols, tau1)
}

/// Softmax over class prototypes of `P̂·Ĉᵀ/τ₂`, mixed into labels by `phi`.
pub fn prototype_to_class_posterior_on<T: Real>(
    tape: &mut Tape<T>,
    p_hat: Var,
    c_hat: Var,
    phi: Var,
    tau2: T,
) -> Result<Var> {
    let logits = tape.matmul_t(p_hat, c_hat)?;
    let per_proto = tape.softmax(logits, Axis::Cols, tau2)?;
    tape.matmul(per_proto, phi)
}

/// Marginalizes the image prototypes out: `p(P̂|Ẑ) · p(ν|P̂)`.
pub fn patch_class_posterior_on<T: Real>(tape: &mut Tape<T>, patch_proto: Var, proto_class: Var) -> Result<Var> {
    tape.matmul(patch_proto, proto_class)
}

/// Max-pool over rows: one score per label.
pub fn max_pool_on<T: Real>(tape: &mut Tape<T>, posterior: Var) -> Result<(Var, Vec<usize>)> {
    tape.max_along(posterior, Axis::Rows)
}

// ---- eager forms ----

fn eager<T: Real>(f: impl FnOnce(&mut Tape<T>) -> Result<Var>) -> Result<PosteriorMatrix<T>> {
    let mut tape = Tape::new();
    let v = f(&mut tape)?;
    Ok(PosteriorMatrix::from_tape(tape.value(v).clone()))
}

pub fn patch_to_prototype_posterior<T: Real>(
    z_hat: &Tensor<T>,
    p_hat: &Tensor<T>,
    tau1: T,
) -> Result<PosteriorMatrix<T>> {
    check_unit_rows(z_hat)?;
    check_unit_rows(p_hat)?;
    eager(|tape| {
        let z = tape.constant(z_hat.clone());
        let p = tape.constant(p_hat.clone());
        patch_to_prototype_posterior_on(tape, z, p, tau1)
    })
}

pub fn prototype_to_class_posterior<T: Real>(
    p_hat: &Tensor<T>,
    c_hat: &Tensor<T>,
    phi: &Tensor<T>,
    tau2: T,
) -> Result<PosteriorMatrix<T>> {
    check_unit_rows(p_hat)?;
    check_unit_rows(c_hat)?;
    if phi.rows() != c_hat.rows() {
        return Err(Error::dim("prototype_to_class_posterior", c_hat.shape(), phi.shape()));
    }
    check_association(phi)?;
    eager(|tape| {
        let p = tape.constant(p_hat.clone());
        let c = tape.constant(c_hat.clone());
        let f = tape.constant(phi.clone());
        prototype_to_class_posterior_on(tape, p, c, f, tau2)
    })
}

pub fn patch_class_posterior<T: Real>(
    z_hat: &Tensor<T>,
    p_hat: &Tensor<T>,
    c_hat: &Tensor<T>,
    phi: &Tensor<T>,
    tau1: T,
    tau2: T,
) -> Result<PosteriorMatrix<T>> {
    let zp = patch_to_prototype_posterior(z_hat, p_hat, tau1)?;
    let pc = prototype_to_class_posterior(p_hat, c_hat, phi, tau2)?;
    Ok(PosteriorMatrix::from_tape(zp.tensor().matmul(pc.tensor())?))
}

/// Column maxima of a patch-class posterior, with the winning patch per label.
pub fn image_label_scores<T: Real>(posterior: &PosteriorMatrix<T>) -> Result<LabelScores<T>> {
    let mut tape = Tape::new();
    let p = tape.constant(posterior.tensor().clone());
    let (s, argmax_patch) = max_pool_on(&mut tape, p)?;
    Ok(LabelScores {
        scores: tape.value(s).data().to_vec(),
        argmax_patch,
    })
}
