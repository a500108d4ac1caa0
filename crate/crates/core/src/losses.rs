//! The training objective: clustering, discriminative, prototype-level
//! discriminative, prototype diversity, and cross-view consistency terms.
//!
//! Every term is evaluated on the prototypes emitted after each decoder layer
//! and averaged over layers, then over views, then over the batch.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{Axis, Tape, Var};
use crate::config::{CarlForm, ModelConfig};
use crate::error::{Error, Result};
use crate::model::{ComfeModel, ModelVars};
use crate::prototypes::MultiLabel;
use crate::tensor::{Real, Tensor};
use crate::vmf;

/// Scores are clamped to `[ε, 1-ε]` before taking logs.
pub const SCORE_EPS: f64 = 1e-7;
const PROB_FLOOR: f64 = 1e-30;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub cluster: f64,
    pub discrim: f64,
    pub p_discrim: f64,
    pub contrast: f64,
    pub carl: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn finish(mut self) -> Self {
        self.total = self.cluster + self.discrim + self.p_discrim + self.contrast + self.carl;
        self
    }

    pub fn is_finite(&self) -> bool {
        [self.cluster, self.discrim, self.p_discrim, self.contrast, self.carl, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    fn add_scaled(&mut self, other: &LossBreakdown, s: f64) {
        self.cluster += other.cluster * s;
        self.discrim += other.discrim * s;
        self.p_discrim += other.p_discrim * s;
        self.contrast += other.contrast * s;
        self.carl += other.carl * s;
    }
}

// ---- individual terms on a tape ----

/// `-(1/N_Z) Σ_i log Σ_j exp(ẑ_i·p̂_j / τ₁)`.
pub fn cluster_loss_on<T: Real>(tape: &mut Tape<T>, z_hat: Var, p_hat: Var, tau1: T) -> Result<Var> {
    let logits = tape.matmul_t(z_hat, p_hat)?;
    let logits = tape.scale(logits, T::one() / tau1);
    let lse = tape.log_sum_exp(logits, Axis::Cols)?;
    let m = tape.mean(lse);
    Ok(tape.scale(m, -T::one()))
}

/// Multi-label binary cross-entropy summed over labels.
pub fn bce_on<T: Real>(tape: &mut Tape<T>, y: Var, scores: Var) -> Result<Var> {
    let eps = T::of(SCORE_EPS);
    let s = tape.clamp(scores, eps, T::one() - eps);
    let log_s = tape.log(s);
    let one_minus = tape.affine(s, -T::one(), T::one());
    let log_1ms = tape.log(one_minus);
    let pos = tape.mul(y, log_s)?;
    let not_y = tape.affine(y, -T::one(), T::one());
    let neg = tape.mul(not_y, log_1ms)?;
    let both = tape.add(pos, neg)?;
    let total = tape.sum(both);
    Ok(tape.scale(total, -T::one()))
}

/// `-Σ_i log softmax_j(x̂_i·x̂_j / τ_c)[i]` over the rows of one matrix.
pub fn self_contrast_on<T: Real>(tape: &mut Tape<T>, x_hat: Var, tau_c: T) -> Result<Var> {
    let n = tape.value(x_hat).rows();
    let sims = tape.matmul_t(x_hat, x_hat)?;
    let ls = tape.log_softmax(sims, Axis::Cols, tau_c)?;
    let eye = tape.constant(Tensor::eye(n));
    let diag = tape.mul(ls, eye)?;
    let s = tape.sum(diag);
    Ok(tape.scale(s, -T::one()))
}

/// Consistency between the patch→prototype posteriors of two views.
pub fn carl_loss_on<T: Real>(tape: &mut Tape<T>, post_a: Var, post_b: Var, form: CarlForm) -> Result<Var> {
    let floor = T::of(PROB_FLOOR);
    let per_patch = match form {
        CarlForm::Agreement => {
            let prod = tape.mul(post_a, post_b)?;
            let agree = tape.sum_along(prod, Axis::Cols)?;
            let agree = tape.clamp(agree, floor, T::one());
            tape.log(agree)
        }
        CarlForm::Literal => {
            let a = tape.clamp(post_a, floor, T::one());
            let b = tape.clamp(post_b, floor, T::one());
            let la = tape.log(a);
            let lb = tape.log(b);
            let both = tape.add(la, lb)?;
            tape.sum_along(both, Axis::Cols)?
        }
    };
    let m = tape.mean(per_patch);
    Ok(tape.scale(m, -T::one()))
}

// ---- eager wrappers ----

fn scalar<T: Real>(f: impl FnOnce(&mut Tape<T>) -> Result<Var>) -> Result<T> {
    let mut tape = Tape::new();
    let v = f(&mut tape)?;
    Ok(tape.value(v).data()[0])
}

pub fn cluster_loss<T: Real>(z_hat: &Tensor<T>, p_hat: &Tensor<T>, tau1: T) -> Result<T> {
    scalar(|t| {
        let z = t.constant(z_hat.clone());
        let p = t.constant(p_hat.clone());
        cluster_loss_on(t, z, p, tau1)
    })
}

fn bce<T: Real>(y: &MultiLabel, scores: &[T]) -> Result<T> {
    if y.len() != scores.len() {
        return Err(Error::dim("binary cross-entropy", &[y.len()], &[scores.len()]));
    }
    scalar(|t| {
        let yv = t.constant(y.as_tensor());
        let s = t.constant(Tensor::row(scores.to_vec())?);
        bce_on(t, yv, s)
    })
}

/// BCE against patch-level max-pooled scores.
pub fn discrim_loss<T: Real>(y: &MultiLabel, scores: &[T]) -> Result<T> {
    bce(y, scores)
}

/// BCE against prototype-level max-pooled scores.
pub fn p_discrim_loss<T: Real>(y: &MultiLabel, prototype_scores: &[T]) -> Result<T> {
    bce(y, prototype_scores)
}

/// Diversity penalty on the class prototypes plus one image's prototypes.
pub fn contrast_loss<T: Real>(p_hat: &Tensor<T>, c_hat: &Tensor<T>, tau_c: T) -> Result<T> {
    scalar(|t| {
        let p = t.constant(p_hat.clone());
        let c = t.constant(c_hat.clone());
        let lp = self_contrast_on(t, p, tau_c)?;
        let lc = self_contrast_on(t, c, tau_c)?;
        t.add(lp, lc)
    })
}

pub fn carl_loss<T: Real>(post_a: &Tensor<T>, post_b: &Tensor<T>, form: CarlForm) -> Result<T> {
    if post_a.shape() != post_b.shape() {
        return Err(Error::dim("carl_loss", post_a.shape(), post_b.shape()));
    }
    scalar(|t| {
        let a = t.constant(post_a.clone());
        let b = t.constant(post_b.clone());
        carl_loss_on(t, a, b, form)
    })
}

// ---- composed objective ----

/// One training image: primary view, optional paired view, extended label.
#[derive(Clone, Debug)]
pub struct Sample<'a, T: Real = f32> {
    pub view_a: &'a Tensor<T>,
    pub view_b: Option<&'a Tensor<T>>,
    pub label: MultiLabel,
}

/// Per-layer terms of one view (weighted by nothing yet).
pub struct LayerTerms {
    pub cluster: Var,
    pub discrim: Var,
    pub p_discrim: Var,
    pub contrast: Var,
    pub patch_proto: Var,
}

/// Loss terms for one view's prototypes at one decoder layer. The class
/// prototype diversity term is not included; it does not depend on the image.
pub fn layer_terms_on<T: Real>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    z_hat: Var,
    prototypes: Var,
    c_hat: Var,
    phi: Var,
    y: Var,
) -> Result<LayerTerms> {
    let tau1 = T::of(cfg.tau1 as f64);
    let p_hat = tape.l2_normalize_rows(prototypes)?;
    let patch_proto = vmf::patch_to_prototype_posterior_on(tape, z_hat, p_hat, tau1)?;
    let proto_class = vmf::prototype_to_class_posterior_on(tape, p_hat, c_hat, phi, T::of(cfg.tau2 as f64))?;
    let patch_class = vmf::patch_class_posterior_on(tape, patch_proto, proto_class)?;
    let (scores, _) = vmf::max_pool_on(tape, patch_class)?;
    let (proto_scores, _) = vmf::max_pool_on(tape, proto_class)?;
    Ok(LayerTerms {
        cluster: cluster_loss_on(tape, z_hat, p_hat, tau1)?,
        discrim: bce_on(tape, y, scores)?,
        p_discrim: bce_on(tape, y, proto_scores)?,
        contrast: self_contrast_on(tape, p_hat, T::of(cfg.tau_c as f64))?,
        patch_proto,
    })
}

/// Builds one image's weighted objective on `tape`. Returns the scalar and
/// its unweighted-then-weighted breakdown (class contrast excluded).
pub fn sample_loss_on<T: Real>(
    tape: &mut Tape<T>,
    model: &ComfeModel<T>,
    vars: &ModelVars,
    sample: &Sample<'_, T>,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<(Var, LossBreakdown)> {
    let cfg = &model.config;
    if sample.label.len() != model.bank.labels() {
        return Err(Error::Data(format!(
            "label has {} entries, model has {} labels",
            sample.label.len(),
            model.bank.labels()
        )));
    }
    let y = tape.constant(sample.label.as_tensor());
    let c_hat = tape.l2_normalize_rows(vars.class_prototypes)?;

    let mut views = vec![model.forward_view(tape, vars, sample.view_a, rng.as_deref_mut())?];
    if let Some(b) = sample.view_b {
        if b.shape() != sample.view_a.shape() {
            return Err(Error::dim("paired view", sample.view_a.shape(), b.shape()));
        }
        views.push(model.forward_view(tape, vars, b, rng.as_deref_mut())?);
    }

    let n_layers = views[0].prototypes.len();
    let w = &cfg.weights;
    let mut parts: Vec<(Var, f64)> = Vec::new();
    let mut bd = LossBreakdown::default();
    let scale = 1.0 / (n_layers * views.len()) as f64;
    for l in 0..n_layers {
        let mut posts = Vec::with_capacity(views.len());
        for v in &views {
            let t = layer_terms_on(tape, cfg, v.z_hat, v.prototypes[l], c_hat, phi_of(vars), y)?;
            for (var, weight, slot) in [
                (t.cluster, w.cluster, &mut bd.cluster),
                (t.discrim, w.discrim, &mut bd.discrim),
                (t.p_discrim, w.p_discrim, &mut bd.p_discrim),
                (t.contrast, w.contrast, &mut bd.contrast),
            ] {
                *slot += tape.value(var).data()[0].as_f64() * weight as f64 * scale;
                parts.push((var, weight as f64 * scale));
            }
            posts.push(t.patch_proto);
        }
        if posts.len() == 2 {
            let carl = carl_loss_on(tape, posts[0], posts[1], cfg.carl)?;
            let s = w.carl as f64 / n_layers as f64;
            bd.carl += tape.value(carl).data()[0].as_f64() * s;
            parts.push((carl, s));
        }
    }

    let mut total: Option<Var> = None;
    for (var, s) in parts {
        let term = tape.scale(var, T::of(s));
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    Ok((total.expect("at least one term"), bd))
}

fn phi_of(vars: &ModelVars) -> Var {
    vars.phi
}

/// Weighted class-prototype diversity term.
pub fn class_contrast_on<T: Real>(tape: &mut Tape<T>, model: &ComfeModel<T>, vars: &ModelVars) -> Result<(Var, f64)> {
    let c_hat = tape.l2_normalize_rows(vars.class_prototypes)?;
    let term = self_contrast_on(tape, c_hat, T::of(model.config.tau_c as f64))?;
    let w = model.config.weights.contrast;
    let v = tape.value(term).data()[0].as_f64() * w as f64;
    Ok((tape.scale(term, T::of(w as f64)), v))
}

/// Batch loss and optionally the gradient for every parameter (in
/// [`ComfeModel::named_params`] order).
pub struct BatchLoss<T> {
    pub breakdown: LossBreakdown,
    pub grads: Option<Vec<Tensor<T>>>,
}

/// Options for [`total_loss`].
#[derive(Clone, Copy, Debug, Default)]
pub struct LossOptions {
    pub with_grads: bool,
    /// Worker threads; results are reduced in batch order either way.
    pub threads: usize,
    /// Seed for dropout masks; `None` disables dropout.
    pub dropout_seed: Option<u64>,
}

struct ItemResult<T> {
    breakdown: LossBreakdown,
    grads: Option<Vec<Tensor<T>>>,
}

fn item_loss<T: Real>(
    model: &ComfeModel<T>,
    sample: &Sample<'_, T>,
    index: usize,
    opts: &LossOptions,
) -> Result<ItemResult<T>> {
    let mut tape = Tape::new();
    let vars = model.register(&mut tape, opts.with_grads);
    let mut rng = opts
        .dropout_seed
        .filter(|_| model.config.dropout > 0.0)
        .map(|s| ChaCha8Rng::seed_from_u64(s.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index as u64));
    let (loss, breakdown) = sample_loss_on(&mut tape, model, &vars, sample, rng.as_mut())?;
    let grads = if opts.with_grads {
        let mut g = tape.backward(loss)?;
        Some(collect_grads(model, &vars, &mut g))
    } else {
        None
    };
    Ok(ItemResult { breakdown, grads })
}

fn collect_grads<T: Real>(model: &ComfeModel<T>, vars: &ModelVars, g: &mut crate::autodiff::Grads<T>) -> Vec<Tensor<T>> {
    ComfeModel::<T>::param_vars(vars)
        .into_iter()
        .zip(model.named_params())
        .map(|(v, (_, t))| {
            g.take(v)
                .unwrap_or_else(|| Tensor::new(t.shape().to_vec(), vec![T::zero(); t.len()]).expect("shape"))
        })
        .collect()
}

/// Mean objective over `batch`: each term averaged over layers, views and
/// images, plus the class-prototype diversity term.
pub fn total_loss<T: Real>(model: &ComfeModel<T>, batch: &[Sample<'_, T>], opts: &LossOptions) -> Result<BatchLoss<T>> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let run = |(i, s): (usize, &Sample<'_, T>)| item_loss(model, s, i, opts);
    let items: Vec<Result<ItemResult<T>>> = if opts.threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| batch.par_iter().enumerate().map(run).collect())
    } else {
        batch.iter().enumerate().map(run).collect()
    };

    let inv_b = 1.0 / batch.len() as f64;
    let mut breakdown = LossBreakdown::default();
    let mut grads: Option<Vec<Tensor<T>>> = None;
    for item in items {
        let item = item?;
        breakdown.add_scaled(&item.breakdown, inv_b);
        if let Some(g) = item.grads {
            let acc = grads.get_or_insert_with(|| {
                g.iter()
                    .map(|t| Tensor::new(t.shape().to_vec(), vec![T::zero(); t.len()]).expect("shape"))
                    .collect()
            });
            let s = T::of(inv_b);
            for (a, gi) in acc.iter_mut().zip(&g) {
                for (x, &y) in a.data_mut().iter_mut().zip(gi.data()) {
                    *x = *x + y * s;
                }
            }
        }
    }

    let mut tape = Tape::new();
    let vars = model.register(&mut tape, opts.with_grads);
    let (cterm, cval) = class_contrast_on(&mut tape, model, &vars)?;
    breakdown.contrast += cval;
    if let Some(acc) = grads.as_mut() {
        let mut g = tape.backward(cterm)?;
        for (a, gi) in acc.iter_mut().zip(collect_grads(model, &vars, &mut g)) {
            for (x, &y) in a.data_mut().iter_mut().zip(gi.data()) {
                *x = *x + y;
            }
        }
    }

    let breakdown = breakdown.finish();
    if !breakdown.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    Ok(BatchLoss { breakdown, grads })
}
