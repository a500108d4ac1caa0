//! The clustering head: a small pre-norm transformer decoder that turns patch
//! embeddings and learnable queries into one image prototype per query.
//!
//! Each layer runs self-attention over the queries, cross-attention from the
//! queries to the patches, and a GELU feed-forward block, each wrapped in a
//! residual connection with layer norm on the branch input. The patch tokens
//! get their own per-layer layer norm before serving as keys and values, so
//! unit-norm embeddings attend at the same scale as the query stream. No
//! positional encodings are used, so the output is invariant to patch order.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Axis, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub dropout: f32,
}

impl DecoderConfig {
    /// Two layers, eight heads, `d_ff = 4·d_model`, no dropout.
    pub fn new(d_model: usize) -> Self {
        DecoderConfig {
            layers: 2,
            heads: 8,
            d_model,
            d_ff: 4 * d_model,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("decoder needs at least one layer".into()));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.d_ff == 0 {
            return Err(Error::Config("d_ff must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

/// Projections of one multi-head attention block. Weights are `d×d`, biases `1×d`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights<P> {
    pub wq: P,
    pub bq: P,
    pub wk: P,
    pub bk: P,
    pub wv: P,
    pub bv: P,
    pub wo: P,
    pub bo: P,
}

impl<P> AttentionWeights<P> {
    fn map<Q>(&self, prefix: &str, f: &mut impl FnMut(&str, &P) -> Q) -> AttentionWeights<Q> {
        let mut g = |n: &str, p: &P| f(&format!("{prefix}.{n}"), p);
        AttentionWeights {
            wq: g("wq", &self.wq),
            bq: g("bq", &self.bq),
            wk: g("wk", &self.wk),
            bk: g("bk", &self.bk),
            wv: g("wv", &self.wv),
            bv: g("bv", &self.bv),
            wo: g("wo", &self.wo),
            bo: g("bo", &self.bo),
        }
    }

    fn entries(&self, prefix: &str) -> Vec<(String, &P)> {
        [
            ("wq", &self.wq),
            ("bq", &self.bq),
            ("wk", &self.wk),
            ("bk", &self.bk),
            ("wv", &self.wv),
            ("bv", &self.bv),
            ("wo", &self.wo),
            ("bo", &self.bo),
        ]
        .into_iter()
        .map(|(n, p)| (format!("{prefix}.{n}"), p))
        .collect()
    }

    fn for_each_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut P)) {
        for (n, p) in [
            ("wq", &mut self.wq),
            ("bq", &mut self.bq),
            ("wk", &mut self.wk),
            ("bk", &mut self.bk),
            ("wv", &mut self.wv),
            ("bv", &mut self.bv),
            ("wo", &mut self.wo),
            ("bo", &mut self.bo),
        ] {
            f(&format!("{prefix}.{n}"), p);
        }
    }
}

/// All parameters of one decoder layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights<P> {
    pub norm1_gain: P,
    pub norm1_bias: P,
    pub self_attn: AttentionWeights<P>,
    pub norm2_gain: P,
    pub norm2_bias: P,
    /// Normalizes the patch tokens before they serve as keys and values.
    pub memory_gain: P,
    pub memory_bias: P,
    pub cross_attn: AttentionWeights<P>,
    pub norm3_gain: P,
    pub norm3_bias: P,
    pub ff_w1: P,
    pub ff_b1: P,
    pub ff_w2: P,
    pub ff_b2: P,
}

impl<P> LayerWeights<P> {
    /// Maps every parameter, visiting in declaration order. Names are
    /// dotted paths relative to the layer (`self_attn.wq`, `ff_b1`, ...).
    pub fn map<Q>(&self, mut f: impl FnMut(&str, &P) -> Q) -> LayerWeights<Q> {
        LayerWeights {
            norm1_gain: f("norm1_gain", &self.norm1_gain),
            norm1_bias: f("norm1_bias", &self.norm1_bias),
            self_attn: self.self_attn.map("self_attn", &mut f),
            norm2_gain: f("norm2_gain", &self.norm2_gain),
            norm2_bias: f("norm2_bias", &self.norm2_bias),
            memory_gain: f("memory_gain", &self.memory_gain),
            memory_bias: f("memory_bias", &self.memory_bias),
            cross_attn: self.cross_attn.map("cross_attn", &mut f),
            norm3_gain: f("norm3_gain", &self.norm3_gain),
            norm3_bias: f("norm3_bias", &self.norm3_bias),
            ff_w1: f("ff_w1", &self.ff_w1),
            ff_b1: f("ff_b1", &self.ff_b1),
            ff_w2: f("ff_w2", &self.ff_w2),
            ff_b2: f("ff_b2", &self.ff_b2),
        }
    }

    /// Named references in the same order as [`LayerWeights::map`].
    pub fn entries(&self) -> Vec<(String, &P)> {
        let mut out = vec![
            ("norm1_gain".to_string(), &self.norm1_gain),
            ("norm1_bias".to_string(), &self.norm1_bias),
        ];
        out.extend(self.self_attn.entries("self_attn"));
        out.push(("norm2_gain".into(), &self.norm2_gain));
        out.push(("norm2_bias".into(), &self.norm2_bias));
        out.push(("memory_gain".into(), &self.memory_gain));
        out.push(("memory_bias".into(), &self.memory_bias));
        out.extend(self.cross_attn.entries("cross_attn"));
        out.push(("norm3_gain".into(), &self.norm3_gain));
        out.push(("norm3_bias".into(), &self.norm3_bias));
        out.push(("ff_w1".into(), &self.ff_w1));
        out.push(("ff_b1".into(), &self.ff_b1));
        out.push(("ff_w2".into(), &self.ff_w2));
        out.push(("ff_b2".into(), &self.ff_b2));
        out
    }

    /// Same visiting order as [`LayerWeights::map`].
    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut P)) {
        f("norm1_gain", &mut self.norm1_gain);
        f("norm1_bias", &mut self.norm1_bias);
        self.self_attn.for_each_mut("self_attn", &mut f);
        f("norm2_gain", &mut self.norm2_gain);
        f("norm2_bias", &mut self.norm2_bias);
        f("memory_gain", &mut self.memory_gain);
        f("memory_bias", &mut self.memory_bias);
        self.cross_attn.for_each_mut("cross_attn", &mut f);
        f("norm3_gain", &mut self.norm3_gain);
        f("norm3_bias", &mut self.norm3_bias);
        f("ff_w1", &mut self.ff_w1);
        f("ff_b1", &mut self.ff_b1);
        f("ff_w2", &mut self.ff_w2);
        f("ff_b2", &mut self.ff_b2);
    }
}

/// True for projection matrices; false for biases and norm parameters.
pub fn is_weight_matrix(name: &str) -> bool {
    let leaf = name.rsplit('.').next().unwrap_or(name);
    leaf.starts_with('w') || leaf.starts_with("ff_w")
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams<T: Real = f32> {
    pub layers: Vec<LayerWeights<Tensor<T>>>,
}

fn xavier<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt() as f32;
    let normal = Normal::new(0.0f32, std).expect("positive std");
    let data = (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
    Tensor::matrix(fan_in, fan_out, data).expect("positive shape")
}

impl DecoderParams {
    /// Xavier-normal projections, zero biases, unit norm gains.
    pub fn init<R: Rng>(rng: &mut R, cfg: &DecoderConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let attn = |rng: &mut R| AttentionWeights {
            wq: xavier(rng, d, d),
            bq: Tensor::zeros(1, d),
            wk: xavier(rng, d, d),
            bk: Tensor::zeros(1, d),
            wv: xavier(rng, d, d),
            bv: Tensor::zeros(1, d),
            wo: xavier(rng, d, d),
            bo: Tensor::zeros(1, d),
        };
        let layers = (0..cfg.layers)
            .map(|_| LayerWeights {
                norm1_gain: Tensor::full(1, d, 1.0),
                norm1_bias: Tensor::zeros(1, d),
                self_attn: attn(rng),
                norm2_gain: Tensor::full(1, d, 1.0),
                norm2_bias: Tensor::zeros(1, d),
                memory_gain: Tensor::full(1, d, 1.0),
                memory_bias: Tensor::zeros(1, d),
                cross_attn: attn(rng),
                norm3_gain: Tensor::full(1, d, 1.0),
                norm3_bias: Tensor::zeros(1, d),
                ff_w1: xavier(rng, d, cfg.d_ff),
                ff_b1: Tensor::zeros(1, cfg.d_ff),
                ff_w2: xavier(rng, cfg.d_ff, d),
                ff_b2: Tensor::zeros(1, d),
            })
            .collect();
        Ok(DecoderParams { layers })
    }
}

impl<T: Real> DecoderParams<T> {
    pub fn cast<U: Real>(&self) -> DecoderParams<U> {
        DecoderParams {
            layers: self.layers.iter().map(|l| l.map(|_, t| t.cast())).collect(),
        }
    }

    /// Every parameter with its full name (`decoder.<layer>.<path>`).
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, layer)| {
                layer
                    .entries()
                    .into_iter()
                    .map(move |(n, t)| (format!("decoder.{i}.{n}"), t))
            })
            .collect()
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor<T>)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.for_each_mut(|n, t| f(&format!("decoder.{i}.{n}"), t));
        }
    }

    pub fn register(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<LayerWeights<Var>> {
        self.layers
            .iter()
            .map(|l| {
                l.map(|_, t| {
                    if trainable {
                        tape.param(t.clone())
                    } else {
                        tape.constant(t.clone())
                    }
                })
            })
            .collect()
    }

    pub fn check_shapes(&self, cfg: &DecoderConfig) -> Result<()> {
        if self.layers.len() != cfg.layers {
            return Err(Error::Config(format!(
                "decoder has {} layers, config says {}",
                self.layers.len(),
                cfg.layers
            )));
        }
        let d = cfg.d_model;
        for (name, t) in self.named() {
            let leaf = name.rsplit('.').next().unwrap();
            let expect: [usize; 2] = match leaf {
                "ff_w1" => [d, cfg.d_ff],
                "ff_b1" => [1, cfg.d_ff],
                "ff_w2" => [cfg.d_ff, d],
                l if l.starts_with('w') => [d, d],
                _ => [1, d],
            };
            if t.dims2() != (expect[0], expect[1]) {
                return Err(Error::dim("decoder parameter", t.shape(), &expect));
            }
            if !t.is_finite() {
                return Err(Error::NonFinite(name));
            }
        }
        Ok(())
    }
}

/// Multi-head scaled dot-product attention: per head
/// `softmax(q_h k_hᵀ / √d_h) v_h`, heads concatenated then output-projected.
pub fn attention_on<T: Real>(
    tape: &mut Tape<T>,
    queries: Var,
    keys: Var,
    values: Var,
    w: &AttentionWeights<Var>,
    heads: usize,
) -> Result<Var> {
    let d = tape.value(queries).cols();
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("width {d} is not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let q = tape.matmul(queries, w.wq)?;
    let q = tape.add_row(q, w.bq)?;
    let k = tape.matmul(keys, w.wk)?;
    let k = tape.add_row(k, w.bk)?;
    let v = tape.matmul(values, w.wv)?;
    let v = tape.add_row(v, w.bv)?;
    let temp = T::of((dh as f64).sqrt());
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * dh, dh)?,
                tape.slice_cols(k, h * dh, dh)?,
                tape.slice_cols(v, h * dh, dh)?,
            )
        };
        let scores = tape.matmul_t(qh, kh)?;
        let weights = tape.softmax(scores, Axis::Cols, temp)?;
        outs.push(tape.matmul(weights, vh)?);
    }
    let o = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    let o = tape.matmul(o, w.wo)?;
    tape.add_row(o, w.bo)
}

fn dropout_on<T: Real, R: Rng>(tape: &mut Tape<T>, x: Var, rate: f32, rng: Option<&mut R>) -> Result<Var> {
    let Some(rng) = rng else { return Ok(x) };
    if rate <= 0.0 {
        return Ok(x);
    }
    let keep = T::of(1.0 / (1.0 - rate as f64));
    let shape = tape.value(x).shape().to_vec();
    let n = tape.value(x).len();
    let mask = (0..n)
        .map(|_| if rng.random::<f32>() < rate { T::zero() } else { keep })
        .collect();
    let mask = tape.constant(Tensor::new(shape, mask)?);
    tape.mul(x, mask)
}

/// Runs the decoder, returning the query state after every layer.
///
/// Dropout is applied to each branch output only when `rng` is given.
pub fn decoder_forward_on<T: Real, R: Rng>(
    tape: &mut Tape<T>,
    z: Var,
    q: Var,
    layers: &[LayerWeights<Var>],
    cfg: &DecoderConfig,
    mut rng: Option<&mut R>,
) -> Result<Vec<Var>> {
    cfg.validate()?;
    let (nz, dz) = tape.value(z).dims2();
    let dq = tape.value(q).cols();
    if nz == 0 || dz != cfg.d_model || dq != cfg.d_model {
        return Err(Error::dim("decoder input", tape.value(z).shape(), tape.value(q).shape()));
    }
    let mut x = q;
    let mut outputs = Vec::with_capacity(layers.len());
    for (li, w) in layers.iter().enumerate() {
        let h = tape.layer_norm(x, w.norm1_gain, w.norm1_bias)?;
        let a = attention_on(tape, h, h, h, &w.self_attn, cfg.heads)?;
        let a = dropout_on(tape, a, cfg.dropout, rng.as_deref_mut())?;
        x = tape.add(x, a)?;

        let h = tape.layer_norm(x, w.norm2_gain, w.norm2_bias)?;
        let m = tape.layer_norm(z, w.memory_gain, w.memory_bias)?;
        let a = attention_on(tape, h, m, m, &w.cross_attn, cfg.heads)?;
        let a = dropout_on(tape, a, cfg.dropout, rng.as_deref_mut())?;
        x = tape.add(x, a)?;

        let h = tape.layer_norm(x, w.norm3_gain, w.norm3_bias)?;
        let f = tape.matmul(h, w.ff_w1)?;
        let f = tape.add_row(f, w.ff_b1)?;
        let f = tape.gelu(f);
        let f = tape.matmul(f, w.ff_w2)?;
        let f = tape.add_row(f, w.ff_b2)?;
        let f = dropout_on(tape, f, cfg.dropout, rng.as_deref_mut())?;
        x = tape.add(x, f)?;

        if !tape.value(x).is_finite() {
            return Err(Error::NonFinite(format!("decoder layer {li} output")));
        }
        outputs.push(x);
    }
    Ok(outputs)
}

/// Inference-only forward pass returning one `N_P × d` prototype matrix per layer.
pub fn decoder_forward<T: Real>(
    z: &Tensor<T>,
    q: &Tensor<T>,
    params: &DecoderParams<T>,
    cfg: &DecoderConfig,
) -> Result<Vec<Tensor<T>>> {
    params.check_shapes(cfg)?;
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let qv = tape.constant(q.clone());
    let layers = params.register(&mut tape, false);
    let outs = decoder_forward_on::<T, rand_chacha::ChaCha8Rng>(&mut tape, zv, qv, &layers, cfg, None)?;
    Ok(outs.into_iter().map(|v| tape.value(v).clone()).collect())
}
