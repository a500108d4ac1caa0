//! Minibatch training: AdamW with decoupled decay on decoder weights, linear
//! warmup into cosine decay, and global-norm gradient clipping.

use std::f64::consts::PI;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::data::{Dataset, Masks};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::losses::{total_loss, LossBreakdown, LossOptions, Sample};
use crate::model::ComfeModel;
use crate::tensor::Tensor;

/// Learning rate before update number `step` (0-based) of `total`.
pub fn lr_at(step: usize, total: usize, cfg: &TrainConfig) -> f64 {
    let base = cfg.base_lr as f64;
    if total == 0 {
        return 0.0;
    }
    let step = step.min(total);
    let warm = cfg.warmup_fraction * total as f64;
    let s = step as f64;
    if s < warm {
        return base * s / warm;
    }
    let span = total as f64 - warm;
    if span <= 0.0 {
        return 0.0;
    }
    let progress = (s - warm) / span;
    base * 0.5 * (1.0 + (PI * progress).cos())
}

/// Scales `grads` so their global L2 norm is at most `clip_norm`; returns the factor.
pub fn clip_gradients(grads: &mut [Tensor], names: &[String], clip_norm: f64) -> Result<f64> {
    let mut sq = 0.0f64;
    for (g, name) in grads.iter().zip(names) {
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
        sq += g.data().iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>();
    }
    let norm = sq.sqrt();
    if norm <= clip_norm {
        return Ok(1.0);
    }
    let factor = clip_norm / norm;
    for g in grads.iter_mut() {
        for x in g.data_mut() {
            *x = (*x as f64 * factor) as f32;
        }
    }
    Ok(factor)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub names: Vec<String>,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl OptimizerState {
    pub fn new(model: &ComfeModel, cfg: &TrainConfig) -> Self {
        let params = model.named_params();
        let zeros = || {
            params
                .iter()
                .map(|(_, t)| Tensor::new(t.shape().to_vec(), vec![0.0; t.len()]).expect("shape"))
                .collect::<Vec<_>>()
        };
        OptimizerState {
            step: 0,
            names: params.iter().map(|(n, _)| n.clone()).collect(),
            m: zeros(),
            v: zeros(),
            base_lr: cfg.base_lr as f64,
            weight_decay: cfg.weight_decay as f64,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
        }
    }

    /// One AdamW update. Decay `-lr·wd·θ` applies to decoder weight matrices only.
    pub fn apply(&mut self, model: &mut ComfeModel, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::Data(format!("{} gradients for {} parameters", grads.len(), self.m.len())));
        }
        self.step += 1;
        let (b1, b2) = (self.beta1 as f64, self.beta2 as f64);
        let bc1 = 1.0 - b1.powf(self.step as f64);
        let bc2 = 1.0 - b2.powf(self.step as f64);
        let eps = self.eps as f64;
        let wd = self.weight_decay;
        let mut k = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        let mut shape_err = None;
        model.for_each_param_mut(|name, p| {
            let (g, m, v) = (&grads[k], &mut ms[k], &mut vs[k]);
            k += 1;
            if g.shape() != p.shape() {
                shape_err.get_or_insert_with(|| Error::dim("optimizer", p.shape(), g.shape()));
                return;
            }
            let decay = wd > 0.0 && ComfeModel::<f32>::decays(name);
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                let gi = gi as f64;
                let m1 = b1 * *mi as f64 + (1.0 - b1) * gi;
                let v1 = b2 * *vi as f64 + (1.0 - b2) * gi * gi;
                *mi = m1 as f32;
                *vi = v1 as f32;
                let mut xn = *x as f64 - lr * (m1 / bc1) / ((v1 / bc2).sqrt() + eps);
                if decay {
                    xn -= lr * wd * *x as f64;
                }
                *x = xn as f32;
            }
        });
        match shape_err {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean over the epoch's batches.
    pub loss: LossBreakdown,
    pub eval_top1: Option<f64>,
}

impl EpochMetrics {
    pub fn to_line(&self) -> String {
        let l = &self.loss;
        let mut s = format!(
            "epoch={} cluster={} discrim={} p_discrim={} contrast={} carl={} total={}",
            self.epoch, l.cluster, l.discrim, l.p_discrim, l.contrast, l.carl, l.total
        );
        if let Some(a) = self.eval_top1 {
            s.push_str(&format!(" eval_top1={a}"));
        }
        s
    }

    pub fn from_line(line: &str) -> Result<Self> {
        let mut m = EpochMetrics {
            epoch: 0,
            loss: LossBreakdown::default(),
            eval_top1: None,
        };
        let bad = || Error::Checkpoint(format!("malformed metrics line {line:?}"));
        for field in line.split_whitespace() {
            let (k, v) = field.split_once('=').ok_or_else(bad)?;
            let num = || v.parse::<f64>().map_err(|_| bad());
            match k {
                "epoch" => m.epoch = v.parse().map_err(|_| bad())?,
                "cluster" => m.loss.cluster = num()?,
                "discrim" => m.loss.discrim = num()?,
                "p_discrim" => m.loss.p_discrim = num()?,
                "contrast" => m.loss.contrast = num()?,
                "carl" => m.loss.carl = num()?,
                "total" => m.loss.total = num()?,
                "eval_top1" => m.eval_top1 = Some(num()?),
                _ => return Err(bad()),
            }
        }
        Ok(m)
    }
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: TrainConfig,
    pub model: ComfeModel,
    pub optimizer: OptimizerState,
    pub rng: ChaCha8Rng,
    pub metrics: Vec<EpochMetrics>,
}

impl TrainState {
    /// Seeds the generator from `config.seed` and initializes the model from it.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = ComfeModel::init(config.model.clone(), &mut rng)?;
        let optimizer = OptimizerState::new(&model, &config);
        Ok(TrainState {
            config,
            model,
            optimizer,
            rng,
            metrics: Vec::new(),
        })
    }

    pub fn epochs_done(&self) -> usize {
        self.metrics.len()
    }
}

/// Optional held-out data scored after every epoch.
pub struct EvalSet<'a> {
    pub data: &'a Dataset,
    pub masks: Option<&'a Masks>,
}

fn check_dataset(ds: &Dataset, cfg: &TrainConfig) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if ds.label_space != cfg.model.classes {
        return Err(Error::Data(format!(
            "dataset has {} classes, config has {}",
            ds.label_space, cfg.model.classes
        )));
    }
    if ds.dim != cfg.model.dim {
        return Err(Error::Data(format!("dataset has d={}, config has d={}", ds.dim, cfg.model.dim)));
    }
    Ok(())
}

pub fn total_steps(images: usize, cfg: &TrainConfig) -> usize {
    cfg.epochs * images.div_ceil(cfg.batch_size)
}

/// Trains from a fresh state.
pub fn train(ds: &Dataset, config: &TrainConfig, eval: Option<EvalSet<'_>>, log: &mut dyn Write) -> Result<TrainState> {
    config.validate()?;
    check_dataset(ds, config)?;
    let state = TrainState::new(config.clone())?;
    resume(state, ds, eval, log)
}

/// Runs the remaining epochs of `state.config` on `ds`. Writes one line per
/// step and one per epoch to `log`.
pub fn resume(mut state: TrainState, ds: &Dataset, eval: Option<EvalSet<'_>>, log: &mut dyn Write) -> Result<TrainState> {
    let cfg = state.config.clone();
    check_dataset(ds, &cfg)?;
    let total = total_steps(ds.len(), &cfg);
    let names: Vec<String> = state.model.named_params().into_iter().map(|(n, _)| n).collect();
    let background = state.model.bank.has_background();
    let labels = (0..cfg.model.classes)
        .map(|c| crate::prototypes::extend_label(c, cfg.model.classes, background))
        .collect::<Result<Vec<_>>>()?;
    let mut order: Vec<usize> = (0..ds.len()).collect();

    for epoch in state.epochs_done()..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut state.rng);
        let mut sum = LossBreakdown::default();
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Sample<'_>> = chunk
                .iter()
                .map(|&i| {
                    let img = &ds.images[i];
                    Sample {
                        view_a: &img.views[0],
                        view_b: img.views.get(1),
                        label: labels[img.label as usize].clone(),
                    }
                })
                .collect();
            let opts = LossOptions {
                with_grads: true,
                threads: cfg.threads,
                dropout_seed: (cfg.model.dropout > 0.0).then(|| state.rng.next_u64()),
            };
            let out = total_loss(&state.model, &batch, &opts)?;
            let mut grads = out.grads.expect("requested gradients");
            clip_gradients(&mut grads, &names, cfg.clip_norm as f64)?;
            let step = state.optimizer.step as usize;
            let lr = lr_at(step, total, &cfg);
            state.optimizer.apply(&mut state.model, &grads, lr)?;

            let b = out.breakdown;
            writeln!(
                log,
                "step={} lr={lr:e} cluster={} discrim={} p_discrim={} contrast={} carl={} total={}",
                step + 1,
                b.cluster,
                b.discrim,
                b.p_discrim,
                b.contrast,
                b.carl,
                b.total
            )?;
            sum.cluster += b.cluster;
            sum.discrim += b.discrim;
            sum.p_discrim += b.p_discrim;
            sum.contrast += b.contrast;
            sum.carl += b.carl;
            sum.total += b.total;
            batches += 1;
        }
        let n = batches as f64;
        let loss = LossBreakdown {
            cluster: sum.cluster / n,
            discrim: sum.discrim / n,
            p_discrim: sum.p_discrim / n,
            contrast: sum.contrast / n,
            carl: sum.carl / n,
            total: sum.total / n,
        };
        let eval_top1 = match &eval {
            Some(e) => Some(evaluate(&state.model, e.data, e.masks, cfg.threads)?.top1),
            None => None,
        };
        let m = EpochMetrics {
            epoch: epoch + 1,
            loss,
            eval_top1,
        };
        writeln!(log, "{}", m.to_line())?;
        state.metrics.push(m);
    }
    Ok(state)
}
