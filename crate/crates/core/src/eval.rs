//! Accuracy and patch-assignment metrics over a dataset.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::data::{Dataset, Masks};
use crate::error::{Error, Result};
use crate::infer::{analyze, decide, Prediction};
use crate::model::ComfeModel;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub images: usize,
    pub top1: f64,
    /// `None` for classes with no images.
    pub per_class: Vec<Option<f64>>,
    /// Fraction of ground-truth background patches whose most likely label is background.
    pub background_rate: Option<f64>,
    /// Fraction of ground-truth informative patches whose most likely label is a foreground label.
    pub foreground_rate: Option<f64>,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut out = format!("images = {}\ntop1 = {}\n", self.images, self.top1);
        for (c, a) in self.per_class.iter().enumerate() {
            match a {
                Some(a) => writeln!(out, "class_{c} = {a}"),
                None => writeln!(out, "class_{c} = none"),
            }
            .unwrap();
        }
        if let Some(r) = self.foreground_rate {
            writeln!(out, "foreground_rate = {r}").unwrap();
        }
        if let Some(r) = self.background_rate {
            writeln!(out, "background_rate = {r}").unwrap();
        }
        out
    }
}

struct ImageResult {
    label: usize,
    correct: bool,
    fg_hits: usize,
    fg_total: usize,
    bg_hits: usize,
    bg_total: usize,
}

/// Top-1 over foreground labels on the first view of each image. With
/// `masks`, also the patch-level assignment rates; without a background
/// label every background patch counts as a miss.
pub fn evaluate(model: &ComfeModel, ds: &Dataset, masks: Option<&Masks>, threads: usize) -> Result<EvalReport> {
    if ds.is_empty() {
        return Err(Error::Data("cannot evaluate an empty dataset".into()));
    }
    let classes = model.config.classes;
    if ds.label_space != classes {
        return Err(Error::Data(format!(
            "dataset has {} classes, model has {classes}",
            ds.label_space
        )));
    }
    if ds.dim != model.config.dim {
        return Err(Error::Data(format!("dataset has d={}, model has d={}", ds.dim, model.config.dim)));
    }
    if let Some(m) = masks {
        if m.len() != ds.len() || m.iter().any(|row| row.len() != ds.n_z) {
            return Err(Error::Data("masks do not match the dataset".into()));
        }
    }

    let one = |i: usize| -> Result<ImageResult> {
        let img = &ds.images[i];
        let a = analyze(model, &img.views[0])?;
        let label = img.label as usize;
        let correct = decide(&a.scores.scores, classes, None) == Prediction::Class(label);
        let mut r = ImageResult {
            label,
            correct,
            fg_hits: 0,
            fg_total: 0,
            bg_hits: 0,
            bg_total: 0,
        };
        if let Some(m) = masks {
            for (p, best) in a.patch_class.row_argmax().into_iter().enumerate() {
                if m[i][p] {
                    r.fg_total += 1;
                    r.fg_hits += usize::from(best < classes);
                } else {
                    r.bg_total += 1;
                    r.bg_hits += usize::from(best == classes);
                }
            }
        }
        Ok(r)
    };

    let results: Vec<Result<ImageResult>> = if threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| (0..ds.len()).into_par_iter().map(one).collect())
    } else {
        (0..ds.len()).map(one).collect()
    };

    let mut correct = 0usize;
    let mut per = vec![(0usize, 0usize); classes];
    let (mut fh, mut ft, mut bh, mut bt) = (0, 0, 0, 0);
    for r in results {
        let r = r?;
        correct += usize::from(r.correct);
        per[r.label].0 += usize::from(r.correct);
        per[r.label].1 += 1;
        fh += r.fg_hits;
        ft += r.fg_total;
        bh += r.bg_hits;
        bt += r.bg_total;
    }
    let rate = |h: usize, t: usize| (t > 0).then(|| h as f64 / t as f64);
    Ok(EvalReport {
        images: ds.len(),
        top1: correct as f64 / ds.len() as f64,
        per_class: per.into_iter().map(|(h, t)| rate(h, t)).collect(),
        foreground_rate: masks.and_then(|_| rate(fh, ft)),
        background_rate: masks.and_then(|_| rate(bh, bt)),
    })
}
