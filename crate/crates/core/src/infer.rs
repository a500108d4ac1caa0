//! Prediction and explanations from a trained model.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Axis, Tape};
use crate::error::{Error, Result};
use crate::model::ComfeModel;
use crate::prototypes::ClassPrototypeBank;
use crate::tensor::{argmax, Real, Tensor};
use crate::vmf::{self, LabelScores, PosteriorMatrix};

/// Every intermediate of one forward pass, final decoder layer only.
#[derive(Clone, Debug)]
pub struct Analysis {
    /// Raw image prototypes, `N_P × d`.
    pub prototypes: Tensor,
    pub p_hat: Tensor,
    /// `N_Z × N_P`.
    pub patch_proto: PosteriorMatrix,
    /// `N_P × labels`.
    pub proto_class: PosteriorMatrix,
    /// `N_P × class prototypes`, before aggregation into labels.
    pub proto_class_raw: PosteriorMatrix,
    /// `N_Z × labels`.
    pub patch_class: PosteriorMatrix,
    pub scores: LabelScores,
}

pub fn analyze(model: &ComfeModel, z: &Tensor) -> Result<Analysis> {
    let cfg = &model.config;
    let mut tape = Tape::new();
    let vars = model.register(&mut tape, false);
    let view = model.forward_view::<ChaCha8Rng>(&mut tape, &vars, z, None)?;
    let last = *view.prototypes.last().expect("at least one layer");
    let p_hat = tape.l2_normalize_rows(last)?;
    let c_hat = tape.l2_normalize_rows(vars.class_prototypes)?;
    let patch_proto = vmf::patch_to_prototype_posterior_on(&mut tape, view.z_hat, p_hat, cfg.tau1)?;
    let logits = tape.matmul_t(p_hat, c_hat)?;
    let raw = tape.softmax(logits, Axis::Cols, cfg.tau2)?;
    let proto_class = tape.matmul(raw, vars.phi)?;
    let patch_class = vmf::patch_class_posterior_on(&mut tape, patch_proto, proto_class)?;
    let (scores, argmax_patch) = vmf::max_pool_on(&mut tape, patch_class)?;
    let take = |v| tape.value(v).clone();
    Ok(Analysis {
        prototypes: take(last),
        p_hat: take(p_hat),
        patch_proto: PosteriorMatrix::new(take(patch_proto))?,
        proto_class: PosteriorMatrix::new(take(proto_class))?,
        proto_class_raw: PosteriorMatrix::new(take(raw))?,
        patch_class: PosteriorMatrix::new(take(patch_class))?,
        scores: LabelScores {
            scores: tape.value(scores).data().to_vec(),
            argmax_patch,
        },
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Prediction {
    Class(usize),
    /// Every foreground score fell below the threshold.
    NoClass,
}

impl std::fmt::Display for Prediction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Prediction::Class(c) => write!(f, "{c}"),
            Prediction::NoClass => f.write_str("none"),
        }
    }
}

/// Argmax over the foreground labels; the background label is never predicted.
pub fn decide(scores: &[f32], classes: usize, threshold: Option<f32>) -> Prediction {
    let fg = &scores[..classes];
    let best = argmax(fg);
    match threshold {
        Some(t) if fg.iter().all(|&s| s < t) => Prediction::NoClass,
        _ => Prediction::Class(best),
    }
}

/// Predicted label and the `c(+1)` image-level scores.
pub fn predict(model: &ComfeModel, z: &Tensor, threshold: Option<f32>) -> Result<(Prediction, Vec<f32>)> {
    let a = analyze(model, z)?;
    let p = decide(&a.scores.scores, model.config.classes, threshold);
    Ok((p, a.scores.scores))
}

/// Row-major `h × w` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Copy> Grid<T> {
    pub fn new(h: usize, w: usize, data: Vec<T>) -> Result<Self> {
        if h * w != data.len() {
            return Err(Error::dim("grid", &[h, w], &[data.len()]));
        }
        Ok(Grid { h, w, data })
    }

    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.w + c]
    }
}

/// Per-patch posterior of `label`, laid out on the patch grid.
pub fn confidence_from(a: &Analysis, label: usize, grid: (usize, usize)) -> Result<Grid<f32>> {
    if label >= a.patch_class.cols() {
        return Err(Error::Label {
            label,
            classes: a.patch_class.cols(),
        });
    }
    let data = (0..a.patch_class.rows()).map(|i| a.patch_class.at(i, label)).collect();
    Grid::new(grid.0, grid.1, data)
}

pub fn class_confidence_map(model: &ComfeModel, z: &Tensor, label: usize, grid: (usize, usize)) -> Result<Grid<f32>> {
    check_grid(z, grid)?;
    confidence_from(&analyze(model, z)?, label, grid)
}

/// Most likely image prototype for each patch.
pub fn features_from(a: &Analysis, grid: (usize, usize)) -> Result<Grid<usize>> {
    Grid::new(grid.0, grid.1, a.patch_proto.row_argmax())
}

pub fn component_feature_map(model: &ComfeModel, z: &Tensor, grid: (usize, usize)) -> Result<Grid<usize>> {
    check_grid(z, grid)?;
    features_from(&analyze(model, z)?, grid)
}

fn check_grid(z: &Tensor, grid: (usize, usize)) -> Result<()> {
    if grid.0 * grid.1 != z.rows() {
        return Err(Error::dim("patch grid", &[grid.0, grid.1], &[z.rows()]));
    }
    Ok(())
}

/// Label posterior of each unit-norm image prototype: softmax over class
/// prototypes at `τ₂`, aggregated by the association matrix.
pub fn similarity_scores<T: Real>(p_hat: &Tensor<T>, bank: &ClassPrototypeBank<T>, tau2: T) -> Result<PosteriorMatrix<T>> {
    let c_hat = normalize_rows(&bank.prototypes)?;
    vmf::prototype_to_class_posterior(p_hat, &c_hat, &bank.phi_as(), tau2)
}

fn normalize_rows<T: Real>(t: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let v = tape.constant(t.clone());
    let n = tape.l2_normalize_rows(v)?;
    Ok(tape.value(n).clone())
}

/// Bilinear resampling with pixel centers at half-integer positions and edge clamping.
pub fn bilinear_upsample(grid: &Grid<f32>, out_h: usize, out_w: usize) -> Grid<f32> {
    let src = |r: usize, c: usize| grid.at(r, c) as f64;
    let coord = |i: usize, out: usize, inp: usize| {
        let x = ((i as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
        let lo = x.floor() as usize;
        let hi = (lo + 1).min(inp - 1);
        (lo, hi, x - lo as f64)
    };
    let mut data = Vec::with_capacity(out_h * out_w);
    for r in 0..out_h {
        let (r0, r1, fr) = coord(r, out_h, grid.h);
        for c in 0..out_w {
            let (c0, c1, fc) = coord(c, out_w, grid.w);
            let top = src(r0, c0) * (1.0 - fc) + src(r0, c1) * fc;
            let bot = src(r1, c0) * (1.0 - fc) + src(r1, c1) * fc;
            data.push((top * (1.0 - fr) + bot * fr) as f32);
        }
    }
    Grid {
        h: out_h,
        w: out_w,
        data,
    }
}

#[derive(Clone, Debug)]
pub struct Explanation {
    pub prediction: Prediction,
    pub class_scores: Vec<f32>,
    /// Label the confidence map is drawn for: the prediction, or label 0 when
    /// nothing is predicted.
    pub map_label: usize,
    pub confidence_map: Grid<f32>,
    pub feature_map: Grid<usize>,
    /// `N_P × labels`.
    pub similarity: PosteriorMatrix,
    /// `N_P × class prototypes`.
    pub raw_similarity: PosteriorMatrix,
}

pub fn explain(model: &ComfeModel, z: &Tensor, grid: (usize, usize), threshold: Option<f32>) -> Result<Explanation> {
    check_grid(z, grid)?;
    let a = analyze(model, z)?;
    let prediction = decide(&a.scores.scores, model.config.classes, threshold);
    let map_label = match prediction {
        Prediction::Class(c) => c,
        Prediction::NoClass => 0,
    };
    Ok(Explanation {
        prediction,
        class_scores: a.scores.scores.clone(),
        map_label,
        confidence_map: confidence_from(&a, map_label, grid)?,
        feature_map: features_from(&a, grid)?,
        similarity: a.proto_class.clone(),
        raw_similarity: a.proto_class_raw.clone(),
    })
}

/// Colors for the feature map, cycled by prototype index.
pub const PALETTE: [[u8; 3]; 10] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [128, 128, 128],
];

pub const EXPORT_FILES: [&str; 5] = ["scores.txt", "confidence.pgm", "features.ppm", "grids.txt", "similarity.txt"];

/// 16-bit binary graymap; values in `[0, 1]` map to `0..=65535`.
pub fn encode_pgm(grid: &Grid<f32>) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n65535\n", grid.w, grid.h).into_bytes();
    for &v in &grid.data {
        let q = (v.clamp(0.0, 1.0) as f64 * 65535.0).round() as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    out
}

/// Binary pixmap with each cell blown up to a `scale × scale` block.
pub fn encode_ppm(grid: &Grid<usize>, scale: usize) -> Vec<u8> {
    let (h, w) = (grid.h * scale, grid.w * scale);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for r in 0..h {
        for c in 0..w {
            out.extend_from_slice(&PALETTE[grid.at(r / scale, c / scale) % PALETTE.len()]);
        }
    }
    out
}

fn matrix_text<T: std::fmt::Display + Copy>(out: &mut String, rows: usize, cols: usize, at: impl Fn(usize, usize) -> T) {
    for r in 0..rows {
        let line: Vec<String> = (0..cols).map(|c| at(r, c).to_string()).collect();
        let _ = writeln!(out, "{}", line.join(" "));
    }
}

/// Writes [`EXPORT_FILES`] into `dir`; images are upsampled by `scale`.
pub fn write_explanation(e: &Explanation, dir: &Path, scale: usize) -> Result<Vec<PathBuf>> {
    if scale == 0 {
        return Err(Error::Config("export scale must be at least 1".into()));
    }
    fs::create_dir_all(dir)?;
    let mut scores = format!("predicted = {}\n", e.prediction);
    for (l, s) in e.class_scores.iter().enumerate() {
        let _ = writeln!(scores, "{l} {s}");
    }

    let cm = &e.confidence_map;
    let up = bilinear_upsample(cm, cm.h * scale, cm.w * scale);

    let fm = &e.feature_map;
    let mut grids = format!("[confidence label={}]\n", e.map_label);
    matrix_text(&mut grids, cm.h, cm.w, |r, c| cm.at(r, c));
    grids.push_str("[features]\n");
    matrix_text(&mut grids, fm.h, fm.w, |r, c| fm.at(r, c));

    let mut sim = String::from("[aggregated]\n");
    let s = &e.similarity;
    matrix_text(&mut sim, s.rows(), s.cols(), |r, c| s.at(r, c));
    sim.push_str("[raw]\n");
    let s = &e.raw_similarity;
    matrix_text(&mut sim, s.rows(), s.cols(), |r, c| s.at(r, c));

    let contents: [Vec<u8>; 5] = [
        scores.into_bytes(),
        encode_pgm(&up),
        encode_ppm(fm, scale),
        grids.into_bytes(),
        sim.into_bytes(),
    ];
    let mut paths = Vec::new();
    for (name, bytes) in EXPORT_FILES.iter().zip(contents) {
        let p = dir.join(name);
        fs::write(&p, bytes)?;
        paths.push(p);
    }
    Ok(paths)
}

// ---- exemplars ----

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Exemplar {
    pub image: usize,
    pub slot: usize,
    pub similarity: f64,
}

/// Top-k image prototypes for every class prototype.
#[derive(Clone, Debug, PartialEq)]
pub struct ExemplarIndex {
    pub k: usize,
    pub lists: Vec<Vec<Exemplar>>,
}

impl ExemplarIndex {
    /// `prototype rank image slot similarity`, one line per entry.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (l, list) in self.lists.iter().enumerate() {
            for (rank, e) in list.iter().enumerate() {
                let _ = writeln!(out, "{l} {rank} {} {} {}", e.image, e.slot, e.similarity);
            }
        }
        out
    }
}

/// Unit-normalizes each row in 64-bit.
pub fn unit_rows_f64(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows())
        .map(|r| {
            let row: Vec<f64> = t.row_slice(r).iter().map(|&x| x as f64).collect();
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
            row.into_iter().map(|x| x / n).collect()
        })
        .collect()
}

/// Final-layer prototypes of every image, in image order.
pub fn image_prototypes<'a>(model: &ComfeModel, images: impl IntoIterator<Item = &'a Tensor>) -> Result<Vec<Tensor>> {
    images.into_iter().map(|z| Ok(analyze(model, z)?.prototypes)).collect()
}

/// For each class prototype, the `k` image prototypes of highest cosine
/// similarity; ties keep image-then-slot order.
pub fn exemplars_from_prototypes(bank_prototypes: &Tensor, per_image: &[Tensor], k: usize) -> Result<ExemplarIndex> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if per_image.is_empty() {
        return Err(Error::Data("exemplar extraction needs at least one image".into()));
    }
    let classes = unit_rows_f64(bank_prototypes);
    let candidates: Vec<(usize, usize, Vec<f64>)> = per_image
        .iter()
        .enumerate()
        .flat_map(|(i, p)| unit_rows_f64(p).into_iter().enumerate().map(move |(j, v)| (i, j, v)))
        .collect();
    let lists = classes
        .iter()
        .map(|c| {
            let mut all: Vec<Exemplar> = candidates
                .iter()
                .map(|(i, j, v)| Exemplar {
                    image: *i,
                    slot: *j,
                    similarity: v.iter().zip(c).map(|(a, b)| a * b).sum(),
                })
                .collect();
            all.sort_by(|a, b| b.similarity.total_cmp(&a.similarity));
            all.truncate(k);
            all
        })
        .collect();
    Ok(ExemplarIndex { k, lists })
}

pub fn extract_exemplars<'a>(
    model: &ComfeModel,
    images: impl IntoIterator<Item = &'a Tensor>,
    k: usize,
) -> Result<ExemplarIndex> {
    let protos = image_prototypes(model, images)?;
    exemplars_from_prototypes(&model.bank.prototypes, &protos, k)
}
