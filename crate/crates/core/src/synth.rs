//! Synthetic patch embeddings with planted informative and background
//! structure, for closed-loop checks without a backbone.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::{parse, parse_pairs};
use crate::data::{Dataset, Image, Masks};
use crate::error::{Error, Result};
use crate::tensor::{argmax, Tensor};

/// Mean directions must have pairwise cosine below this.
pub const MAX_COSINE: f64 = 0.5;
pub const MAX_TRIES: usize = 10_000;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub dim: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub informative_fraction: f64,
    pub kappa: f64,
    pub background_modes: usize,
    pub train_per_class: usize,
    pub eval_per_class: usize,
    /// 1 or 2; the second view redraws the noise around the same means.
    pub views: usize,
    /// Scatter informative patches instead of placing one block.
    pub scatter: bool,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 5,
            dim: 64,
            grid_h: 8,
            grid_w: 8,
            informative_fraction: 0.25,
            kappa: 50.0,
            background_modes: 8,
            train_per_class: 100,
            eval_per_class: 50,
            views: 2,
            scatter: false,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn n_z(&self) -> usize {
        self.grid_h * self.grid_w
    }

    /// `⌈informative_fraction · N_Z⌉`.
    pub fn informative_patches(&self) -> usize {
        ((self.informative_fraction * self.n_z() as f64) - 1e-9).ceil() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.classes == 0 || self.dim < 2 || self.n_z() == 0 {
            return bad("classes, dim ≥ 2 and grid must be positive".into());
        }
        if !(self.informative_fraction > 0.0 && self.informative_fraction < 1.0) {
            return bad(format!("informative_fraction must lie in (0, 1), got {}", self.informative_fraction));
        }
        if !(self.kappa > 0.0) || !self.kappa.is_finite() {
            return bad(format!("kappa must be positive, got {}", self.kappa));
        }
        if self.background_modes == 0 {
            return bad("background_modes must be at least 1".into());
        }
        if !(1..=2).contains(&self.views) {
            return bad(format!("views must be 1 or 2, got {}", self.views));
        }
        if self.grid_h > u16::MAX as usize || self.grid_w > u16::MAX as usize {
            return bad("grid too large".into());
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        format!(
            "classes = {}\ndim = {}\ngrid_h = {}\ngrid_w = {}\ninformative_fraction = {}\nkappa = {}\n\
             background_modes = {}\ntrain_per_class = {}\neval_per_class = {}\nviews = {}\nscatter = {}\nseed = {}\n",
            self.classes,
            self.dim,
            self.grid_h,
            self.grid_w,
            self.informative_fraction,
            self.kappa,
            self.background_modes,
            self.train_per_class,
            self.eval_per_class,
            self.views,
            self.scatter,
            self.seed
        )
    }

    /// Parses `key = value` lines over the defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut s = SyntheticSpec::default();
        for (k, v) in parse_pairs(text)? {
            let v = v.as_str();
            match k.as_str() {
                "classes" => s.classes = parse(&k, v)?,
                "dim" => s.dim = parse(&k, v)?,
                "grid_h" => s.grid_h = parse(&k, v)?,
                "grid_w" => s.grid_w = parse(&k, v)?,
                "informative_fraction" => s.informative_fraction = parse(&k, v)?,
                "kappa" => s.kappa = parse(&k, v)?,
                "background_modes" => s.background_modes = parse(&k, v)?,
                "train_per_class" => s.train_per_class = parse(&k, v)?,
                "eval_per_class" => s.eval_per_class = parse(&k, v)?,
                "views" => s.views = parse(&k, v)?,
                "scatter" => s.scatter = parse(&k, v)?,
                "seed" => s.seed = parse(&k, v)?,
                _ => return Err(Error::Config(format!("unknown key {k:?}"))),
            }
        }
        s.validate()?;
        Ok(s)
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub train: Dataset,
    pub eval: Dataset,
    pub train_masks: Masks,
    pub eval_masks: Masks,
    /// `c × d`, unit rows.
    pub class_means: Tensor<f64>,
    /// `background_modes × d`, unit rows.
    pub background_means: Tensor<f64>,
}

fn random_unit<R: Rng>(rng: &mut R, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `count` unit vectors with pairwise cosine below [`MAX_COSINE`].
pub fn separated_directions<R: Rng>(rng: &mut R, count: usize, d: usize) -> Result<Tensor<f64>> {
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(count);
    for k in 0..count {
        let mut found = None;
        for _ in 0..MAX_TRIES {
            let v = random_unit(rng, d);
            if dirs.iter().all(|u| dot(u, &v) < MAX_COSINE) {
                found = Some(v);
                break;
            }
        }
        match found {
            Some(v) => dirs.push(v),
            None => {
                return Err(Error::Config(format!(
                    "could not place direction {k} of {count} in {d} dimensions after {MAX_TRIES} tries"
                )))
            }
        }
    }
    Tensor::matrix(count, d, dirs.concat())
}

/// Which patches of an `h × w` grid are informative: a near-square block at
/// a random position, or a random subset when `scatter`.
fn informative_mask<R: Rng>(rng: &mut R, h: usize, w: usize, k: usize, scatter: bool) -> Vec<bool> {
    let n = h * w;
    let mut mask = vec![false; n];
    if scatter {
        for i in rand::seq::index::sample(rng, n, k) {
            mask[i] = true;
        }
        return mask;
    }
    let bw = ((k as f64).sqrt().ceil() as usize).clamp(1, w);
    let bh = k.div_ceil(bw);
    let (bh, bw) = if bh > h { (h, k.div_ceil(h)) } else { (bh, bw) };
    let r0 = rng.random_range(0..=h - bh);
    let c0 = rng.random_range(0..=w - bw);
    for i in 0..k {
        mask[(r0 + i / bw) * w + c0 + i % bw] = true;
    }
    mask
}

fn noisy_view<R: Rng>(rng: &mut R, means: &[&[f64]], sigma: f64) -> Tensor {
    let d = means[0].len();
    let mut data = Vec::with_capacity(means.len() * d);
    for mu in means {
        let v: Vec<f64> = mu.iter().map(|&m| m + sigma * rng.sample::<f64, _>(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        data.extend(v.iter().map(|x| (x / n) as f32));
    }
    Tensor::matrix(means.len(), d, data).expect("view shape")
}

fn build_split<R: Rng>(
    rng: &mut R,
    spec: &SyntheticSpec,
    per_class: usize,
    class_means: &Tensor<f64>,
    background_means: &Tensor<f64>,
) -> Result<(Dataset, Masks)> {
    let mut ds = Dataset::new((spec.grid_h, spec.grid_w), spec.dim, spec.classes);
    let mut masks = Vec::with_capacity(per_class * spec.classes);
    let k = spec.informative_patches();
    let sigma = 1.0 / spec.kappa.sqrt();
    for i in 0..per_class * spec.classes {
        let class = i % spec.classes;
        let mask = informative_mask(rng, spec.grid_h, spec.grid_w, k, spec.scatter);
        let means: Vec<&[f64]> = mask
            .iter()
            .map(|&inf| {
                if inf {
                    class_means.row_slice(class)
                } else {
                    background_means.row_slice(rng.random_range(0..spec.background_modes))
                }
            })
            .collect();
        let views = (0..spec.views).map(|_| noisy_view(rng, &means, sigma)).collect();
        ds.push(Image {
            label: class as u32,
            views,
        })?;
        masks.push(mask);
    }
    Ok((ds, masks))
}

/// Draws class and background directions, then the train and eval splits.
/// Images cycle through the classes in order.
pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let all = separated_directions(&mut rng, spec.classes + spec.background_modes, spec.dim)?;
    let d = spec.dim;
    let class_means = Tensor::matrix(spec.classes, d, all.data()[..spec.classes * d].to_vec())?;
    let background_means = Tensor::matrix(spec.background_modes, d, all.data()[spec.classes * d..].to_vec())?;
    let (train, train_masks) = build_split(&mut rng, spec, spec.train_per_class, &class_means, &background_means)?;
    let (eval, eval_masks) = build_split(&mut rng, spec, spec.eval_per_class, &class_means, &background_means)?;
    Ok(SyntheticData {
        train,
        eval,
        train_masks,
        eval_masks,
        class_means,
        background_means,
    })
}

/// Accuracy of a majority vote of per-patch nearest class means over the
/// informative patches of each image (first view). Ties go to the lowest class.
pub fn nearest_mean_oracle(ds: &Dataset, masks: &Masks, class_means: &Tensor<f64>) -> Result<f64> {
    if masks.len() != ds.len() {
        return Err(Error::Data(format!("{} masks for {} images", masks.len(), ds.len())));
    }
    if ds.is_empty() {
        return Err(Error::Data("empty dataset".into()));
    }
    let c = class_means.rows();
    let mut correct = 0usize;
    for (img, mask) in ds.images.iter().zip(masks) {
        let z = &img.views[0];
        let mut votes = vec![0usize; c];
        for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            let row: Vec<f64> = z.row_slice(i).iter().map(|&x| x as f64).collect();
            let sims: Vec<f64> = (0..c).map(|k| dot(&row, class_means.row_slice(k))).collect();
            votes[argmax(&sims)] += 1;
        }
        let votes: Vec<f64> = votes.into_iter().map(|v| v as f64).collect();
        if argmax(&votes) == img.label as usize {
            correct += 1;
        }
    }
    Ok(correct as f64 / ds.len() as f64)
}
