//! Class prototypes, background prototypes, the fixed prototype-to-label
//! association matrix, and the learnable decoder queries.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Builds the smoothed association matrix.
///
/// Foreground prototype `l` belongs to class `l / per_class`; the
/// `n_background` trailing prototypes belong to the background label `c`,
/// which only exists when `n_background > 0`. The owning label gets
/// `1 - alpha + alpha / L` and every other label `alpha / L`, where `L` is
/// the number of label columns.
pub fn build_association_matrix(classes: usize, per_class: usize, n_background: usize, alpha: f64) -> Result<Tensor<f64>> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha must lie in [0, 1), got {alpha}")));
    }
    if per_class == 0 {
        return Err(Error::Config("per_class must be at least 1".into()));
    }
    if classes == 0 {
        return Err(Error::Config("need at least one class".into()));
    }
    let labels = classes + usize::from(n_background > 0);
    let rows = per_class * classes + n_background;
    let off = alpha / labels as f64;
    let on = 1.0 - alpha + off;
    let mut phi = Tensor::full(rows, labels, off);
    for l in 0..rows {
        let owner = if l < per_class * classes { l / per_class } else { classes };
        phi.set(l, owner, on);
    }
    Ok(phi)
}

fn unit_gaussian_rows<R: Rng>(rng: &mut R, count: usize, d: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(count * d);
    for _ in 0..count {
        loop {
            let row: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-6 {
                out.extend(row.iter().map(|v| (v / norm) as f32));
                break;
            }
        }
    }
    out
}

/// Rows drawn uniformly on the unit sphere (normalized standard normals).
pub fn init_class_prototypes_with<R: Rng>(rng: &mut R, count: usize, d: usize) -> Result<Tensor> {
    if d < 2 {
        return Err(Error::Config(format!("prototype dimension must be at least 2, got {d}")));
    }
    Tensor::matrix(count, d, unit_gaussian_rows(rng, count, d))
}

pub fn init_class_prototypes(count: usize, d: usize, seed: u64) -> Result<Tensor> {
    init_class_prototypes_with(&mut ChaCha8Rng::seed_from_u64(seed), count, d)
}

/// I.i.d. standard normal query matrix.
pub fn init_queries_with<R: Rng>(rng: &mut R, n_p: usize, d: usize) -> Result<QueryMatrix> {
    if n_p == 0 || d == 0 {
        return Err(Error::Config("query matrix needs positive shape".into()));
    }
    let data = (0..n_p * d).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    Ok(QueryMatrix {
        q: Tensor::matrix(n_p, d, data)?,
    })
}

pub fn init_queries(n_p: usize, d: usize, seed: u64) -> Result<QueryMatrix> {
    init_queries_with(&mut ChaCha8Rng::seed_from_u64(seed), n_p, d)
}

/// Learnable decoder input, one row per image prototype.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryMatrix<T: Real = f32> {
    pub q: Tensor<T>,
}

impl<T: Real> QueryMatrix<T> {
    pub fn cast<U: Real>(&self) -> QueryMatrix<U> {
        QueryMatrix { q: self.q.cast() }
    }

    pub fn n_prototypes(&self) -> usize {
        self.q.rows()
    }
}

/// Multi-hot image label over `c` foreground labels plus, when enabled, the
/// background label in the last slot.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiLabel {
    pub y: Vec<f32>,
}

impl MultiLabel {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn as_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::row(self.y.iter().map(|&v| T::of(v as f64)).collect()).expect("non-empty label")
    }
}

/// One-hot encodes `class`, appending the always-present background label
/// when `background` is set.
pub fn extend_label(class: usize, classes: usize, background: bool) -> Result<MultiLabel> {
    if class >= classes {
        return Err(Error::Label { label: class, classes });
    }
    let mut y = vec![0.0; classes + usize::from(background)];
    y[class] = 1.0;
    if background {
        y[classes] = 1.0;
    }
    Ok(MultiLabel { y })
}

/// Class and background prototypes with their fixed label association.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassPrototypeBank<T: Real = f32> {
    /// `(per_class·c + n_background) × d`, learnable.
    pub prototypes: Tensor<T>,
    /// `rows × labels`, fixed.
    pub phi: Tensor<f64>,
    pub classes: usize,
    pub per_class: usize,
    pub n_background: usize,
    pub alpha: f64,
}

impl ClassPrototypeBank {
    pub fn init<R: Rng>(
        rng: &mut R,
        classes: usize,
        per_class: usize,
        n_background: usize,
        alpha: f64,
        d: usize,
    ) -> Result<Self> {
        let c = init_class_prototypes_with(rng, per_class * classes + n_background, d)?;
        Self::new(c, classes, per_class, n_background, alpha)
    }
}

impl<T: Real> ClassPrototypeBank<T> {
    pub fn new(prototypes: Tensor<T>, classes: usize, per_class: usize, n_background: usize, alpha: f64) -> Result<Self> {
        let phi = build_association_matrix(classes, per_class, n_background, alpha)?;
        if prototypes.rows() != phi.rows() {
            return Err(Error::dim("class prototypes", prototypes.shape(), phi.shape()));
        }
        Ok(ClassPrototypeBank {
            prototypes,
            phi,
            classes,
            per_class,
            n_background,
            alpha,
        })
    }

    pub fn cast<U: Real>(&self) -> ClassPrototypeBank<U> {
        ClassPrototypeBank {
            prototypes: self.prototypes.cast(),
            phi: self.phi.clone(),
            classes: self.classes,
            per_class: self.per_class,
            n_background: self.n_background,
            alpha: self.alpha,
        }
    }

    /// `phi` in the working precision.
    pub fn phi_as(&self) -> Tensor<T> {
        self.phi.cast()
    }

    pub fn has_background(&self) -> bool {
        self.n_background > 0
    }

    /// Foreground labels plus the background label when present.
    pub fn labels(&self) -> usize {
        self.classes + usize::from(self.has_background())
    }

    pub fn n_foreground(&self) -> usize {
        self.per_class * self.classes
    }

    pub fn len(&self) -> usize {
        self.prototypes.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.prototypes.cols()
    }

    /// Label that prototype `l` is assigned to.
    pub fn owner(&self, l: usize) -> usize {
        if l < self.n_foreground() {
            l / self.per_class
        } else {
            self.classes
        }
    }

    pub fn label(&self, class: usize) -> Result<MultiLabel> {
        extend_label(class, self.classes, self.has_background())
    }

    /// The same bank with background prototypes and the background label removed.
    pub fn disable_background(&self) -> Self {
        let keep = self.n_foreground();
        let d = self.dim();
        let data = self.prototypes.data()[..keep * d].to_vec();
        let prototypes = Tensor::matrix(keep, d, data).expect("foreground prototypes");
        Self::new(prototypes, self.classes, self.per_class, 0, self.alpha).expect("validated bank")
    }
}
