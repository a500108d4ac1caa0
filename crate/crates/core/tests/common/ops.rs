//! Every differentiable tape primitive as a checkable case.

use comfe_core::autodiff::{Axis, Tape, Var};
use comfe_core::{Real, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{central_diff, rel_err, rel_err_vec, uniform, FD_STEP};

pub type Build<T> = fn(&mut Tape<T>, &[Var]) -> Result<Var>;

pub struct OpCase {
    pub name: &'static str,
    pub shapes: Vec<(usize, usize)>,
    pub lo: f64,
    pub hi: f64,
    pub f32: Build<f32>,
    pub f64: Build<f64>,
    /// Rejects inputs too close to a kink for a central difference.
    pub valid: fn(&[Tensor<f64>]) -> bool,
}

fn always(_: &[Tensor<f64>]) -> bool {
    true
}

macro_rules! case {
    ($name:expr, [$($s:expr),*], $lo:expr, $hi:expr, |$t:ident, $v:ident| $body:expr) => {
        case!($name, [$($s),*], $lo, $hi, always, |$t, $v| $body)
    };
    ($name:expr, [$($s:expr),*], $lo:expr, $hi:expr, $valid:expr, |$t:ident, $v:ident| $body:expr) => {{
        fn build<T: Real>($t: &mut Tape<T>, $v: &[Var]) -> Result<Var> {
            $body
        }
        OpCase {
            name: $name,
            shapes: vec![$($s),*],
            lo: $lo,
            hi: $hi,
            f32: build::<f32>,
            f64: build::<f64>,
            valid: $valid,
        }
    }};
}

fn away_from_clamp(x: &[Tensor<f64>]) -> bool {
    x[0].data().iter().all(|v| (v.abs() - 1.0).abs() > 10.0 * FD_STEP)
}

/// Top two entries of every lane differ by more than the step.
fn distinct_max(x: &[Tensor<f64>], axis: Axis) -> bool {
    let t = match axis {
        Axis::Cols => x[0].clone(),
        Axis::Rows => x[0].transpose(),
    };
    (0..t.rows()).all(|r| {
        let mut v = t.row_slice(r).to_vec();
        v.sort_by(|a, b| b.total_cmp(a));
        v.len() < 2 || v[0] - v[1] > 10.0 * FD_STEP
    })
}

pub fn all_cases() -> Vec<OpCase> {
    vec![
        case!("matmul", [(3, 4), (4, 2)], -2.0, 2.0, |t, v| t.matmul(v[0], v[1])),
        case!("matmul_t", [(3, 4), (2, 4)], -2.0, 2.0, |t, v| t.matmul_t(v[0], v[1])),
        case!("transpose", [(3, 4)], -2.0, 2.0, |t, v| Ok(t.transpose(v[0]))),
        case!("add", [(3, 4), (3, 4)], -2.0, 2.0, |t, v| t.add(v[0], v[1])),
        case!("sub", [(3, 4), (3, 4)], -2.0, 2.0, |t, v| t.sub(v[0], v[1])),
        case!("mul", [(3, 4), (3, 4)], -2.0, 2.0, |t, v| t.mul(v[0], v[1])),
        case!("add_row", [(3, 4), (1, 4)], -2.0, 2.0, |t, v| t.add_row(v[0], v[1])),
        case!("affine", [(3, 4)], -2.0, 2.0, |t, v| Ok(t.affine(v[0], T::of(1.7), T::of(-0.3)))),
        case!("scale", [(3, 4)], -2.0, 2.0, |t, v| Ok(t.scale(v[0], T::of(-2.5)))),
        case!("exp", [(3, 4)], -2.0, 2.0, |t, v| Ok(t.exp(v[0]))),
        case!("log", [(3, 4)], 0.2, 2.0, |t, v| Ok(t.log(v[0]))),
        case!("clamp", [(3, 4)], -2.0, 2.0, away_from_clamp, |t, v| Ok(t.clamp(v[0], T::of(-1.0), T::of(1.0)))),
        case!("gelu", [(3, 4)], -2.0, 2.0, |t, v| Ok(t.gelu(v[0]))),
        case!("softmax_cols", [(3, 5)], -2.0, 2.0, |t, v| t.softmax(v[0], Axis::Cols, T::of(0.5))),
        case!("softmax_rows", [(3, 5)], -2.0, 2.0, |t, v| t.softmax(v[0], Axis::Rows, T::of(0.5))),
        case!("log_softmax_cols", [(3, 5)], -2.0, 2.0, |t, v| t.log_softmax(v[0], Axis::Cols, T::of(0.7))),
        case!("log_softmax_rows", [(3, 5)], -2.0, 2.0, |t, v| t.log_softmax(v[0], Axis::Rows, T::of(0.7))),
        case!("log_sum_exp_cols", [(3, 5)], -2.0, 2.0, |t, v| t.log_sum_exp(v[0], Axis::Cols)),
        case!("log_sum_exp_rows", [(3, 5)], -2.0, 2.0, |t, v| t.log_sum_exp(v[0], Axis::Rows)),
        case!(
            "max_cols",
            [(3, 5)],
            -2.0,
            2.0,
            |x| distinct_max(x, Axis::Cols),
            |t, v| Ok(t.max_along(v[0], Axis::Cols)?.0)
        ),
        case!(
            "max_rows",
            [(3, 5)],
            -2.0,
            2.0,
            |x| distinct_max(x, Axis::Rows),
            |t, v| Ok(t.max_along(v[0], Axis::Rows)?.0)
        ),
        case!("sum", [(3, 4)], -2.0, 2.0, |t, v| Ok(t.sum(v[0]))),
        case!("mean", [(3, 4)], -2.0, 2.0, |t, v| Ok(t.mean(v[0]))),
        case!("sum_cols", [(3, 4)], -2.0, 2.0, |t, v| t.sum_along(v[0], Axis::Cols)),
        case!("sum_rows", [(3, 4)], -2.0, 2.0, |t, v| t.sum_along(v[0], Axis::Rows)),
        case!("l2_normalize_rows", [(4, 8)], -2.0, 2.0, |t, v| t.l2_normalize_rows(v[0])),
        case!("layer_norm", [(4, 8), (1, 8), (1, 8)], -2.0, 2.0, |t, v| t.layer_norm(v[0], v[1], v[2])),
        case!("slice_cols", [(3, 6)], -2.0, 2.0, |t, v| t.slice_cols(v[0], 2, 3)),
        case!("concat_cols", [(3, 2), (3, 4)], -2.0, 2.0, |t, v| t.concat_cols(&[v[0], v[1]])),
        case!("chain_matmul_exp_log_softmax", [(3, 4), (4, 5)], -1.0, 1.0, |t, v| {
            let m = t.matmul(v[0], v[1])?;
            let e = t.exp(m);
            t.log_softmax(e, Axis::Cols, T::of(1.3))
        }),
    ]
}

/// Result of one case at one seed.
pub struct OpCheck {
    /// Worst norm-wise relative error over the inputs.
    pub norm_err: f64,
    /// Worst elementwise relative error (floored at 1e-6).
    pub elem_err: f64,
}

fn objective<T: Real>(build: Build<T>, inputs: &[Tensor<f64>], weight: &Tensor<f64>, trainable: bool) -> (Tape<T>, Vec<Var>, Var) {
    let mut tape = Tape::<T>::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|x| if trainable { tape.param(x.cast()) } else { tape.constant(x.cast()) })
        .collect();
    let out = build(&mut tape, &vars).expect("case builds");
    let w = tape.constant(weight.cast());
    let prod = tape.mul(out, w).expect("weight shape");
    let s = tape.sum(prod);
    (tape, vars, s)
}

fn analytic<T: Real>(build: Build<T>, inputs: &[Tensor<f64>], weight: &Tensor<f64>) -> Vec<Vec<f64>> {
    let (tape, vars, s) = objective(build, inputs, weight, true);
    let g = tape.backward(s).expect("backward");
    vars.iter()
        .zip(inputs)
        .map(|(v, x)| match g.get(*v) {
            Some(t) => t.data().iter().map(|x| x.as_f64()).collect(),
            None => vec![0.0; x.len()],
        })
        .collect()
}

/// Checks `case` at `seed` with analytic gradients in `T` against 64-bit
/// central differences.
pub fn check_case<T: Real>(case: &OpCase, build: Build<T>, seed: u64) -> OpCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = loop {
        let xs: Vec<Tensor<f64>> = case.shapes.iter().map(|&(r, c)| uniform(&mut rng, r, c, case.lo, case.hi)).collect();
        if (case.valid)(&xs) {
            break xs;
        }
    };
    let out_shape = {
        let mut t = Tape::<f64>::new();
        let vars: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
        let out = (case.f64)(&mut t, &vars).unwrap();
        t.value(out).shape().to_vec()
    };
    let n: usize = out_shape.iter().product();
    let weight = Tensor::new(out_shape, uniform(&mut rng, 1, n, -1.0, 1.0).data().to_vec()).unwrap();

    let grads = analytic(build, &inputs, &weight);
    let mut norm_err: f64 = 0.0;
    let mut elem_err: f64 = 0.0;
    for (k, x) in inputs.iter().enumerate() {
        let flat = x.data().to_vec();
        let mut f = |p: &[f64]| {
            let mut xs = inputs.clone();
            xs[k] = Tensor::new(x.shape().to_vec(), p.to_vec()).unwrap();
            let (tape, _, s) = objective::<f64>(case.f64, &xs, &weight, false);
            tape.value(s).data()[0]
        };
        let fd: Vec<f64> = (0..flat.len()).map(|i| central_diff(&mut f, &flat, i, FD_STEP)).collect();
        norm_err = norm_err.max(rel_err_vec(&grads[k], &fd, 1e-6));
        for (a, b) in grads[k].iter().zip(&fd) {
            elem_err = elem_err.max(rel_err(*a, *b, 1e-6));
        }
    }
    OpCheck { norm_err, elem_err }
}

pub fn random_seed(rng: &mut impl Rng) -> u64 {
    rng.random()
}
