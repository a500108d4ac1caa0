//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use comfe_core::checkpoint;
use comfe_core::config::CarlForm;
use comfe_core::data::{read_embeddings_from, write_embeddings_to};
use comfe_core::decoder::decoder_forward;
use comfe_core::infer::{analyze, class_confidence_map, component_feature_map, extract_exemplars};
use comfe_core::losses::{carl_loss, contrast_loss, discrim_loss, total_loss};
use comfe_core::prototypes::extend_label;
use comfe_core::synth::{generate, nearest_mean_oracle, SyntheticSpec};
use comfe_core::train::{train, EvalSet};
use comfe_core::vmf::{image_label_scores, patch_class_posterior, patch_to_prototype_posterior, prototype_to_class_posterior};
use comfe_core::{evaluate, ComfeModel, ModelConfig, Tensor, TrainConfig};
use common::graph::check_graph;
use common::layers::independent_layer_average;
use common::ops::{all_cases, check_case};
use common::oracle::{self, PosteriorInstance};
use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let (mut prim64, mut prim32, mut graph) = (0.0f64, 0.0f64, 0.0f64);
    let cases = all_cases();
    for case in &cases {
        for seed in 0..5 {
            prim64 = prim64.max(check_case::<f64>(case, case.f64, seed).elem_err);
            prim32 = prim32.max(check_case::<f32>(case, case.f32, seed).norm_err);
        }
    }
    let seeds = 20;
    for seed in 0..seeds {
        let r = check_graph(seed);
        graph = graph.max(r.coord_err).max(r.direction_err);
    }
    let elapsed = start.elapsed();
    let pass = prim64 < 1e-3 && prim32 < 1e-3 && graph < 1e-3 && elapsed < Duration::from_secs(60);
    outcome(
        pass,
        format!(
            "{} ops: worst f64 {prim64:.2e}, f32 {prim32:.2e}; total_loss over {seeds} seeds {graph:.2e}; {elapsed:.1?}",
            cases.len()
        ),
    )
}

fn probability_invariants() -> Outcome {
    let (mut row, mut dominance, mut matrix) = (0.0f64, f64::NEG_INFINITY, 0.0f64);
    for seed in 0..1000 {
        let inst = PosteriorInstance::random(seed);
        let zp = patch_to_prototype_posterior(&inst.z_hat, &inst.p_hat, inst.tau1).unwrap();
        let pc = prototype_to_class_posterior(&inst.p_hat, &inst.c_hat, &inst.phi, inst.tau2).unwrap();
        let zc = patch_class_posterior(&inst.z_hat, &inst.p_hat, &inst.c_hat, &inst.phi, inst.tau1, inst.tau2).unwrap();
        for m in [zp.tensor(), pc.tensor(), zc.tensor()] {
            for r in 0..m.rows() {
                let s: f64 = m.row_slice(r).iter().map(|&x| x as f64).sum();
                row = row.max((s - 1.0).abs());
            }
        }
        let s = image_label_scores(&zc).unwrap().scores;
        let p = image_label_scores(&pc).unwrap().scores;
        for (a, b) in s.iter().zip(&p) {
            dominance = dominance.max((a - b) as f64);
        }
        for (i, r) in oracle::patch_class(&inst).iter().enumerate() {
            for (l, e) in r.iter().enumerate() {
                matrix = matrix.max((zc.at(i, l) as f64 - e).abs());
            }
        }
    }
    outcome(
        row <= 1e-6 && dominance <= 1e-6 && matrix <= 1e-6,
        format!("1000 inputs: row-sum error {row:.1e}, worst score excess {dominance:.1e}, matrix vs double sum {matrix:.1e}"),
    )
}

fn closed_loop_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        classes: 5,
        dim: 64,
        grid_h: 8,
        grid_w: 8,
        informative_fraction: 0.25,
        kappa: 50.0,
        train_per_class: 100,
        eval_per_class: 50,
        seed,
        ..SyntheticSpec::default()
    }
}

fn closed_loop_config(seed: u64, model: ModelConfig) -> TrainConfig {
    let mut cfg = TrainConfig::new(model);
    cfg.epochs = 30;
    cfg.batch_size = 64;
    cfg.threads = 1;
    cfg.seed = seed;
    cfg
}

struct Run {
    top1: f64,
    oracle: f64,
    foreground: f64,
    background: f64,
    elapsed: Duration,
}

fn closed_loop_run(seed: u64, model: ModelConfig) -> Run {
    let data = generate(&closed_loop_spec(seed)).unwrap();
    let oracle = nearest_mean_oracle(&data.eval, &data.eval_masks, &data.class_means).unwrap();
    let cfg = closed_loop_config(seed, model);
    let start = Instant::now();
    let eval = EvalSet {
        data: &data.eval,
        masks: None,
    };
    let state = train(&data.train, &cfg, Some(eval), &mut std::io::sink()).unwrap();
    let report = evaluate(&state.model, &data.eval, Some(&data.eval_masks), 1).unwrap();
    Run {
        top1: report.top1,
        oracle,
        foreground: report.foreground_rate.unwrap(),
        background: report.background_rate.unwrap(),
        elapsed: start.elapsed(),
    }
}

fn synthetic_closed_loop() -> Outcome {
    let mut pass = true;
    let mut detail = Vec::new();
    for seed in 0..3 {
        let r = closed_loop_run(seed, ModelConfig::new(5, 64));
        let ok = r.top1 >= 0.95
            && r.top1 >= 0.99 * r.oracle
            && r.foreground >= 0.8
            && r.background >= 0.8
            && r.elapsed < Duration::from_secs(300);
        pass &= ok;
        detail.push(format!(
            "seed {seed}: top1 {:.3} (oracle {:.3}), fg {:.3}, bg {:.3}, {:.0?}",
            r.top1, r.oracle, r.foreground, r.background, r.elapsed
        ));
    }
    outcome(pass, detail.join("; "))
}

fn ablations() -> Outcome {
    let mut no_bg = ModelConfig::new(5, 64);
    no_bg.background = false;
    let r = closed_loop_run(0, no_bg);

    let data = generate(&closed_loop_spec(0)).unwrap();
    let mut single = ModelConfig::new(5, 64);
    single.n_prototypes = 1;
    let cfg = closed_loop_config(0, single);
    let trained = train(&data.train, &cfg, None, &mut std::io::sink());
    let (single_ok, worst) = match &trained {
        Ok(state) => {
            let mut worst = 0.0f64;
            for img in data.eval.images.iter().take(50) {
                let a = analyze(&state.model, &img.views[0]).unwrap();
                for &p in a.patch_proto.tensor().data() {
                    worst = worst.max((p as f64 - 1.0).abs());
                }
            }
            (state.metrics.iter().all(|m| m.loss.is_finite()) && worst == 0.0, worst)
        }
        Err(_) => (false, f64::NAN),
    };
    outcome(
        r.top1 >= 0.90 && single_ok,
        format!(
            "no background: top1 {:.3}; N_P=1: trained {}, max |posterior - 1| {worst:.1e}",
            r.top1,
            trained.is_ok()
        ),
    )
}

fn closed_forms() -> Outcome {
    let mut worst_bce = 0.0f64;
    for c in 1..=10 {
        let y = extend_label(c - 1, c, true).unwrap();
        let l = discrim_loss(&y, &vec![0.5f64; c + 1]).unwrap();
        worst_bce = worst_bce.max((l - (c + 1) as f64 * 2f64.ln()).abs());
    }

    let mut worst_carl = 0.0f64;
    for n_p in 1..=8 {
        let n_z = 6;
        let one_hot = Tensor::<f64>::matrix(n_z, n_p, (0..n_z * n_p).map(|k| if k % n_p == (k / n_p) % n_p { 1.0 } else { 0.0 }).collect()).unwrap();
        let flat = Tensor::<f64>::full(n_z, n_p, 1.0 / n_p as f64);
        let zero = carl_loss(&one_hot, &one_hot, CarlForm::Agreement).unwrap();
        let ln = carl_loss(&flat, &flat, CarlForm::Agreement).unwrap();
        worst_carl = worst_carl.max(zero.abs()).max((ln - (n_p as f64).ln()).abs());
    }

    // Two identical image prototypes among orthogonal rows: each duplicate
    // pays ln 2, everything else saturates to zero at τ_c = 0.02.
    let d = 8;
    let basis = |i: usize| -> Vec<f64> { (0..d).map(|k| if k == i { 1.0 } else { 0.0 }).collect() };
    let p_hat = Tensor::<f64>::matrix(3, d, [basis(0), basis(0), basis(1)].concat()).unwrap();
    let c_hat = Tensor::<f64>::matrix(3, d, [basis(2), basis(3), basis(4)].concat()).unwrap();
    let per_row = contrast_loss(&p_hat, &c_hat, 0.02).unwrap() / 2.0;
    let contrast = (per_row - 2f64.ln()).abs();

    outcome(
        worst_bce <= 1e-6 && worst_carl <= 1e-6 && contrast <= 1e-4,
        format!("BCE {worst_bce:.1e}, CARL {worst_carl:.1e}, contrast duplicate {contrast:.1e}"),
    )
}

fn tiny_setup(layers: usize) -> (comfe_core::SyntheticData, TrainConfig) {
    let spec = SyntheticSpec {
        classes: 3,
        dim: 16,
        grid_h: 4,
        grid_w: 4,
        background_modes: 3,
        train_per_class: 12,
        eval_per_class: 4,
        ..SyntheticSpec::default()
    };
    let mut m = ModelConfig::new(3, 16);
    m.heads = 2;
    m.n_prototypes = 3;
    m.layers = layers;
    let mut cfg = TrainConfig::new(m);
    cfg.epochs = 2;
    cfg.batch_size = 8;
    cfg.seed = 5;
    (generate(&spec).unwrap(), cfg)
}

fn determinism_and_persistence() -> Outcome {
    let (data, cfg) = tiny_setup(2);
    let a = train(&data.train, &cfg, None, &mut std::io::sink()).unwrap();
    let b = train(&data.train, &cfg, None, &mut std::io::sink()).unwrap();
    let bytes = checkpoint::to_bytes(&a).unwrap();
    let identical = bytes == checkpoint::to_bytes(&b).unwrap();
    let ckpt_trip = checkpoint::to_bytes(&checkpoint::from_bytes(&bytes).unwrap()).unwrap() == bytes;

    let mut file = Vec::new();
    write_embeddings_to(&data.train, &mut file).unwrap();
    let mut again = Vec::new();
    write_embeddings_to(&read_embeddings_from(file.as_slice()).unwrap(), &mut again).unwrap();
    let cfeb_trip = file == again;

    let (data, cfg) = tiny_setup(3);
    let state = train(&data.train, &cfg, None, &mut std::io::sink()).unwrap();
    let mut layer_err = 0.0f64;
    for (i, img) in data.eval.images.iter().enumerate().take(6) {
        let paired = if i % 2 == 0 { img.views.get(1) } else { None };
        let views = vec![(img.views[0].clone(), paired.cloned())];
        let labels = vec![state.model.bank.label(img.label as usize).unwrap()];
        let got = total_loss(&state.model, &make_samples(&views, &labels), &single_threaded())
            .unwrap()
            .breakdown
            .total;
        let expect = independent_layer_average(&state, &img.views[0], paired, img.label as usize);
        layer_err = layer_err.max((got - expect).abs() / expect.abs().max(1.0));
    }
    outcome(
        identical && ckpt_trip && cfeb_trip && layer_err <= 1e-6,
        format!("identical runs {identical}, checkpoint round-trip {ckpt_trip}, CFEB round-trip {cfeb_trip}, per-layer average error {layer_err:.1e}"),
    )
}

fn random_model(seed: u64, classes: usize, d: usize, n_p: usize) -> ComfeModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cfg = ModelConfig::new(classes, d);
    cfg.heads = 2;
    cfg.layers = 2;
    cfg.n_prototypes = n_p;
    ComfeModel::init(cfg, &mut rng).unwrap()
}

/// Decoder whose every sublayer writes zero into the residual stream, so the
/// image prototypes are exactly the query rows.
fn planted_model(seed: u64, planted: &Tensor) -> ComfeModel {
    let mut model = random_model(seed, 3, planted.cols(), planted.rows());
    model.for_each_param_mut(|name, t| {
        let leaf = name.rsplit('.').next().unwrap();
        if matches!(leaf, "wo" | "bo" | "ff_w2" | "ff_b2") {
            t.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    });
    model.queries.q = planted.clone();
    model
}

fn brute_force_exemplars(model: &ComfeModel, images: &[Tensor], k: usize) -> Vec<Vec<(usize, usize)>> {
    let cfg = model.config.decoder();
    let protos: Vec<Tensor> = images
        .iter()
        .map(|z| decoder_forward(&unit_rows(z), &model.queries.q, &model.decoder, &cfg).unwrap().pop().unwrap())
        .collect();
    (0..model.bank.prototypes.rows())
        .map(|m| {
            let c = model.bank.prototypes.row_slice(m);
            let mut all = Vec::new();
            for (i, p) in protos.iter().enumerate() {
                for j in 0..p.rows() {
                    all.push((oracle::cosine(p.row_slice(j), c), i, j));
                }
            }
            // Stable sort keeps image-then-slot order among ties.
            all.sort_by(|a, b| b.0.total_cmp(&a.0));
            all.into_iter().take(k).map(|(_, i, j)| (i, j)).collect()
        })
        .collect()
}

fn explanation_consistency() -> Outcome {
    let mut conf_err = 0.0f64;
    for seed in 0..20 {
        let model = random_model(seed, 4, 16, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let z = randn(&mut rng, 12, 16);
        let scores = analyze(&model, &z).unwrap().scores.scores;
        for (l, s) in scores.iter().enumerate() {
            let map = class_confidence_map(&model, &z, l, (3, 4)).unwrap();
            let max = map.data.iter().cloned().fold(f32::MIN, f32::max);
            conf_err = conf_err.max((max - s).abs() as f64);
        }
    }

    let mut recovered = 0;
    let mut total = 0;
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, n_p) = (16, 4);
        let planted = unit_rows(&randn(&mut rng, n_p, d)).map(|x| x * 8.0);
        let truth: Vec<usize> = (0..24).map(|_| rng.random_range(0..n_p)).collect();
        let model = planted_model(seed, &planted);
        let mut data = Vec::new();
        for &t in &truth {
            let p = planted.row_slice(t);
            data.extend(p.iter().map(|&x| x / 8.0 + 0.05 * rng.sample::<f32, _>(rand_distr::StandardNormal)));
        }
        let z = Tensor::matrix(truth.len(), d, data).unwrap();
        let map = component_feature_map(&model, &z, (4, 6)).unwrap();
        recovered += map.data.iter().zip(&truth).filter(|(a, b)| a == b).count();
        total += truth.len();
    }

    let model = random_model(7, 3, 16, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let images: Vec<Tensor> = (0..20).map(|_| randn(&mut rng, 9, 16)).collect();
    let k = 4;
    let got = extract_exemplars(&model, images.iter(), k).unwrap();
    let got: Vec<Vec<(usize, usize)>> = got.lists.iter().map(|l| l.iter().map(|e| (e.image, e.slot)).collect()).collect();
    let exemplars_match = got == brute_force_exemplars(&model, &images, k);

    outcome(
        conf_err <= 1e-6 && recovered == total && exemplars_match,
        format!("confidence max vs score {conf_err:.1e}, planted prototypes recovered {recovered}/{total}, exemplars match brute force on 20 images {exemplars_match}"),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 7] = [
        ("gradient correctness", gradient_correctness),
        ("probability invariants", probability_invariants),
        ("loss closed forms", closed_forms),
        ("determinism and persistence", determinism_and_persistence),
        ("explanation consistency", explanation_consistency),
        ("ablation sanity", ablations),
        ("synthetic closed loop", synthetic_closed_loop),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let o = run();
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass {
            failed += 1;
        }
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
