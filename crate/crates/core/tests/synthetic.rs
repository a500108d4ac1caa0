use comfe_core::synth::{generate, nearest_mean_oracle, SyntheticSpec};

fn oracle(spec: &SyntheticSpec) -> f64 {
    let data = generate(spec).unwrap();
    nearest_mean_oracle(&data.eval, &data.eval_masks, &data.class_means).unwrap()
}

fn spec(classes: usize, kappa: f64, seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        classes,
        kappa,
        train_per_class: 1,
        eval_per_class: 40,
        seed,
        ..SyntheticSpec::default()
    }
}

#[test]
fn oracle_is_monotone_in_concentration() {
    for seed in 0..3 {
        let accs: Vec<f64> = [0.05, 0.3, 50.0].iter().map(|&k| oracle(&spec(5, k, seed))).collect();
        assert!(accs.windows(2).all(|w| w[0] <= w[1]), "seed {seed}: {accs:?}");
    }
}

#[test]
fn near_uniform_patches_leave_the_oracle_near_chance() {
    let acc = oracle(&spec(10, 0.01, 3));
    assert!(acc < 0.25, "oracle {acc}");
}

#[test]
fn noiseless_patches_give_a_perfect_oracle() {
    assert_eq!(oracle(&spec(5, 1e6, 4)), 1.0);
}

#[test]
fn masks_partition_every_image() {
    let s = spec(4, 50.0, 5);
    let data = generate(&s).unwrap();
    for (masks, ds) in [(&data.train_masks, &data.train), (&data.eval_masks, &data.eval)] {
        assert_eq!(masks.len(), ds.len());
        for m in masks {
            assert_eq!(m.len(), ds.n_z);
            assert_eq!(m.iter().filter(|&&b| b).count(), s.informative_patches());
        }
    }
}
