mod common;

use common::graph::check_graph;
use common::ops::{all_cases, check_case};

#[test]
fn primitives_match_central_differences_in_f64() {
    for case in all_cases() {
        for seed in 0..5 {
            let r = check_case::<f64>(&case, case.f64, seed);
            assert!(r.elem_err < 1e-4, "{} seed {seed}: elementwise error {:.3e}", case.name, r.elem_err);
        }
    }
}

#[test]
fn primitives_match_central_differences_from_f32() {
    for case in all_cases() {
        for seed in 0..5 {
            let r = check_case::<f32>(&case, case.f32, seed);
            assert!(r.norm_err < 1e-3, "{} seed {seed}: norm-wise error {:.3e}", case.name, r.norm_err);
        }
    }
}

#[test]
fn whole_objective_matches_central_differences() {
    for seed in 0..20 {
        let r = check_graph(seed);
        assert!(
            r.coord_err < 1e-3 && r.direction_err < 1e-3,
            "seed {seed} ({}): coordinate {:.3e}, direction {:.3e}",
            r.summary,
            r.coord_err,
            r.direction_err
        );
    }
}
