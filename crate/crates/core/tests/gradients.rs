mod common;

use common::*;
use lnprune::graph::zoo::random_graph;

const INSTANCES: u64 = 25;
const MIN_CHECKED: usize = 10;

fn all_within(name: &str, check: fn(u64) -> f64) {
    for seed in 0..INSTANCES {
        let err = check(seed);
        assert!(err < FD_TOL, "{name} seed {seed}: relative error {err:e}");
    }
}

#[test]
fn conv2d_matches_finite_differences() {
    all_within("conv2d", check_conv);
}

#[test]
fn relu_matches_finite_differences() {
    all_within("relu", check_relu);
}

#[test]
fn maxpool_matches_finite_differences() {
    all_within("maxpool", check_maxpool);
}

#[test]
fn gap_matches_finite_differences() {
    all_within("gap", check_gap);
}

#[test]
fn dense_matches_finite_differences() {
    all_within("dense", check_dense);
}

#[test]
fn softmax_xent_matches_finite_differences() {
    all_within("softmax_xent", check_softmax_xent);
}

#[test]
fn whole_graph_backward_matches_finite_differences() {
    for seed in 0..INSTANCES {
        for residual in [false, true] {
            let graph = random_graph(seed, residual);
            let (err, skipped, checked) = check_graph(&graph, seed);
            assert!(err < FD_TOL, "seed {seed} residual {residual}: {err:e}");
            assert!(checked >= MIN_CHECKED, "seed {seed}: {skipped} kinks, only {checked} checked");
        }
    }
}
