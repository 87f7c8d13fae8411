mod common;

use common::*;
use lnprune::graph::zoo::{self, random_graph, Head};
use lnprune::prune::{apply_plan, build_plan, mask_plan, plan_report, KernelScores, Targets};
use lnprune::tensor::Tensor;
use lnprune::train::evaluate;
use proptest::prelude::*;
use rand::Rng;

/// Logit agreement between structural removal and either oracle.
const SURGERY_TOL: f32 = 1e-5;

fn probe(graph: &lnprune::graph::ModelGraph, n: usize, seed: u64) -> Tensor {
    let mut rng = rng(seed);
    let [c, h, w] = graph.input_shape();
    Tensor::from_fn(&[n, c, h, w], |_| rng.random_range(0.0f32..1.0))
}

fn check_random_surgery(seed: u64, residual: bool) -> Result<(), TestCaseError> {
    let graph = random_graph(seed, residual);
    let mut rng = rng(seed.wrapping_add(1));
    let (scores, targets) = random_scores_and_targets(&graph, &mut rng);
    let plan = build_plan(&graph, &scores, &targets).unwrap();
    let pruned = apply_plan(&graph, &plan).unwrap();
    let x = probe(&graph, 4, seed.wrapping_add(2));
    let got = pruned.forward(&x, false).unwrap().logits;
    let masked = mask_plan(&graph, &plan).unwrap().forward(&x, false).unwrap().logits;
    let zeroed = producer_zero_oracle(&graph, &plan).forward(&x, false).unwrap().logits;
    prop_assert!(got.max_abs_diff(&masked) <= SURGERY_TOL, "mask oracle {}", got.max_abs_diff(&masked));
    prop_assert!(got.max_abs_diff(&zeroed) <= SURGERY_TOL, "producer oracle {}", got.max_abs_diff(&zeroed));

    for unit in pruned.channel_units() {
        prop_assert!(unit.channels >= 1);
    }
    for lp in &plan.layers {
        prop_assert_eq!(lp.before - lp.removed.len(), lp.keep);
        for member in &lp.members {
            let layer = pruned.layer(pruned.layer_index(member).unwrap());
            prop_assert_eq!(layer.out_channels(), Some(lp.keep));
        }
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn chain_surgery_matches_oracles(seed in any::<u64>()) {
        check_random_surgery(seed, false)?;
    }

    #[test]
    fn residual_surgery_matches_oracles(seed in any::<u64>()) {
        check_random_surgery(seed, true)?;
    }

    #[test]
    fn ranking_ignores_positive_scaling(scores in prop::collection::vec(0.0f64..10.0, 1..20), scale in 0.01f64..100.0) {
        let scaled: Vec<f64> = scores.iter().map(|s| s * scale).collect();
        let order = lnprune::prune::rank_kernels(&scores);
        // scaling can only merge ties, and ties keep index order
        let again = lnprune::prune::rank_kernels(&scaled);
        for w in again.windows(2) {
            prop_assert!(scaled[w[0]] <= scaled[w[1]]);
        }
        if distinct(&scaled) {
            prop_assert_eq!(order, again);
        }
    }
}

fn distinct(v: &[f64]) -> bool {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s.windows(2).all(|w| w[0] < w[1])
}

#[test]
fn pruning_planted_dead_kernels_changes_nothing() {
    let mut graph = zoo::vgg([1, 12, 12], &[vec![6, 6], vec![8]], Head::Fc(vec![10]), 4, 5).unwrap();
    let planted = [("conv1_1", vec![1, 4]), ("conv1_2", vec![0]), ("conv2_1", vec![2, 3, 7])];
    let mut targets = Targets::new();
    for (id, kernels) in &planted {
        let li = graph.layer_index(id).unwrap();
        let (w, b) = graph.params_mut(li).unwrap();
        let per = w.len() / w.shape()[0];
        for &k in kernels {
            w.data_mut()[k * per..(k + 1) * per].fill(0.0);
            b.data_mut()[k] = 0.0;
        }
        targets.insert(id.to_string(), w.shape()[0] - kernels.len());
    }
    let plan = build_plan(&graph, &KernelScores::kernel_l1(&graph), &targets).unwrap();
    for (id, kernels) in &planted {
        let lp = plan.layers.iter().find(|l| l.layer_id == *id).unwrap();
        assert_eq!(&lp.removed, kernels);
    }
    let pruned = apply_plan(&graph, &plan).unwrap();
    let x = probe(&graph, 8, 9);
    let diff = pruned.forward(&x, false).unwrap().logits.max_abs_diff(&graph.forward(&x, false).unwrap().logits);
    assert!(diff <= 1e-6, "{diff}");

    let data = random_dataset(&graph, 60, 3);
    assert_eq!(evaluate(&graph, &data).unwrap(), evaluate(&pruned, &data).unwrap());
}

#[test]
fn report_bytes_match_serialized_blob() {
    let graph = random_graph(11, true);
    let mut rng = rng(12);
    let (scores, targets) = random_scores_and_targets(&graph, &mut rng);
    let plan = build_plan(&graph, &scores, &targets).unwrap();
    let pruned = apply_plan(&graph, &plan).unwrap();
    let report = plan_report(&plan, &graph, &pruned);
    for (g, bytes, params) in [
        (&graph, report.bytes_before, report.params_before),
        (&pruned, report.bytes_after, report.params_after),
    ] {
        let file = g.to_bytes();
        let manifest = u64::from_le_bytes(file[8..16].try_into().unwrap()) as usize;
        assert_eq!(bytes as usize, file.len() - 16 - manifest);
        assert_eq!(params, g.param_count());
    }
}
