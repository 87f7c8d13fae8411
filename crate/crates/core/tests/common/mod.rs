//! Oracles shared by the integration tests and the acceptance harness.
#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lnprune::data::Dataset;
use lnprune::graph::{LayerKind, ModelGraph, Src};
use lnprune::prune::{KernelScores, PrunePlan, Targets};
use lnprune::stats::NormOrder;
use lnprune::tensor::{
    conv2d_backward, conv2d_forward, conv2d_output_extent, dense_backward, dense_forward, gap_backward,
    gap_forward, maxpool2d_backward, maxpool2d_forward, relu_backward, relu_forward, softmax_xent, Tensor,
};

/// Step of the central differences.
pub const FD_EPS: f32 = 1e-2;
/// Step for whole graphs, where larger steps cross many ReLU kinks.
pub const GRAPH_EPS: f32 = 1e-3;
/// Largest accepted relative error between analytic and numeric gradients.
pub const FD_TOL: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0f32..1.0))
}

/// `|a - b| / max(|a|, |b|)` over whole gradient vectors.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn dot(t: &Tensor, r: &Tensor) -> f64 {
    t.data().iter().zip(r.data()).map(|(&a, &b)| a as f64 * b as f64).sum()
}

fn widen(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

/// Central differences of `loss` with respect to every entry of `x`.
fn numeric(x: &Tensor, mut loss: impl FnMut(&Tensor) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut p = x.clone();
            p.data_mut()[i] += FD_EPS;
            let mut m = x.clone();
            m.data_mut()[i] -= FD_EPS;
            let (hi, lo) = (p.data()[i] as f64, m.data()[i] as f64);
            (loss(&p) - loss(&m)) / (hi - lo)
        })
        .collect()
}

/// Worst relative error over input, weight and bias gradients of one random convolution.
pub fn check_conv(seed: u64) -> f64 {
    let mut rng = rng(seed);
    let (n, c, d) = (rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(1..=4));
    let k = [1, 3][rng.random_range(0..2)];
    let stride = rng.random_range(1..=2);
    let pad = rng.random_range(0..=k / 2);
    let (h, w) = (rng.random_range(k..=7), rng.random_range(k..=7));
    let x = random_tensor(&[n, c, h, w], &mut rng);
    let wt = random_tensor(&[d, c, k, k], &mut rng);
    let b = random_tensor(&[d], &mut rng);
    let (oh, ow) = (
        conv2d_output_extent(h, k, stride, pad),
        conv2d_output_extent(w, k, stride, pad),
    );
    let r = random_tensor(&[n, d, oh, ow], &mut rng);
    let g = conv2d_backward(&r, &x, &wt, stride, pad).unwrap();
    let fx = numeric(&x, |x| dot(&conv2d_forward(x, &wt, &b, stride, pad).unwrap(), &r));
    let fw = numeric(&wt, |wt| dot(&conv2d_forward(&x, wt, &b, stride, pad).unwrap(), &r));
    let fb = numeric(&b, |b| dot(&conv2d_forward(&x, &wt, b, stride, pad).unwrap(), &r));
    rel_err(&fx, &widen(g.input.as_ref().unwrap()))
        .max(rel_err(&fw, &widen(&g.weights)))
        .max(rel_err(&fb, &widen(&g.bias)))
}

/// Entries kept at least `3 * FD_EPS` away from the kink at zero.
pub fn check_relu(seed: u64) -> f64 {
    let mut rng = rng(seed);
    let shape = [rng.random_range(1..=3), rng.random_range(1..=4), 3, 3];
    let x = Tensor::from_fn(&shape, |_| {
        let mag = rng.random_range(3.0 * FD_EPS..1.0);
        if rng.random_bool(0.5) {
            mag
        } else {
            -mag
        }
    });
    let r = random_tensor(&shape, &mut rng);
    let g = relu_backward(&r, &x).unwrap();
    let f = numeric(&x, |x| dot(&relu_forward(x), &r));
    rel_err(&f, &widen(&g))
}

/// Window entries are distinct multiples of 0.1, so no perturbation changes an argmax.
pub fn check_maxpool(seed: u64) -> f64 {
    let mut rng = rng(seed);
    let (window, stride) = [(2, 2), (3, 2), (2, 1)][rng.random_range(0..3)];
    let shape = [rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(4..=7), rng.random_range(4..=7)];
    let count: usize = shape.iter().product();
    let mut levels: Vec<usize> = (0..count).collect();
    levels.shuffle(&mut rng);
    let x = Tensor::new(shape.to_vec(), levels.iter().map(|&l| l as f32 * 0.1 - 1.0).collect()).unwrap();
    let (out, idx) = maxpool2d_forward(&x, window, stride).unwrap();
    let r = random_tensor(out.shape(), &mut rng);
    let g = maxpool2d_backward(&r, &idx).unwrap();
    let f = numeric(&x, |x| dot(&maxpool2d_forward(x, window, stride).unwrap().0, &r));
    rel_err(&f, &widen(&g))
}

pub fn check_gap(seed: u64) -> f64 {
    let mut rng = rng(seed);
    let shape = [rng.random_range(1..=3), rng.random_range(1..=4), rng.random_range(1..=5), rng.random_range(1..=5)];
    let x = random_tensor(&shape, &mut rng);
    let r = random_tensor(&shape[..2], &mut rng);
    let g = gap_backward(&r, shape[2], shape[3]).unwrap();
    let f = numeric(&x, |x| dot(&gap_forward(x).unwrap(), &r));
    rel_err(&f, &widen(&g))
}

pub fn check_dense(seed: u64) -> f64 {
    let mut rng = rng(seed);
    let (n, f_in, o) = (rng.random_range(1..=4), rng.random_range(1..=8), rng.random_range(1..=5));
    let x = random_tensor(&[n, f_in], &mut rng);
    let w = random_tensor(&[o, f_in], &mut rng);
    let b = random_tensor(&[o], &mut rng);
    let r = random_tensor(&[n, o], &mut rng);
    let g = dense_backward(&r, &x, &w).unwrap();
    let fx = numeric(&x, |x| dot(&dense_forward(x, &w, &b).unwrap(), &r));
    let fw = numeric(&w, |w| dot(&dense_forward(&x, w, &b).unwrap(), &r));
    let fb = numeric(&b, |b| dot(&dense_forward(&x, &w, b).unwrap(), &r));
    rel_err(&fx, &widen(&g.input))
        .max(rel_err(&fw, &widen(&g.weights)))
        .max(rel_err(&fb, &widen(&g.bias)))
}

pub fn check_softmax_xent(seed: u64) -> f64 {
    let mut rng = rng(seed);
    let (n, c) = (rng.random_range(1..=4), rng.random_range(2..=6));
    let logits = Tensor::from_fn(&[n, c], |_| rng.random_range(-3.0f32..3.0));
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
    let (_, g) = softmax_xent(&logits, &labels).unwrap();
    let f = numeric(&logits, |l| softmax_xent(l, &labels).unwrap().0 as f64);
    rel_err(&f, &widen(&g))
}

/// Which side of every kink the forward pass is on: the sign of each ReLU
/// output and the argmax of each pooling window.
fn kink_pattern(graph: &ModelGraph, x: &Tensor) -> Vec<Vec<usize>> {
    let acts = graph.forward(x, true).unwrap().activations.unwrap();
    let mut pattern = Vec::new();
    for (i, layer) in graph.layers().iter().enumerate() {
        match layer.kind {
            LayerKind::Relu => pattern.push(acts[i].data().iter().map(|&v| (v > 0.0) as usize).collect()),
            LayerKind::MaxPool { window, stride } => {
                let input = match layer.inputs[0] {
                    Src::Input => x,
                    Src::Layer(j) => &acts[j],
                };
                let [n, c, h, w] = input.dims4("pool").unwrap();
                let (oh, ow) = ((h - window) / stride + 1, (w - window) / stride + 1);
                let mut arg = Vec::new();
                for plane in input.data().chunks(h * w).take(n * c) {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut best = (f32::NEG_INFINITY, 0);
                            for ky in 0..window {
                                for kx in 0..window {
                                    let p = (oy * stride + ky) * w + ox * stride + kx;
                                    if plane[p] > best.0 {
                                        best = (plane[p], p);
                                    }
                                }
                            }
                            arg.push(best.1);
                        }
                    }
                }
                pattern.push(arg);
            }
            _ => {}
        }
    }
    pattern
}

/// End-to-end parameter gradients of a whole graph against central differences
/// of the cross-entropy loss on random parameter coordinates.
///
/// A coordinate whose `±GRAPH_EPS` perturbation flips any ReLU or pooling
/// argmax is skipped. Returns the relative error over the remaining
/// coordinates and `(skipped, checked)`.
pub fn check_graph(graph: &ModelGraph, seed: u64) -> (f64, usize, usize) {
    let mut rng = rng(seed);
    let [c, h, w] = graph.input_shape();
    let n = 2;
    let x = Tensor::from_fn(&[n, c, h, w], |_| rng.random_range(0.0f32..1.0));
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..graph.class_count())).collect();
    let tape = graph.forward_tape(&x).unwrap();
    let (_, grad_logits) = softmax_xent(tape.logits(), &labels).unwrap();
    let all = vec![true; graph.layers().len()];
    let grads = graph.backward(&tape, &grad_logits, &all).unwrap();

    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    let (mut skipped, mut checked) = (0, 0);
    for (li, g) in grads.iter().enumerate() {
        let Some(g) = g else { continue };
        for (which, gt) in [(0, &g.weights), (1, &g.bias)] {
            let picks = if which == 0 { 6 } else { 2 };
            for _ in 0..picks.min(gt.len()) {
                let i = rng.random_range(0..gt.len());
                let shifted = |delta: f32| {
                    let mut layers = graph.layers().to_vec();
                    let t = if which == 0 {
                        layers[li].weights.as_mut()
                    } else {
                        layers[li].bias.as_mut()
                    }
                    .unwrap();
                    let before = t.data()[i];
                    t.data_mut()[i] = before + delta;
                    let actual = t.data()[i] as f64 - before as f64;
                    (graph.with_layers(layers).unwrap(), actual)
                };
                let ((hi, dh), (lo, dl)) = (shifted(GRAPH_EPS), shifted(-GRAPH_EPS));
                if kink_pattern(&hi, &x) != kink_pattern(&lo, &x) {
                    skipped += 1;
                    continue;
                }
                let loss = |g: &ModelGraph| {
                    let logits = g.forward(&x, false).unwrap().logits;
                    softmax_xent(&logits, &labels).unwrap().0 as f64
                };
                checked += 1;
                numeric.push((loss(&hi) - loss(&lo)) / (dh - dl));
                analytic.push(gt.data()[i] as f64);
            }
        }
    }
    (rel_err(&numeric, &analytic), skipped, checked)
}

/// The unmodified graph with every removed kernel silenced at its producers:
/// weights and bias of each planned kernel are zeroed in all members of its unit.
pub fn producer_zero_oracle(graph: &ModelGraph, plan: &PrunePlan) -> ModelGraph {
    let mut layers = graph.layers().to_vec();
    for lp in &plan.layers {
        for member in &lp.members {
            let li = graph.layer_index(member).unwrap();
            let w = layers[li].weights.as_mut().unwrap();
            let per = w.len() / w.shape()[0];
            for &k in &lp.removed {
                w.data_mut()[k * per..(k + 1) * per].fill(0.0);
            }
            let b = layers[li].bias.as_mut().unwrap();
            for &k in &lp.removed {
                b.data_mut()[k] = 0.0;
            }
        }
    }
    graph.with_layers(layers).unwrap()
}

/// Random scores for every unit and a random keep count in `1..=channels`
/// for a random subset of units.
pub fn random_scores_and_targets(graph: &ModelGraph, rng: &mut ChaCha8Rng) -> (KernelScores, Targets) {
    let mut scores = KernelScores::default();
    let mut targets = Targets::new();
    for unit in graph.channel_units() {
        let values: Vec<f64> = (0..unit.channels)
            .map(|_| (rng.random_range(0..5) as f64) * 0.25)
            .collect();
        scores.layers.insert(unit.id.clone(), values);
        if rng.random_bool(0.8) {
            let members = unit.member_ids(graph);
            let key = members[rng.random_range(0..members.len())].clone();
            targets.insert(key, rng.random_range(1..=unit.channels));
        }
    }
    (scores, targets)
}

/// Textbook norm without rescaling.
pub fn naive_norm(map: &[f32], order: NormOrder) -> f64 {
    let abs = map.iter().map(|&v| (v as f64).abs());
    match order {
        NormOrder::L1 => abs.sum(),
        NormOrder::L2 => abs.map(|v| v * v).sum::<f64>().sqrt(),
        NormOrder::LInf => abs.fold(0.0, f64::max),
        NormOrder::Ln(p) => abs.map(|v| v.powf(p)).sum::<f64>().powf(1.0 / p),
    }
}

/// Per-unit mean feature-map norms over every sample of `dataset`: each sample
/// is run alone, every per-sample norm is stored, then averaged.
pub fn store_then_average(graph: &ModelGraph, dataset: &Dataset, order: NormOrder) -> Vec<(String, Vec<f64>)> {
    let units = graph.channel_units();
    let mut stored: Vec<Vec<Vec<f64>>> = vec![Vec::new(); units.len()];
    for s in 0..dataset.len() {
        let (x, _) = dataset.batch(&[s]);
        let acts = graph.forward(&x, true).unwrap().activations.unwrap();
        for (u, unit) in units.iter().enumerate() {
            let a = &acts[unit.tap];
            let plane: usize = a.shape()[2..].iter().product();
            stored[u].push(
                (0..unit.channels)
                    .map(|c| naive_norm(&a.data()[c * plane..(c + 1) * plane], order))
                    .collect(),
            );
        }
    }
    units
        .iter()
        .zip(stored)
        .map(|(unit, per_sample)| {
            let n = per_sample.len() as f64;
            let means = (0..unit.channels)
                .map(|c| per_sample.iter().map(|v| v[c]).sum::<f64>() / n)
                .collect();
            (unit.id.clone(), means)
        })
        .collect()
}

/// Random images in `[0, 1]` shaped for `graph`, with random labels.
pub fn random_dataset(graph: &ModelGraph, n: usize, seed: u64) -> Dataset {
    let mut rng = rng(seed);
    let [c, h, w] = graph.input_shape();
    let images = Tensor::from_fn(&[n, c, h, w], |_| rng.random_range(0.0f32..1.0));
    let labels = (0..n).map(|_| rng.random_range(0..graph.class_count())).collect();
    Dataset::new(images, labels, graph.class_count(), lnprune::data::Split::Train).unwrap()
}
