//! Builders for VGG-style chains, bottleneck residual nets, and random test graphs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{LayerKind, LayerSpec, ModelGraph, Result, Src};
use crate::tensor::Tensor;

/// Kernel counts of the thirteen VGG16 convolution layers, grouped by block.
pub const VGG16_BLOCKS: [&[usize]; 5] = [
    &[64, 64],
    &[128, 128],
    &[256, 256, 256],
    &[512, 512, 512],
    &[512, 512, 512],
];

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Kaiming-uniform weights `U(-sqrt(6/fan_in), sqrt(6/fan_in))` and bias `U(-1/sqrt(fan_in), ..)`.
pub fn kaiming_uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> (Tensor, Tensor) {
    let fan_in = fan_in.max(1) as f32;
    let wb = (6.0 / fan_in).sqrt();
    let bb = 1.0 / fan_in.sqrt();
    let w = Tensor::from_fn(shape, |_| rng.random_range(-wb..wb));
    let b = Tensor::from_fn(&[shape[0]], |_| rng.random_range(-bb..bb));
    (w, b)
}

#[derive(Clone, Debug, PartialEq)]
pub enum Head {
    /// `gap -> fc -> softmax`
    Gap,
    /// `flatten -> fc6 -> relu6 -> ... -> fc(6+k) -> softmax` with the listed hidden widths.
    Fc(Vec<usize>),
}

struct Builder {
    layers: Vec<LayerSpec>,
    rng: ChaCha8Rng,
    channels: usize,
    spatial: [usize; 2],
}

impl Builder {
    fn last(&self) -> Src {
        if self.layers.is_empty() {
            Src::Input
        } else {
            Src::Layer(self.layers.len() - 1)
        }
    }

    fn push(&mut self, layer: LayerSpec) -> Src {
        self.layers.push(layer);
        Src::Layer(self.layers.len() - 1)
    }

    fn conv(&mut self, id: String, src: Src, in_ch: usize, out: usize, k: usize, stride: usize) -> Src {
        let (w, b) = kaiming_uniform(&[out, in_ch, k, k], in_ch * k * k, &mut self.rng);
        self.push(
            LayerSpec::new(
                id,
                LayerKind::Conv {
                    out_channels: out,
                    kernel: k,
                    stride,
                    pad: k / 2,
                },
                vec![src],
            )
            .with_params(w, b),
        )
    }

    fn dense(&mut self, id: String, src: Src, fan_in: usize, out: usize) -> Src {
        let (w, b) = kaiming_uniform(&[out, fan_in], fan_in, &mut self.rng);
        self.push(
            LayerSpec::new(id, LayerKind::Dense { out_features: out }, vec![src]).with_params(w, b),
        )
    }

    fn head(&mut self, head: &Head, classes: usize) {
        match head {
            Head::Gap => {
                let g = self.push(LayerSpec::new("gap", LayerKind::Gap, vec![self.last()]));
                let fc = self.dense("fc".into(), g, self.channels, classes);
                self.push(LayerSpec::new("softmax", LayerKind::Softmax, vec![fc]));
            }
            Head::Fc(hidden) => {
                let mut src = self.push(LayerSpec::new("flatten", LayerKind::Flatten, vec![self.last()]));
                let mut width = self.channels * self.spatial[0] * self.spatial[1];
                for (i, &h) in hidden.iter().enumerate() {
                    let fc = self.dense(format!("fc{}", 6 + i), src, width, h);
                    src = self.push(LayerSpec::new(format!("relu{}", 6 + i), LayerKind::Relu, vec![fc]));
                    width = h;
                }
                let fc = self.dense(format!("fc{}", 6 + hidden.len()), src, width, classes);
                self.push(LayerSpec::new("softmax", LayerKind::Softmax, vec![fc]));
            }
        }
    }
}

/// VGG-style chain: 3x3 same-padded convs with ReLU, 2x2 max-pool after each block.
///
/// Layer ids follow the `conv<block>_<index>` convention (1-based).
pub fn vgg<B: AsRef<[usize]>>(
    input: [usize; 3],
    blocks: &[B],
    head: Head,
    classes: usize,
    seed: u64,
) -> Result<ModelGraph> {
    let mut b = Builder {
        layers: Vec::new(),
        rng: seeded(seed),
        channels: input[0],
        spatial: [input[1], input[2]],
    };
    for (bi, block) in blocks.iter().enumerate() {
        for (ci, &ch) in block.as_ref().iter().enumerate() {
            let src = b.last();
            let c = b.conv(format!("conv{}_{}", bi + 1, ci + 1), src, b.channels, ch, 3, 1);
            b.push(LayerSpec::new(format!("relu{}_{}", bi + 1, ci + 1), LayerKind::Relu, vec![c]));
            b.channels = ch;
        }
        if b.spatial[0] >= 2 && b.spatial[1] >= 2 {
            let src = b.last();
            b.push(LayerSpec::new(
                format!("pool{}", bi + 1),
                LayerKind::MaxPool { window: 2, stride: 2 },
                vec![src],
            ));
            b.spatial = [b.spatial[0] / 2, b.spatial[1] / 2];
        }
    }
    b.head(&head, classes);
    ModelGraph::new(input, b.layers)
}

/// One stage of bottleneck residual blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ResStage {
    pub out: usize,
    pub mid: usize,
    pub blocks: usize,
    pub stride: usize,
}

/// Bottleneck residual net: `stem conv -> stages -> gap -> fc -> softmax`.
///
/// Each block is `conv1x1 -> relu -> conv3x3 -> relu -> conv1x1`, added to the
/// block input (or to a 1x1 projection shortcut when the shape changes), then ReLU.
pub fn resnet(
    input: [usize; 3],
    stem: usize,
    stages: &[ResStage],
    classes: usize,
    seed: u64,
) -> Result<ModelGraph> {
    let mut b = Builder {
        layers: Vec::new(),
        rng: seeded(seed),
        channels: input[0],
        spatial: [input[1], input[2]],
    };
    let s = b.conv("stem".into(), Src::Input, input[0], stem, 3, 1);
    b.push(LayerSpec::new("stem_relu", LayerKind::Relu, vec![s]));
    b.channels = stem;
    for (si, stage) in stages.iter().enumerate() {
        for bi in 0..stage.blocks {
            let name = |part: &str| format!("s{}b{}_{part}", si + 1, bi + 1);
            let block_in = b.last();
            let stride = if bi == 0 { stage.stride } else { 1 };
            let shortcut = if stride != 1 || b.channels != stage.out {
                let (w, bias) = kaiming_uniform(&[stage.out, b.channels, 1, 1], b.channels, &mut b.rng);
                b.push(
                    LayerSpec::new(
                        name("proj"),
                        LayerKind::ProjectionShortcut {
                            out_channels: stage.out,
                            stride,
                        },
                        vec![block_in],
                    )
                    .with_params(w, bias),
                )
            } else {
                block_in
            };
            let c1 = b.conv(name("conv1"), block_in, b.channels, stage.mid, 1, 1);
            let r1 = b.push(LayerSpec::new(name("relu1"), LayerKind::Relu, vec![c1]));
            let c2 = b.conv(name("conv2"), r1, stage.mid, stage.mid, 3, stride);
            let r2 = b.push(LayerSpec::new(name("relu2"), LayerKind::Relu, vec![c2]));
            let c3 = b.conv(name("conv3"), r2, stage.mid, stage.out, 1, 1);
            let add = b.push(LayerSpec::new(name("add"), LayerKind::ResidualAdd, vec![c3, shortcut]));
            b.push(LayerSpec::new(name("relu"), LayerKind::Relu, vec![add]));
            b.channels = stage.out;
            if stride > 1 {
                b.spatial = [
                    (b.spatial[0] - 1) / stride + 1,
                    (b.spatial[1] - 1) / stride + 1,
                ];
            }
        }
    }
    b.head(&Head::Gap, classes);
    ModelGraph::new(input, b.layers)
}

/// Small random graph for property tests: a VGG-style chain (with either head)
/// or a residual net, with random widths and non-zero biases.
pub fn random_graph(seed: u64, residual: bool) -> ModelGraph {
    let mut rng = seeded(seed ^ 0x9e37_79b9_7f4a_7c15);
    let channels = rng.random_range(1..=3);
    let size = rng.random_range(6..=10);
    let classes = rng.random_range(2..=5);
    if residual {
        let stages: Vec<ResStage> = (0..rng.random_range(1..=2))
            .map(|i| ResStage {
                out: rng.random_range(3..=6),
                mid: rng.random_range(2..=4),
                blocks: rng.random_range(1..=2),
                stride: if i == 0 { 1 } else { 2 },
            })
            .collect();
        let stem = rng.random_range(2..=5);
        resnet([channels, size, size], stem, &stages, classes, seed).expect("valid residual graph")
    } else {
        let blocks: Vec<Vec<usize>> = (0..rng.random_range(1..=3))
            .map(|_| {
                (0..rng.random_range(1..=2))
                    .map(|_| rng.random_range(2..=6))
                    .collect()
            })
            .collect();
        let head = if rng.random_bool(0.5) {
            Head::Gap
        } else {
            Head::Fc((0..rng.random_range(0..=1)).map(|_| rng.random_range(3..=8)).collect())
        };
        vgg([channels, size, size], &blocks, head, classes, seed).expect("valid chain graph")
    }
}
