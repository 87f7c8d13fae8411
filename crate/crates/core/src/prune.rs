//! Structured kernel pruning: ranking, planning and graph surgery.
//!
//! Removing kernel `d` of a unit deletes output channel `d` (weights and bias)
//! from every producer of the unit and the matching input slice from every
//! consumer: input channel `d` of a convolution, or the column block of a
//! dense layer.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{ChannelUnit, Consumer, GraphError, LayerKind, ModelGraph};
use crate::stats::{unit_kernel_l1, NormOrder, NormSchedule, NormStats, StatsError};
use crate::tensor::Tensor;

/// Per-round kernel counts of the thirteen VGG16 conv layers, one row per block,
/// starting from the unpruned network (round 0) through round 9.
pub const VGG16_KEEP_ROUNDS: [[usize; 10]; 5] = [
    [64, 61, 58, 55, 52, 49, 46, 43, 40, 40],
    [128, 119, 110, 101, 92, 83, 74, 65, 56, 46],
    [256, 231, 206, 181, 156, 131, 106, 81, 56, 42],
    [512, 384, 288, 216, 162, 122, 91, 68, 51, 42],
    [512, 384, 288, 216, 162, 122, 91, 68, 51, 42],
];

#[derive(Debug, Error)]
pub enum PruneError {
    #[error("target for `{0}` is 0; every layer keeps at least one kernel")]
    ZeroTarget(String),
    #[error("target {target} for `{layer}` exceeds its {current} kernels")]
    TargetTooLarge {
        layer: String,
        target: usize,
        current: usize,
    },
    #[error("coupled layers {members:?} were given different targets")]
    ConflictingTargets { members: Vec<String> },
    #[error("`{0}` is not a prunable convolution layer")]
    UnknownLayer(String),
    #[error("scores for `{layer}` cover {actual} kernels but the layer has {expected}")]
    StaleScores {
        layer: String,
        expected: usize,
        actual: usize,
    },
    #[error("no scores for `{0}`")]
    MissingScores(String),
    #[error("score for `{layer}` kernel {kernel} is not a finite non-negative number")]
    BadScore { layer: String, kernel: usize },
    #[error("plan does not fit the graph: {0}")]
    PlanMismatch(String),
    #[error("unknown criterion `{0}`")]
    UnknownCriterion(String),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

pub type Result<T, E = PruneError> = std::result::Result<T, E>;

/// How kernel importance is measured.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Criterion {
    /// Sum of absolute kernel weights.
    KernelL1,
    /// Averaged feature-map norms under a schedule.
    FeatureMapNorm { schedule: NormSchedule },
}

impl Criterion {
    pub fn needs_stats(&self) -> bool {
        matches!(self, Criterion::FeatureMapNorm { .. })
    }

    pub fn schedule(&self) -> Option<&NormSchedule> {
        match self {
            Criterion::KernelL1 => None,
            Criterion::FeatureMapNorm { schedule } => Some(schedule),
        }
    }
}

/// Short names: `kernel-l1`, `fm-layerwise`, `fm-l1`, `fm-l2`, `fm-linf`, `fm-ln:<n>`.
impl FromStr for Criterion {
    type Err = PruneError;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        match lower.as_str() {
            "kernel-l1" => Ok(Criterion::KernelL1),
            "fm-layerwise" => Ok(Criterion::FeatureMapNorm {
                schedule: NormSchedule::layer_wise(),
            }),
            other => {
                let order = other
                    .strip_prefix("fm-")
                    .and_then(|o| o.parse::<NormOrder>().ok())
                    .ok_or_else(|| PruneError::UnknownCriterion(s.to_string()))?;
                Ok(Criterion::FeatureMapNorm {
                    schedule: NormSchedule::uniform(order),
                })
            }
        }
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use crate::stats::SchedulePolicy;
        match self {
            Criterion::KernelL1 => f.write_str("kernel-l1"),
            Criterion::FeatureMapNorm { schedule } if !schedule.overrides.is_empty() => {
                f.write_str("fm-custom")
            }
            Criterion::FeatureMapNorm { schedule } => match &schedule.policy {
                SchedulePolicy::LayerWise => f.write_str("fm-layerwise"),
                SchedulePolicy::Uniform { order } => write!(f, "fm-{order}"),
            },
        }
    }
}

/// Importance score per kernel, keyed by unit id.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KernelScores {
    pub layers: BTreeMap<String, Vec<f64>>,
}

impl KernelScores {
    pub fn from_stats(stats: &NormStats) -> Self {
        Self {
            layers: stats
                .layers
                .iter()
                .map(|l| (l.layer_id.clone(), l.values.clone()))
                .collect(),
        }
    }

    /// Kernel-L1 of every unit; coupled units sum over their producers.
    pub fn kernel_l1(graph: &ModelGraph) -> Self {
        Self {
            layers: graph
                .channel_units()
                .iter()
                .map(|u| (u.id.clone(), unit_kernel_l1(graph, u)))
                .collect(),
        }
    }

    /// Scores for `criterion`; feature-map criteria require stats fresh for `graph`.
    pub fn for_criterion(
        criterion: &Criterion,
        graph: &ModelGraph,
        stats: Option<&NormStats>,
    ) -> Result<Self> {
        match (criterion, stats) {
            (Criterion::KernelL1, _) => Ok(Self::kernel_l1(graph)),
            (Criterion::FeatureMapNorm { .. }, Some(stats)) => {
                stats.check_fresh(graph)?;
                Ok(Self::from_stats(stats))
            }
            (Criterion::FeatureMapNorm { .. }, None) => Err(PruneError::MissingScores(
                "feature-map criterion without stats".into(),
            )),
        }
    }
}

/// Kernel indices sorted by ascending score; equal scores keep index order.
pub fn rank_kernels(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    order
}

/// Keep counts keyed by layer id; any producer id of a coupled unit may be used.
pub type Targets = BTreeMap<String, usize>;

/// `ceil(fraction * channels)` for every unit, at least one.
pub fn fraction_targets(graph: &ModelGraph, fraction: f64) -> Targets {
    graph
        .channel_units()
        .into_iter()
        .map(|u| {
            let keep = ((u.channels as f64 * fraction).ceil() as usize).clamp(1, u.channels);
            (u.id, keep)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerPlan {
    /// Unit id (first producer).
    pub layer_id: String,
    /// All producers sharing this channel axis.
    pub members: Vec<String>,
    pub before: usize,
    pub keep: usize,
    /// Sorted kernel indices to remove.
    pub removed: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SliceAxis {
    ConvInput,
    DenseColumns,
}

/// Input slices a consumer loses because of an upstream removal.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuccessorSlice {
    pub layer_id: String,
    pub source: String,
    pub axis: SliceAxis,
    pub removed: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrunePlan {
    pub layers: Vec<LayerPlan>,
    pub successors: Vec<SuccessorSlice>,
}

impl PrunePlan {
    pub fn is_empty(&self) -> bool {
        self.layers.iter().all(|l| l.removed.is_empty())
    }

    pub fn removed_kernels(&self) -> usize {
        self.layers.iter().map(|l| l.removed.len()).sum()
    }
}

fn unit_target(unit: &ChannelUnit, graph: &ModelGraph, targets: &Targets) -> Result<Option<usize>> {
    let members = unit.member_ids(graph);
    let given: Vec<usize> = members.iter().filter_map(|m| targets.get(m).copied()).collect();
    if given.windows(2).any(|w| w[0] != w[1]) {
        return Err(PruneError::ConflictingTargets { members });
    }
    Ok(given.first().copied())
}

/// Remove the lowest-scored kernels of every unit down to its target.
///
/// Units without a target keep all their kernels.
pub fn build_plan(graph: &ModelGraph, scores: &KernelScores, targets: &Targets) -> Result<PrunePlan> {
    let units = graph.channel_units();
    for key in targets.keys() {
        let idx = graph
            .layer_index(key)
            .ok_or_else(|| PruneError::UnknownLayer(key.clone()))?;
        if !units.iter().any(|u| u.producers.contains(&idx)) {
            return Err(PruneError::UnknownLayer(key.clone()));
        }
    }
    let mut plan = PrunePlan::default();
    for unit in &units {
        let current = unit.channels;
        let keep = match unit_target(unit, graph, targets)? {
            None => current,
            Some(0) => return Err(PruneError::ZeroTarget(unit.id.clone())),
            Some(t) if t > current => {
                return Err(PruneError::TargetTooLarge {
                    layer: unit.id.clone(),
                    target: t,
                    current,
                })
            }
            Some(t) => t,
        };
        let s = scores
            .layers
            .get(&unit.id)
            .ok_or_else(|| PruneError::MissingScores(unit.id.clone()))?;
        if s.len() != current {
            return Err(PruneError::StaleScores {
                layer: unit.id.clone(),
                expected: current,
                actual: s.len(),
            });
        }
        if let Some(kernel) = s.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(PruneError::BadScore {
                layer: unit.id.clone(),
                kernel,
            });
        }
        let mut removed = rank_kernels(s)[..current - keep].to_vec();
        removed.sort_unstable();
        plan.layers.push(LayerPlan {
            layer_id: unit.id.clone(),
            members: unit.member_ids(graph),
            before: current,
            keep,
            removed,
        });
    }
    plan.successors = successor_slices(graph, &units, &plan);
    Ok(plan)
}

fn successor_slices(graph: &ModelGraph, units: &[ChannelUnit], plan: &PrunePlan) -> Vec<SuccessorSlice> {
    let mut out = Vec::new();
    for (unit, lp) in units.iter().zip(&plan.layers) {
        if lp.removed.is_empty() {
            continue;
        }
        for consumer in &unit.consumers {
            let (layer, axis, removed) = match *consumer {
                Consumer::Conv { layer } => (layer, SliceAxis::ConvInput, lp.removed.clone()),
                Consumer::Dense { layer, block } => (
                    layer,
                    SliceAxis::DenseColumns,
                    lp.removed
                        .iter()
                        .flat_map(|&c| c * block..(c + 1) * block)
                        .collect(),
                ),
            };
            out.push(SuccessorSlice {
                layer_id: graph.layer(layer).id.clone(),
                source: unit.id.clone(),
                axis,
                removed,
            });
        }
    }
    out
}

/// Check `plan` against `graph` and return, per unit, the channels to keep.
fn kept_channels(graph: &ModelGraph, plan: &PrunePlan) -> Result<Vec<(ChannelUnit, Vec<usize>)>> {
    let units = graph.channel_units();
    let mut out = Vec::new();
    for lp in &plan.layers {
        let unit = units
            .iter()
            .find(|u| u.id == lp.layer_id)
            .ok_or_else(|| PruneError::PlanMismatch(format!("no unit `{}`", lp.layer_id)))?;
        if lp.before != unit.channels {
            return Err(PruneError::PlanMismatch(format!(
                "`{}` has {} kernels, plan expects {}",
                lp.layer_id, unit.channels, lp.before
            )));
        }
        if lp.members != unit.member_ids(graph) {
            return Err(PruneError::PlanMismatch(format!(
                "`{}` members differ from the graph",
                lp.layer_id
            )));
        }
        if lp.removed.windows(2).any(|w| w[0] >= w[1])
            || lp.removed.last().is_some_and(|&d| d >= unit.channels)
        {
            return Err(PruneError::PlanMismatch(format!(
                "`{}` removal indices must be sorted, distinct and in range",
                lp.layer_id
            )));
        }
        if lp.keep != unit.channels - lp.removed.len() {
            return Err(PruneError::PlanMismatch(format!(
                "`{}` keep count disagrees with its removals",
                lp.layer_id
            )));
        }
        if lp.keep == 0 {
            return Err(PruneError::ZeroTarget(lp.layer_id.clone()));
        }
        let keep: Vec<usize> = (0..unit.channels)
            .filter(|c| lp.removed.binary_search(c).is_err())
            .collect();
        out.push((unit.clone(), keep));
    }
    Ok(out)
}

/// Build the pruned graph. The input graph is never modified.
pub fn apply_plan(graph: &ModelGraph, plan: &PrunePlan) -> Result<ModelGraph> {
    let kept = kept_channels(graph, plan)?;
    let mut layers = graph.layers().to_vec();
    for (unit, keep) in &kept {
        if keep.len() == unit.channels {
            continue;
        }
        for &p in &unit.producers {
            let layer = &mut layers[p];
            layer.weights = layer.weights.as_ref().map(|w| w.select_axis(0, keep));
            layer.bias = layer.bias.as_ref().map(|b| b.select_axis(0, keep));
            match &mut layer.kind {
                LayerKind::Conv { out_channels, .. }
                | LayerKind::ProjectionShortcut { out_channels, .. } => *out_channels = keep.len(),
                _ => unreachable!("producers are convolutions"),
            }
        }
        for consumer in &unit.consumers {
            match *consumer {
                Consumer::Conv { layer } => {
                    let l = &mut layers[layer];
                    l.weights = l.weights.as_ref().map(|w| w.select_axis(1, keep));
                }
                Consumer::Dense { layer, block } => {
                    let cols: Vec<usize> =
                        keep.iter().flat_map(|&c| c * block..(c + 1) * block).collect();
                    let l = &mut layers[layer];
                    l.weights = l.weights.as_ref().map(|w| w.select_axis(1, &cols));
                }
            }
        }
    }
    Ok(graph.with_layers(layers)?)
}

/// Unpruned copy of `graph` whose consumers ignore the planned channels:
/// their input slices for removed kernels are zeroed.
pub fn mask_plan(graph: &ModelGraph, plan: &PrunePlan) -> Result<ModelGraph> {
    let kept = kept_channels(graph, plan)?;
    let mut layers = graph.layers().to_vec();
    for (unit, keep) in &kept {
        let removed: Vec<usize> = (0..unit.channels).filter(|c| !keep.contains(c)).collect();
        for consumer in &unit.consumers {
            let (layer, block, conv) = match *consumer {
                Consumer::Conv { layer } => (layer, 1, true),
                Consumer::Dense { layer, block } => (layer, block, false),
            };
            let w = layers[layer].weights.as_mut().expect("consumer has weights");
            let shape = w.shape().to_vec();
            let data = w.data_mut();
            if conv {
                let (c_in, plane) = (shape[1], shape[2] * shape[3]);
                for o in 0..shape[0] {
                    for &c in &removed {
                        let start = (o * c_in + c) * plane;
                        data[start..start + plane].fill(0.0);
                    }
                }
            } else {
                let cols = shape[1];
                for o in 0..shape[0] {
                    for &c in &removed {
                        data[o * cols + c * block..o * cols + (c + 1) * block].fill(0.0);
                    }
                }
            }
        }
    }
    Ok(graph.with_layers(layers)?)
}

/// Largest absolute logit difference between the pruned graph and the masked oracle.
pub fn verify_plan(graph: &ModelGraph, pruned: &ModelGraph, plan: &PrunePlan, probe: &Tensor) -> Result<f32> {
    let masked = mask_plan(graph, plan)?;
    let a = pruned.forward(probe, false)?.logits;
    let b = masked.forward(probe, false)?.logits;
    Ok(a.max_abs_diff(&b))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer_id: String,
    pub before: usize,
    pub kept: usize,
    pub removed: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanReport {
    pub layers: Vec<LayerReport>,
    pub params_before: usize,
    pub params_after: usize,
    /// Parameter blob sizes in bytes (f32).
    pub bytes_before: u64,
    pub bytes_after: u64,
    /// `params_after / params_before`.
    pub ratio: f64,
}

pub fn plan_report(plan: &PrunePlan, before: &ModelGraph, after: &ModelGraph) -> PlanReport {
    let (pb, pa) = (before.param_count(), after.param_count());
    PlanReport {
        layers: plan
            .layers
            .iter()
            .map(|l| LayerReport {
                layer_id: l.layer_id.clone(),
                before: l.before,
                kept: l.keep,
                removed: l.removed.len(),
            })
            .collect(),
        params_before: pb,
        params_after: pa,
        bytes_before: 4 * pb as u64,
        bytes_after: 4 * pa as u64,
        ratio: if pb == 0 { 1.0 } else { pa as f64 / pb as f64 },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::zoo::{self, Head, ResStage};

    #[test]
    fn rank_examples() {
        assert_eq!(rank_kernels(&[0.5, 0.1, 0.9]), vec![1, 0, 2]);
        assert_eq!(rank_kernels(&[0.3, 0.3, 0.7])[0], 0);
        let s = [0.4, 0.2, 0.9, 0.2];
        let scaled: Vec<f64> = s.iter().map(|v| v * 10.0).collect();
        assert_eq!(rank_kernels(&s), rank_kernels(&scaled));
    }

    #[test]
    fn criterion_names_round_trip() {
        for name in ["kernel-l1", "fm-layerwise", "fm-l1", "fm-l2", "fm-linf", "fm-ln:3"] {
            let c: Criterion = name.parse().unwrap();
            assert_eq!(c.to_string(), name);
        }
        assert!("fm-l0".parse::<Criterion>().is_err());
        assert!("weights".parse::<Criterion>().is_err());
    }

    fn small_vgg() -> ModelGraph {
        zoo::vgg([1, 8, 8], &[vec![4, 3], vec![5]], Head::Gap, 3, 2).unwrap()
    }

    #[test]
    fn full_targets_give_empty_plan() {
        let g = small_vgg();
        let targets = fraction_targets(&g, 1.0);
        let plan = build_plan(&g, &KernelScores::kernel_l1(&g), &targets).unwrap();
        assert!(plan.is_empty());
        assert!(plan.successors.is_empty());
        let after = apply_plan(&g, &plan).unwrap();
        assert_eq!(after, g);
        assert_eq!(plan_report(&plan, &g, &after).ratio, 1.0);
    }

    #[test]
    fn table1_round1_on_scaled_vgg16() {
        let blocks: Vec<Vec<usize>> = VGG16_KEEP_ROUNDS
            .iter()
            .zip(zoo::VGG16_BLOCKS)
            .map(|(r, b)| vec![r[0].div_ceil(8); b.len()])
            .collect();
        let g = zoo::vgg([1, 32, 32], &blocks, Head::Gap, 4, 0).unwrap();
        let mut targets = Targets::new();
        for (bi, (rounds, layers)) in VGG16_KEEP_ROUNDS.iter().zip(zoo::VGG16_BLOCKS).enumerate() {
            for li in 0..layers.len() {
                targets.insert(format!("conv{}_{}", bi + 1, li + 1), rounds[1].div_ceil(8));
            }
        }
        let plan = build_plan(&g, &KernelScores::kernel_l1(&g), &targets).unwrap();
        let removed: Vec<usize> = plan.layers.iter().map(|l| l.removed.len()).collect();
        assert_eq!(removed, [0, 0, 1, 1, 3, 3, 3, 16, 16, 16, 16, 16, 16]);
        let after = apply_plan(&g, &plan).unwrap();
        let kept: Vec<usize> = after.channel_units().iter().map(|u| u.channels).collect();
        assert_eq!(kept, [8, 8, 15, 15, 29, 29, 29, 48, 48, 48, 48, 48, 48]);
    }

    #[test]
    fn coupled_group_prunes_jointly() {
        let stages = [ResStage { out: 3, mid: 2, blocks: 2, stride: 1 }];
        let g = zoo::resnet([1, 6, 6], 2, &stages, 2, 0).unwrap();
        let unit = g.unit_of("s1b2_conv3").unwrap();
        assert!(unit.is_coupled());
        let mut scores = KernelScores::kernel_l1(&g);
        scores.layers.insert(unit.id.clone(), vec![0.2, 0.9, 0.4]);
        let targets = Targets::from([("s1b2_conv3".to_string(), 2)]);
        let plan = build_plan(&g, &scores, &targets).unwrap();
        let lp = plan.layers.iter().find(|l| l.layer_id == unit.id).unwrap();
        assert_eq!(lp.removed, vec![0]);
        let after = apply_plan(&g, &plan).unwrap();
        for m in unit.member_ids(&g) {
            let l = after.layer(after.layer_index(&m).unwrap());
            assert_eq!(l.weights.as_ref().unwrap().shape()[0], 2, "{m}");
        }
        let conflict = Targets::from([("s1b1_conv3".to_string(), 2), ("s1b2_conv3".to_string(), 1)]);
        assert!(matches!(
            build_plan(&g, &scores, &conflict),
            Err(PruneError::ConflictingTargets { .. })
        ));
    }

    #[test]
    fn fig1_shape_arithmetic() {
        let g = zoo::vgg([2, 6, 6], &[vec![4, 5]], Head::Gap, 2, 1).unwrap();
        let plan = PrunePlan {
            layers: vec![
                LayerPlan {
                    layer_id: "conv1_1".into(),
                    members: vec!["conv1_1".into()],
                    before: 4,
                    keep: 3,
                    removed: vec![2],
                },
            ],
            successors: vec![],
        };
        let after = apply_plan(&g, &plan).unwrap();
        let w1 = after.layer(after.layer_index("conv1_1").unwrap()).weights.as_ref().unwrap();
        let w2 = after.layer(after.layer_index("conv1_2").unwrap()).weights.as_ref().unwrap();
        assert_eq!(w1.shape(), [3, 2, 3, 3]);
        assert_eq!(w2.shape(), [5, 3, 3, 3]);
    }

    #[test]
    fn invalid_targets_rejected_and_graph_untouched() {
        let g = small_vgg();
        let copy = g.clone();
        let s = KernelScores::kernel_l1(&g);
        let zero = Targets::from([("conv1_1".to_string(), 0)]);
        assert!(matches!(build_plan(&g, &s, &zero), Err(PruneError::ZeroTarget(_))));
        let big = Targets::from([("conv1_1".to_string(), 5)]);
        assert!(matches!(build_plan(&g, &s, &big), Err(PruneError::TargetTooLarge { .. })));
        let mut stale = s.clone();
        stale.layers.insert("conv1_2".into(), vec![1.0; 2]);
        assert!(matches!(
            build_plan(&g, &stale, &Targets::new()),
            Err(PruneError::StaleScores { .. })
        ));
        let mut plan = build_plan(&g, &s, &fraction_targets(&g, 0.5)).unwrap();
        plan.layers[0].removed = vec![3, 1];
        assert!(apply_plan(&g, &plan).is_err());
        assert_eq!(g, copy);
    }

    #[test]
    fn halving_conv_chain_quarters_interior_params() {
        let g = zoo::vgg([4, 8, 8], &[vec![8, 8, 8]], Head::Gap, 2, 0).unwrap();
        let plan = build_plan(&g, &KernelScores::kernel_l1(&g), &fraction_targets(&g, 0.5)).unwrap();
        let after = apply_plan(&g, &plan).unwrap();
        let i = g.layer_index("conv1_2").unwrap();
        let ratio = after.layer(i).param_count() as f64 / g.layer(i).param_count() as f64;
        assert!((ratio - 0.25).abs() < 0.01, "{ratio}");
        let report = plan_report(&plan, &g, &after);
        assert!(report.params_after < report.params_before);
        let blob = |m: &ModelGraph| {
            let bytes = m.to_bytes();
            let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
            (bytes.len() - 16 - len) as u64
        };
        assert_eq!(report.bytes_before, blob(&g));
        assert_eq!(report.bytes_after, blob(&after));
    }

    #[test]
    fn flatten_head_drops_column_blocks() {
        let g = zoo::vgg([1, 8, 8], &[vec![3]], Head::Fc(vec![4]), 2, 0).unwrap();
        let plan = build_plan(
            &g,
            &KernelScores::kernel_l1(&g),
            &Targets::from([("conv1_1".to_string(), 2)]),
        )
        .unwrap();
        assert_eq!(plan.successors[0].axis, SliceAxis::DenseColumns);
        assert_eq!(plan.successors[0].removed.len(), 16);
        let after = apply_plan(&g, &plan).unwrap();
        let fc6 = after.layer(after.layer_index("fc6").unwrap());
        assert_eq!(fc6.weights.as_ref().unwrap().shape(), [4, 32]);
        let probe = Tensor::from_fn(&[3, 1, 8, 8], |i| (i as f32 * 0.13).sin().abs());
        assert!(verify_plan(&g, &after, &plan, &probe).unwrap() < 1e-5);
    }

    #[test]
    fn plan_json_round_trip() {
        let g = small_vgg();
        let plan = build_plan(&g, &KernelScores::kernel_l1(&g), &fraction_targets(&g, 0.6)).unwrap();
        let json = serde_json::to_string(&plan).unwrap();
        assert_eq!(serde_json::from_str::<PrunePlan>(&json).unwrap(), plan);
    }
}
