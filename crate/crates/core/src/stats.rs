//! Feature-map importance statistics.
//!
//! For every prunable channel unit the score of kernel `k` is the mean, over
//! `N` sampled training inputs, of the Ln-norm of its post-activation feature
//! map. Norms are taken per sample first and then averaged in f64.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{sample_subset, DataError, Dataset};
use crate::graph::{ChannelUnit, GraphError, LayerKind, ModelGraph};
use crate::tensor::Tensor;

/// Samples pushed through the graph per forward pass while collecting stats.
pub const STATS_BATCH: usize = 25;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("requested {requested} samples but the dataset holds {available}")]
    SampleCount { requested: usize, available: usize },
    #[error("`{0}` is not a prunable convolution layer")]
    UnknownLayer(String),
    #[error("invalid norm order `{0}`")]
    InvalidOrder(String),
    #[error("stats for `{layer}` cover {actual} kernels but the layer has {expected}")]
    Stale {
        layer: String,
        expected: usize,
        actual: usize,
    },
    #[error("no stats for layer `{0}`")]
    Missing(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = StatsError> = std::result::Result<T, E>;

/// Order `n` of the norm applied to a flattened feature map.
///
/// Text form: `l1`, `l2`, `linf`, or `ln:<n>` for a general `n >= 1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum NormOrder {
    L1,
    L2,
    Ln(f64),
    LInf,
}

impl NormOrder {
    pub fn ln(n: f64) -> Result<Self> {
        if n.is_finite() && n >= 1.0 {
            Ok(NormOrder::Ln(n))
        } else {
            Err(StatsError::InvalidOrder(n.to_string()))
        }
    }
}

impl fmt::Display for NormOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NormOrder::L1 => f.write_str("l1"),
            NormOrder::L2 => f.write_str("l2"),
            NormOrder::LInf => f.write_str("linf"),
            NormOrder::Ln(n) => write!(f, "ln:{n}"),
        }
    }
}

impl FromStr for NormOrder {
    type Err = StatsError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(NormOrder::L1),
            "l2" => Ok(NormOrder::L2),
            "linf" | "l_inf" | "inf" => Ok(NormOrder::LInf),
            other => {
                let n = other
                    .strip_prefix("ln:")
                    .and_then(|v| v.parse::<f64>().ok())
                    .ok_or_else(|| StatsError::InvalidOrder(s.to_string()))?;
                NormOrder::ln(n).map_err(|_| StatsError::InvalidOrder(s.to_string()))
            }
        }
    }
}

impl TryFrom<String> for NormOrder {
    type Error = StatsError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<NormOrder> for String {
    fn from(o: NormOrder) -> String {
        o.to_string()
    }
}

/// Norm of a flattened map, accumulated in f64.
pub fn feature_norm(map: &[f32], order: NormOrder) -> f64 {
    match order {
        NormOrder::L1 => map.iter().map(|&a| (a as f64).abs()).sum(),
        NormOrder::L2 => map.iter().map(|&a| (a as f64) * (a as f64)).sum::<f64>().sqrt(),
        NormOrder::LInf => map.iter().fold(0.0f64, |m, &a| m.max((a as f64).abs())),
        NormOrder::Ln(n) => {
            let max = map.iter().fold(0.0f64, |m, &a| m.max((a as f64).abs()));
            if max == 0.0 {
                return 0.0;
            }
            // scale by the max element so large n cannot overflow
            let s: f64 = map.iter().map(|&a| ((a as f64).abs() / max).powf(n)).sum();
            max * s.powf(1.0 / n)
        }
    }
}

/// How orders are assigned to units that have no explicit override.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SchedulePolicy {
    /// L1 on the first conv block, L2 in the middle, L-infinity on the last unit.
    LayerWise,
    Uniform { order: NormOrder },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormSchedule {
    pub policy: SchedulePolicy,
    /// Per-layer orders keyed by any producer id of a unit.
    #[serde(default)]
    pub overrides: BTreeMap<String, NormOrder>,
}

impl Default for NormSchedule {
    fn default() -> Self {
        Self::layer_wise()
    }
}

impl NormSchedule {
    pub fn layer_wise() -> Self {
        Self {
            policy: SchedulePolicy::LayerWise,
            overrides: BTreeMap::new(),
        }
    }

    pub fn uniform(order: NormOrder) -> Self {
        Self {
            policy: SchedulePolicy::Uniform { order },
            overrides: BTreeMap::new(),
        }
    }

    /// One order per channel unit of `graph`, in unit order.
    pub fn resolve(&self, graph: &ModelGraph) -> Result<Vec<(ChannelUnit, NormOrder)>> {
        let units = graph.channel_units();
        for key in self.overrides.keys() {
            let idx = graph
                .layer_index(key)
                .ok_or_else(|| StatsError::UnknownLayer(key.clone()))?;
            if !units.iter().any(|u| u.producers.contains(&idx)) {
                return Err(StatsError::UnknownLayer(key.clone()));
            }
        }
        let first_block = first_block_end(graph);
        let last = units.len().saturating_sub(1);
        Ok(units
            .into_iter()
            .enumerate()
            .map(|(ui, unit)| {
                let explicit = unit
                    .member_ids(graph)
                    .iter()
                    .find_map(|id| self.overrides.get(id).copied());
                let order = explicit.unwrap_or(match &self.policy {
                    SchedulePolicy::Uniform { order } => *order,
                    SchedulePolicy::LayerWise if ui == last => NormOrder::LInf,
                    SchedulePolicy::LayerWise if unit.producers.iter().all(|&p| p < first_block) => {
                        NormOrder::L1
                    }
                    SchedulePolicy::LayerWise => NormOrder::L2,
                });
                (unit, order)
            })
            .collect())
    }
}

/// Index of the first layer that reduces spatial resolution.
fn first_block_end(graph: &ModelGraph) -> usize {
    graph
        .layers()
        .iter()
        .position(|l| match l.kind {
            LayerKind::MaxPool { .. } | LayerKind::Gap | LayerKind::Flatten => true,
            _ => l.kind.conv_geometry().is_some_and(|(_, stride, _)| stride > 1),
        })
        .unwrap_or(graph.layers().len())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNorms {
    /// Unit id (first producer).
    pub layer_id: String,
    pub order: NormOrder,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub layers: Vec<LayerNorms>,
    pub sample_count: usize,
    pub schedule: NormSchedule,
    pub seed: u64,
}

impl NormStats {
    pub fn get(&self, layer_id: &str) -> Option<&LayerNorms> {
        self.layers.iter().find(|l| l.layer_id == layer_id)
    }

    /// Fails unless every unit of `graph` has stats of matching length.
    pub fn check_fresh(&self, graph: &ModelGraph) -> Result<()> {
        for unit in graph.channel_units() {
            let got = self
                .get(&unit.id)
                .ok_or_else(|| StatsError::Missing(unit.id.clone()))?;
            if got.values.len() != unit.channels {
                return Err(StatsError::Stale {
                    layer: unit.id,
                    expected: unit.channels,
                    actual: got.values.len(),
                });
            }
        }
        Ok(())
    }

    /// CSV with header `layer_id,kernel_index,norm_order,value,sample_count`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer_id,kernel_index,norm_order,value,sample_count\n");
        for layer in &self.layers {
            for (k, v) in layer.values.iter().enumerate() {
                out.push_str(&format!(
                    "{},{k},{},{v:e},{}\n",
                    layer.layer_id, layer.order, self.sample_count
                ));
            }
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        crate::graph::write_atomic(path, self.to_csv().as_bytes()).map_err(|source| {
            StatsError::Io {
                path: path.display().to_string(),
                source,
            }
        })
    }
}

/// Average per-sample feature-map norms of `n` samples drawn from `dataset` with `seed`.
pub fn collect_stats(
    graph: &ModelGraph,
    dataset: &Dataset,
    n: usize,
    schedule: &NormSchedule,
    seed: u64,
) -> Result<NormStats> {
    if dataset.is_empty() {
        return Err(StatsError::EmptyDataset);
    }
    if n == 0 || n > dataset.len() {
        return Err(StatsError::SampleCount {
            requested: n,
            available: dataset.len(),
        });
    }
    let plan = schedule.resolve(graph)?;
    let sample = sample_subset(dataset, n, seed)?;
    let mut sums: Vec<Vec<f64>> = plan.iter().map(|(u, _)| vec![0.0; u.channels]).collect();
    let order: Vec<usize> = (0..n).collect();
    for chunk in order.chunks(STATS_BATCH) {
        let (batch, _) = sample.batch(chunk);
        let acts = graph
            .forward(&batch, true)?
            .activations
            .expect("retained activations");
        for ((unit, norm), sum) in plan.iter().zip(&mut sums) {
            accumulate(&acts[unit.tap], *norm, sum);
        }
    }
    let layers = plan
        .into_iter()
        .zip(sums)
        .map(|((unit, order), sum)| LayerNorms {
            layer_id: unit.id,
            order,
            values: sum.into_iter().map(|s| s / n as f64).collect(),
        })
        .collect();
    Ok(NormStats {
        layers,
        sample_count: n,
        schedule: schedule.clone(),
        seed,
    })
}

/// Add each sample's per-channel norm to `sum`, samples in batch order.
fn accumulate(act: &Tensor, order: NormOrder, sum: &mut [f64]) {
    let shape = act.shape();
    let (batch, channels) = (shape[0], shape[1]);
    let plane: usize = shape[2..].iter().product();
    for s in 0..batch {
        for (c, acc) in sum.iter_mut().enumerate().take(channels) {
            let start = (s * channels + c) * plane;
            *acc += feature_norm(&act.data()[start..start + plane], order);
        }
    }
}

/// Per-kernel sum of absolute weights (bias excluded).
pub fn kernel_l1(weights: &Tensor) -> Vec<f64> {
    let d = weights.shape().first().copied().unwrap_or(0);
    if d == 0 {
        return Vec::new();
    }
    let per = weights.len() / d;
    weights
        .data()
        .chunks(per.max(1))
        .map(|k| k.iter().map(|&w| (w as f64).abs()).sum())
        .collect()
}

/// Kernel-L1 of a unit: summed over the unit's producers.
pub fn unit_kernel_l1(graph: &ModelGraph, unit: &ChannelUnit) -> Vec<f64> {
    let mut total = vec![0.0; unit.channels];
    for &p in &unit.producers {
        let w = graph.layer(p).weights.as_ref().expect("producer has weights");
        for (t, v) in total.iter_mut().zip(kernel_l1(w)) {
            *t += v;
        }
    }
    total
}

/// Ranks with ties sharing their mean rank (1-based).
fn fractional_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation; `None` for fewer than two values or a constant input.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let (ra, rb) = (fractional_ranks(a), fractional_ranks(b));
    let mean = (a.len() as f64 + 1.0) / 2.0;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        let (dx, dy) = (x - mean, y - mean);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some(sab / (saa * sbb).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub layer_id: String,
    pub kernels: usize,
    pub order: NormOrder,
    /// Spearman rho between feature-map and kernel-L1 scores.
    pub rho: Option<f64>,
}

/// Rank agreement between feature-map stats and kernel-L1 for every unit.
pub fn correlation_report(stats: &NormStats, graph: &ModelGraph) -> Result<Vec<CorrelationRow>> {
    stats.check_fresh(graph)?;
    Ok(graph
        .channel_units()
        .iter()
        .map(|unit| {
            let fm = stats.get(&unit.id).expect("checked fresh");
            CorrelationRow {
                layer_id: unit.id.clone(),
                kernels: unit.channels,
                order: fm.order,
                rho: spearman(&fm.values, &unit_kernel_l1(graph, unit)),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use crate::graph::zoo::{self, Head, ResStage};

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-12 * (1.0 + a.abs().max(b.abs()))
    }

    #[test]
    fn norm_examples() {
        for o in [NormOrder::L1, NormOrder::L2, NormOrder::LInf, NormOrder::Ln(3.0)] {
            assert_eq!(feature_norm(&[0.0; 6], o), 0.0);
        }
        assert!(close(feature_norm(&[3.0, -4.0], NormOrder::L2), 5.0));
        assert_eq!(feature_norm(&[1.0, 1.0], NormOrder::L1), 2.0);
        assert!(close(feature_norm(&[1.0, 1.0], NormOrder::L2), 2f64.sqrt()));
        assert_eq!(feature_norm(&[1.0, 1.0], NormOrder::LInf), 1.0);
        assert!(close(feature_norm(&[3.0, -4.0], NormOrder::Ln(2.0)), 5.0));
        assert!(close(feature_norm(&[1.0, 2.0], NormOrder::Ln(3.0)), 9f64.cbrt()));
    }

    #[test]
    fn order_text_round_trip() {
        for o in [NormOrder::L1, NormOrder::L2, NormOrder::LInf, NormOrder::Ln(2.5)] {
            assert_eq!(o.to_string().parse::<NormOrder>().unwrap(), o);
            let json = serde_json::to_string(&o).unwrap();
            assert_eq!(serde_json::from_str::<NormOrder>(&json).unwrap(), o);
        }
        assert!("ln:0.5".parse::<NormOrder>().is_err());
        assert!("l7".parse::<NormOrder>().is_err());
    }

    #[test]
    fn layer_wise_schedule_on_vgg16_layout() {
        let blocks: Vec<Vec<usize>> = zoo::VGG16_BLOCKS.iter().map(|b| vec![2; b.len()]).collect();
        let g = zoo::vgg([1, 32, 32], &blocks, Head::Gap, 3, 0).unwrap();
        let resolved = NormSchedule::layer_wise().resolve(&g).unwrap();
        let orders: Vec<(String, NormOrder)> =
            resolved.into_iter().map(|(u, o)| (u.id, o)).collect();
        assert_eq!(orders[0], ("conv1_1".into(), NormOrder::L1));
        assert_eq!(orders[1], ("conv1_2".into(), NormOrder::L1));
        for (id, o) in &orders[2..12] {
            assert_eq!(*o, NormOrder::L2, "{id}");
        }
        assert_eq!(orders[12], ("conv5_3".into(), NormOrder::LInf));
    }

    #[test]
    fn overrides_apply_and_unknown_ids_fail() {
        let g = zoo::vgg([1, 8, 8], &[vec![2, 2], vec![3]], Head::Gap, 2, 0).unwrap();
        let mut s = NormSchedule::uniform(NormOrder::L2);
        s.overrides.insert("conv1_2".into(), NormOrder::Ln(3.0));
        let r = s.resolve(&g).unwrap();
        assert_eq!(r[1].1, NormOrder::Ln(3.0));
        assert_eq!(r[0].1, NormOrder::L2);
        s.overrides.insert("fc".into(), NormOrder::L1);
        assert!(matches!(s.resolve(&g), Err(StatsError::UnknownLayer(_))));
    }

    fn tiny_dataset(n: usize, shape: [usize; 3], seed: u64) -> Dataset {
        use rand::Rng;
        let mut rng = zoo::seeded(seed);
        let [c, h, w] = shape;
        let images = Tensor::from_fn(&[n, c, h, w], |_| rng.random_range(0.0..1.0));
        Dataset::new(images, (0..n).map(|i| i % 2).collect(), 2, Split::Train).unwrap()
    }

    #[test]
    fn single_sample_equals_direct_norms() {
        let g = zoo::vgg([1, 8, 8], &[vec![3, 2], vec![4]], Head::Gap, 2, 1).unwrap();
        let ds = tiny_dataset(5, [1, 8, 8], 2);
        let sched = NormSchedule::layer_wise();
        let stats = collect_stats(&g, &ds, 1, &sched, 77).unwrap();
        let picked = sample_subset(&ds, 1, 77).unwrap();
        let acts = g.forward(picked.images(), true).unwrap().activations.unwrap();
        for ((unit, order), layer) in sched.resolve(&g).unwrap().iter().zip(&stats.layers) {
            let a = &acts[unit.tap];
            let plane = a.shape()[2] * a.shape()[3];
            for k in 0..unit.channels {
                let direct = feature_norm(&a.data()[k * plane..(k + 1) * plane], *order);
                assert_eq!(layer.values[k], direct);
            }
        }
    }

    #[test]
    fn dead_kernel_scores_zero() {
        let mut g = zoo::vgg([1, 8, 8], &[vec![3, 3]], Head::Gap, 2, 4).unwrap();
        let conv = g.layer_index("conv1_2").unwrap();
        let (w, b) = g.params_mut(conv).unwrap();
        let per = w.len() / 3;
        w.data_mut()[per..2 * per].fill(0.0);
        b.data_mut()[1] = 0.0;
        let ds = tiny_dataset(12, [1, 8, 8], 5);
        for o in [NormOrder::L1, NormOrder::L2, NormOrder::LInf, NormOrder::Ln(4.0)] {
            let s = collect_stats(&g, &ds, 12, &NormSchedule::uniform(o), 3).unwrap();
            assert_eq!(s.get("conv1_2").unwrap().values[1], 0.0);
            assert!(s.layers.iter().all(|l| l.values.iter().all(|&v| v >= 0.0)));
        }
    }

    #[test]
    fn stats_are_deterministic_and_validate_inputs() {
        let stages = [ResStage { out: 4, mid: 2, blocks: 2, stride: 1 }];
        let g = zoo::resnet([1, 6, 6], 3, &stages, 2, 0).unwrap();
        let ds = tiny_dataset(30, [1, 6, 6], 1);
        let s = NormSchedule::layer_wise();
        let a = collect_stats(&g, &ds, 30, &s, 9).unwrap();
        let b = collect_stats(&g, &ds, 30, &s, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.layers.len(), g.channel_units().len());
        a.check_fresh(&g).unwrap();
        assert!(matches!(
            collect_stats(&g, &ds, 31, &s, 9),
            Err(StatsError::SampleCount { .. })
        ));
        let empty = ds.subset(&[]);
        assert!(matches!(collect_stats(&g, &empty, 1, &s, 9), Err(StatsError::EmptyDataset)));
    }

    #[test]
    fn kernel_l1_examples() {
        assert_eq!(kernel_l1(&Tensor::zeros(&[2, 1, 3, 3])), vec![0.0, 0.0]);
        assert_eq!(kernel_l1(&Tensor::full(&[1, 2, 3, 3], 1.0)), vec![18.0]);
        let w = Tensor::from_fn(&[3, 2, 2, 2], |i| (i as f32 * 0.7).sin());
        let got = kernel_l1(&w);
        for (d, g) in got.iter().enumerate() {
            let mut s = 0.0f64;
            for c in 0..2 {
                for y in 0..2 {
                    for x in 0..2 {
                        s += (w.data()[((d * 2 + c) * 2 + y) * 2 + x] as f64).abs();
                    }
                }
            }
            assert_eq!(*g, s);
        }
    }

    #[test]
    fn spearman_examples() {
        let a = [0.1, 0.5, 0.3, 0.9];
        assert!(close(spearman(&a, &a).unwrap(), 1.0));
        let rev: Vec<f64> = a.iter().map(|v| -v).collect();
        assert!(close(spearman(&a, &rev).unwrap(), -1.0));
        assert_eq!(spearman(&[1.0], &[2.0]), None);
        assert_eq!(spearman(&[1.0, 1.0], &[2.0, 3.0]), None);
    }

    #[test]
    fn csv_has_one_row_per_kernel() {
        let g = zoo::vgg([1, 8, 8], &[vec![3], vec![2]], Head::Gap, 2, 0).unwrap();
        let ds = tiny_dataset(4, [1, 8, 8], 0);
        let s = collect_stats(&g, &ds, 4, &NormSchedule::layer_wise(), 1).unwrap();
        let csv = s.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "layer_id,kernel_index,norm_order,value,sample_count");
        assert_eq!(lines.len(), 1 + 5);
        assert!(lines[1].starts_with("conv1_1,0,l1,"));
        assert!(lines[5].starts_with("conv2_1,1,linf,"));
    }
}
