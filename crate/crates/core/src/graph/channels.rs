//! Channel-space analysis: which layers produce and consume each channel axis.
//!
//! Every rank-4 value belongs to a channel space. Convolutions open a new
//! space; element-wise layers, pooling and GAP stay in their input's space;
//! a residual add merges the spaces of its operands. A space whose producers
//! are all convolutions is a prunable unit, and a unit with several
//! producers is a coupling group.

use super::{CouplingGroup, LayerKind, ModelGraph, Src};

/// A layer reading channels of a unit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Consumer {
    /// Convolution input-channel axis (weights dim 1).
    Conv { layer: usize },
    /// Dense input columns; channel `c` owns columns `c*block .. (c+1)*block`.
    Dense { layer: usize, block: usize },
}

/// A set of channels that must be pruned as one.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChannelUnit {
    /// Id of the first producing layer; used as the unit's key in plans and stats.
    pub id: String,
    pub producers: Vec<usize>,
    pub consumers: Vec<Consumer>,
    /// Layer whose output carries the unit's post-activation feature maps.
    pub tap: usize,
    pub channels: usize,
}

impl ChannelUnit {
    pub fn is_coupled(&self) -> bool {
        self.producers.len() > 1
    }

    pub fn member_ids(&self, graph: &ModelGraph) -> Vec<String> {
        self.producers
            .iter()
            .map(|&i| graph.layer(i).id.clone())
            .collect()
    }
}

#[derive(Default)]
struct Space {
    producers: Vec<usize>,
    consumers: Vec<Consumer>,
    /// Produced by something other than a convolution (graph input, dense).
    foreign: bool,
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

impl ModelGraph {
    /// Prunable channel units in order of their first producer.
    pub fn channel_units(&self) -> Vec<ChannelUnit> {
        let n = self.layers.len();
        let mut spaces: Vec<Space> = vec![Space {
            foreign: true,
            ..Default::default()
        }];
        let mut parent = vec![0usize];
        // (space, block) per layer output; the graph input is space 0.
        let mut view: Vec<(usize, usize)> = Vec::with_capacity(n);
        let view_of = |view: &[(usize, usize)], s: Src| match s {
            Src::Input => (0, 1),
            Src::Layer(j) => view[j],
        };
        let fresh = |spaces: &mut Vec<Space>, parent: &mut Vec<usize>, foreign: bool| {
            spaces.push(Space {
                foreign,
                ..Default::default()
            });
            parent.push(parent.len());
            spaces.len() - 1
        };

        for (i, layer) in self.layers.iter().enumerate() {
            let (in_space, in_block) = view_of(&view, layer.inputs[0]);
            let in_space = find(&mut parent, in_space);
            let v = match layer.kind {
                LayerKind::Conv { .. } | LayerKind::ProjectionShortcut { .. } => {
                    spaces[in_space].consumers.push(Consumer::Conv { layer: i });
                    let s = fresh(&mut spaces, &mut parent, false);
                    spaces[s].producers.push(i);
                    (s, 1)
                }
                LayerKind::Dense { .. } => {
                    spaces[in_space].consumers.push(Consumer::Dense {
                        layer: i,
                        block: in_block,
                    });
                    (fresh(&mut spaces, &mut parent, true), 1)
                }
                LayerKind::Flatten => {
                    let shape = match layer.inputs[0] {
                        Src::Input => {
                            let [_, h, w] = self.input_shape;
                            vec![1, 0, h, w]
                        }
                        Src::Layer(j) => self.shapes[j].clone(),
                    };
                    (in_space, shape[2] * shape[3])
                }
                LayerKind::ResidualAdd => {
                    let (other, _) = view_of(&view, layer.inputs[1]);
                    let (a, b) = (find(&mut parent, in_space), find(&mut parent, other));
                    if a != b {
                        let (keep, gone) = (a.min(b), a.max(b));
                        parent[gone] = keep;
                        let moved = std::mem::take(&mut spaces[gone]);
                        spaces[keep].producers.extend(moved.producers);
                        spaces[keep].consumers.extend(moved.consumers);
                        spaces[keep].foreign |= moved.foreign;
                    }
                    (in_space, 1)
                }
                LayerKind::Relu | LayerKind::MaxPool { .. } | LayerKind::Gap | LayerKind::Softmax => {
                    (in_space, in_block)
                }
            };
            view.push(v);
        }

        let roots: Vec<usize> = (0..n).map(|i| find(&mut parent, view[i].0)).collect();
        let mut units = Vec::new();
        for root in 0..spaces.len() {
            if find(&mut parent, root) != root {
                continue;
            }
            let space = &spaces[root];
            if space.foreign || space.producers.is_empty() {
                continue;
            }
            let mut producers = space.producers.clone();
            producers.sort_unstable();
            let mut consumers = space.consumers.clone();
            consumers.sort_by_key(|c| match *c {
                Consumer::Conv { layer } | Consumer::Dense { layer, .. } => layer,
            });
            let members: Vec<usize> = (0..n).filter(|&i| roots[i] == root).collect();
            let tap = members
                .iter()
                .rev()
                .find(|&&i| self.layers[i].kind == LayerKind::Relu)
                .or_else(|| {
                    members.iter().rev().find(|&&i| {
                        matches!(
                            self.layers[i].kind,
                            LayerKind::ResidualAdd
                                | LayerKind::Conv { .. }
                                | LayerKind::ProjectionShortcut { .. }
                        )
                    })
                })
                .copied()
                .expect("unit has a producer");
            units.push(ChannelUnit {
                id: self.layers[producers[0]].id.clone(),
                channels: self.shapes[producers[0]][1],
                producers,
                consumers,
                tap,
            });
        }
        units.sort_by_key(|u| u.producers[0]);
        units
    }

    pub(super) fn derive_coupling_groups(&self) -> Vec<CouplingGroup> {
        self.channel_units()
            .iter()
            .filter(|u| u.is_coupled())
            .map(|u| CouplingGroup {
                members: u.member_ids(self),
            })
            .collect()
    }

    /// The unit containing the layer `id` as a producer.
    pub fn unit_of(&self, id: &str) -> Option<ChannelUnit> {
        let idx = self.layer_index(id)?;
        self.channel_units()
            .into_iter()
            .find(|u| u.producers.contains(&idx))
    }
}

#[cfg(test)]
mod tests {
    use super::super::zoo::{self, Head, ResStage};
    use super::*;

    #[test]
    fn vgg_units_are_single_convs() {
        let g = zoo::vgg([1, 16, 16], &[vec![4, 4], vec![8]], Head::Gap, 3, 0).unwrap();
        let units = g.channel_units();
        let ids: Vec<&str> = units.iter().map(|u| u.id.as_str()).collect();
        assert_eq!(ids, ["conv1_1", "conv1_2", "conv2_1"]);
        for u in &units {
            assert_eq!(g.layer(u.tap).kind, LayerKind::Relu);
            assert!(!u.is_coupled());
        }
        let last = units.last().unwrap();
        let fc = g.layer_index("fc").unwrap();
        assert_eq!(last.consumers, vec![Consumer::Dense { layer: fc, block: 1 }]);
        assert!(g.coupling_groups().is_empty());
    }

    #[test]
    fn flatten_consumer_uses_spatial_block() {
        let g = zoo::vgg([1, 8, 8], &[vec![2]], Head::Fc(vec![5]), 2, 0).unwrap();
        let unit = &g.channel_units()[0];
        let fc6 = g.layer_index("fc6").unwrap();
        assert_eq!(unit.consumers, vec![Consumer::Dense { layer: fc6, block: 16 }]);
    }

    #[test]
    fn residual_stage_forms_one_group() {
        let stages = [
            ResStage { out: 8, mid: 4, blocks: 2, stride: 1 },
            ResStage { out: 12, mid: 4, blocks: 2, stride: 2 },
        ];
        let g = zoo::resnet([1, 16, 16], 4, &stages, 3, 0).unwrap();
        let groups = g.coupling_groups();
        assert_eq!(groups.len(), 2);
        assert_eq!(groups[0].members, vec!["s1b1_proj", "s1b1_conv3", "s1b2_conv3"]);
        assert_eq!(groups[1].members, vec!["s2b1_proj", "s2b1_conv3", "s2b2_conv3"]);
        let unit = g.unit_of("s1b2_conv3").unwrap();
        assert_eq!(g.layer(unit.tap).id, "s1b2_relu");
        // first two convs of each block are independent units
        assert!(!g.unit_of("s1b1_conv1").unwrap().is_coupled());
        assert!(!g.unit_of("s2b2_conv2").unwrap().is_coupled());
    }
}
