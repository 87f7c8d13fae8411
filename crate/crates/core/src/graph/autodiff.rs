//! Layer-by-layer reverse-mode differentiation over a recorded forward pass.

use super::{GraphError, LayerKind, ModelGraph, Result, Src};
use crate::tensor::{self, PoolIndices, Tensor, TensorError};

/// Forward-pass record needed to run [`ModelGraph::backward`].
#[derive(Clone, Debug)]
pub struct Tape {
    input: Tensor,
    values: Vec<Tensor>,
    pools: Vec<Option<PoolIndices>>,
}

impl Tape {
    pub fn logits(&self) -> &Tensor {
        self.values.last().expect("non-empty graph")
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    pub weights: Tensor,
    pub bias: Tensor,
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

impl ModelGraph {
    pub fn forward_tape(&self, batch: &Tensor) -> Result<Tape> {
        self.check_batch(batch)?;
        let mut values: Vec<Tensor> = Vec::with_capacity(self.layers.len());
        let mut pools = Vec::with_capacity(self.layers.len());
        for i in 0..self.layers.len() {
            let ins: Vec<&Tensor> = self.layers[i]
                .inputs
                .iter()
                .map(|s| match *s {
                    Src::Input => batch,
                    Src::Layer(j) => &values[j],
                })
                .collect();
            let (out, pool) = self.apply_layer(i, &ins)?;
            values.push(out);
            pools.push(pool);
        }
        Ok(Tape {
            input: batch.clone(),
            values,
            pools,
        })
    }

    /// Parameter gradients for every layer flagged in `trainable`, given the
    /// gradient of the loss with respect to the logits.
    ///
    /// Propagation stops below the earliest trainable layer.
    pub fn backward(
        &self,
        tape: &Tape,
        grad_logits: &Tensor,
        trainable: &[bool],
    ) -> Result<Vec<Option<ParamGrads>>> {
        let n = self.layers.len();
        let mut out: Vec<Option<ParamGrads>> = vec![None; n];
        let Some(first) = trainable.iter().position(|&t| t) else {
            return Ok(out);
        };
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[n - 1] = Some(grad_logits.clone());
        let value = |src: Src| match src {
            Src::Input => &tape.input,
            Src::Layer(j) => &tape.values[j],
        };
        let needs = |src: Src| matches!(src, Src::Layer(j) if j >= first);

        for i in (first..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let layer = &self.layers[i];
            let wrap = |e: TensorError| GraphError::Tensor {
                layer: layer.id.clone(),
                source: e,
            };
            let src = layer.inputs[0];
            let x = value(src);
            let mut input_grads: Vec<(Src, Tensor)> = Vec::with_capacity(2);
            match layer.kind {
                LayerKind::Conv { .. } | LayerKind::ProjectionShortcut { .. } => {
                    let (_, stride, pad) = layer.kind.conv_geometry().expect("conv");
                    let w = layer.weights.as_ref().expect("validated");
                    let cg = tensor::conv2d_backward_with(&g, x, w, stride, pad, needs(src))
                        .map_err(wrap)?;
                    if trainable[i] {
                        out[i] = Some(ParamGrads {
                            weights: cg.weights,
                            bias: cg.bias,
                        });
                    }
                    if let Some(gi) = cg.input {
                        input_grads.push((src, gi));
                    }
                }
                LayerKind::Dense { .. } => {
                    let w = layer.weights.as_ref().expect("validated");
                    let dg = tensor::dense_backward(&g, x, w).map_err(wrap)?;
                    if trainable[i] {
                        out[i] = Some(ParamGrads {
                            weights: dg.weights,
                            bias: dg.bias,
                        });
                    }
                    input_grads.push((src, dg.input));
                }
                LayerKind::Relu => {
                    input_grads.push((src, tensor::relu_backward(&g, x).map_err(wrap)?));
                }
                LayerKind::MaxPool { .. } => {
                    let idx = tape.pools[i].as_ref().expect("pool indices recorded");
                    input_grads.push((src, tensor::maxpool2d_backward(&g, idx).map_err(wrap)?));
                }
                LayerKind::Gap => {
                    let [_, _, h, w] = x.dims4("gap_backward").map_err(wrap)?;
                    input_grads.push((src, tensor::gap_backward(&g, h, w).map_err(wrap)?));
                }
                LayerKind::Flatten => {
                    input_grads.push((src, g.reshape(x.shape().to_vec()).map_err(wrap)?));
                }
                LayerKind::Softmax => input_grads.push((src, g)),
                LayerKind::ResidualAdd => {
                    input_grads.push((layer.inputs[1], g.clone()));
                    input_grads.push((src, g));
                }
            }
            for (s, gi) in input_grads {
                if let Src::Layer(j) = s {
                    if j >= first {
                        accumulate(&mut grads[j], gi);
                    }
                }
            }
        }
        Ok(out)
    }
}
