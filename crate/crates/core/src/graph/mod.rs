//! Typed layer graphs: a chain of layers plus residual skip edges.
//!
//! Layers are stored in topological order; every input reference points at
//! the graph input or an earlier layer, so acyclicity holds by construction.
//! The output of the last layer is the logits tensor `[N, classes]`.

mod autodiff;
mod channels;
mod io;
pub mod zoo;

pub use autodiff::{ParamGrads, Tape};
pub use channels::{ChannelUnit, Consumer};
pub use io::{load_model, save_model, ModelIoError, MAGIC, VERSION};
pub use io::write_atomic;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::tensor::{self, PoolIndices, Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("duplicate layer id `{0}`")]
    DuplicateId(String),
    #[error("layer `{layer}`: {reason}")]
    BadInput { layer: String, reason: String },
    #[error("layer `{layer}`: expected {expected} inputs, found {actual}")]
    Arity {
        layer: String,
        expected: usize,
        actual: usize,
    },
    #[error("layer `{layer}`: {what} expected {expected}, got {actual}")]
    Shape {
        layer: String,
        what: String,
        expected: String,
        actual: String,
    },
    #[error("layer `{layer}`: {source}")]
    Tensor {
        layer: String,
        #[source]
        source: TensorError,
    },
    #[error("unknown layer `{0}`")]
    UnknownLayer(String),
    #[error("unsupported head: {0}")]
    Head(String),
    #[error("graph output must be rank 2 logits, got {0:?}")]
    Output(Vec<usize>),
}

pub type Result<T, E = GraphError> = std::result::Result<T, E>;

/// Operation performed by a layer together with its hyperparameters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum LayerKind {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Relu,
    MaxPool {
        window: usize,
        stride: usize,
    },
    Gap,
    Flatten,
    Dense {
        out_features: usize,
    },
    /// Terminal marker; logits pass through unchanged and the loss applies softmax.
    Softmax,
    ResidualAdd,
    /// 1x1 strided convolution on a residual skip path.
    ProjectionShortcut {
        out_channels: usize,
        stride: usize,
    },
}

impl LayerKind {
    pub fn is_conv(&self) -> bool {
        matches!(self, Self::Conv { .. } | Self::ProjectionShortcut { .. })
    }

    pub fn has_params(&self) -> bool {
        matches!(
            self,
            Self::Conv { .. } | Self::ProjectionShortcut { .. } | Self::Dense { .. }
        )
    }

    /// `(kernel, stride, pad)` for convolution-like layers.
    pub fn conv_geometry(&self) -> Option<(usize, usize, usize)> {
        match *self {
            Self::Conv {
                kernel, stride, pad, ..
            } => Some((kernel, stride, pad)),
            Self::ProjectionShortcut { stride, .. } => Some((1, stride, 0)),
            _ => None,
        }
    }

    fn arity(&self) -> usize {
        match self {
            Self::ResidualAdd => 2,
            _ => 1,
        }
    }
}

/// Where a layer reads a tensor from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Src {
    Input,
    Layer(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub id: String,
    pub kind: LayerKind,
    pub inputs: Vec<Src>,
    pub weights: Option<Tensor>,
    pub bias: Option<Tensor>,
}

impl LayerSpec {
    pub fn new(id: impl Into<String>, kind: LayerKind, inputs: Vec<Src>) -> Self {
        Self {
            id: id.into(),
            kind,
            inputs,
            weights: None,
            bias: None,
        }
    }

    pub fn with_params(mut self, weights: Tensor, bias: Tensor) -> Self {
        self.weights = Some(weights);
        self.bias = Some(bias);
        self
    }

    pub fn param_count(&self) -> usize {
        self.weights.as_ref().map_or(0, Tensor::len) + self.bias.as_ref().map_or(0, Tensor::len)
    }

    /// Current kernel count of a convolution-like layer.
    pub fn out_channels(&self) -> Option<usize> {
        match self.kind {
            LayerKind::Conv { out_channels, .. }
            | LayerKind::ProjectionShortcut { out_channels, .. } => Some(out_channels),
            _ => None,
        }
    }
}

/// Layer outputs whose channel dimension must stay equal under pruning.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CouplingGroup {
    pub members: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelGraph {
    input_shape: [usize; 3],
    layers: Vec<LayerSpec>,
    coupling_groups: Vec<CouplingGroup>,
    shapes: Vec<Vec<usize>>,
}

/// Result of a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Tensor,
    /// Every layer's output in layer order, when retention was requested.
    pub activations: Option<Vec<Tensor>>,
}

impl ModelGraph {
    /// Validate the layer list against a per-sample input shape `[C, H, W]`.
    pub fn new(input_shape: [usize; 3], layers: Vec<LayerSpec>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for (i, layer) in layers.iter().enumerate() {
            if layer.id == "input" || !seen.insert(layer.id.clone()) {
                return Err(GraphError::DuplicateId(layer.id.clone()));
            }
            if layer.inputs.len() != layer.kind.arity() {
                return Err(GraphError::Arity {
                    layer: layer.id.clone(),
                    expected: layer.kind.arity(),
                    actual: layer.inputs.len(),
                });
            }
            for src in &layer.inputs {
                if let Src::Layer(j) = *src {
                    if j >= i {
                        return Err(GraphError::BadInput {
                            layer: layer.id.clone(),
                            reason: format!("input references layer #{j}, not an earlier layer"),
                        });
                    }
                }
            }
            if layer.kind.has_params() != (layer.weights.is_some() && layer.bias.is_some()) {
                return Err(GraphError::BadInput {
                    layer: layer.id.clone(),
                    reason: "parameter tensors do not match layer kind".into(),
                });
            }
        }
        if layers.is_empty() {
            return Err(GraphError::Output(vec![]));
        }
        let mut graph = Self {
            input_shape,
            layers,
            coupling_groups: Vec::new(),
            shapes: Vec::new(),
        };
        let [c, h, w] = input_shape;
        graph.shapes = graph.infer_shapes(&[1, c, h, w])?;
        let out = graph.shapes.last().expect("non-empty");
        if out.len() != 2 {
            return Err(GraphError::Output(out.clone()));
        }
        graph.coupling_groups = graph.derive_coupling_groups();
        Ok(graph)
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn layer(&self, index: usize) -> &LayerSpec {
        &self.layers[index]
    }

    pub fn layer_index(&self, id: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.id == id)
    }

    pub fn coupling_groups(&self) -> &[CouplingGroup] {
        &self.coupling_groups
    }

    /// Per-layer output shapes for a batch of one.
    pub fn shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }

    pub fn class_count(&self) -> usize {
        self.shapes.last().map_or(0, |s| s[1])
    }

    /// Mutable access to a layer's `(weights, bias)`. Callers must keep shapes intact.
    pub fn params_mut(&mut self, index: usize) -> Option<(&mut Tensor, &mut Tensor)> {
        let layer = &mut self.layers[index];
        match (&mut layer.weights, &mut layer.bias) {
            (Some(w), Some(b)) => Some((w, b)),
            _ => None,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerSpec::param_count).sum()
    }

    /// Indices of convolution-like layers, in order.
    pub fn conv_layers(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| self.layers[i].kind.is_conv())
            .collect()
    }

    /// SHA-256 over every convolution layer's weights and biases.
    pub fn conv_digest(&self) -> String {
        let mut hasher = Sha256::new();
        for i in self.conv_layers() {
            let layer = &self.layers[i];
            hasher.update(layer.id.as_bytes());
            for t in [&layer.weights, &layer.bias].into_iter().flatten() {
                for v in t.data() {
                    hasher.update(v.to_le_bytes());
                }
            }
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Shape table for an arbitrary rank-4 input; fails on the first incompatible layer.
    pub fn infer_shapes(&self, input_shape: &[usize]) -> Result<Vec<Vec<usize>>> {
        if input_shape.len() != 4 {
            return Err(GraphError::Shape {
                layer: "input".into(),
                what: "rank".into(),
                expected: "4".into(),
                actual: input_shape.len().to_string(),
            });
        }
        let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let ins: Vec<&[usize]> = layer
                .inputs
                .iter()
                .map(|s| match *s {
                    Src::Input => input_shape,
                    Src::Layer(j) => shapes[j].as_slice(),
                })
                .collect();
            let out = layer_shape(layer, &ins)?;
            shapes.push(out);
        }
        Ok(shapes)
    }

    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        let [c, h, w] = self.input_shape;
        match batch.shape() {
            [_, bc, bh, bw] if [*bc, *bh, *bw] == [c, h, w] => Ok(()),
            other => Err(GraphError::Shape {
                layer: "input".into(),
                what: "batch shape".into(),
                expected: format!("[N, {c}, {h}, {w}]"),
                actual: format!("{other:?}"),
            }),
        }
    }

    pub(crate) fn apply_layer(
        &self,
        index: usize,
        inputs: &[&Tensor],
    ) -> Result<(Tensor, Option<PoolIndices>)> {
        let layer = &self.layers[index];
        let wrap = |e: TensorError| GraphError::Tensor {
            layer: layer.id.clone(),
            source: e,
        };
        let x = inputs[0];
        let out = match layer.kind {
            LayerKind::Conv { .. } | LayerKind::ProjectionShortcut { .. } => {
                let (_, stride, pad) = layer.kind.conv_geometry().expect("conv");
                let (w, b) = (layer.weights.as_ref(), layer.bias.as_ref());
                tensor::conv2d_forward(x, w.expect("validated"), b.expect("validated"), stride, pad)
                    .map_err(wrap)?
            }
            LayerKind::Relu => tensor::relu_forward(x),
            LayerKind::MaxPool { window, stride } => {
                let (y, idx) = tensor::maxpool2d_forward(x, window, stride).map_err(wrap)?;
                return Ok((y, Some(idx)));
            }
            LayerKind::Gap => tensor::gap_forward(x).map_err(wrap)?,
            LayerKind::Flatten => {
                let n = x.shape()[0];
                x.clone().reshape(vec![n, x.len() / n.max(1)]).map_err(wrap)?
            }
            LayerKind::Dense { .. } => {
                let (w, b) = (layer.weights.as_ref(), layer.bias.as_ref());
                tensor::dense_forward(x, w.expect("validated"), b.expect("validated"))
                    .map_err(wrap)?
            }
            LayerKind::Softmax => x.clone(),
            LayerKind::ResidualAdd => x.add(inputs[1]).map_err(wrap)?,
        };
        Ok((out, None))
    }

    /// Run a batch `[N, C, H, W]` through the graph.
    ///
    /// With `retain`, every layer output is returned alongside the logits;
    /// otherwise intermediate tensors are dropped after their last use.
    pub fn forward(&self, batch: &Tensor, retain: bool) -> Result<ForwardOutput> {
        self.check_batch(batch)?;
        let n = self.layers.len();
        let mut last_use = vec![0usize; n];
        for (i, layer) in self.layers.iter().enumerate() {
            for src in &layer.inputs {
                if let Src::Layer(j) = *src {
                    last_use[j] = i;
                }
            }
        }
        let mut values: Vec<Option<Tensor>> = vec![None; n];
        for i in 0..n {
            let ins: Vec<&Tensor> = self.layers[i]
                .inputs
                .iter()
                .map(|s| match *s {
                    Src::Input => batch,
                    Src::Layer(j) => values[j].as_ref().expect("value alive until last use"),
                })
                .collect();
            let (out, _) = self.apply_layer(i, &ins)?;
            values[i] = Some(out);
            if !retain {
                for src in self.layers[i].inputs.clone() {
                    if let Src::Layer(j) = src {
                        if last_use[j] == i {
                            values[j] = None;
                        }
                    }
                }
            }
        }
        let logits = values[n - 1].clone().expect("last layer computed");
        let activations = if retain {
            Some(values.into_iter().map(|v| v.expect("retained")).collect())
        } else {
            None
        };
        Ok(ForwardOutput {
            logits,
            activations,
        })
    }

    /// Replace a `flatten -> dense (-> relu -> dense)* -> softmax` head with
    /// `gap -> dense -> softmax`, reinitializing the classifier.
    ///
    /// Convolutional layers are carried over untouched. A graph that already
    /// ends in `gap -> dense -> softmax` is returned as is.
    pub fn replace_head_with_gap(&self, seed: u64) -> Result<ModelGraph> {
        let kinds: Vec<&LayerKind> = self.layers.iter().map(|l| &l.kind).collect();
        let n = kinds.len();
        let ends_softmax = matches!(kinds[n - 1], LayerKind::Softmax);
        if n >= 3
            && ends_softmax
            && matches!(kinds[n - 2], LayerKind::Dense { .. })
            && matches!(kinds[n - 3], LayerKind::Gap)
        {
            return Ok(self.clone());
        }
        let flatten = self
            .layers
            .iter()
            .position(|l| l.kind == LayerKind::Flatten)
            .ok_or_else(|| GraphError::Head("no flatten layer before the classifier".into()))?;
        if !ends_softmax {
            return Err(GraphError::Head("graph does not end in softmax".into()));
        }
        let tail = &self.layers[flatten + 1..n - 1];
        if tail.is_empty() || !matches!(tail.last().unwrap().kind, LayerKind::Dense { .. }) {
            return Err(GraphError::Head("classifier dense layer missing".into()));
        }
        for (offset, layer) in self.layers[flatten + 1..].iter().enumerate() {
            let i = flatten + 1 + offset;
            if !matches!(
                layer.kind,
                LayerKind::Dense { .. } | LayerKind::Relu | LayerKind::Softmax
            ) {
                return Err(GraphError::Head(format!(
                    "unexpected `{}` after flatten",
                    layer.id
                )));
            }
            if layer.inputs != [Src::Layer(i - 1)] {
                return Err(GraphError::Head(format!(
                    "`{}` is not part of a linear head",
                    layer.id
                )));
            }
        }
        let classifier = tail.last().unwrap();
        let classes = match classifier.kind {
            LayerKind::Dense { out_features } => out_features,
            _ => unreachable!(),
        };
        let feature_src = self.layers[flatten].inputs[0];
        let channels = match feature_src {
            Src::Input => self.input_shape[0],
            Src::Layer(j) => self.shapes[j][1],
        };
        let mut layers: Vec<LayerSpec> = self.layers[..flatten].to_vec();
        let gap_id = unique_id(&self.layers, "gap");
        layers.push(LayerSpec::new(gap_id, LayerKind::Gap, vec![feature_src]));
        let mut rng = zoo::seeded(seed);
        let (w, b) = zoo::kaiming_uniform(&[classes, channels], channels, &mut rng);
        layers.push(
            LayerSpec::new(
                classifier.id.clone(),
                LayerKind::Dense {
                    out_features: classes,
                },
                vec![Src::Layer(flatten)],
            )
            .with_params(w, b),
        );
        layers.push(LayerSpec::new(
            self.layers[n - 1].id.clone(),
            LayerKind::Softmax,
            vec![Src::Layer(flatten + 1)],
        ));
        ModelGraph::new(self.input_shape, layers)
    }

    /// Rebuild with replaced layers, re-running validation.
    pub fn with_layers(&self, layers: Vec<LayerSpec>) -> Result<ModelGraph> {
        ModelGraph::new(self.input_shape, layers)
    }
}

fn unique_id(layers: &[LayerSpec], base: &str) -> String {
    let taken = |id: &str| layers.iter().any(|l| l.id == id);
    if !taken(base) {
        return base.to_string();
    }
    (1..)
        .map(|i| format!("{base}_{i}"))
        .find(|id| !taken(id))
        .expect("unbounded search")
}

fn shape_err(layer: &LayerSpec, what: &str, expected: impl ToString, actual: impl ToString) -> GraphError {
    GraphError::Shape {
        layer: layer.id.clone(),
        what: what.into(),
        expected: expected.to_string(),
        actual: actual.to_string(),
    }
}

fn layer_shape(layer: &LayerSpec, ins: &[&[usize]]) -> Result<Vec<usize>> {
    let x = ins[0];
    let need_rank = |r: usize| -> Result<()> {
        if x.len() != r {
            Err(shape_err(layer, "input rank", r, format!("{x:?}")))
        } else {
            Ok(())
        }
    };
    match layer.kind {
        LayerKind::Conv { out_channels, .. } | LayerKind::ProjectionShortcut { out_channels, .. } => {
            need_rank(4)?;
            let (k, stride, pad) = layer.kind.conv_geometry().expect("conv");
            if stride == 0 || k == 0 {
                return Err(shape_err(layer, "kernel/stride", ">= 1", 0));
            }
            let w = layer.weights.as_ref().expect("validated");
            let b = layer.bias.as_ref().expect("validated");
            let expected = [out_channels, x[1], k, k];
            if w.shape() != expected {
                return Err(shape_err(
                    layer,
                    "weights shape [D, C, k, k]",
                    format!("{expected:?}"),
                    format!("{:?}", w.shape()),
                ));
            }
            if b.shape() != [out_channels] {
                return Err(shape_err(layer, "bias length", out_channels, format!("{:?}", b.shape())));
            }
            if k > x[2] + 2 * pad || k > x[3] + 2 * pad {
                return Err(shape_err(layer, "spatial extent", format!(">= {k}"), format!("{:?}", &x[2..])));
            }
            Ok(vec![
                x[0],
                out_channels,
                tensor::conv2d_output_extent(x[2], k, stride, pad),
                tensor::conv2d_output_extent(x[3], k, stride, pad),
            ])
        }
        LayerKind::Relu | LayerKind::Softmax => Ok(x.to_vec()),
        LayerKind::MaxPool { window, stride } => {
            need_rank(4)?;
            if window == 0 || stride == 0 || window > x[2] || window > x[3] {
                return Err(shape_err(layer, "pool window", format!("<= {:?}", &x[2..]), window));
            }
            Ok(vec![x[0], x[1], (x[2] - window) / stride + 1, (x[3] - window) / stride + 1])
        }
        LayerKind::Gap => {
            need_rank(4)?;
            Ok(vec![x[0], x[1]])
        }
        LayerKind::Flatten => {
            need_rank(4)?;
            Ok(vec![x[0], x[1] * x[2] * x[3]])
        }
        LayerKind::Dense { out_features } => {
            need_rank(2)?;
            let w = layer.weights.as_ref().expect("validated");
            let b = layer.bias.as_ref().expect("validated");
            if w.shape() != [out_features, x[1]] {
                return Err(shape_err(
                    layer,
                    "weights shape [O, F]",
                    format!("[{out_features}, {}]", x[1]),
                    format!("{:?}", w.shape()),
                ));
            }
            if b.shape() != [out_features] {
                return Err(shape_err(layer, "bias length", out_features, format!("{:?}", b.shape())));
            }
            Ok(vec![x[0], out_features])
        }
        LayerKind::ResidualAdd => {
            if ins[0] != ins[1] {
                return Err(shape_err(
                    layer,
                    "residual operand shapes",
                    format!("{:?}", ins[0]),
                    format!("{:?}", ins[1]),
                ));
            }
            Ok(x.to_vec())
        }
    }
}
