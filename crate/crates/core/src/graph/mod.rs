//! Layer graphs, segments and their forward/backward execution.
//!
//! A model is a topologically ordered list of nodes. Every Dense or Conv2d
//! node after the first opens a new *segment*; the node just before it is an
//! *injection point*, the place where training signals enter and where
//! segment-local backward passes stop. The network output is the last
//! injection point. Segments are numbered from zero.

mod build;
pub(crate) mod exec;
pub(crate) mod io;
#[cfg(test)]
mod tests;

use std::borrow::Cow;
use std::ops::Range;

use serde::{Deserialize, Serialize};

pub use build::{build_model, ArchSpec, Architecture};
pub use exec::{
    BufferMeter, ErrorSignal, ForwardTrace, Mode, NodeCache, Retention, SegmentBackward, SegmentGrads, SegmentTrace,
};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BATCHNORM_EPS: f64 = 1e-5;
pub const BATCHNORM_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActKind {
    Tanh,
    Relu,
    /// Binary activation, trained through the saturating STE.
    Sign,
}

/// Node operation. Shapes below are per sample; the batch axis is implicit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum LayerKind {
    /// Affine map over the last axis. Params: weights `[outputs, inputs]`, bias `[outputs]`.
    Dense {
        inputs: usize,
        outputs: usize,
    },
    /// Params: kernels `[out, in, k, k]`, bias `[out]`.
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Activation(ActKind),
    /// Normalizes the feature axis: axis 0 of `[c, h, w]`, otherwise the last
    /// axis. Params: scale, shift. Stats: running mean, running variance.
    BatchNorm {
        features: usize,
    },
    /// Non-overlapping `size × size` max pooling over `[c, h, w]`.
    MaxPool {
        size: usize,
    },
    /// Global average: `[c, h, w] → [c]`, `[p, d] → [d]`.
    AvgPool,
    Flatten,
    Reshape {
        to: Vec<usize>,
    },
    /// Swaps the two axes of a `[a, b]` sample.
    Transpose,
    /// Adds the output of node `source` (always the segment input).
    SkipAdd {
        source: usize,
    },
}

impl LayerKind {
    pub fn is_weight_layer(&self) -> bool {
        matches!(self, LayerKind::Dense { .. } | LayerKind::Conv2d { .. })
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = |detail: String| Error::InvalidGeometry {
            op: "shape inference",
            detail,
        };
        Ok(match self {
            LayerKind::Dense { inputs, outputs } => {
                if input.last() != Some(inputs) {
                    return Err(bad(format!("dense expects last axis {inputs}, got {input:?}")));
                }
                let mut s = input.to_vec();
                *s.last_mut().unwrap() = *outputs;
                s
            }
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                if input.len() != 3 || input[0] != *in_channels {
                    return Err(bad(format!("conv expects [{in_channels}, h, w], got {input:?}")));
                }
                if *stride == 0 || *kernel > input[1] + 2 * padding || *kernel > input[2] + 2 * padding {
                    return Err(bad(format!("conv kernel {kernel} does not fit {input:?}")));
                }
                vec![
                    *out_channels,
                    (input[1] + 2 * padding - kernel) / stride + 1,
                    (input[2] + 2 * padding - kernel) / stride + 1,
                ]
            }
            LayerKind::Activation(_) | LayerKind::SkipAdd { .. } => input.to_vec(),
            LayerKind::BatchNorm { features } => {
                let axis = feature_axis(input.len() + 1) - 1;
                if input.get(axis) != Some(features) {
                    return Err(bad(format!("batchnorm over {features} features, got {input:?}")));
                }
                input.to_vec()
            }
            LayerKind::MaxPool { size } => {
                if input.len() != 3 || *size == 0 || input[1] < *size || input[2] < *size {
                    return Err(bad(format!("max pool {size} does not fit {input:?}")));
                }
                vec![input[0], input[1] / size, input[2] / size]
            }
            LayerKind::AvgPool => match input.len() {
                3 => vec![input[0]],
                2 => vec![input[1]],
                _ => return Err(bad(format!("average pool needs rank 2 or 3, got {input:?}"))),
            },
            LayerKind::Flatten => vec![input.iter().product()],
            LayerKind::Reshape { to } => {
                if to.iter().product::<usize>() != input.iter().product::<usize>() {
                    return Err(bad(format!("cannot reshape {input:?} to {to:?}")));
                }
                to.clone()
            }
            LayerKind::Transpose => {
                if input.len() != 2 {
                    return Err(bad(format!("transpose needs rank 2, got {input:?}")));
                }
                vec![input[1], input[0]]
            }
        })
    }
}

/// Feature axis of a batched tensor of the given rank.
pub(crate) fn feature_axis(rank: usize) -> usize {
    if rank == 4 {
        1
    } else {
        rank - 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNode<T> {
    pub kind: LayerKind,
    /// Trainable latent parameters.
    pub params: Vec<Tensor<T>>,
    /// Non-trainable state (batchnorm running statistics).
    pub stats: Vec<Tensor<T>>,
    /// Forward uses `sign(weights)`; biases are never binarized.
    pub binarize_weights: bool,
    pub index: usize,
}

impl<T: Scalar> LayerNode<T> {
    pub fn new(index: usize, kind: LayerKind) -> Self {
        Self {
            kind,
            params: Vec::new(),
            stats: Vec::new(),
            binarize_weights: false,
            index,
        }
    }

    /// Weights as the forward pass sees them.
    pub fn effective_weights(&self) -> Cow<'_, Tensor<T>> {
        if self.binarize_weights {
            Cow::Owned(crate::binarize::binarize_weights(&self.params[0]))
        } else {
            Cow::Borrowed(&self.params[0])
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelGraph<T> {
    pub arch: ArchSpec,
    pub nodes: Vec<LayerNode<T>>,
    injection_points: Vec<usize>,
    segments: Vec<Range<usize>>,
    /// Per-sample shape of node outputs, used for feedback-matrix geometry.
    node_shapes: Vec<Vec<usize>>,
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
}

impl<T: Scalar> ModelGraph<T> {
    /// Validates node wiring and derives the injection points.
    pub fn from_nodes(
        arch: ArchSpec,
        nodes: Vec<LayerNode<T>>,
        input_shape: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::InvalidArgument("model has no nodes".into()));
        }
        let injection_points = derive_injection_points(&nodes.iter().map(|n| n.kind.clone()).collect::<Vec<_>>());
        let mut segments = Vec::with_capacity(injection_points.len());
        let mut start = 0;
        for &ip in &injection_points {
            segments.push(start..ip + 1);
            start = ip + 1;
        }

        let mut node_shapes: Vec<Vec<usize>> = Vec::with_capacity(nodes.len());
        let mut shape = input_shape.clone();
        for (i, node) in nodes.iter().enumerate() {
            if node.index != i {
                return Err(Error::InvalidArgument(format!("node {i} records index {}", node.index)));
            }
            shape = node.kind.output_shape(&shape).map_err(|e| e.at_node(i))?;
            check_params(node).map_err(|e| e.at_node(i))?;
            if let LayerKind::SkipAdd { source } = node.kind {
                let seg = segments.iter().find(|r| r.contains(&i)).unwrap();
                if seg.start == 0 || source != seg.start - 1 {
                    return Err(Error::InvalidArgument(format!(
                        "skip at node {i} must read its segment input (node {}), not node {source}",
                        seg.start.wrapping_sub(1) as isize
                    )));
                }
                if node_shapes[source] != shape {
                    return Err(Error::ShapeMismatch {
                        op: "skip add",
                        expected: shape.clone(),
                        actual: node_shapes[source].clone(),
                    }
                    .at_node(i));
                }
            }
            node_shapes.push(shape.clone());
        }
        if shape != [num_classes] {
            return Err(Error::ShapeMismatch {
                op: "model output",
                expected: vec![num_classes],
                actual: shape,
            });
        }
        for (k, seg) in segments.iter().enumerate() {
            let weights = nodes[seg.clone()].iter().filter(|n| n.kind.is_weight_layer()).count();
            if weights != 1 {
                return Err(Error::InvalidArgument(format!(
                    "segment {k} holds {weights} weight layers, expected exactly one"
                )));
            }
        }
        let weight_nodes: Vec<&LayerNode<T>> = nodes.iter().filter(|n| n.kind.is_weight_layer()).collect();
        if weight_nodes[0].binarize_weights || weight_nodes[weight_nodes.len() - 1].binarize_weights {
            return Err(Error::InvalidArgument(
                "first and last weight layers must stay full precision".into(),
            ));
        }
        Ok(Self {
            arch,
            nodes,
            injection_points,
            segments,
            node_shapes,
            input_shape,
            num_classes,
        })
    }

    pub fn injection_points(&self) -> &[usize] {
        &self.injection_points
    }

    /// Number of trainable segments.
    pub fn segment_count(&self) -> usize {
        self.segments.len()
    }

    pub fn segment(&self, k: usize) -> Range<usize> {
        self.segments[k].clone()
    }

    /// Per-sample output shape of segment `k`.
    pub fn segment_output_shape(&self, k: usize) -> &[usize] {
        &self.node_shapes[self.injection_points[k]]
    }

    pub fn node_output_shape(&self, node: usize) -> &[usize] {
        &self.node_shapes[node]
    }

    /// Index of the weight layer inside segment `k`.
    pub fn segment_weight_node(&self, k: usize) -> usize {
        self.segments[k]
            .clone()
            .find(|&i| self.nodes[i].kind.is_weight_layer())
            .expect("validated: one weight layer per segment")
    }

    pub fn parameter_count(&self) -> usize {
        self.nodes.iter().flat_map(|n| &n.params).map(|p| p.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelGraph<U> {
        ModelGraph {
            arch: self.arch.clone(),
            nodes: self
                .nodes
                .iter()
                .map(|n| LayerNode {
                    kind: n.kind.clone(),
                    params: n.params.iter().map(Tensor::cast).collect(),
                    stats: n.stats.iter().map(Tensor::cast).collect(),
                    binarize_weights: n.binarize_weights,
                    index: n.index,
                })
                .collect(),
            injection_points: self.injection_points.clone(),
            segments: self.segments.clone(),
            node_shapes: self.node_shapes.clone(),
            input_shape: self.input_shape.clone(),
            num_classes: self.num_classes,
        }
    }
}

/// The node just before every weight layer except the first, plus the last node.
pub fn derive_injection_points(kinds: &[LayerKind]) -> Vec<usize> {
    let mut points: Vec<usize> = kinds
        .iter()
        .enumerate()
        .filter(|(_, k)| k.is_weight_layer())
        .skip(1)
        .map(|(i, _)| i - 1)
        .collect();
    points.push(kinds.len() - 1);
    points
}

fn check_params<T: Scalar>(node: &LayerNode<T>) -> Result<()> {
    let expect: Vec<Vec<usize>> = match &node.kind {
        LayerKind::Dense { inputs, outputs } => vec![vec![*outputs, *inputs], vec![*outputs]],
        LayerKind::Conv2d {
            in_channels,
            out_channels,
            kernel,
            ..
        } => vec![vec![*out_channels, *in_channels, *kernel, *kernel], vec![*out_channels]],
        LayerKind::BatchNorm { features } => vec![vec![*features], vec![*features]],
        _ => vec![],
    };
    let actual: Vec<Vec<usize>> = node.params.iter().map(|p| p.shape().to_vec()).collect();
    if actual != expect {
        return Err(Error::ShapeMismatch {
            op: "parameters",
            expected: expect.concat(),
            actual: actual.concat(),
        });
    }
    if let LayerKind::BatchNorm { features } = node.kind {
        if node.stats.len() != 2 || node.stats.iter().any(|s| s.shape() != [features]) {
            return Err(Error::InvalidArgument("batchnorm needs two running statistics".into()));
        }
    }
    if node.binarize_weights && !node.kind.is_weight_layer() {
        return Err(Error::InvalidArgument("only weight layers can be binarized".into()));
    }
    Ok(())
}
