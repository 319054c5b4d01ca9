//! Bit-packed inference.
//!
//! Binarized weight layers are exported as packed sign bits. When a layer's
//! input is itself ±1 (it comes from a sign activation, possibly through
//! pooling or layout changes) the layer runs as an XNOR-popcount product;
//! otherwise the bits are unpacked and applied with the float kernels.
//! Everything else (first and last layers, batchnorm, skip sums) stays in
//! float. Integer accumulation is exact, so the packed forward equals the
//! float eval forward bit for bit.

mod bits;
mod io;

use std::collections::HashMap;
use std::time::Instant;

pub use bits::{masked_xnor_popcount_matmul, xnor_popcount_matmul, IntMatrix, PackedBitTensor, WORD_BITS};

use crate::error::{Error, Result};
use crate::graph::exec::{add_channel_bias, node_forward};
use crate::graph::{ActKind, ArchSpec, LayerKind, LayerNode, Mode, ModelGraph};
use crate::tensor::{matmul_nt_into, Conv2dGeometry, Rng, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub enum PackedLayer {
    /// Binary weights applied to ±1 inputs by XNOR-popcount.
    Xnor {
        kind: LayerKind,
        weights: PackedBitTensor,
        bias: Tensor<f32>,
    },
    /// Binary weights applied to real-valued inputs.
    BinaryWeights {
        kind: LayerKind,
        weights: PackedBitTensor,
        bias: Tensor<f32>,
    },
    Float(LayerNode<f32>),
}

impl PackedLayer {
    pub fn kind(&self) -> &LayerKind {
        match self {
            PackedLayer::Xnor { kind, .. } | PackedLayer::BinaryWeights { kind, .. } => kind,
            PackedLayer::Float(node) => &node.kind,
        }
    }

    pub fn packed_weights(&self) -> Option<&PackedBitTensor> {
        match self {
            PackedLayer::Xnor { weights, .. } | PackedLayer::BinaryWeights { weights, .. } => Some(weights),
            PackedLayer::Float(_) => None,
        }
    }
}

/// Immutable deployment form of a trained model.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedModel {
    pub arch: ArchSpec,
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    layers: Vec<PackedLayer>,
    skip_sources: Vec<usize>,
}

/// Whether node `i` always receives ±1 values.
fn binary_input(kinds: &[&LayerKind], i: usize) -> bool {
    for kind in kinds[..i].iter().rev() {
        match kind {
            LayerKind::Activation(ActKind::Sign) => return true,
            LayerKind::Flatten | LayerKind::Reshape { .. } | LayerKind::Transpose | LayerKind::MaxPool { .. } => {}
            _ => return false,
        }
    }
    false
}

/// Packs every binarized weight layer; a model without any is passed through in float.
pub fn export_packed(model: &ModelGraph<f32>) -> PackedModel {
    let kinds: Vec<&LayerKind> = model.nodes.iter().map(|n| &n.kind).collect();
    let layers = model
        .nodes
        .iter()
        .enumerate()
        .map(|(i, node)| {
            if !node.binarize_weights {
                return PackedLayer::Float(node.clone());
            }
            let signs = node.effective_weights();
            let row_len = signs.len() / signs.dim(0);
            let weights = PackedBitTensor::pack_rows(&signs, row_len).expect("sign output is ±1");
            let (kind, bias) = (node.kind.clone(), node.params[1].clone());
            if binary_input(&kinds, i) {
                PackedLayer::Xnor { kind, weights, bias }
            } else {
                PackedLayer::BinaryWeights { kind, weights, bias }
            }
        })
        .collect();
    PackedModel::new(model.arch.clone(), model.input_shape.clone(), model.num_classes, layers)
}

impl PackedModel {
    fn new(arch: ArchSpec, input_shape: Vec<usize>, num_classes: usize, layers: Vec<PackedLayer>) -> Self {
        let skip_sources = layers
            .iter()
            .filter_map(|l| match l.kind() {
                LayerKind::SkipAdd { source } => Some(*source),
                _ => None,
            })
            .collect();
        Self {
            arch,
            input_shape,
            num_classes,
            layers,
            skip_sources,
        }
    }

    pub fn layers(&self) -> &[PackedLayer] {
        &self.layers
    }

    /// Layers stored as packed bits.
    pub fn binary_layer_count(&self) -> usize {
        self.layers.iter().filter(|l| l.packed_weights().is_some()).count()
    }

    /// Layers that run on XNOR-popcount.
    pub fn xnor_layer_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| matches!(l, PackedLayer::Xnor { .. }))
            .count()
    }

    /// Bytes of packed weight bits, `ceil(elements / 8)` per layer.
    pub fn binary_payload_bytes(&self) -> usize {
        self.layers
            .iter()
            .filter_map(PackedLayer::packed_weights)
            .map(|w| w.len().div_ceil(8))
            .sum()
    }

    /// What the same weights occupy as f32.
    pub fn binary_float_bytes(&self) -> usize {
        self.layers
            .iter()
            .filter_map(PackedLayer::packed_weights)
            .map(|w| w.len() * 4)
            .sum()
    }

    /// Eval-mode logits.
    pub fn forward(&self, input: &Tensor<f32>) -> Result<Tensor<f32>> {
        if input.rank() != self.input_shape.len() + 1 || input.shape()[1..] != self.input_shape[..] {
            return Err(Error::ShapeMismatch {
                op: "packed input",
                expected: self.input_shape.clone(),
                actual: input.shape().to_vec(),
            });
        }
        let mut saved: HashMap<usize, Tensor<f32>> = HashMap::new();
        let mut x = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            x = self.run_layer(layer, x, &saved).map_err(|e| e.at_node(i))?;
            if self.skip_sources.contains(&i) {
                saved.insert(i, x.clone());
            }
        }
        Ok(x)
    }

    fn run_layer(
        &self,
        layer: &PackedLayer,
        x: Tensor<f32>,
        saved: &HashMap<usize, Tensor<f32>>,
    ) -> Result<Tensor<f32>> {
        match layer {
            PackedLayer::Xnor { kind, weights, bias } => match kind {
                LayerKind::Dense { outputs, .. } => binary_dense(&x, weights, bias, *outputs),
                LayerKind::Conv2d { stride, padding, .. } => binary_conv(&x, weights, bias, *stride, *padding),
                other => Err(Error::InvalidArgument(format!("{other:?} cannot be packed"))),
            },
            PackedLayer::BinaryWeights { kind, weights, bias } => {
                let mut node = LayerNode::new(0, kind.clone());
                node.params = vec![weights.unpack(), bias.clone()];
                Ok(node_forward(&node, x, None, Mode::Eval, false)?.0)
            }
            PackedLayer::Float(node) => {
                let skip = match node.kind {
                    LayerKind::SkipAdd { source } => saved.get(&source),
                    _ => None,
                };
                Ok(node_forward(node, x, skip, Mode::Eval, false)?.0)
            }
        }
    }
}

/// `packed_forward(pm, input)`: logits from the packed model.
pub fn packed_forward(pm: &PackedModel, input: &Tensor<f32>) -> Result<Tensor<f32>> {
    pm.forward(input)
}

fn binary_dense(x: &Tensor<f32>, weights: &PackedBitTensor, bias: &Tensor<f32>, outputs: usize) -> Result<Tensor<f32>> {
    let counts = xnor_popcount_matmul(&PackedBitTensor::pack(x)?, weights)?;
    let b = bias.data();
    let data = counts
        .data
        .chunks(outputs)
        .flat_map(|row| row.iter().zip(b).map(|(&c, &bv)| c as f32 + bv))
        .collect();
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = outputs;
    Tensor::new(shape, data)
}

/// Binary convolution over im2col rows; padded positions are masked out.
fn binary_conv(
    x: &Tensor<f32>,
    weights: &PackedBitTensor,
    bias: &Tensor<f32>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<f32>> {
    let g = Conv2dGeometry::new(x.shape(), weights.shape(), stride, padding)?;
    let (oh, ow) = (g.out_h(), g.out_w());
    let row_len = g.in_channels * g.kernel_h * g.kernel_w;
    let wpr = row_len.div_ceil(WORD_BITS);
    let rows = g.batch * oh * ow;
    let mut bits = vec![0u64; rows * wpr];
    let mut mask = vec![0u64; rows * wpr];
    let data = x.data();
    for n in 0..g.batch {
        for oy in 0..oh {
            for ox in 0..ow {
                let r = (n * oh + oy) * ow + ox;
                let (brow, mrow) = (&mut bits[r * wpr..(r + 1) * wpr], &mut mask[r * wpr..(r + 1) * wpr]);
                for c in 0..g.in_channels {
                    for ky in 0..g.kernel_h {
                        let Some(iy) = (oy * stride + ky).checked_sub(padding).filter(|&v| v < g.height) else {
                            continue;
                        };
                        for kx in 0..g.kernel_w {
                            let Some(ix) = (ox * stride + kx).checked_sub(padding).filter(|&v| v < g.width) else {
                                continue;
                            };
                            let e = (c * g.kernel_h + ky) * g.kernel_w + kx;
                            let v = data[((n * g.in_channels + c) * g.height + iy) * g.width + ix];
                            let bit = 1u64 << (e % WORD_BITS);
                            mrow[e / WORD_BITS] |= bit;
                            if v == 1.0 {
                                brow[e / WORD_BITS] |= bit;
                            } else if v != -1.0 {
                                return Err(Error::InvalidArgument(format!("cannot pack {v}: not ±1")));
                            }
                        }
                    }
                }
            }
        }
    }
    let a = PackedBitTensor::from_words(vec![rows, row_len], row_len, bits);
    let m = PackedBitTensor::from_words(vec![rows, row_len], row_len, mask);
    let counts = masked_xnor_popcount_matmul(&a, &m, weights)?;
    let o = g.out_channels;
    let plane = oh * ow;
    let mut out = vec![0f32; g.batch * o * plane];
    for n in 0..g.batch {
        for p in 0..plane {
            let row = &counts.data[(n * plane + p) * o..(n * plane + p + 1) * o];
            for (oc, &c) in row.iter().enumerate() {
                out[(n * o + oc) * plane + p] = c as f32;
            }
        }
    }
    let mut y = Tensor::new(g.output_shape(), out)?;
    add_channel_bias(&mut y, bias);
    Ok(y)
}

/// Single-thread timings of the float and packed products at one shape.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelBenchmark {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub float_seconds: f64,
    pub packed_seconds: f64,
}

impl KernelBenchmark {
    /// Packed throughput over float throughput.
    pub fn speedup(&self) -> f64 {
        self.float_seconds / self.packed_seconds
    }
}

/// Times `[m×k]·[n×k]ᵀ` with both kernels on the same ±1 operands, best of `repeats`.
pub fn benchmark_kernels(m: usize, k: usize, n: usize, repeats: usize, seed: u64) -> Result<KernelBenchmark> {
    let mut rng = Rng::new(seed);
    let a = crate::binarize::sign_forward(&rng.uniform::<f32>(&[m, k], -1.0, 1.0)?);
    let w = crate::binarize::sign_forward(&rng.uniform::<f32>(&[n, k], -1.0, 1.0)?);
    let (pa, pw) = (PackedBitTensor::pack(&a)?, PackedBitTensor::pack(&w)?);
    let mut c = vec![0f32; m * n];
    let mut float_seconds = f64::INFINITY;
    let mut packed_seconds = f64::INFINITY;
    let mut float_result = Tensor::zeros(vec![m, n]);
    let mut packed_result = Tensor::zeros(vec![m, n]);
    for _ in 0..repeats.max(1) {
        c.fill(0.0);
        let t = Instant::now();
        matmul_nt_into(m, k, n, a.data(), w.data(), &mut c);
        float_seconds = float_seconds.min(t.elapsed().as_secs_f64());
        float_result = Tensor::new(vec![m, n], std::hint::black_box(c.clone()))?;

        let t = Instant::now();
        let counts = xnor_popcount_matmul(&pa, &pw)?;
        packed_seconds = packed_seconds.min(t.elapsed().as_secs_f64());
        packed_result = std::hint::black_box(counts).to_tensor();
    }
    if float_result != packed_result {
        return Err(Error::InvalidArgument("packed and float products disagree".into()));
    }
    Ok(KernelBenchmark {
        m,
        k,
        n,
        float_seconds,
        packed_seconds,
    })
}
