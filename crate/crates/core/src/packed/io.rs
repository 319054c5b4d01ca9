//! `BGRP` packed model container.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic      "BGRP"
//! version    u8 (1)
//! spec_len   u32, followed by the architecture spec as UTF-8 JSON
//! layers     u32
//! per layer: index u16, tag u8, then
//!   tag 0 (float):          params u8 + tensors, stats u8 + tensors
//!   tag 1 (xnor) and
//!   tag 2 (binary weights): weight shape, ceil(elements/8) bytes of sign
//!                           bits (element e at byte e/8, bit e%8, 1 = +1),
//!                           then the bias tensor
//! shape:     rank u8, dims u32 × rank
//! tensor:    shape, f32 × product(dims)
//! ```
//!
//! Layer kinds are rebuilt from the spec on load.

use std::path::Path;

use super::{binary_input, PackedBitTensor, PackedLayer, PackedModel};
use crate::error::{Error, Result};
use crate::graph::io::{write_spec, ByteReader, ByteWriter};
use crate::graph::{build_model, LayerKind, ModelGraph};
use crate::tensor::{Rng, Tensor};

const MAGIC: &[u8; 4] = b"BGRP";
const FORMAT: &str = "BGRP";
const VERSION: u8 = 1;

const TAG_FLOAT: u8 = 0;
const TAG_XNOR: u8 = 1;
const TAG_BINARY_WEIGHTS: u8 = 2;

impl PackedModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(MAGIC);
        w.u8(VERSION);
        write_spec(&mut w, &self.arch);
        w.u32(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            w.u16(i as u16);
            match layer {
                PackedLayer::Float(node) => {
                    w.u8(TAG_FLOAT);
                    for slot in [&node.params, &node.stats] {
                        w.u8(slot.len() as u8);
                        for t in slot {
                            w.f32_tensor(t);
                        }
                    }
                }
                PackedLayer::Xnor { weights, bias, .. } | PackedLayer::BinaryWeights { weights, bias, .. } => {
                    w.u8(if matches!(layer, PackedLayer::Xnor { .. }) {
                        TAG_XNOR
                    } else {
                        TAG_BINARY_WEIGHTS
                    });
                    w.shape(weights.shape());
                    w.bytes(&weights.to_bitstream());
                    w.f32_tensor(bias);
                }
            }
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, FORMAT);
        if r.take(4)? != MAGIC {
            return Err(r.malformed("bad magic"));
        }
        let version = r.u8()?;
        if version != VERSION {
            return Err(r.malformed(&format!("unsupported version {version}")));
        }
        let spec = r.spec()?;
        let skeleton: ModelGraph<f32> = build_model(&spec, &mut Rng::new(0))?;
        let count = r.u32()?;
        if count != skeleton.nodes.len() {
            return Err(r.malformed(&format!(
                "{count} layers stored, architecture has {}",
                skeleton.nodes.len()
            )));
        }
        let kinds: Vec<&LayerKind> = skeleton.nodes.iter().map(|n| &n.kind).collect();
        let mut layers = Vec::with_capacity(count);
        for (i, node) in skeleton.nodes.iter().enumerate() {
            let index = r.u16()? as usize;
            if index != i {
                return Err(r.malformed(&format!("layer {i} stored as index {index}")));
            }
            let tag = r.u8()?;
            let expected = match (node.binarize_weights, binary_input(&kinds, i)) {
                (false, _) => TAG_FLOAT,
                (true, true) => TAG_XNOR,
                (true, false) => TAG_BINARY_WEIGHTS,
            };
            if tag != expected {
                return Err(r.malformed(&format!("layer {i} has tag {tag}, architecture implies {expected}")));
            }
            let mismatch = |expected: &[usize], actual: &[usize]| {
                Error::ShapeMismatch {
                    op: "load packed",
                    expected: expected.to_vec(),
                    actual: actual.to_vec(),
                }
                .at_node(i)
            };
            if tag == TAG_FLOAT {
                let mut node = node.clone();
                for slot in [&mut node.params, &mut node.stats] {
                    let n = r.u8()? as usize;
                    if n != slot.len() {
                        return Err(r.malformed(&format!("layer {i} stores {n} tensors, expected {}", slot.len())));
                    }
                    for t in slot.iter_mut() {
                        let loaded: Tensor<f32> = r.f32_tensor()?;
                        if loaded.shape() != t.shape() {
                            return Err(mismatch(t.shape(), loaded.shape()));
                        }
                        *t = loaded;
                    }
                }
                layers.push(PackedLayer::Float(node));
                continue;
            }
            let shape = r.shape()?;
            if shape != node.params[0].shape() {
                return Err(mismatch(node.params[0].shape(), &shape));
            }
            let len: usize = shape.iter().product();
            let weights = PackedBitTensor::from_bitstream(shape.clone(), len / shape[0], r.take(len.div_ceil(8))?)?;
            let bias: Tensor<f32> = r.f32_tensor()?;
            if bias.shape() != node.params[1].shape() {
                return Err(mismatch(node.params[1].shape(), bias.shape()));
            }
            let kind = node.kind.clone();
            layers.push(if tag == TAG_XNOR {
                PackedLayer::Xnor { kind, weights, bias }
            } else {
                PackedLayer::BinaryWeights { kind, weights, bias }
            });
        }
        r.finish()?;
        Ok(PackedModel::new(
            spec,
            skeleton.input_shape,
            skeleton.num_classes,
            layers,
        ))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
