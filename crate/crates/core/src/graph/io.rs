//! `BGR1` model container.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic      "BGR1"
//! spec_len   u32, followed by the architecture spec as UTF-8 JSON
//! nodes      u32
//! per node:  params u8, then each tensor; stats u8, then each tensor
//! tensor:    rank u8, dims u32 × rank, f32 × product(dims)
//! ```
//!
//! The node list is rebuilt from the spec on load and must agree with the
//! stored tensor shapes.

use std::path::Path;

use super::{build_model, ArchSpec, ModelGraph};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Rng, Tensor};

const MAGIC: &[u8; 4] = b"BGR1";
const FORMAT: &str = "BGR1";

pub(crate) struct ByteWriter {
    pub buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> Self {
        Self { buf: Vec::new() }
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u16(&mut self, v: u16) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn u32(&mut self, v: usize) {
        self.bytes(&(v as u32).to_le_bytes());
    }

    pub fn shape(&mut self, shape: &[usize]) {
        self.u8(shape.len() as u8);
        for &d in shape {
            self.u32(d);
        }
    }

    pub fn f32_tensor<T: Scalar>(&mut self, t: &Tensor<T>) {
        self.shape(t.shape());
        for &v in t.data() {
            self.bytes(&(v.as_f64() as f32).to_le_bytes());
        }
    }
}

pub(crate) struct ByteReader<'a> {
    data: &'a [u8],
    pos: usize,
    format: &'static str,
}

impl<'a> ByteReader<'a> {
    pub fn new(data: &'a [u8], format: &'static str) -> Self {
        Self { data, pos: 0, format }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.data.len() - self.pos < n {
            return Err(Error::Truncated {
                format: self.format,
                expected: self.pos + n,
                actual: self.data.len(),
            });
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    pub fn shape(&mut self) -> Result<Vec<usize>> {
        let rank = self.u8()? as usize;
        (0..rank).map(|_| self.u32()).collect()
    }

    pub fn f32_values(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| self.malformed("length overflow"))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn f32_tensor<T: Scalar>(&mut self) -> Result<Tensor<T>> {
        let shape = self.shape()?;
        let n = shape.iter().product();
        let values = self.f32_values(n)?;
        Tensor::new(shape, values.into_iter().map(|v| T::of(v as f64)).collect())
    }

    pub fn spec(&mut self) -> Result<ArchSpec> {
        let len = self.u32()?;
        let raw = self.take(len)?;
        serde_json::from_slice(raw).map_err(|e| self.malformed(&format!("architecture spec: {e}")))
    }

    pub fn malformed(&self, detail: &str) -> Error {
        Error::Format {
            format: self.format,
            detail: detail.to_string(),
        }
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(self.malformed(&format!("{} trailing bytes", self.data.len() - self.pos)));
        }
        Ok(())
    }
}

pub(crate) fn write_spec(w: &mut ByteWriter, spec: &ArchSpec) {
    let json = serde_json::to_vec(spec).expect("spec serializes");
    w.u32(json.len());
    w.bytes(&json);
}

impl<T: Scalar> ModelGraph<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(MAGIC);
        write_spec(&mut w, &self.arch);
        w.u32(self.nodes.len());
        for node in &self.nodes {
            w.u8(node.params.len() as u8);
            for p in &node.params {
                w.f32_tensor(p);
            }
            w.u8(node.stats.len() as u8);
            for s in &node.stats {
                w.f32_tensor(s);
            }
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, FORMAT);
        if r.take(4)? != MAGIC {
            return Err(r.malformed("bad magic"));
        }
        let spec = r.spec()?;
        let mut model: ModelGraph<T> = build_model(&spec, &mut Rng::new(0))?;
        let count = r.u32()?;
        if count != model.nodes.len() {
            return Err(r.malformed(&format!("{count} nodes stored, architecture has {}", model.nodes.len())));
        }
        for node in &mut model.nodes {
            for slot in [&mut node.params, &mut node.stats] {
                let n = r.u8()? as usize;
                if n != slot.len() {
                    return Err(r.malformed(&format!(
                        "node {} stores {n} tensors, expected {}",
                        node.index,
                        slot.len()
                    )));
                }
                for t in slot.iter_mut() {
                    let loaded: Tensor<T> = r.f32_tensor()?;
                    if loaded.shape() != t.shape() {
                        return Err(Error::ShapeMismatch {
                            op: "load",
                            expected: t.shape().to_vec(),
                            actual: loaded.shape().to_vec(),
                        }
                        .at_node(node.index));
                    }
                    *t = loaded;
                }
            }
        }
        r.finish()?;
        Ok(model)
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Architecture;

    fn model() -> ModelGraph<f32> {
        let spec = ArchSpec::new(Architecture::MlpResidual, &[1, 4, 4], 3)
            .with_size(2, 8)
            .with_binarization(true, true);
        build_model(&spec, &mut Rng::new(5)).unwrap()
    }

    #[test]
    fn round_trip_is_exact_for_f32() {
        let m = model();
        let back = ModelGraph::<f32>::from_bytes(&m.to_bytes()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn file_round_trip() {
        let m = model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bgr1");
        m.save(&path).unwrap();
        assert_eq!(ModelGraph::<f32>::load(&path).unwrap(), m);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = model().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(ModelGraph::<f32>::from_bytes(&bad), Err(Error::Format { .. })));
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(
            ModelGraph::<f32>::from_bytes(cut),
            Err(Error::Truncated { .. })
        ));
        let mut long = bytes.clone();
        long.push(0);
        assert!(ModelGraph::<f32>::from_bytes(&long).is_err());
    }
}
