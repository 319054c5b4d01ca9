use super::AlgorithmKind;
use crate::error::{Error, Result};
use crate::graph::ModelGraph;
use crate::scalar::Scalar;
use crate::tensor::{matmul, Rng, Tensor};

/// Constant random projections drawn once per training run.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedbackMatrices<T> {
    /// `B_k` of shape `[C, d_k]` for every hidden segment `k` (DFA, DRTP).
    pub hidden: Vec<Tensor<T>>,
    /// `B_0` of shape `[C, input_dim]` (SigpropTL).
    pub input: Option<Tensor<T>>,
    /// Half-width of the uniform entry distribution.
    pub scale: f64,
}

impl<T: Scalar> FeedbackMatrices<T> {
    /// Projects rows of `signal` (`[n, C]`) onto segment `k`'s output geometry.
    pub fn project_hidden(&self, k: usize, signal: &Tensor<T>, out_shape: &[usize]) -> Result<Tensor<T>> {
        let b = self.hidden.get(k).ok_or(Error::MissingFeedback { segment: k })?;
        reshape_rows(matmul(signal, b)?, out_shape)
    }

    pub fn project_input(&self, signal: &Tensor<T>, input_shape: &[usize]) -> Result<Tensor<T>> {
        let b = self.input.as_ref().ok_or(Error::MissingFeedback { segment: 0 })?;
        reshape_rows(matmul(signal, b)?, input_shape)
    }
}

fn reshape_rows<T: Scalar>(t: Tensor<T>, per_sample: &[usize]) -> Result<Tensor<T>> {
    let mut shape = vec![t.dim(0)];
    shape.extend(per_sample);
    t.reshape(shape)
}

/// Entries are uniform in `±s` with `s = 1/√C`; SigpropTL multiplies `s` by `alpha`.
/// BP, HSIC and other kinds without feedback get `None`.
pub fn make_feedback<T: Scalar>(
    kind: AlgorithmKind,
    model: &ModelGraph<T>,
    rng: &mut Rng,
    alpha: f64,
) -> Result<Option<FeedbackMatrices<T>>> {
    let c = model.num_classes;
    let base = 1.0 / (c as f64).sqrt();
    Ok(match kind {
        AlgorithmKind::Dfa | AlgorithmKind::Drtp => {
            let hidden = (0..model.segment_count() - 1)
                .map(|k| {
                    let d: usize = model.segment_output_shape(k).iter().product();
                    rng.uniform(&[c, d], -base, base)
                })
                .collect::<Result<_>>()?;
            Some(FeedbackMatrices {
                hidden,
                input: None,
                scale: base,
            })
        }
        AlgorithmKind::SigpropTl => {
            let s = base * alpha;
            let d: usize = model.input_shape.iter().product();
            let input = if s > 0.0 {
                rng.uniform(&[c, d], -s, s)?
            } else {
                Tensor::zeros(vec![c, d])
            };
            Some(FeedbackMatrices {
                hidden: Vec::new(),
                input: Some(input),
                scale: s,
            })
        }
        AlgorithmKind::Bp | AlgorithmKind::Hsic => None,
    })
}
