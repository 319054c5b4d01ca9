use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Row-wise softmax of a rank-2 tensor, stabilized by max subtraction.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    if logits.rank() != 2 {
        return Err(Error::InvalidGeometry {
            op: "softmax",
            detail: format!("expected rank 2, got {:?}", logits.shape()),
        });
    }
    let c = logits.dim(1);
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks(c) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let start = out.len();
        let mut z = T::zero();
        for &v in row {
            let e = (v - max).exp();
            z += e;
            out.push(e);
        }
        for e in &mut out[start..] {
            *e /= z;
        }
    }
    Tensor::from_parts(logits.shape().to_vec(), out).finite("softmax")
}

/// Mean cross-entropy over the batch and its exact gradient with respect
/// to the logits, `(softmax(logits) − targets) / n`.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, targets: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    super::same_shape("softmax_cross_entropy", logits, targets)?;
    let probs = softmax(logits)?;
    let (n, c) = (logits.dim(0), logits.dim(1));
    let inv_n = T::one() / T::of(n as f64);
    let mut loss = T::zero();
    let mut err = Vec::with_capacity(logits.len());
    for i in 0..n {
        let row = &logits.data()[i * c..(i + 1) * c];
        let t = &targets.data()[i * c..(i + 1) * c];
        let hot: Vec<usize> = (0..c).filter(|&j| t[j] != T::zero()).collect();
        if hot.len() != 1 || t[hot[0]] != T::one() {
            return Err(Error::InvalidArgument(format!("target row {i} is not one-hot")));
        }
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let lse = row.iter().fold(T::zero(), |s, &v| s + (v - max).exp()).ln() + max;
        loss += lse - row[hot[0]];
        let p = &probs.data()[i * c..(i + 1) * c];
        err.extend(p.iter().zip(t).map(|(&p, &t)| (p - t) * inv_n));
    }
    let loss = loss * inv_n;
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            op: "softmax_cross_entropy",
        });
    }
    Ok((loss, Tensor::from_parts(logits.shape().to_vec(), err)))
}
