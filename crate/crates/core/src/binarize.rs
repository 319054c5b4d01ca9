//! Sign binarization and the two straight-through estimators.
//!
//! `sign(0) = +1` everywhere in the crate, so binary values never need a
//! third state and the packed path agrees with the float path.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Surrogate derivative used in place of the derivative of `sign`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SteKind {
    /// Gradient passes through unchanged, as if `sign` were the identity.
    NonSaturating,
    /// Hard-tanh surrogate: gradient passes only where `|z| <= 1`.
    Saturating,
}

/// The STE applied when binarizing latent weights.
pub const WEIGHT_STE: SteKind = SteKind::NonSaturating;

/// The STE applied behind binary (sign) activations.
pub const ACTIVATION_STE: SteKind = SteKind::Saturating;

#[inline]
pub fn sign_scalar<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one()
    } else {
        -T::one()
    }
}

pub fn sign_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sign_scalar)
}

pub fn ste_backward<T: Scalar>(kind: SteKind, upstream: &Tensor<T>, preactivation: &Tensor<T>) -> Result<Tensor<T>> {
    match kind {
        SteKind::NonSaturating => {
            crate::tensor::same_shape("ste_backward", upstream, preactivation)?;
            Ok(upstream.clone())
        }
        SteKind::Saturating => upstream.zip_map(preactivation, "ste_backward", |d, z| {
            if z.abs() <= T::one() {
                d
            } else {
                T::zero()
            }
        }),
    }
}

/// Binary view of latent weights. The latent tensor is left untouched; its
/// gradient is the gradient taken against the binary view (non-saturating STE).
pub fn binarize_weights<T: Scalar>(latent: &Tensor<T>) -> Tensor<T> {
    sign_forward(latent)
}

/// Clamps latent weights to `[-1, 1]`. Training leaves latents unclipped
/// unless this is requested explicitly.
pub fn clip_latent<T: Scalar>(latent: &mut Tensor<T>) {
    for v in latent.data_mut() {
        *v = v.max(-T::one()).min(T::one());
    }
}
