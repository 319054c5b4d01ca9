//! Biased HSIC estimator with Gaussian kernels, and its gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{matmul_nt_into, Tensor};

pub const BANDWIDTH_FLOOR: f64 = 1e-8;
/// Bandwidth of the kernel on one-hot labels.
pub const LABEL_SIGMA: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SigmaPolicy {
    /// Median pairwise distance within the batch, per variable.
    Median,
    Fixed(f64),
}

/// Squared Euclidean distances between the rows of `z` (`[m, d]`).
pub fn pairwise_sq_distances<T: Scalar>(z: &Tensor<T>) -> Result<Tensor<T>> {
    let m = z.dim(0);
    let d = z.len() / m;
    let mut gram = vec![T::zero(); m * m];
    matmul_nt_into(m, d, m, z.data(), z.data(), &mut gram);
    let norms: Vec<T> = (0..m).map(|i| gram[i * m + i]).collect();
    let out = Tensor::from_fn(vec![m, m], |idx| {
        let (i, j) = (idx / m, idx % m);
        if i == j {
            T::zero()
        } else {
            (norms[i] + norms[j] - T::of(2.0) * gram[idx]).max(T::zero())
        }
    });
    out.finite("pairwise distances")
}

/// Median of the off-diagonal pairwise distances, floored.
pub fn median_bandwidth<T: Scalar>(sq: &Tensor<T>) -> f64 {
    let m = sq.dim(0);
    let mut d: Vec<f64> = (0..m)
        .flat_map(|i| (i + 1..m).map(move |j| (i, j)))
        .map(|(i, j)| sq.data()[i * m + j].as_f64().sqrt())
        .collect();
    if d.is_empty() {
        return BANDWIDTH_FLOOR;
    }
    d.sort_by(f64::total_cmp);
    let mid = d.len() / 2;
    let med = if d.len().is_multiple_of(2) {
        0.5 * (d[mid - 1] + d[mid])
    } else {
        d[mid]
    };
    med.max(BANDWIDTH_FLOOR)
}

pub fn resolve_sigma<T: Scalar>(policy: SigmaPolicy, sq: &Tensor<T>) -> f64 {
    match policy {
        SigmaPolicy::Median => median_bandwidth(sq),
        SigmaPolicy::Fixed(s) => s.max(BANDWIDTH_FLOOR),
    }
}

/// `exp(-‖a_i − a_j‖² / 2σ²)` from precomputed squared distances.
pub fn gaussian_kernel<T: Scalar>(sq: &Tensor<T>, sigma: f64) -> Tensor<T> {
    let c = T::of(-0.5 / (sigma * sigma));
    sq.map(|v| (v * c).exp())
}

/// `H K H`: rows and columns centred.
pub fn center<T: Scalar>(k: &Tensor<T>) -> Tensor<T> {
    let m = k.dim(0);
    let inv = T::one() / T::of(m as f64);
    let row: Vec<T> = k
        .data()
        .chunks(m)
        .map(|r| r.iter().fold(T::zero(), |a, &v| a + v) * inv)
        .collect();
    let col: Vec<T> = (0..m)
        .map(|j| (0..m).fold(T::zero(), |a, i| a + k.data()[i * m + j]) * inv)
        .collect();
    let all = row.iter().fold(T::zero(), |a, &v| a + v) * inv;
    Tensor::from_fn(vec![m, m], |idx| {
        let (i, j) = (idx / m, idx % m);
        k.data()[idx] - row[i] - col[j] + all
    })
}

/// `tr(K_a H K_b H) / (m−1)²`.
pub fn hsic<T: Scalar>(ka: &Tensor<T>, kb: &Tensor<T>) -> Result<T> {
    if ka.rank() != 2 || ka.dim(0) != ka.dim(1) || ka.shape() != kb.shape() {
        return Err(Error::ShapeMismatch {
            op: "hsic",
            expected: ka.shape().to_vec(),
            actual: kb.shape().to_vec(),
        });
    }
    let m = ka.dim(0);
    if m < 2 {
        return Err(Error::InvalidArgument("hsic needs at least two samples".into()));
    }
    let norm = T::of(((m - 1) * (m - 1)) as f64);
    Ok(center(ka).dot(kb)? / norm)
}

/// Kernel matrices of the two fixed variables of the HSIC objective.
#[derive(Clone, Debug)]
pub struct HsicTargets<T> {
    /// `H K_X H`.
    pub input: Tensor<T>,
    /// `H K_Y H`.
    pub labels: Tensor<T>,
}

impl<T: Scalar> HsicTargets<T> {
    pub fn new(x: &Tensor<T>, one_hot: &Tensor<T>, policy: SigmaPolicy) -> Result<Self> {
        let sx = pairwise_sq_distances(x)?;
        let sy = pairwise_sq_distances(one_hot)?;
        Ok(Self {
            input: center(&gaussian_kernel(&sx, resolve_sigma(policy, &sx))),
            labels: center(&gaussian_kernel(&sy, LABEL_SIGMA)),
        })
    }
}

/// Value and gradient of `HSIC(Z, X) − γ·HSIC(Z, Y)` with respect to the rows of `z`.
/// The bandwidth of `K_Z` is treated as a constant of the batch.
pub fn hsic_objective_grad<T: Scalar>(
    z: &Tensor<T>,
    targets: &HsicTargets<T>,
    gamma: f64,
    policy: SigmaPolicy,
) -> Result<(T, Tensor<T>)> {
    let m = z.dim(0);
    if m < 4 {
        return Err(Error::InvalidArgument(format!(
            "hsic objective needs a batch of at least 4, got {m}"
        )));
    }
    let d = z.len() / m;
    let sq = pairwise_sq_distances(z)?;
    let sigma = resolve_sigma(policy, &sq);
    let kz = gaussian_kernel(&sq, sigma);
    let norm = T::of(((m - 1) * (m - 1)) as f64);
    let g = T::of(gamma);
    // M = (H K_X H − γ H K_Y H) / (m−1)², objective = Σ M ⊙ K_Z
    let weights = targets
        .input
        .zip_map(&targets.labels, "hsic objective", |a, b| (a - g * b) / norm)?;
    let objective = weights.dot(&kz)?;
    let gk = weights.mul(&kz)?;
    let coef = T::of(-2.0 / (sigma * sigma));
    let zd = z.data();
    let mut grad = vec![T::zero(); m * d];
    for a in 0..m {
        let row = &gk.data()[a * m..(a + 1) * m];
        let weight_sum = row.iter().fold(T::zero(), |s, &v| s + v);
        let out = &mut grad[a * d..(a + 1) * d];
        for (o, &z) in out.iter_mut().zip(&zd[a * d..(a + 1) * d]) {
            *o = weight_sum * z;
        }
        for (j, &w) in row.iter().enumerate() {
            if w != T::zero() {
                for (o, &z) in out.iter_mut().zip(&zd[j * d..(j + 1) * d]) {
                    *o -= w * z;
                }
            }
        }
        out.iter_mut().for_each(|o| *o *= coef);
    }
    Ok((
        objective,
        Tensor::from_parts(z.shape().to_vec(), grad).finite("hsic gradient")?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;
    use proptest::prelude::*;

    /// Biased estimator written as explicit sums over sample indices.
    fn double_sum(k: &Tensor<f64>, l: &Tensor<f64>) -> f64 {
        let m = k.dim(0);
        let (k, l) = (k.data(), l.data());
        let at = |x: &[f64], i: usize, j: usize| x[i * m + j];
        let mf = m as f64;
        let mut t1 = 0.0;
        let mut t2 = 0.0;
        let mut ksum = 0.0;
        let mut lsum = 0.0;
        for i in 0..m {
            for j in 0..m {
                t1 += at(k, i, j) * at(l, i, j);
                ksum += at(k, i, j);
                lsum += at(l, i, j);
                for q in 0..m {
                    t2 += at(k, i, j) * at(l, i, q);
                }
            }
        }
        (t1 - 2.0 * t2 / mf + ksum * lsum / (mf * mf)) / ((mf - 1.0) * (mf - 1.0))
    }

    fn random_kernel(rng: &mut Rng, m: usize, d: usize) -> Tensor<f64> {
        let a: Tensor<f64> = rng.uniform(&[m, d], -1.0, 1.0).unwrap();
        let sq = pairwise_sq_distances(&a).unwrap();
        gaussian_kernel(&sq, median_bandwidth(&sq))
    }

    #[test]
    fn identity_kernels_give_trace_of_centering() {
        let i2 = Tensor::<f64>::from_f64([2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!((hsic(&i2, &i2).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn trace_form_equals_double_sum() {
        let mut rng = Rng::new(8);
        for m in 2..=8 {
            let k = random_kernel(&mut rng, m, 3);
            let l = random_kernel(&mut rng, m, 5);
            assert!((hsic(&k, &l).unwrap() - double_sum(&k, &l)).abs() < 1e-10);
        }
    }

    proptest! {
        #[test]
        fn self_dependence_nonnegative_and_permutation_invariant(seed in 0u64..500, m in 4usize..9) {
            let mut rng = Rng::new(seed);
            let a: Tensor<f64> = rng.uniform(&[m, 3], -1.0, 1.0).unwrap();
            let b: Tensor<f64> = rng.uniform(&[m, 2], -1.0, 1.0).unwrap();
            let ka = gaussian_kernel(&pairwise_sq_distances(&a).unwrap(), 0.8);
            let kb = gaussian_kernel(&pairwise_sq_distances(&b).unwrap(), 0.8);
            prop_assert!(hsic(&ka, &ka).unwrap() >= 0.0);
            let mut perm: Vec<usize> = (0..m).collect();
            rng.shuffle(&mut perm);
            let pa = a.select_rows(&perm).unwrap();
            let pb = b.select_rows(&perm).unwrap();
            let pka = gaussian_kernel(&pairwise_sq_distances(&pa).unwrap(), 0.8);
            let pkb = gaussian_kernel(&pairwise_sq_distances(&pb).unwrap(), 0.8);
            prop_assert!((hsic(&ka, &kb).unwrap() - hsic(&pka, &pkb).unwrap()).abs() < 1e-10);
        }
    }

    #[test]
    fn median_of_known_distances() {
        // points at 0, 1, 3 on a line: distances 1, 2, 3
        let z = Tensor::<f64>::from_f64([3, 1], &[0.0, 1.0, 3.0]).unwrap();
        assert_eq!(median_bandwidth(&pairwise_sq_distances(&z).unwrap()), 2.0);
        let same = Tensor::<f64>::zeros(vec![4, 2]);
        assert_eq!(
            median_bandwidth(&pairwise_sq_distances(&same).unwrap()),
            BANDWIDTH_FLOOR
        );
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let mut rng = Rng::new(3);
        let (m, d) = (6, 4);
        let x: Tensor<f64> = rng.uniform(&[m, 5], 0.0, 1.0).unwrap();
        let y = Tensor::one_hot(&[0, 1, 2, 0, 1, 2], 3).unwrap();
        let policy = SigmaPolicy::Fixed(1.3);
        let targets = HsicTargets::new(&x, &y, SigmaPolicy::Median).unwrap();
        let z: Tensor<f64> = rng.uniform(&[m, d], -1.0, 1.0).unwrap();
        let (_, grad) = hsic_objective_grad(&z, &targets, 20.0, policy).unwrap();
        let h = 1e-5;
        for idx in 0..z.len() {
            let mut up = z.clone();
            up.data_mut()[idx] += h;
            let mut down = z.clone();
            down.data_mut()[idx] -= h;
            let fu = hsic_objective_grad(&up, &targets, 20.0, policy).unwrap().0;
            let fd = hsic_objective_grad(&down, &targets, 20.0, policy).unwrap().0;
            let numeric = (fu - fd) / (2.0 * h);
            let a = grad.data()[idx];
            assert!(
                (a - numeric).abs() <= 1e-6 * a.abs().max(numeric.abs()) + 1e-10,
                "{a} vs {numeric}"
            );
        }
    }

    #[test]
    fn objective_matches_estimator_definition() {
        let mut rng = Rng::new(5);
        let x: Tensor<f64> = rng.uniform(&[5, 3], 0.0, 1.0).unwrap();
        let y = Tensor::one_hot(&[0, 1, 1, 0, 1], 2).unwrap();
        let z: Tensor<f64> = rng.uniform(&[5, 2], -1.0, 1.0).unwrap();
        let targets = HsicTargets::new(&x, &y, SigmaPolicy::Median).unwrap();
        let (obj, _) = hsic_objective_grad(&z, &targets, 2.0, SigmaPolicy::Median).unwrap();
        let sq = |t: &Tensor<f64>| pairwise_sq_distances(t).unwrap();
        let kz = gaussian_kernel(&sq(&z), median_bandwidth(&sq(&z)));
        let kx = gaussian_kernel(&sq(&x), median_bandwidth(&sq(&x)));
        let ky = gaussian_kernel(&sq(&y), LABEL_SIGMA);
        let want = hsic(&kz, &kx).unwrap() - 2.0 * hsic(&kz, &ky).unwrap();
        assert!((obj - want).abs() < 1e-12);
        let small = Tensor::<f64>::zeros(vec![3, 2]);
        assert!(hsic_objective_grad(&small, &targets, 2.0, SigmaPolicy::Median).is_err());
    }
}
