use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Static geometry of a 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dGeometry {
    pub fn new(input: &[usize], kernels: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let bad = |detail: String| Error::InvalidGeometry { op: "conv2d", detail };
        if input.len() != 4 || kernels.len() != 4 {
            return Err(bad(format!("input {input:?} and kernels {kernels:?} must be rank 4")));
        }
        if input[1] != kernels[1] {
            return Err(bad(format!(
                "input has {} channels, kernels expect {}",
                input[1], kernels[1]
            )));
        }
        if stride == 0 {
            return Err(bad("stride must be at least 1".into()));
        }
        if kernels[2] > input[2] + 2 * padding || kernels[3] > input[3] + 2 * padding {
            return Err(bad(format!(
                "kernel {}x{} larger than padded input {}x{}",
                kernels[2],
                kernels[3],
                input[2] + 2 * padding,
                input[3] + 2 * padding
            )));
        }
        Ok(Self {
            batch: input[0],
            in_channels: input[1],
            height: input[2],
            width: input[3],
            out_channels: kernels[0],
            kernel_h: kernels[2],
            kernel_w: kernels[3],
            stride,
            padding,
        })
    }

    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel_w) / self.stride + 1
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_channels, self.out_h(), self.out_w()]
    }

    /// Input coordinate hit by output position `o` and kernel offset `k`, if in bounds.
    #[inline]
    fn source(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        (o * self.stride + k).checked_sub(self.padding).filter(|&v| v < extent)
    }
}

/// Direct cross-correlation (no kernel flip) with zero padding.
///
/// Per output element the sum runs over `(channel, ky, kx)` in ascending
/// order; padded positions are skipped.
pub fn conv2d<T: Scalar>(input: &Tensor<T>, kernels: &Tensor<T>, stride: usize, padding: usize) -> Result<Tensor<T>> {
    let g = Conv2dGeometry::new(input.shape(), kernels.shape(), stride, padding)?;
    let (oh, ow) = (g.out_h(), g.out_w());
    let x = input.data();
    let w = kernels.data();
    let mut out = vec![T::zero(); g.batch * g.out_channels * oh * ow];
    let ksize = g.in_channels * g.kernel_h * g.kernel_w;
    for n in 0..g.batch {
        for o in 0..g.out_channels {
            let wk = &w[o * ksize..(o + 1) * ksize];
            let plane = &mut out[(n * g.out_channels + o) * oh * ow..][..oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = T::zero();
                    for c in 0..g.in_channels {
                        let xc = &x[(n * g.in_channels + c) * g.height * g.width..];
                        for ky in 0..g.kernel_h {
                            let Some(iy) = g.source(oy, ky, g.height) else {
                                continue;
                            };
                            for kx in 0..g.kernel_w {
                                let Some(ix) = g.source(ox, kx, g.width) else {
                                    continue;
                                };
                                acc = xc[iy * g.width + ix].mul_add(wk[(c * g.kernel_h + ky) * g.kernel_w + kx], acc);
                            }
                        }
                    }
                    plane[oy * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::from_parts(g.output_shape(), out).finite("conv2d")
}

/// Gradient of a [`conv2d`] output with respect to its input.
pub fn conv2d_backward_input<T: Scalar>(
    grad_out: &Tensor<T>,
    kernels: &Tensor<T>,
    geometry: &Conv2dGeometry,
) -> Result<Tensor<T>> {
    let g = geometry;
    let (oh, ow) = (g.out_h(), g.out_w());
    if grad_out.shape() != g.output_shape().as_slice() {
        return Err(Error::ShapeMismatch {
            op: "conv2d_backward_input",
            expected: g.output_shape(),
            actual: grad_out.shape().to_vec(),
        });
    }
    let dy = grad_out.data();
    let w = kernels.data();
    let ksize = g.in_channels * g.kernel_h * g.kernel_w;
    let mut dx = vec![T::zero(); g.batch * g.in_channels * g.height * g.width];
    for n in 0..g.batch {
        for o in 0..g.out_channels {
            let wk = &w[o * ksize..(o + 1) * ksize];
            let plane = &dy[(n * g.out_channels + o) * oh * ow..][..oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    let d = plane[oy * ow + ox];
                    if d == T::zero() {
                        continue;
                    }
                    for c in 0..g.in_channels {
                        let base = (n * g.in_channels + c) * g.height * g.width;
                        for ky in 0..g.kernel_h {
                            let Some(iy) = g.source(oy, ky, g.height) else {
                                continue;
                            };
                            for kx in 0..g.kernel_w {
                                let Some(ix) = g.source(ox, kx, g.width) else {
                                    continue;
                                };
                                dx[base + iy * g.width + ix] += d * wk[(c * g.kernel_h + ky) * g.kernel_w + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_parts(vec![g.batch, g.in_channels, g.height, g.width], dx).finite("conv2d_backward_input")
}

/// Gradient of a [`conv2d`] output with respect to its kernels.
pub fn conv2d_backward_kernels<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    geometry: &Conv2dGeometry,
) -> Result<Tensor<T>> {
    let g = geometry;
    let (oh, ow) = (g.out_h(), g.out_w());
    let dy = grad_out.data();
    let x = input.data();
    let ksize = g.in_channels * g.kernel_h * g.kernel_w;
    let mut dw = vec![T::zero(); g.out_channels * ksize];
    for n in 0..g.batch {
        for o in 0..g.out_channels {
            let plane = &dy[(n * g.out_channels + o) * oh * ow..][..oh * ow];
            let dwk = &mut dw[o * ksize..(o + 1) * ksize];
            for oy in 0..oh {
                for ox in 0..ow {
                    let d = plane[oy * ow + ox];
                    for c in 0..g.in_channels {
                        let xc = &x[(n * g.in_channels + c) * g.height * g.width..];
                        for ky in 0..g.kernel_h {
                            let Some(iy) = g.source(oy, ky, g.height) else {
                                continue;
                            };
                            for kx in 0..g.kernel_w {
                                let Some(ix) = g.source(ox, kx, g.width) else {
                                    continue;
                                };
                                dwk[(c * g.kernel_h + ky) * g.kernel_w + kx] += d * xc[iy * g.width + ix];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_parts(vec![g.out_channels, g.in_channels, g.kernel_h, g.kernel_w], dw)
        .finite("conv2d_backward_kernels")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{matmul, Rng};

    /// Sliding-window reference that materializes the padded input.
    fn oracle(x: &Tensor<f32>, w: &Tensor<f32>, stride: usize, pad: usize) -> Vec<f32> {
        let (n, c, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (o, kh, kw) = (w.dim(0), w.dim(2), w.dim(3));
        let (ph, pw) = (h + 2 * pad, wd + 2 * pad);
        let mut padded = vec![0.0f32; n * c * ph * pw];
        for b in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for xx in 0..wd {
                        padded[((b * c + ch) * ph + y + pad) * pw + xx + pad] =
                            x.data()[((b * c + ch) * h + y) * wd + xx];
                    }
                }
            }
        }
        let (oh, ow) = ((ph - kh) / stride + 1, (pw - kw) / stride + 1);
        let mut out = Vec::new();
        for b in 0..n {
            for oc in 0..o {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = 0.0f32;
                        for ch in 0..c {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let y = oy * stride + ky;
                                    let xx = ox * stride + kx;
                                    let inside = y >= pad && y < h + pad && xx >= pad && xx < wd + pad;
                                    if inside {
                                        s = padded[((b * c + ch) * ph + y) * pw + xx]
                                            .mul_add(w.data()[((oc * c + ch) * kh + ky) * kw + kx], s);
                                    }
                                }
                            }
                        }
                        out.push(s);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn hand_examples() {
        let ones = Tensor::<f32>::full(vec![1, 1, 3, 3], 1.0);
        let k = Tensor::<f32>::full(vec![1, 1, 1, 1], 2.0);
        let y = conv2d(&ones, &k, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 2.0));

        let x = Tensor::<f32>::from_f64(vec![1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let k = Tensor::<f32>::from_f64(vec![1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(conv2d(&x, &k, 1, 0).unwrap().data(), &[5.0]);
    }

    #[test]
    fn random_strided_padded_matches_oracle() {
        let mut rng = Rng::new(3);
        let x = rng.uniform::<f32>(&[2, 3, 8, 8], -1.0, 1.0).unwrap();
        let w = rng.uniform::<f32>(&[4, 3, 3, 3], -1.0, 1.0).unwrap();
        let y = conv2d(&x, &w, 2, 1).unwrap();
        assert_eq!(y.shape(), &[2, 4, 4, 4]);
        assert_eq!(y.data(), oracle(&x, &w, 2, 1).as_slice());
    }

    #[test]
    fn pointwise_kernel_is_per_pixel_matmul() {
        let mut rng = Rng::new(4);
        let x = rng.uniform::<f32>(&[1, 3, 4, 5], -1.0, 1.0).unwrap();
        let w = rng.uniform::<f32>(&[2, 3, 1, 1], -1.0, 1.0).unwrap();
        let y = conv2d(&x, &w, 1, 0).unwrap();
        let wm = w.clone().reshape(vec![2, 3]).unwrap();
        let xm = x.reshape(vec![3, 20]).unwrap();
        let expect = matmul(&wm, &xm).unwrap();
        assert_eq!(y.data(), expect.data());
    }

    #[test]
    fn invalid_geometry() {
        let x = Tensor::<f32>::zeros(vec![1, 1, 2, 2]);
        let w = Tensor::<f32>::zeros(vec![1, 1, 3, 3]);
        assert!(matches!(conv2d(&x, &w, 1, 0), Err(Error::InvalidGeometry { .. })));
        assert!(conv2d(&x, &w, 1, 1).is_ok());
        assert!(conv2d(&x, &w, 0, 1).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = Rng::new(5);
        let x = rng.uniform::<f64>(&[2, 2, 5, 5], -1.0, 1.0).unwrap();
        let w = rng.uniform::<f64>(&[3, 2, 3, 3], -1.0, 1.0).unwrap();
        let g = Conv2dGeometry::new(x.shape(), w.shape(), 2, 1).unwrap();
        let probe = rng.uniform::<f64>(&g.output_shape(), -1.0, 1.0).unwrap();
        let loss = |x: &Tensor<f64>, w: &Tensor<f64>| conv2d(x, w, 2, 1).unwrap().dot(&probe).unwrap();
        let dx = conv2d_backward_input(&probe, &w, &g).unwrap();
        let dw = conv2d_backward_kernels(&probe, &x, &g).unwrap();
        let h = 1e-6;
        for i in [0, 7, 23, 49] {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (loss(&xp, &w) - loss(&xm, &w)) / (2.0 * h);
            assert!((fd - dx.data()[i]).abs() < 1e-8);
        }
        for i in [0, 5, 17, 53] {
            let mut wp = w.clone();
            wp.data_mut()[i] += h;
            let mut wm = w.clone();
            wm.data_mut()[i] -= h;
            let fd = (loss(&x, &wp) - loss(&x, &wm)) / (2.0 * h);
            assert!((fd - dw.data()[i]).abs() < 1e-8);
        }
    }
}
