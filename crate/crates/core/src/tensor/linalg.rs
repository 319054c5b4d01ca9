use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Matrix product `a[m×k] · b[k×n]`.
///
/// Each output element accumulates `a[i,p]·b[p,j]` for `p = 0..k` in
/// ascending order starting from zero, one fused multiply-add per step, so
/// the result is bit-identical to a naive `mul_add` loop. Tiling only
/// reorders work across output elements.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0) {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            expected: a.shape().to_vec(),
            actual: b.shape().to_vec(),
        });
    }
    let (m, k, n) = (a.dim(0), a.dim(1), b.dim(1));
    let mut c = vec![T::zero(); m * n];
    matmul_into(m, k, n, a.data(), b.data(), &mut c);
    Tensor::from_parts(vec![m, n], c).finite("matmul")
}

const MR: usize = 4;
const NR: usize = 32;

/// Accumulates `a · b` into `c` (row-major, `c` of length `m·n`).
pub fn matmul_into<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    gemm(m, k, n, Strided::new(a, k, 1), Strided::new(b, n, 1), c);
}

/// Accumulates `a · bᵀ` into `c`, with `b` stored as `[n×k]`.
pub fn matmul_nt_into<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), n * k);
    gemm(m, k, n, Strided::new(a, k, 1), Strided::new(b, 1, k), c);
}

/// Accumulates `aᵀ · b` into `c`, with `a` stored as `[k×m]`.
pub fn matmul_tn_into<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    assert_eq!(a.len(), k * m);
    assert_eq!(b.len(), k * n);
    gemm(m, k, n, Strided::new(a, 1, m), Strided::new(b, n, 1), c);
}

/// Matrix view: element `(i, j)` lives at `data[i·row + j·col]`.
#[derive(Clone, Copy)]
struct Strided<'a, T> {
    data: &'a [T],
    row: usize,
    col: usize,
}

impl<'a, T: Scalar> Strided<'a, T> {
    fn new(data: &'a [T], row: usize, col: usize) -> Self {
        Self { data, row, col }
    }

    #[inline(always)]
    fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.row + j * self.col]
    }
}

/// Every `c[i,j]` accumulates its `k` products in ascending `p` order onto
/// its initial value, whatever the operand layout.
fn gemm<T: Scalar>(m: usize, k: usize, n: usize, a: Strided<T>, b: Strided<T>, c: &mut [T]) {
    assert_eq!(c.len(), m * n);
    let a_copy;
    let a_rows: &[T] = if a.col == 1 {
        &a.data[..m * k]
    } else {
        // a row-major copy of `a` keeps the tile's loads contiguous
        let mut rows = vec![T::zero(); m * k];
        for (i, row) in rows.chunks_exact_mut(k).enumerate() {
            for (p, v) in row.iter_mut().enumerate() {
                *v = a.at(i, p);
            }
        }
        a_copy = rows;
        &a_copy
    };
    let mut panel = vec![T::zero(); k * NR];
    let mut edge = vec![T::zero(); MR * NR];
    for j0 in (0..n).step_by(NR) {
        let width = NR.min(n - j0);
        // columns past `n` stay zero and their results are discarded
        for p in 0..k {
            let dst = &mut panel[p * NR..p * NR + width];
            if b.col == 1 {
                dst.copy_from_slice(&b.data[p * b.row + j0..p * b.row + j0 + width]);
            } else {
                for (jj, d) in dst.iter_mut().enumerate() {
                    *d = b.at(p, j0 + jj);
                }
            }
        }
        let mut i = 0;
        while i + MR <= m {
            let a_tile = &a_rows[i * k..(i + MR) * k];
            if width == NR {
                tile(a_tile, k, &panel, &mut c[i * n..(i + MR) * n], n, j0);
            } else {
                for r in 0..MR {
                    edge[r * NR..r * NR + width].copy_from_slice(&c[(i + r) * n + j0..(i + r) * n + j0 + width]);
                }
                tile(a_tile, k, &panel, &mut edge, NR, 0);
                for r in 0..MR {
                    c[(i + r) * n + j0..(i + r) * n + j0 + width].copy_from_slice(&edge[r * NR..r * NR + width]);
                }
            }
            i += MR;
        }
        for i in i..m {
            let out = &mut c[i * n + j0..i * n + j0 + width];
            for p in 0..k {
                let av = a_rows[i * k + p];
                for (cv, &bv) in out.iter_mut().zip(&panel[p * NR..p * NR + width]) {
                    *cv = av.mul_add(bv, *cv);
                }
            }
        }
    }
}

/// `MR × NR` block of `c` held in registers across the whole `k` loop.
///
/// The lane-group shape of the inner loop is what lets the compiler keep the
/// accumulators in vector registers.
#[inline(never)]
fn tile<T: Scalar>(a: &[T], k: usize, panel: &[T], c: &mut [T], n: usize, j0: usize) {
    const LANES: usize = 8;
    let mut acc = [[T::zero(); NR]; MR];
    for (r, row) in acc.iter_mut().enumerate() {
        row.copy_from_slice(&c[r * n + j0..r * n + j0 + NR]);
    }
    for (p, brow) in panel.chunks_exact(NR).take(k).enumerate() {
        let brow: &[T; NR] = brow.try_into().unwrap();
        let av: [T; MR] = std::array::from_fn(|r| a[r * k + p]);
        for g in 0..NR / LANES {
            for r in 0..MR {
                let mut t = [T::zero(); LANES];
                for l in 0..LANES {
                    t[l] = av[r].mul_add(brow[g * LANES + l], acc[r][g * LANES + l]);
                }
                acc[r][g * LANES..(g + 1) * LANES].copy_from_slice(&t);
            }
        }
    }
    for (r, row) in acc.iter().enumerate() {
        c[r * n + j0..r * n + j0 + NR].copy_from_slice(row);
    }
}
