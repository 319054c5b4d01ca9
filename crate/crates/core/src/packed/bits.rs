use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const WORD_BITS: usize = 64;

/// ±1 values stored one per bit (`1 ↦ +1`, `0 ↦ −1`), LSB first.
///
/// The tensor is viewed as rows of `row_len` elements; every row starts on a
/// fresh word and its padding bits are zero.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedBitTensor {
    shape: Vec<usize>,
    row_len: usize,
    words_per_row: usize,
    words: Vec<u64>,
}

impl PackedBitTensor {
    /// Packs with the last axis as the row.
    pub fn pack<T: Scalar>(x: &Tensor<T>) -> Result<Self> {
        Self::pack_rows(x, x.shape().last().copied().unwrap_or(1))
    }

    /// Packs with rows of `row_len` consecutive elements.
    pub fn pack_rows<T: Scalar>(x: &Tensor<T>, row_len: usize) -> Result<Self> {
        if row_len == 0 || !x.len().is_multiple_of(row_len) {
            return Err(Error::InvalidArgument(format!(
                "row length {row_len} does not divide {} elements",
                x.len()
            )));
        }
        let words_per_row = row_len.div_ceil(WORD_BITS);
        let rows = x.len() / row_len;
        let mut words = vec![0u64; rows * words_per_row];
        for (r, row) in x.data().chunks(row_len).enumerate() {
            pack_row(row, &mut words[r * words_per_row..(r + 1) * words_per_row])?;
        }
        Ok(Self {
            shape: x.shape().to_vec(),
            row_len,
            words_per_row,
            words,
        })
    }

    /// Wraps words laid out as [`PackedBitTensor::pack_rows`] would produce them.
    pub(crate) fn from_words(shape: Vec<usize>, row_len: usize, words: Vec<u64>) -> Self {
        let words_per_row = row_len.div_ceil(WORD_BITS);
        debug_assert_eq!(words.len() * row_len, shape.iter().product::<usize>() * words_per_row);
        Self {
            shape,
            row_len,
            words_per_row,
            words,
        }
    }

    pub fn unpack<T: Scalar>(&self) -> Tensor<T> {
        let mut data = Vec::with_capacity(self.len());
        for r in 0..self.rows() {
            let row = self.row(r);
            data.extend((0..self.row_len).map(|e| {
                if row[e / WORD_BITS] >> (e % WORD_BITS) & 1 == 1 {
                    T::one()
                } else {
                    -T::one()
                }
            }));
        }
        Tensor::from_parts(self.shape.clone(), data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.rows() * self.row_len
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.words.len() / self.words_per_row
    }

    pub fn row_len(&self) -> usize {
        self.row_len
    }

    pub fn words_per_row(&self) -> usize {
        self.words_per_row
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn row(&self, r: usize) -> &[u64] {
        &self.words[r * self.words_per_row..(r + 1) * self.words_per_row]
    }

    /// Dense little-endian bitstream of the elements in row-major order, `ceil(len/8)` bytes.
    pub fn to_bitstream(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.len().div_ceil(8)];
        let mut e = 0;
        for r in 0..self.rows() {
            let row = self.row(r);
            for i in 0..self.row_len {
                if row[i / WORD_BITS] >> (i % WORD_BITS) & 1 == 1 {
                    out[e / 8] |= 1 << (e % 8);
                }
                e += 1;
            }
        }
        out
    }

    pub fn from_bitstream(shape: Vec<usize>, row_len: usize, bytes: &[u8]) -> Result<Self> {
        let len: usize = shape.iter().product();
        if row_len == 0 || !len.is_multiple_of(row_len) {
            return Err(Error::InvalidArgument(format!(
                "row length {row_len} does not divide {len}"
            )));
        }
        if bytes.len() != len.div_ceil(8) {
            return Err(Error::Truncated {
                format: "bitstream",
                expected: len.div_ceil(8),
                actual: bytes.len(),
            });
        }
        let words_per_row = row_len.div_ceil(WORD_BITS);
        let rows = len / row_len;
        let mut words = vec![0u64; rows * words_per_row];
        for e in 0..len {
            if bytes[e / 8] >> (e % 8) & 1 == 1 {
                let (r, i) = (e / row_len, e % row_len);
                words[r * words_per_row + i / WORD_BITS] |= 1 << (i % WORD_BITS);
            }
        }
        Ok(Self {
            shape,
            row_len,
            words_per_row,
            words,
        })
    }
}

fn pack_row<T: Scalar>(row: &[T], out: &mut [u64]) -> Result<()> {
    for (w, chunk) in out.iter_mut().zip(row.chunks(WORD_BITS)) {
        let mut word = 0u64;
        for (b, &v) in chunk.iter().enumerate() {
            if v == T::one() {
                word |= 1 << b;
            } else if v != -T::one() {
                return Err(Error::InvalidArgument(format!("cannot pack {v:?}: not ±1")));
            }
        }
        *w = word;
    }
    Ok(())
}

/// Row-major matrix of integer dot products.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IntMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<i32>,
}

impl IntMatrix {
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_parts(
            vec![self.rows, self.cols],
            self.data.iter().map(|&v| T::of(v as f64)).collect(),
        )
    }
}

/// `out[i,j] = Σ a_i·w_j` over ±1 rows, as `k − 2·popcount(a_i XOR w_j)`.
///
/// Equivalent to `2·popcount(XNOR) − k` over the valid bits: padding bits are
/// zero in both operands, so they never count as mismatches.
pub fn xnor_popcount_matmul(a: &PackedBitTensor, w: &PackedBitTensor) -> Result<IntMatrix> {
    if a.row_len != w.row_len {
        return Err(Error::ShapeMismatch {
            op: "xnor_popcount_matmul",
            expected: vec![a.rows(), a.row_len],
            actual: vec![w.rows(), w.row_len],
        });
    }
    let (m, n) = (a.rows(), w.rows());
    let mut data = vec![0i32; m * n];
    mismatch_counts(&a.words, &w.words, a.words_per_row, n, &mut data);
    let k = a.row_len as i32;
    for v in &mut data {
        *v = k - 2 * *v;
    }
    Ok(IntMatrix { rows: m, cols: n, data })
}

/// As [`xnor_popcount_matmul`], counting only bits set in `mask` (one mask row per `a` row).
///
/// Positions outside the mask contribute zero, which is how zero padding
/// enters a binary convolution.
pub fn masked_xnor_popcount_matmul(
    a: &PackedBitTensor,
    mask: &PackedBitTensor,
    w: &PackedBitTensor,
) -> Result<IntMatrix> {
    if a.row_len != w.row_len || mask.row_len != a.row_len || mask.rows() != a.rows() {
        return Err(Error::ShapeMismatch {
            op: "masked_xnor_popcount_matmul",
            expected: vec![a.rows(), a.row_len],
            actual: vec![mask.rows(), mask.row_len],
        });
    }
    let (m, n, wpr) = (a.rows(), w.rows(), a.words_per_row);
    let mut data = vec![0i32; m * n];
    for i in 0..m {
        let (ar, mr) = (a.row(i), mask.row(i));
        let valid: u32 = mr.iter().map(|x| x.count_ones()).sum();
        for j in 0..n {
            let wr = &w.words[j * wpr..(j + 1) * wpr];
            let miss: u32 = ar
                .iter()
                .zip(wr)
                .zip(mr)
                .map(|((x, y), mk)| ((x ^ y) & mk).count_ones())
                .sum();
            data[i * n + j] = valid as i32 - 2 * miss as i32;
        }
    }
    Ok(IntMatrix { rows: m, cols: n, data })
}

const COLS: usize = 4;

fn mismatch_counts(a: &[u64], w: &[u64], wpr: usize, n: usize, out: &mut [i32]) {
    for (ar, orow) in a.chunks_exact(wpr).zip(out.chunks_exact_mut(n)) {
        let mut j = 0;
        while j + COLS <= n {
            let ws: [&[u64]; COLS] = std::array::from_fn(|c| &w[(j + c) * wpr..(j + c + 1) * wpr]);
            let mut acc = [0u32; COLS];
            for (p, &x) in ar.iter().enumerate() {
                for c in 0..COLS {
                    acc[c] += (x ^ ws[c][p]).count_ones();
                }
            }
            for c in 0..COLS {
                orow[j + c] = acc[c] as i32;
            }
            j += COLS;
        }
        for (jj, o) in orow.iter_mut().enumerate().skip(j) {
            let wr = &w[jj * wpr..(jj + 1) * wpr];
            *o = ar.iter().zip(wr).map(|(x, y)| (x ^ y).count_ones()).sum::<u32>() as i32;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{matmul, Rng};
    use proptest::prelude::*;

    fn pm(shape: &[usize], v: &[f64]) -> Tensor<f32> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    fn random_pm(rng: &mut Rng, shape: &[usize]) -> Tensor<f32> {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| if rng.below(2) == 1 { 1.0 } else { -1.0 }).collect(),
        )
        .unwrap()
    }

    #[test]
    fn three_elements_pack_to_101() {
        let x = pm(&[3], &[1.0, -1.0, 1.0]);
        let p = PackedBitTensor::pack(&x).unwrap();
        assert_eq!(p.words(), &[0b101]);
        assert_eq!(p.unpack::<f32>(), x);
    }

    #[test]
    fn sixty_four_ones_fill_one_word() {
        let p = PackedBitTensor::pack(&Tensor::<f32>::full(vec![1, 64], 1.0)).unwrap();
        assert_eq!(p.words(), &[u64::MAX]);
    }

    #[test]
    fn random_7x130_round_trips() {
        let x = random_pm(&mut Rng::new(1), &[7, 130]);
        let p = PackedBitTensor::pack(&x).unwrap();
        assert_eq!(p.words_per_row(), 3);
        assert_eq!(p.words().len(), 21);
        assert_eq!(p.unpack::<f32>(), x);
        let again = PackedBitTensor::from_bitstream(vec![7, 130], 130, &p.to_bitstream()).unwrap();
        assert_eq!(again, p);
    }

    #[test]
    fn non_binary_values_are_rejected() {
        assert!(PackedBitTensor::pack(&pm(&[2], &[1.0, 0.0])).is_err());
        assert!(PackedBitTensor::pack(&pm(&[2], &[1.0, 0.5])).is_err());
    }

    #[test]
    fn hand_evaluated_dot() {
        let a = PackedBitTensor::pack(&pm(&[1, 4], &[1.0, -1.0, 1.0, 1.0])).unwrap();
        let w = PackedBitTensor::pack(&pm(&[1, 4], &[1.0, 1.0, -1.0, 1.0])).unwrap();
        assert_eq!(xnor_popcount_matmul(&a, &w).unwrap().data, vec![0]);
    }

    #[test]
    fn identical_vectors_give_k() {
        let x = random_pm(&mut Rng::new(2), &[1, 77]);
        let p = PackedBitTensor::pack(&x).unwrap();
        assert_eq!(xnor_popcount_matmul(&p, &p).unwrap().data, vec![77]);
    }

    #[test]
    fn random_16x100_by_8_matches_float_product() {
        let mut rng = Rng::new(3);
        let a = random_pm(&mut rng, &[16, 100]);
        let w = random_pm(&mut rng, &[8, 100]);
        let got =
            xnor_popcount_matmul(&PackedBitTensor::pack(&a).unwrap(), &PackedBitTensor::pack(&w).unwrap()).unwrap();
        let want = matmul(&a, &w.transpose_last2().unwrap()).unwrap();
        assert_eq!(got.to_tensor::<f32>(), want);
    }

    #[test]
    fn mismatched_rows_are_an_error() {
        let a = PackedBitTensor::pack(&Tensor::<f32>::full(vec![1, 4], 1.0)).unwrap();
        let w = PackedBitTensor::pack(&Tensor::<f32>::full(vec![1, 5], 1.0)).unwrap();
        assert!(xnor_popcount_matmul(&a, &w).is_err());
    }

    #[test]
    fn mask_drops_positions() {
        let a = PackedBitTensor::pack(&pm(&[1, 3], &[1.0, 1.0, -1.0])).unwrap();
        let w = PackedBitTensor::pack(&pm(&[1, 3], &[1.0, -1.0, 1.0])).unwrap();
        let mask = PackedBitTensor::pack(&pm(&[1, 3], &[1.0, -1.0, 1.0])).unwrap();
        // only positions 0 and 2 count: 1·1 + (−1)·1
        assert_eq!(masked_xnor_popcount_matmul(&a, &mask, &w).unwrap().data, vec![0]);
    }

    proptest! {
        #[test]
        fn packed_product_equals_float_product(m in 1usize..6, n in 1usize..11, k in 1usize..200, seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let a = random_pm(&mut rng, &[m, k]);
            let w = random_pm(&mut rng, &[n, k]);
            let got = xnor_popcount_matmul(&PackedBitTensor::pack(&a).unwrap(), &PackedBitTensor::pack(&w).unwrap()).unwrap();
            let want = matmul(&a, &w.transpose_last2().unwrap()).unwrap();
            prop_assert_eq!(got.to_tensor::<f32>(), want);
        }

        #[test]
        fn bitstream_round_trips(rows in 1usize..5, k in 1usize..150, seed in any::<u64>()) {
            let x = random_pm(&mut Rng::new(seed), &[rows, k]);
            let p = PackedBitTensor::pack(&x).unwrap();
            let bytes = p.to_bitstream();
            prop_assert_eq!(bytes.len(), (rows * k).div_ceil(8));
            let back = PackedBitTensor::from_bitstream(vec![rows, k], k, &bytes).unwrap();
            prop_assert_eq!(back.unpack::<f32>(), x);
        }
    }
}
