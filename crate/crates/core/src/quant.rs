//! Weight binarization, AbsMax INT8 quantization and sign-bit packing.
//!
//! Conventions fixed here are relied on bit-for-bit by the kernels and the
//! packed model file:
//!
//! * `Sign(0) = +1`; a weight exactly at the mean binarizes to `+1`.
//! * AbsMax uses a numerator of 127 and clamps to `[-128, 127]`, rounding
//!   half away from zero. An all-zero row gets `gamma = 1`.
//! * Sign bits are row-major, LSB-first within each byte, `1 → +1`,
//!   `0 → -1`, with the final byte zero-padded.

use crate::error::{invalid, mismatch, Result};
use crate::tensor::FloatMatrix;

/// AbsMax target magnitude.
pub const INT8_QMAX: f32 = 127.0;
pub const INT8_MIN: i32 = -128;
pub const INT8_MAX: i32 = 127;

/// A 1-bit weight matrix: packed signs plus per-tensor `mu` (mean) and
/// `lambda` (mean absolute value).
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMatrix {
    rows: usize,
    cols: usize,
    bits: Vec<u8>,
    mu: f32,
    lambda: f32,
}

impl BinaryMatrix {
    /// Reassembles a matrix from its stored parts, checking the buffer size.
    pub fn from_parts(rows: usize, cols: usize, bits: Vec<u8>, mu: f32, lambda: f32) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(invalid("binary matrix must be non-empty"));
        }
        if bits.len() != packed_len(rows * cols) {
            return Err(mismatch(format!(
                "{} bytes for {rows}x{cols} signs (expected {})",
                bits.len(),
                packed_len(rows * cols)
            )));
        }
        if !(lambda >= 0.0 && lambda.is_finite() && mu.is_finite()) {
            return Err(invalid(format!("bad scales mu={mu} lambda={lambda}")));
        }
        Ok(Self { rows, cols, bits, mu, lambda })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn mu(&self) -> f32 {
        self.mu
    }

    pub fn lambda(&self) -> f32 {
        self.lambda
    }

    /// Sign of element `(i, j)` as `+1` / `-1`.
    #[inline]
    pub fn sign(&self, i: usize, j: usize) -> i8 {
        let idx = i * self.cols + j;
        if self.bits[idx >> 3] >> (idx & 7) & 1 == 1 {
            1
        } else {
            -1
        }
    }

    /// Unpacked `±1` signs, row-major.
    pub fn signs(&self) -> Vec<i8> {
        unpack_signs(&self.bits, self.rows, self.cols).expect("buffer length checked at construction")
    }
}

/// An INT8 tensor with one AbsMax scale per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Int8Tensor {
    rows: usize,
    cols: usize,
    values: Vec<i8>,
    gamma: Vec<f32>,
}

impl Int8Tensor {
    pub fn from_parts(rows: usize, cols: usize, values: Vec<i8>, gamma: Vec<f32>) -> Result<Self> {
        if values.len() != rows * cols || gamma.len() != rows {
            return Err(mismatch(format!(
                "int8 tensor {rows}x{cols} with {} values and {} scales",
                values.len(),
                gamma.len()
            )));
        }
        if let Some(g) = gamma.iter().find(|g| !(**g > 0.0 && g.is_finite())) {
            return Err(invalid(format!("row scale must be positive and finite, got {g}")));
        }
        Ok(Self { rows, cols, values, gamma })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[i8] {
        &self.values
    }

    pub fn gamma(&self) -> &[f32] {
        &self.gamma
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[i8] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }
}

#[inline]
pub(crate) fn packed_len(n: usize) -> usize {
    n.div_ceil(8)
}

fn mean_and_absmean(values: &[f32]) -> (f32, f32) {
    let n = values.len() as f64;
    let (sum, abs) = values
        .iter()
        .fold((0.0f64, 0.0f64), |(s, a), &v| (s + v as f64, a + (v as f64).abs()));
    ((sum / n) as f32, (abs / n) as f32)
}

/// Per-tensor binarization: `mu = mean(w)`, `lambda = mean|w|`, sign bit set
/// iff `w - mu >= 0`.
pub fn binarize(w: &FloatMatrix) -> Result<BinaryMatrix> {
    let values = w.as_slice();
    if values.is_empty() {
        return Err(invalid("cannot binarize an empty matrix"));
    }
    if !w.is_finite() {
        return Err(invalid("cannot binarize non-finite weights"));
    }
    let (mu, lambda) = mean_and_absmean(values);
    let mut bits = vec![0u8; packed_len(values.len())];
    for (idx, &v) in values.iter().enumerate() {
        if v - mu >= 0.0 {
            bits[idx >> 3] |= 1 << (idx & 7);
        }
    }
    Ok(BinaryMatrix { rows: w.rows(), cols: w.cols(), bits, mu, lambda })
}

/// Unpacked `±1` levels as `f32`, with `(mu, lambda)`; same rule as [`binarize`].
pub(crate) fn binary_levels(values: &[f32]) -> (Vec<f32>, f32, f32) {
    let (mu, lambda) = mean_and_absmean(values);
    let levels = values.iter().map(|&v| if v - mu >= 0.0 { 1.0 } else { -1.0 }).collect();
    (levels, mu, lambda)
}

/// `lambda · s_ij`.
pub fn dequantize_weight(b: &BinaryMatrix) -> FloatMatrix {
    let lambda = b.lambda;
    FloatMatrix::from_raw(
        b.rows,
        b.cols,
        b.signs().into_iter().map(|s| lambda * s as f32).collect(),
    )
}

/// Quantizes one row in place and returns its scale.
#[inline]
pub(crate) fn absmax_row(x: &[f32], out: &mut [i8]) -> f32 {
    let max = x.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    if max == 0.0 {
        out.iter_mut().for_each(|o| *o = 0);
        return 1.0;
    }
    let gamma = INT8_QMAX / max;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = round_clip(v * gamma);
    }
    gamma
}

/// Round half away from zero, then clamp to the signed 8-bit range.
#[inline]
pub fn round_clip(v: f32) -> i8 {
    (v.round() as i32).clamp(INT8_MIN, INT8_MAX) as i8
}

/// Per-row AbsMax quantization: `gamma_i = 127 / max_j |x_ij|`,
/// `q_ij = clamp(round(x_ij · gamma_i), -128, 127)`.
pub fn absmax_quantize(x: &FloatMatrix) -> Int8Tensor {
    let (rows, cols) = x.shape();
    let mut values = vec![0i8; rows * cols];
    let mut gamma = Vec::with_capacity(rows);
    for i in 0..rows {
        gamma.push(absmax_row(x.row(i), &mut values[i * cols..(i + 1) * cols]));
    }
    Int8Tensor { rows, cols, values, gamma }
}

/// `q_ij / gamma_i`.
pub fn dequantize_activation(q: &Int8Tensor) -> FloatMatrix {
    FloatMatrix::from_fn(q.rows, q.cols, |i, j| q.values[i * q.cols + j] as f32 / q.gamma[i])
}

/// Packs `±1` signs (row-major) into bytes, LSB first.
pub fn pack_signs(signs: &[i8]) -> Result<Vec<u8>> {
    let mut bits = vec![0u8; packed_len(signs.len())];
    for (idx, &s) in signs.iter().enumerate() {
        match s {
            1 => bits[idx >> 3] |= 1 << (idx & 7),
            -1 => {}
            other => return Err(invalid(format!("sign value {other} at index {idx} is not ±1"))),
        }
    }
    Ok(bits)
}

/// Inverse of [`pack_signs`] for a `rows × cols` matrix.
pub fn unpack_signs(bits: &[u8], rows: usize, cols: usize) -> Result<Vec<i8>> {
    let n = rows * cols;
    if bits.len() != packed_len(n) {
        return Err(mismatch(format!(
            "{} bytes cannot hold exactly {rows}x{cols} signs",
            bits.len()
        )));
    }
    Ok((0..n)
        .map(|idx| if bits[idx >> 3] >> (idx & 7) & 1 == 1 { 1 } else { -1 })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn m(rows: &[Vec<f32>]) -> FloatMatrix {
        FloatMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn binarize_symmetric_matrix() {
        let b = binarize(&m(&[vec![2.0, -2.0], vec![2.0, -2.0]])).unwrap();
        assert_eq!(b.mu(), 0.0);
        assert_eq!(b.lambda(), 2.0);
        assert_eq!(b.signs(), vec![1, -1, 1, -1]);
        assert_eq!(dequantize_weight(&b), m(&[vec![2.0, -2.0], vec![2.0, -2.0]]));
    }

    #[test]
    fn binarize_all_zero_maps_to_plus_one() {
        let b = binarize(&FloatMatrix::zeros(2, 2)).unwrap();
        assert_eq!((b.mu(), b.lambda()), (0.0, 0.0));
        assert_eq!(b.signs(), vec![1; 4]);
        assert_eq!(dequantize_weight(&b), FloatMatrix::zeros(2, 2));
    }

    #[test]
    fn dequantize_centered_pair() {
        let b = binarize(&m(&[vec![1.0, 3.0]])).unwrap();
        assert_eq!((b.mu(), b.lambda()), (2.0, 2.0));
        assert_eq!(dequantize_weight(&b), m(&[vec![-2.0, 2.0]]));
    }

    #[test]
    fn binarize_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = FloatMatrix::from_fn(7, 5, |_, _| rng.gen_range(-1.0..1.0));
        let b = binarize(&w).unwrap();
        let mean: f64 = w.as_slice().iter().map(|&v| v as f64).sum::<f64>() / 35.0;
        for i in 0..7 {
            for j in 0..5 {
                let want = if w.get(i, j) - mean as f32 >= 0.0 { 1 } else { -1 };
                assert_eq!(b.sign(i, j), want, "({i},{j})");
            }
        }
        assert_eq!(b.bits().len(), 5);
    }

    #[test]
    fn binarize_rejects_empty() {
        let w = FloatMatrix::from_raw(0, 0, vec![]);
        assert!(binarize(&w).is_err());
    }

    #[test]
    fn absmax_examples() {
        let q = absmax_quantize(&m(&[vec![0.5, -1.0]]));
        assert_eq!(q.gamma(), &[127.0]);
        assert_eq!(q.values(), &[64, -127]);

        let q = absmax_quantize(&m(&[vec![127.0]]));
        assert_eq!((q.gamma()[0], q.values()[0]), (1.0, 127));

        let q = absmax_quantize(&FloatMatrix::zeros(1, 3));
        assert_eq!(q.gamma(), &[1.0]);
        assert_eq!(q.values(), &[0, 0, 0]);
    }

    #[test]
    fn dequantize_activation_examples() {
        let q = Int8Tensor::from_parts(1, 2, vec![64, -127], vec![127.0]).unwrap();
        let x = dequantize_activation(&q);
        assert!((x.get(0, 0) - 64.0 / 127.0).abs() < 1e-7);
        assert_eq!(x.get(0, 1), -1.0);
        let z = Int8Tensor::from_parts(1, 2, vec![0, 0], vec![1.0]).unwrap();
        assert_eq!(dequantize_activation(&z), FloatMatrix::zeros(1, 2));
    }

    #[test]
    fn int8_tensor_rejects_bad_scale() {
        assert!(Int8Tensor::from_parts(1, 1, vec![0], vec![0.0]).is_err());
        assert!(Int8Tensor::from_parts(1, 2, vec![0], vec![1.0]).is_err());
    }

    #[test]
    fn pack_examples() {
        assert_eq!(pack_signs(&[1; 8]).unwrap(), vec![0xFF]);
        assert_eq!(pack_signs(&[-1; 8]).unwrap(), vec![0x00]);
        assert_eq!(pack_signs(&[1, -1, -1, -1, -1, -1, -1, -1, 1]).unwrap(), vec![0x01, 0x01]);
        assert!(pack_signs(&[1, 0]).is_err());
        assert!(unpack_signs(&[0xFF], 3, 3).is_err());
    }

    #[test]
    fn pack_roundtrip_1000() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let s: Vec<i8> = (0..1000).map(|_| if rng.gen::<bool>() { 1 } else { -1 }).collect();
            let bits = pack_signs(&s).unwrap();
            assert_eq!(bits.len(), 125);
            assert_eq!(unpack_signs(&bits, 10, 100).unwrap(), s);
        }
    }

    #[test]
    fn zero_mean_scale_is_optimal_on_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut w: Vec<f32> = (0..64).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mean = w.iter().sum::<f32>() / 64.0;
        w.iter_mut().for_each(|v| *v -= mean);
        let b = binarize(&FloatMatrix::new(8, 8, w.clone()).unwrap()).unwrap();
        let signs = b.signs();
        let err = |lam: f64| -> f64 {
            w.iter()
                .zip(&signs)
                .map(|(&v, &s)| (v as f64 - lam * s as f64).powi(2))
                .sum()
        };
        let best = err(b.lambda() as f64);
        for k in 0..=1000 {
            let lam = 3.0 * k as f64 / 1000.0;
            assert!(best <= err(lam) * (1.0 + 1e-6), "lambda {lam}");
        }
    }

    proptest! {
        #[test]
        fn pack_unpack_roundtrip(signs in proptest::collection::vec(prop_oneof![Just(1i8), Just(-1i8)], 1..300)) {
            let bits = pack_signs(&signs).unwrap();
            prop_assert_eq!(unpack_signs(&bits, 1, signs.len()).unwrap(), signs);
        }

        #[test]
        fn absmax_error_bound(row in proptest::collection::vec(-50.0f32..50.0, 1..64)) {
            let x = FloatMatrix::new(1, row.len(), row.clone()).unwrap();
            let q = absmax_quantize(&x);
            let g = q.gamma()[0];
            let back = dequantize_activation(&q);
            for (a, b) in row.iter().zip(back.as_slice()) {
                prop_assert!((a - b).abs() <= 0.5 / g + 1e-6 * a.abs().max(1.0));
            }
            prop_assert!(q.values().iter().all(|&v| v as i32 >= INT8_MIN && v as i32 <= INT8_MAX));
        }

        #[test]
        fn binarize_scale_equivariant(
            vals in proptest::collection::vec(-4.0f32..4.0, 12),
            pow in -3i32..4,
        ) {
            let c = 2f32.powi(pow);
            let w = FloatMatrix::new(3, 4, vals.clone()).unwrap();
            let wc = FloatMatrix::new(3, 4, vals.iter().map(|v| v * c).collect()).unwrap();
            let (b, bc) = (binarize(&w).unwrap(), binarize(&wc).unwrap());
            prop_assert_eq!(b.bits(), bc.bits());
            prop_assert!((bc.lambda() - c * b.lambda()).abs() <= 1e-6 * bc.lambda().max(1e-12));
        }

        #[test]
        fn dequantized_binary_has_two_levels(vals in proptest::collection::vec(-4.0f32..4.0, 2..40)) {
            let w = FloatMatrix::new(1, vals.len(), vals).unwrap();
            let b = binarize(&w).unwrap();
            prop_assume!(b.lambda() > 0.0);
            let d = dequantize_weight(&b);
            prop_assert!(d.as_slice().iter().all(|&v| v == b.lambda() || v == -b.lambda()));
        }
    }
}
