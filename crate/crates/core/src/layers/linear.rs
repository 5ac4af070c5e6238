//! Quantization-native linear layers.
//!
//! A [`QuantLinear`] keeps a full-precision latent weight and applies a
//! [`WeightQuantizer`] on every forward. Outputs are computed as
//!
//! ```text
//! y_ti = acc_ti · (c_i / gamma_t),   acc = Q(x) · levelsᵀ,   c_i = scale_i · path
//! ```
//!
//! where `levels` are the integer weight levels (`±1` or INT8), `scale_i`
//! is the per-row dequantization factor (`lambda`, or `1/gamma_w_i`) and
//! `path` is an optional static multiplier (the FFN's `alpha`/`beta`).
//! The packed inference path evaluates exactly the same expression with an
//! `i32` accumulator and a stored `c_i`, so both modes agree bit-for-bit.
//!
//! Backward is the straight-through estimator: both quantizers are treated
//! as identity, so `dW_latent = dzᵀ · x̂` and `dx = dz · W_eff`, with `x̂`
//! the dequantized activations actually used in the forward.

use serde::{Deserialize, Serialize};

use crate::error::{mismatch, Result};
use crate::kernels::{build_lut, gemv_int8, gemv_w1a8_lut};
use crate::quant::{absmax_quantize, absmax_row, binarize, binary_levels, BinaryMatrix, Int8Tensor};
use crate::tensor::{matmul_nn, matmul_nt, matmul_tn, FloatMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightQuantizer {
    /// Per-tensor `lambda · Sign(W - mu)`.
    Binary,
    /// Per-output-row AbsMax INT8.
    Int8,
    /// No quantization; used for STE substitution checks and float baselines.
    Identity,
}

/// `W_eff = diag(scales) · levels`.
#[derive(Debug, Clone)]
pub struct QuantizedWeight {
    pub levels: FloatMatrix,
    pub scales: Vec<f32>,
}

impl QuantizedWeight {
    pub fn dequantized(&self) -> FloatMatrix {
        let mut w = self.levels.clone();
        for (i, &s) in self.scales.iter().enumerate() {
            w.row_mut(i).iter_mut().for_each(|v| *v *= s);
        }
        w
    }
}

impl WeightQuantizer {
    pub fn quantize(self, w: &FloatMatrix) -> QuantizedWeight {
        let (rows, cols) = w.shape();
        match self {
            WeightQuantizer::Binary => {
                let (levels, _mu, lambda) = binary_levels(w.as_slice());
                QuantizedWeight {
                    levels: FloatMatrix::from_raw(rows, cols, levels),
                    scales: vec![lambda; rows],
                }
            }
            WeightQuantizer::Int8 => {
                let q = absmax_quantize(w);
                QuantizedWeight {
                    levels: FloatMatrix::from_raw(rows, cols, q.values().iter().map(|&v| v as f32).collect()),
                    scales: q.gamma().iter().map(|&g| 1.0 / g).collect(),
                }
            }
            WeightQuantizer::Identity => QuantizedWeight { levels: w.clone(), scales: vec![1.0; rows] },
        }
    }
}

/// Per-token AbsMax on a float matrix: integer-valued levels as `f32` plus `gamma`.
pub(crate) fn quantize_tokens(x: &FloatMatrix) -> (FloatMatrix, Vec<f32>) {
    let (rows, cols) = x.shape();
    let mut q = vec![0i8; cols];
    let mut levels = Vec::with_capacity(rows * cols);
    let mut gamma = Vec::with_capacity(rows);
    for t in 0..rows {
        gamma.push(absmax_row(x.row(t), &mut q));
        levels.extend(q.iter().map(|&v| v as f32));
    }
    (FloatMatrix::from_raw(rows, cols, levels), gamma)
}

/// Training-mode linear layer over a latent weight (`out × in`).
#[derive(Debug, Clone)]
pub struct QuantLinear {
    pub weight: FloatMatrix,
    pub quantizer: WeightQuantizer,
    /// AbsMax-quantize inputs per token before the matmul.
    pub quantize_input: bool,
}

/// Forward context kept for the backward pass.
#[derive(Debug, Clone)]
pub struct LinearCache {
    /// Dequantized input actually multiplied (`q/gamma`, or `x` when unquantized).
    pub x_hat: FloatMatrix,
    pub weight: QuantizedWeight,
    /// Output before the path multiplier.
    pub z: FloatMatrix,
}

impl QuantLinear {
    pub fn new(weight: FloatMatrix, quantizer: WeightQuantizer) -> Self {
        Self { weight, quantizer, quantize_input: true }
    }

    pub fn in_features(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_features(&self) -> usize {
        self.weight.rows()
    }

    /// Forward without keeping a cache.
    pub fn forward(&self, x: &FloatMatrix, path: f32) -> Result<FloatMatrix> {
        self.forward_train(x, path).map(|(y, _)| y)
    }

    /// Forward returning `(path · z, cache)`.
    pub fn forward_train(&self, x: &FloatMatrix, path: f32) -> Result<(FloatMatrix, LinearCache)> {
        if x.cols() != self.in_features() {
            return Err(mismatch(format!(
                "linear expects {} input features, got {}",
                self.in_features(),
                x.cols()
            )));
        }
        let qw = self.quantizer.quantize(&self.weight);
        let out = self.out_features();
        let (y, z, x_hat) = if self.quantize_input {
            let (levels, gamma) = quantize_tokens(x);
            let acc = matmul_nt(&levels, &qw.levels);
            let consts: Vec<f32> = qw.scales.iter().map(|&s| s * path).collect();
            let mut y = acc.clone();
            let mut z = acc;
            for (t, &g) in gamma.iter().enumerate() {
                let (yr, zr) = (y.row_mut(t), z.row_mut(t));
                for i in 0..out {
                    let a = yr[i];
                    yr[i] = a * (consts[i] / g);
                    zr[i] = a * (qw.scales[i] / g);
                }
            }
            let mut x_hat = levels;
            for (t, &g) in gamma.iter().enumerate() {
                x_hat.row_mut(t).iter_mut().for_each(|v| *v /= g);
            }
            (y, z, x_hat)
        } else {
            let acc = matmul_nt(x, &qw.levels);
            let mut y = acc.clone();
            let mut z = acc;
            for t in 0..x.rows() {
                let (yr, zr) = (y.row_mut(t), z.row_mut(t));
                for i in 0..out {
                    let a = yr[i];
                    yr[i] = a * (qw.scales[i] * path);
                    zr[i] = a * qw.scales[i];
                }
            }
            (y, z, x.clone())
        };
        Ok((y, LinearCache { x_hat, weight: qw, z }))
    }

    /// STE backward. `dz` is the gradient w.r.t. the unscaled output `z`;
    /// accumulates into `grad` and returns the input gradient.
    pub fn backward(&self, cache: &LinearCache, dz: &FloatMatrix, grad: &mut FloatMatrix) -> FloatMatrix {
        grad.add_assign(&matmul_tn(dz, &cache.x_hat));
        let mut scaled = dz.clone();
        for t in 0..scaled.rows() {
            for (v, &s) in scaled.row_mut(t).iter_mut().zip(&cache.weight.scales) {
                *v *= s;
            }
        }
        matmul_nn(&scaled, &cache.weight.levels)
    }
}

/// Packed 1-bit forward: LUT GEMV per token, then `acc · (c / gamma_t)`.
pub fn packed_binary_forward(w: &BinaryMatrix, c: f32, x: &FloatMatrix) -> Result<FloatMatrix> {
    if x.cols() != w.cols() {
        return Err(mismatch(format!("packed layer expects {} features, got {}", w.cols(), x.cols())));
    }
    let mut q = vec![0i8; x.cols()];
    let mut out = FloatMatrix::zeros(x.rows(), w.rows());
    for t in 0..x.rows() {
        let g = absmax_row(x.row(t), &mut q);
        let acc = gemv_w1a8_lut(w, &build_lut(&q))?;
        for (o, a) in out.row_mut(t).iter_mut().zip(acc) {
            *o = a as f32 * (c / g);
        }
    }
    Ok(out)
}

/// Packed INT8 forward with per-row constants `c_i`.
pub fn packed_int8_forward(w: &Int8Tensor, c: &[f32], x: &FloatMatrix) -> Result<FloatMatrix> {
    if x.cols() != w.cols() || c.len() != w.rows() {
        return Err(mismatch(format!(
            "int8 layer {}x{} with {} constants, input has {} features",
            w.rows(),
            w.cols(),
            c.len(),
            x.cols()
        )));
    }
    let mut q = vec![0i8; x.cols()];
    let mut out = FloatMatrix::zeros(x.rows(), w.rows());
    for t in 0..x.rows() {
        let g = absmax_row(x.row(t), &mut q);
        let acc = gemv_int8(w, &q)?;
        for ((o, a), &ci) in out.row_mut(t).iter_mut().zip(acc).zip(c) {
            *o = a as f32 * (ci / g);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Training,
    Inference,
}

/// A 1-bit linear layer that is either training (latent FP weights) or
/// inference (packed bits only; the latent copy is gone).
#[derive(Debug, Clone)]
pub enum BitLinear {
    Training(QuantLinear),
    Inference(BinaryMatrix),
}

impl BitLinear {
    pub fn training(latent: FloatMatrix) -> Self {
        BitLinear::Training(QuantLinear::new(latent, WeightQuantizer::Binary))
    }

    pub fn mode(&self) -> Mode {
        match self {
            BitLinear::Training(_) => Mode::Training,
            BitLinear::Inference(_) => Mode::Inference,
        }
    }

    pub fn latent(&self) -> Option<&FloatMatrix> {
        match self {
            BitLinear::Training(l) => Some(&l.weight),
            BitLinear::Inference(_) => None,
        }
    }

    pub fn in_features(&self) -> usize {
        match self {
            BitLinear::Training(l) => l.in_features(),
            BitLinear::Inference(b) => b.cols(),
        }
    }

    pub fn out_features(&self) -> usize {
        match self {
            BitLinear::Training(l) => l.out_features(),
            BitLinear::Inference(b) => b.rows(),
        }
    }

    /// Binarizes once and drops the latent weights.
    pub fn into_inference(self) -> Result<Self> {
        match self {
            BitLinear::Training(l) => Ok(BitLinear::Inference(binarize(&l.weight)?)),
            inf => Ok(inf),
        }
    }

    /// `Y = lambda/gamma · W_int1 · Q(X)`; `x` is the already-normalized input.
    pub fn forward(&self, x: &FloatMatrix) -> Result<FloatMatrix> {
        match self {
            BitLinear::Training(l) => l.forward(x, 1.0),
            BitLinear::Inference(b) => packed_binary_forward(b, b.lambda(), x),
        }
    }
}
