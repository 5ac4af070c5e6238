//! Per-weight sensitivity of a linear layer to quantization.
//!
//! For a weight row `w` and calibration inputs `X` (`in × samples`), the
//! sensitivity of entry `j` is the smallest output distortion reachable
//! after forcing `w_j` to its quantized value and re-fitting every other
//! entry of the row:
//!
//! ```text
//! s_ij = min_{w' : w'_j = q(w_j)} ‖(w − w') X‖²  =  (w_j − q(w_j))² / [H⁻¹]_jj,   H = X Xᵀ
//! ```
//!
//! [`sensitivity_closed_form`] evaluates the right-hand side from one
//! damped Hessian inverse; [`sensitivity_bruteforce`] solves the
//! constrained least-squares problem directly and serves as its oracle.
//! Damping adds `damping · mean(diag H) · I` to `H` in both.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, mismatch, Error, Result};
use crate::layers::{SeqShape, WeightQuantizer};
use crate::model::Transformer;
use crate::quant::absmax_quantize;
use crate::tensor::FloatMatrix;

/// Offset inside `ln(s + LOG_OFFSET)`.
pub const LOG_OFFSET: f64 = 1e-12;

/// Calibration inputs as columns: `in_features × n_samples`.
#[derive(Debug, Clone)]
pub struct CalibrationSet {
    x: FloatMatrix,
}

impl CalibrationSet {
    pub fn new(x: FloatMatrix) -> Result<Self> {
        if x.rows() == 0 || x.cols() == 0 || !x.is_finite() {
            return Err(invalid("calibration set needs at least one finite sample"));
        }
        Ok(Self { x })
    }

    /// From row-per-token activations (`samples × in_features`).
    pub fn from_activations(acts: &FloatMatrix) -> Result<Self> {
        Self::new(acts.transpose())
    }

    pub fn in_features(&self) -> usize {
        self.x.rows()
    }

    pub fn n_samples(&self) -> usize {
        self.x.cols()
    }

    pub fn x(&self) -> &FloatMatrix {
        &self.x
    }

    /// `X Xᵀ` in f64.
    pub fn gram(&self) -> DMatrix<f64> {
        let n = self.in_features();
        let xs = DMatrix::from_fn(n, self.n_samples(), |i, j| self.x.get(i, j) as f64);
        &xs * xs.transpose()
    }

    /// `X Xᵀ + damping · mean(diag) · I`, and the absolute diagonal term.
    pub fn damped_gram(&self, damping: f64) -> Result<(DMatrix<f64>, f64)> {
        if !(damping >= 0.0 && damping.is_finite()) {
            return Err(invalid("damping must be a finite value ≥ 0"));
        }
        let mut h = self.gram();
        let n = h.nrows();
        let add = damping * h.diagonal().sum() / n as f64;
        for i in 0..n {
            h[(i, i)] += add;
        }
        Ok((h, add))
    }
}

#[derive(Debug, Clone)]
pub struct HessianInverse {
    h_inv: DMatrix<f64>,
    damping: f64,
}

impl HessianInverse {
    pub fn dim(&self) -> usize {
        self.h_inv.nrows()
    }

    pub fn damping(&self) -> f64 {
        self.damping
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.h_inv[(i, j)]
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.h_inv
    }

    pub fn max_asymmetry(&self) -> f64 {
        (&self.h_inv - self.h_inv.transpose()).amax()
    }
}

fn singular(msg: &str) -> Error {
    Error::Singular(format!("{msg}; use a nonzero damping"))
}

/// Inverts the damped Hessian by Cholesky and symmetrizes the result.
pub fn build_hessian_inverse(cal: &CalibrationSet, damping: f64) -> Result<HessianInverse> {
    let (h, _) = cal.damped_gram(damping)?;
    let scale = h.diagonal().amax();
    if scale == 0.0 || h.diagonal().iter().any(|&d| d <= scale * 1e-14) {
        return Err(singular("Hessian has a zero diagonal entry"));
    }
    let chol = h.cholesky().ok_or_else(|| singular("Hessian is not positive definite"))?;
    let inv = chol.inverse();
    let h_inv = (&inv + inv.transpose()) * 0.5;
    if h_inv.iter().any(|v| !v.is_finite()) || h_inv.diagonal().iter().any(|&d| d <= 0.0) {
        return Err(singular("Hessian inverse is not finite and positive"));
    }
    Ok(HessianInverse { h_inv, damping })
}

/// Quantized target `q(w)` for every weight of a matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantRule {
    /// Prune the weight (`q = 0`), the democratization probe.
    Zero,
    /// Per-tensor `lambda · Sign(W − mu)`.
    Binary,
    /// Per-row AbsMax INT8.
    Int8,
}

impl QuantRule {
    pub fn apply(self, w: &FloatMatrix) -> FloatMatrix {
        match self {
            QuantRule::Zero => FloatMatrix::zeros(w.rows(), w.cols()),
            QuantRule::Binary => WeightQuantizer::Binary.quantize(w).dequantized(),
            QuantRule::Int8 => {
                let q = absmax_quantize(w);
                FloatMatrix::from_fn(w.rows(), w.cols(), |i, j| q.row(i)[j] as f32 / q.gamma()[i])
            }
        }
    }
}

/// Non-negative per-weight sensitivities, same shape as the weight.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityMap {
    pub rows: usize,
    pub cols: usize,
    pub s: Vec<f64>,
}

impl SensitivityMap {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.s[i * self.cols + j]
    }

    /// Rows `start..end` as a new map.
    pub fn row_slice(&self, start: usize, end: usize) -> SensitivityMap {
        SensitivityMap { rows: end - start, cols: self.cols, s: self.s[start * self.cols..end * self.cols].to_vec() }
    }
}

/// `s_ij = (w_ij − q(w_ij))² / [H⁻¹]_jj`.
pub fn sensitivity_closed_form(w: &FloatMatrix, hinv: &HessianInverse, rule: QuantRule) -> Result<SensitivityMap> {
    if w.cols() != hinv.dim() {
        return Err(mismatch(format!("weight has {} columns, Hessian is {}x{}", w.cols(), hinv.dim(), hinv.dim())));
    }
    let q = rule.apply(w);
    let diag: Vec<f64> = (0..w.cols()).map(|j| hinv.get(j, j)).collect();
    let s = (0..w.rows())
        .flat_map(|i| {
            let (wr, qr, diag) = (w.row(i), q.row(i), &diag);
            (0..w.cols()).map(move |j| {
                let d = wr[j] as f64 - qr[j] as f64;
                d * d / diag[j]
            })
        })
        .collect();
    Ok(SensitivityMap { rows: w.rows(), cols: w.cols(), s })
}

/// Direct minimization for one weight. Cost is one dense solve of size
/// `cols − 1`, so a whole map costs `O(rows · cols · cols³)`; oracle use only.
///
/// Only row `i` enters: the distortion separates across output rows. With
/// `e = w_i − w'_i`, `e_j` fixed to `w_ij − q(w_ij)`, the free entries solve
/// `H_ff e_f = −H_fj e_j` and the returned value is the distortion
/// `‖e X‖² + d·‖e‖²` evaluated from the calibration samples.
pub fn sensitivity_bruteforce(
    w: &FloatMatrix,
    cal: &CalibrationSet,
    damping: f64,
    i: usize,
    j: usize,
    rule: QuantRule,
) -> Result<f64> {
    let n = w.cols();
    if n != cal.in_features() {
        return Err(mismatch(format!("weight has {n} columns, calibration has {} features", cal.in_features())));
    }
    if i >= w.rows() || j >= n {
        return Err(invalid(format!("entry ({i}, {j}) outside a {}x{n} weight", w.rows())));
    }
    let delta = w.get(i, j) as f64 - rule.apply(w).get(i, j) as f64;
    let (h, diag_add) = cal.damped_gram(damping)?;
    let free: Vec<usize> = (0..n).filter(|&k| k != j).collect();
    let mut e = vec![0.0f64; n];
    e[j] = delta;
    if !free.is_empty() && delta != 0.0 {
        let hff = DMatrix::from_fn(free.len(), free.len(), |a, b| h[(free[a], free[b])]);
        let rhs = DVector::from_fn(free.len(), |a, _| -h[(free[a], j)] * delta);
        let sol = hff.lu().solve(&rhs).ok_or_else(|| singular("normal equations are singular"))?;
        for (a, &k) in free.iter().enumerate() {
            e[k] = sol[a];
        }
    }
    let x = cal.x();
    let mut dist = 0.0;
    for s in 0..cal.n_samples() {
        let r: f64 = (0..n).map(|k| e[k] * x.get(k, s) as f64).sum();
        dist += r * r;
    }
    dist += diag_add * e.iter().map(|v| v * v).sum::<f64>();
    Ok(dist)
}

/// Log-sensitivities after `pool × pool` max pooling (edge blocks may be partial).
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

pub fn heatmap(s: &SensitivityMap, pool: usize) -> Result<Heatmap> {
    if pool == 0 {
        return Err(invalid("pool must be at least 1"));
    }
    let rows = s.rows.div_ceil(pool);
    let cols = s.cols.div_ceil(pool);
    let mut values = vec![f64::NEG_INFINITY; rows * cols];
    for i in 0..s.rows {
        for j in 0..s.cols {
            let v = (s.get(i, j) + LOG_OFFSET).ln();
            let cell = &mut values[(i / pool) * cols + j / pool];
            *cell = cell.max(v);
        }
    }
    Ok(Heatmap { rows, cols, values })
}

impl Heatmap {
    /// `row,col,value` lines.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("row,col,value\n");
        for i in 0..self.rows {
            for j in 0..self.cols {
                writeln!(out, "{i},{j},{}", self.values[i * self.cols + j]).unwrap();
            }
        }
        out
    }

    /// Binary graymap (P5), linearly scaled from min (0) to max (255).
    pub fn to_pgm(&self) -> Vec<u8> {
        let min = self.values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = max - min;
        let mut out = format!("P5\n{} {}\n255\n", self.cols, self.rows).into_bytes();
        out.extend(self.values.iter().map(|&v| if span > 0.0 { ((v - min) / span * 255.0).round() as u8 } else { 0 }));
        out
    }

    /// Writes `<stem>.csv` and `<stem>.pgm` under `dir`.
    pub fn export(&self, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
        let csv = dir.join(format!("{stem}.csv"));
        let pgm = dir.join(format!("{stem}.pgm"));
        std::fs::write(&csv, self.to_csv())?;
        std::fs::write(&pgm, self.to_pgm())?;
        Ok((csv, pgm))
    }
}

/// Parses a binary graymap into `(width, height, pixels)`.
pub fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = || Error::Format("not a binary PGM".into());
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad())?.to_string());
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad());
    }
    let w: usize = fields[1].parse().map_err(|_| bad())?;
    let h: usize = fields[2].parse().map_err(|_| bad())?;
    let data = bytes.get(pos + 1..).ok_or_else(bad)?;
    if data.len() != w * h {
        return Err(bad());
    }
    Ok((w, h, data.to_vec()))
}

/// How evenly sensitivity is spread over a map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DemocratizationStats {
    /// Population variance of `ln(s + LOG_OFFSET)`.
    pub log_variance: f64,
    /// `(Q3 + off) / (Q1 + off)` of the sensitivities.
    pub interquartile_ratio: f64,
    /// Share of total sensitivity held by the top 1% of entries
    /// (`ceil(n/100)` of them); for an all-zero map, that count over `n`.
    pub top1_share: f64,
}

fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn democratization_stats(s: &SensitivityMap) -> Result<DemocratizationStats> {
    if s.s.is_empty() || s.s.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(invalid("sensitivity map must be non-empty, finite and non-negative"));
    }
    let n = s.s.len();
    let logs: Vec<f64> = s.s.iter().map(|v| (v + LOG_OFFSET).ln()).collect();
    let mean = logs.iter().sum::<f64>() / n as f64;
    let log_variance = logs.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / n as f64;
    let mut sorted = s.s.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let interquartile_ratio = (quantile(&sorted, 0.75) + LOG_OFFSET) / (quantile(&sorted, 0.25) + LOG_OFFSET);
    let k = n.div_ceil(100);
    let total: f64 = sorted.iter().sum();
    let top1_share = if total > 0.0 { sorted[n - k..].iter().sum::<f64>() / total } else { k as f64 / n as f64 };
    Ok(DemocratizationStats { log_variance, interquartile_ratio, top1_share })
}

/// Collects the normalized inputs seen at `site` (`blocks.L.attn` or
/// `blocks.L.ffn`) over the given windows, one row per token.
pub fn collect_activations(model: &Transformer, windows: &[crate::corpus::Batch], site: &str) -> Result<FloatMatrix> {
    let mut rows: Vec<f32> = Vec::new();
    let mut cols = 0;
    for w in windows {
        model.forward_with_hook(&w.inputs, SeqShape { batch: w.batch, seq: w.seq }, &mut |name, x| {
            if name == site {
                cols = x.cols();
                rows.extend_from_slice(x.as_slice());
            }
        })?;
    }
    if cols == 0 {
        return Err(invalid(format!("no activations recorded at {site}")));
    }
    FloatMatrix::new(rows.len() / cols, cols, rows)
}

/// A linear layer to analyze: its name, the calibration site feeding it
/// and its deployed (dequantized) weight.
#[derive(Debug, Clone)]
pub struct LayerTarget {
    pub name: String,
    pub site: String,
    pub weight: FloatMatrix,
}

/// Resolves `ffn.last`, `ffn.<L>`, `attn.last`, `attn.<L>` or a full
/// parameter name of an input-side projection.
pub fn layer_targets(model: &Transformer, selector: &str) -> Result<Vec<LayerTarget>> {
    let n_layers = model.blocks.len();
    let layer_of = |s: &str| -> Result<usize> {
        if s == "last" {
            return Ok(n_layers - 1);
        }
        s.parse::<usize>().ok().filter(|&l| l < n_layers).ok_or_else(|| invalid(format!("no layer {s:?} in a {n_layers}-layer model")))
    };
    let ffn = |l: usize| -> Vec<LayerTarget> {
        let f = &model.blocks[l].ffn;
        let site = format!("blocks.{l}.ffn");
        let mut out: Vec<LayerTarget> = f
            .hp
            .iter()
            .enumerate()
            .map(|(k, br)| LayerTarget {
                name: format!("blocks.{l}.ffn.hp.{k}.up"),
                site: site.clone(),
                weight: br.up.quantizer.quantize(&br.up.weight).dequantized(),
            })
            .collect();
        out.push(LayerTarget {
            name: format!("blocks.{l}.ffn.bit_up"),
            site,
            weight: f.bit_up.quantizer.quantize(&f.bit_up.weight).dequantized(),
        });
        out
    };
    let attn = |l: usize, which: &[&str]| -> Vec<LayerTarget> {
        let a = &model.blocks[l].attn;
        which
            .iter()
            .map(|&p| {
                let lin = match p {
                    "q" => &a.q,
                    "k" => &a.k,
                    _ => &a.v,
                };
                LayerTarget {
                    name: format!("blocks.{l}.attn.{p}"),
                    site: format!("blocks.{l}.attn"),
                    weight: lin.quantizer.quantize(&lin.weight).dequantized(),
                }
            })
            .collect()
    };
    let parts: Vec<&str> = selector.split('.').collect();
    match parts.as_slice() {
        ["ffn", l] => Ok(ffn(layer_of(l)?)),
        ["attn", l] => Ok(attn(layer_of(l)?, &["q", "k", "v"])),
        ["blocks", l, "attn", p @ ("q" | "k" | "v")] => Ok(attn(layer_of(l)?, &[p])),
        ["blocks", l, "ffn", ..] => {
            let all = ffn(layer_of(l)?);
            let found: Vec<LayerTarget> = all.into_iter().filter(|t| t.name == selector).collect();
            if found.is_empty() {
                Err(invalid(format!("{selector} is not an analyzable input-side projection")))
            } else {
                Ok(found)
            }
        }
        _ => Err(invalid(format!("unknown layer selector {selector:?}"))),
    }
}
