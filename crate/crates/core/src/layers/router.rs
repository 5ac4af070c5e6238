//! Top-1 softmax router over the 8-bit branches. Logits and probabilities
//! are evaluated in `f64`; only the selected gate is narrowed to `f32`.

use crate::error::{mismatch, Result};
use crate::tensor::FloatMatrix;

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// First index of the maximum (ties go to the lowest index).
pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn router_logits(router: &FloatMatrix, x_token: &[f32]) -> Vec<f64> {
    (0..router.rows())
        .map(|k| router.row(k).iter().zip(x_token).map(|(&w, &x)| w as f64 * x as f64).sum())
        .collect()
}

/// Selected branch and its softmax probability for one token.
pub fn router_select(router: &FloatMatrix, x_token: &[f32]) -> Result<(usize, f64)> {
    if router.cols() != x_token.len() {
        return Err(mismatch(format!("router over {} features, token has {}", router.cols(), x_token.len())));
    }
    if router.rows() == 1 {
        return Ok((0, 1.0));
    }
    let logits = router_logits(router, x_token);
    let k = argmax(&logits);
    Ok((k, softmax(&logits)[k]))
}

/// Routing decisions for a batch of tokens.
#[derive(Debug, Clone)]
pub struct Routing {
    pub n_branches: usize,
    /// Row-major `tokens × N` probabilities.
    pub probs: Vec<f64>,
    pub choice: Vec<usize>,
    /// Multiplier applied to the selected branch (1 when `N = 1`).
    pub gate: Vec<f32>,
}

impl Routing {
    pub fn token_probs(&self, t: usize) -> &[f64] {
        &self.probs[t * self.n_branches..(t + 1) * self.n_branches]
    }

    /// Fraction of tokens sent to each branch.
    pub fn utilization(&self) -> Vec<f64> {
        let mut counts = vec![0.0; self.n_branches];
        for &k in &self.choice {
            counts[k] += 1.0;
        }
        let n = self.choice.len().max(1) as f64;
        counts.iter().map(|c| c / n).collect()
    }

    /// Token indices grouped by selected branch.
    pub fn groups(&self) -> Vec<Vec<usize>> {
        let mut g = vec![Vec::new(); self.n_branches];
        for (t, &k) in self.choice.iter().enumerate() {
            g[k].push(t);
        }
        g
    }
}

pub fn route(router: &FloatMatrix, x: &FloatMatrix) -> Routing {
    let n = router.rows();
    let mut probs = Vec::with_capacity(x.rows() * n);
    let mut choice = Vec::with_capacity(x.rows());
    let mut gate = Vec::with_capacity(x.rows());
    for t in 0..x.rows() {
        if n == 1 {
            probs.push(1.0);
            choice.push(0);
            gate.push(1.0);
            continue;
        }
        let logits = router_logits(router, x.row(t));
        let k = argmax(&logits);
        let p = softmax(&logits);
        choice.push(k);
        gate.push(p[k] as f32);
        probs.extend(p);
    }
    Routing { n_branches: n, probs, choice, gate }
}
