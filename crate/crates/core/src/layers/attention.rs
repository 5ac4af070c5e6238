//! Causal multi-head attention with 1-bit Q/K/V/O projections. Scores and
//! softmax stay in float; only the projections are quantized.

use crate::error::{mismatch, Result};
use crate::layers::linear::{LinearCache, QuantLinear, WeightQuantizer};
use crate::tensor::{dot, FloatMatrix};

/// Sequence layout of a row-major activation matrix: `batch` sequences of
/// `seq` consecutive rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeqShape {
    pub batch: usize,
    pub seq: usize,
}

impl SeqShape {
    pub fn tokens(&self) -> usize {
        self.batch * self.seq
    }
}

/// Softmax attention over already-projected `q`, `k`, `v` (`tokens × d`).
/// Returns the context and the probability tensor `[batch][head][i][j]`.
pub fn causal_attention(
    q: &FloatMatrix,
    k: &FloatMatrix,
    v: &FloatMatrix,
    shape: SeqShape,
    heads: usize,
) -> (FloatMatrix, Vec<f32>) {
    let d = q.cols();
    let hd = d / heads;
    let scale = 1.0 / (hd as f32).sqrt();
    let s = shape.seq;
    let mut ctx = FloatMatrix::zeros(q.rows(), d);
    let mut probs = vec![0.0f32; shape.batch * heads * s * s];
    let mut scores = vec![0.0f32; s];
    for b in 0..shape.batch {
        for h in 0..heads {
            let cols = h * hd..(h + 1) * hd;
            for i in 0..s {
                let qi = &q.row(b * s + i)[cols.clone()];
                let mut max = f32::NEG_INFINITY;
                for j in 0..=i {
                    scores[j] = dot(qi, &k.row(b * s + j)[cols.clone()]) * scale;
                    max = max.max(scores[j]);
                }
                let mut sum = 0.0;
                for sc in &mut scores[..=i] {
                    *sc = (*sc - max).exp();
                    sum += *sc;
                }
                let p = &mut probs[((b * heads + h) * s + i) * s..][..s];
                for j in 0..=i {
                    p[j] = scores[j] / sum;
                }
                let out = &mut ctx.row_mut(b * s + i)[cols.clone()];
                for j in 0..=i {
                    let vj = &v.row(b * s + j)[cols.clone()];
                    for (o, &vv) in out.iter_mut().zip(vj) {
                        *o += p[j] * vv;
                    }
                }
            }
        }
    }
    (ctx, probs)
}

/// Gradients of [`causal_attention`] w.r.t. `q`, `k`, `v`.
pub fn causal_attention_backward(
    q: &FloatMatrix,
    k: &FloatMatrix,
    v: &FloatMatrix,
    probs: &[f32],
    dctx: &FloatMatrix,
    shape: SeqShape,
    heads: usize,
) -> (FloatMatrix, FloatMatrix, FloatMatrix) {
    let d = q.cols();
    let hd = d / heads;
    let scale = 1.0 / (hd as f32).sqrt();
    let s = shape.seq;
    let mut dq = FloatMatrix::zeros(q.rows(), d);
    let mut dk = FloatMatrix::zeros(q.rows(), d);
    let mut dv = FloatMatrix::zeros(q.rows(), d);
    let mut dp = vec![0.0f32; s];
    for b in 0..shape.batch {
        for h in 0..heads {
            let cols = h * hd..(h + 1) * hd;
            for i in 0..s {
                let p = &probs[((b * heads + h) * s + i) * s..][..s];
                let dci = &dctx.row(b * s + i)[cols.clone()];
                let mut inner = 0.0;
                for j in 0..=i {
                    dp[j] = dot(dci, &v.row(b * s + j)[cols.clone()]);
                    inner += dp[j] * p[j];
                    let dvj = &mut dv.row_mut(b * s + j)[cols.clone()];
                    for (o, &g) in dvj.iter_mut().zip(dci) {
                        *o += p[j] * g;
                    }
                }
                let qi: Vec<f32> = q.row(b * s + i)[cols.clone()].to_vec();
                for j in 0..=i {
                    let ds = p[j] * (dp[j] - inner) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj: Vec<f32> = k.row(b * s + j)[cols.clone()].to_vec();
                    let dqi = &mut dq.row_mut(b * s + i)[cols.clone()];
                    for (o, &kv) in dqi.iter_mut().zip(&kj) {
                        *o += ds * kv;
                    }
                    let dkj = &mut dk.row_mut(b * s + j)[cols.clone()];
                    for (o, &qv) in dkj.iter_mut().zip(&qi) {
                        *o += ds * qv;
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}

#[derive(Debug, Clone)]
pub struct Attention {
    pub n_heads: usize,
    pub q: QuantLinear,
    pub k: QuantLinear,
    pub v: QuantLinear,
    pub o: QuantLinear,
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    q_cache: LinearCache,
    k_cache: LinearCache,
    v_cache: LinearCache,
    o_cache: LinearCache,
    q: FloatMatrix,
    k: FloatMatrix,
    v: FloatMatrix,
    probs: Vec<f32>,
}

impl Attention {
    pub fn new(n_heads: usize, q: FloatMatrix, k: FloatMatrix, v: FloatMatrix, o: FloatMatrix) -> Self {
        let lin = |w| QuantLinear::new(w, WeightQuantizer::Binary);
        Self { n_heads, q: lin(q), k: lin(k), v: lin(v), o: lin(o) }
    }

    pub fn projections(&self) -> [&QuantLinear; 4] {
        [&self.q, &self.k, &self.v, &self.o]
    }

    pub fn forward(&self, xn: &FloatMatrix, shape: SeqShape) -> Result<FloatMatrix> {
        self.forward_train(xn, shape).map(|(y, _)| y)
    }

    pub fn forward_train(&self, xn: &FloatMatrix, shape: SeqShape) -> Result<(FloatMatrix, AttentionCache)> {
        if xn.rows() != shape.tokens() {
            return Err(mismatch(format!("{} rows for {} tokens", xn.rows(), shape.tokens())));
        }
        if xn.cols() % self.n_heads != 0 {
            return Err(mismatch(format!("{} heads do not divide {}", self.n_heads, xn.cols())));
        }
        let (q, q_cache) = self.q.forward_train(xn, 1.0)?;
        let (k, k_cache) = self.k.forward_train(xn, 1.0)?;
        let (v, v_cache) = self.v.forward_train(xn, 1.0)?;
        let (ctx, probs) = causal_attention(&q, &k, &v, shape, self.n_heads);
        let (y, o_cache) = self.o.forward_train(&ctx, 1.0)?;
        Ok((y, AttentionCache { q_cache, k_cache, v_cache, o_cache, q, k, v, probs }))
    }

    /// Returns `dxn`; accumulates projection gradients into `grad`.
    pub fn backward(
        &self,
        cache: &AttentionCache,
        dy: &FloatMatrix,
        shape: SeqShape,
        grad: &mut Attention,
    ) -> FloatMatrix {
        let dctx = self.o.backward(&cache.o_cache, dy, &mut grad.o.weight);
        let (dq, dk, dv) =
            causal_attention_backward(&cache.q, &cache.k, &cache.v, &cache.probs, &dctx, shape, self.n_heads);
        let mut dx = self.q.backward(&cache.q_cache, &dq, &mut grad.q.weight);
        dx.add_assign(&self.k.backward(&cache.k_cache, &dk, &mut grad.k.weight));
        dx.add_assign(&self.v.backward(&cache.v_cache, &dv, &mut grad.v.weight));
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> FloatMatrix {
        FloatMatrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn single_token_returns_value_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = 8;
        let attn = Attention::new(
            2,
            rand_matrix(&mut rng, d, d),
            rand_matrix(&mut rng, d, d),
            rand_matrix(&mut rng, d, d),
            rand_matrix(&mut rng, d, d),
        );
        let x = rand_matrix(&mut rng, 1, d);
        let shape = SeqShape { batch: 1, seq: 1 };
        let (_, cache) = attn.forward_train(&x, shape).unwrap();
        let v = attn.v.forward(&x, 1.0).unwrap();
        let (ctx, _) = causal_attention(&cache.q, &cache.k, &cache.v, shape, 2);
        for (a, b) in ctx.as_slice().iter().zip(v.as_slice()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_output_projection_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = 8;
        let attn = Attention::new(
            2,
            rand_matrix(&mut rng, d, d),
            rand_matrix(&mut rng, d, d),
            FloatMatrix::zeros(d, d),
            FloatMatrix::zeros(d, d),
        );
        let x = rand_matrix(&mut rng, 6, d);
        let y = attn.forward(&x, SeqShape { batch: 2, seq: 3 }).unwrap();
        assert!(y.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn causal_mask_blocks_future() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let shape = SeqShape { batch: 1, seq: 5 };
        let (q, k, mut v) = (rand_matrix(&mut rng, 5, 4), rand_matrix(&mut rng, 5, 4), rand_matrix(&mut rng, 5, 4));
        let (before, _) = causal_attention(&q, &k, &v, shape, 1);
        v.row_mut(4).iter_mut().for_each(|x| *x += 10.0);
        let (after, _) = causal_attention(&q, &k, &v, shape, 1);
        for i in 0..4 {
            assert_eq!(before.row(i), after.row(i));
        }
    }

    #[test]
    fn attention_core_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let shape = SeqShape { batch: 2, seq: 4 };
        let heads = 2;
        let mk = |rng: &mut ChaCha8Rng| rand_matrix(rng, 8, 6);
        let (q, k, v, w) = (mk(&mut rng), mk(&mut rng), mk(&mut rng), mk(&mut rng));
        let loss = |q: &FloatMatrix, k: &FloatMatrix, v: &FloatMatrix| -> f64 {
            let (c, _) = causal_attention(q, k, v, shape, heads);
            c.as_slice().iter().zip(w.as_slice()).map(|(a, b)| (a * b) as f64).sum()
        };
        let (_, probs) = causal_attention(&q, &k, &v, shape, heads);
        let (dq, dk, dv) = causal_attention_backward(&q, &k, &v, &probs, &w, shape, heads);
        let h = 1e-3f32;
        for (which, grad) in [(0, &dq), (1, &dk), (2, &dv)] {
            for idx in 0..48 {
                let mut m = [q.clone(), k.clone(), v.clone()];
                m[which].as_mut_slice()[idx] += h;
                let up = loss(&m[0], &m[1], &m[2]);
                m[which].as_mut_slice()[idx] -= 2.0 * h;
                let down = loss(&m[0], &m[1], &m[2]);
                let fd = (up - down) / (2.0 * h as f64);
                assert!((fd - grad.as_slice()[idx] as f64).abs() < 2e-3, "{which}/{idx}");
            }
        }
    }
}
