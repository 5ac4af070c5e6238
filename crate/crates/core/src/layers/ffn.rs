//! Decoupled feed-forward layer.
//!
//! ```text
//! Y = alpha · g · HP_k(x) + beta · Bit(x)
//! ```
//!
//! `Bit` is a two-matrix 1-bit MLP of hidden width `d_ffn - r`; `HP_k` is
//! the INT8 MLP of hidden width `r` chosen per token by the top-1 router,
//! and `g` its softmax probability (fixed to 1 with a single branch).
//! The `Binary` variant drops the 8-bit branches and scalars entirely and
//! serves as the pure 1-bit baseline.

use serde::{Deserialize, Serialize};

use crate::error::{mismatch, Result};
use crate::layers::linear::{LinearCache, QuantLinear, WeightQuantizer};
use crate::layers::router::{route, Routing};
use crate::tensor::FloatMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FfnVariant {
    Decoupled,
    Binary,
}

#[inline]
pub fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

#[inline]
fn silu_grad(x: f32) -> f32 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

pub fn silu_matrix(x: &FloatMatrix) -> FloatMatrix {
    let mut y = x.clone();
    y.as_mut_slice().iter_mut().for_each(|v| *v = silu(*v));
    y
}

fn silu_backward(pre: &FloatMatrix, dy: &FloatMatrix) -> FloatMatrix {
    let mut d = dy.clone();
    for (g, &x) in d.as_mut_slice().iter_mut().zip(pre.as_slice()) {
        *g *= silu_grad(x);
    }
    d
}

/// One INT8 branch: up-projection to `r`, SiLU, down-projection.
#[derive(Debug, Clone)]
pub struct HpBranch {
    pub up: QuantLinear,
    pub down: QuantLinear,
}

#[derive(Debug, Clone)]
pub struct DecoupledLinear {
    pub variant: FfnVariant,
    pub bit_up: QuantLinear,
    pub bit_down: QuantLinear,
    pub hp: Vec<HpBranch>,
    /// `N × d_model`; empty for the binary variant.
    pub router: FloatMatrix,
    pub alpha: f32,
    pub beta: f32,
}

#[derive(Debug, Clone)]
struct MlpCache {
    up: LinearCache,
    pre: FloatMatrix,
    down: LinearCache,
}

#[derive(Debug, Clone)]
struct BranchCache {
    tokens: Vec<usize>,
    mlp: MlpCache,
}

#[derive(Debug, Clone)]
pub struct FfnCache {
    bit: MlpCache,
    branches: Vec<BranchCache>,
    routing: Option<Routing>,
}

impl FfnCache {
    pub fn routing(&self) -> Option<&Routing> {
        self.routing.as_ref()
    }
}

fn mlp_forward(up: &QuantLinear, down: &QuantLinear, x: &FloatMatrix, path: f32) -> Result<(FloatMatrix, MlpCache)> {
    let (pre, up_cache) = up.forward_train(x, 1.0)?;
    let act = silu_matrix(&pre);
    let (y, down_cache) = down.forward_train(&act, path)?;
    Ok((y, MlpCache { up: up_cache, pre, down: down_cache }))
}

fn mlp_backward(
    up: &QuantLinear,
    down: &QuantLinear,
    cache: &MlpCache,
    dz: &FloatMatrix,
    gup: &mut FloatMatrix,
    gdown: &mut FloatMatrix,
) -> FloatMatrix {
    let dact = down.backward(&cache.down, dz, gdown);
    let dpre = silu_backward(&cache.pre, &dact);
    up.backward(&cache.up, &dpre, gup)
}

fn frobenius_dot(a: &FloatMatrix, b: &FloatMatrix) -> f32 {
    a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x * y).sum()
}

impl DecoupledLinear {
    /// Builds a decoupled layer from latent weights.
    pub fn decoupled(
        bit_up: FloatMatrix,
        bit_down: FloatMatrix,
        hp: Vec<(FloatMatrix, FloatMatrix)>,
        router: FloatMatrix,
        alpha: f32,
        beta: f32,
    ) -> Result<Self> {
        if hp.is_empty() || router.rows() != hp.len() {
            return Err(mismatch(format!("{} branches with a {}-row router", hp.len(), router.rows())));
        }
        let d = bit_up.cols();
        if bit_down.rows() != d || router.cols() != d || bit_down.cols() != bit_up.rows() {
            return Err(mismatch("1-bit branch shapes do not chain"));
        }
        for (u, dn) in &hp {
            if u.cols() != d || dn.rows() != d || dn.cols() != u.rows() {
                return Err(mismatch("8-bit branch shapes do not chain"));
            }
        }
        Ok(Self {
            variant: FfnVariant::Decoupled,
            bit_up: QuantLinear::new(bit_up, WeightQuantizer::Binary),
            bit_down: QuantLinear::new(bit_down, WeightQuantizer::Binary),
            hp: hp
                .into_iter()
                .map(|(u, dn)| HpBranch {
                    up: QuantLinear::new(u, WeightQuantizer::Int8),
                    down: QuantLinear::new(dn, WeightQuantizer::Int8),
                })
                .collect(),
            router,
            alpha,
            beta,
        })
    }

    /// Pure 1-bit MLP (no 8-bit branches, no scalars).
    pub fn binary(bit_up: FloatMatrix, bit_down: FloatMatrix) -> Self {
        let d = bit_up.cols();
        Self {
            variant: FfnVariant::Binary,
            bit_up: QuantLinear::new(bit_up, WeightQuantizer::Binary),
            bit_down: QuantLinear::new(bit_down, WeightQuantizer::Binary),
            hp: Vec::new(),
            router: FloatMatrix::zeros(0, d),
            alpha: 0.0,
            beta: 1.0,
        }
    }

    pub fn d_model(&self) -> usize {
        self.bit_up.in_features()
    }

    pub fn n_branches(&self) -> usize {
        self.hp.len()
    }

    /// Multiplier on the 1-bit path.
    pub fn bit_scale(&self) -> f32 {
        match self.variant {
            FfnVariant::Decoupled => self.beta,
            FfnVariant::Binary => 1.0,
        }
    }

    pub fn route(&self, xn: &FloatMatrix) -> Option<Routing> {
        (self.variant == FfnVariant::Decoupled).then(|| route(&self.router, xn))
    }

    pub fn forward(&self, xn: &FloatMatrix) -> Result<FloatMatrix> {
        self.forward_train(xn).map(|(y, _)| y)
    }

    pub fn forward_train(&self, xn: &FloatMatrix) -> Result<(FloatMatrix, FfnCache)> {
        if xn.cols() != self.d_model() {
            return Err(mismatch(format!("ffn expects {} features, got {}", self.d_model(), xn.cols())));
        }
        let (mut y, bit) = mlp_forward(&self.bit_up, &self.bit_down, xn, self.bit_scale())?;
        let routing = self.route(xn);
        let mut branches = Vec::new();
        if let Some(routing) = &routing {
            for (k, tokens) in routing.groups().into_iter().enumerate() {
                if tokens.is_empty() {
                    continue;
                }
                let br = &self.hp[k];
                let xk = xn.gather_rows(&tokens);
                let (hk, mlp) = mlp_forward(&br.up, &br.down, &xk, self.alpha)?;
                for (row, &t) in tokens.iter().enumerate() {
                    let g = routing.gate[t];
                    for (o, &h) in y.row_mut(t).iter_mut().zip(hk.row(row)) {
                        *o += h * g;
                    }
                }
                branches.push(BranchCache { tokens, mlp });
            }
        }
        Ok((y, FfnCache { bit, branches, routing }))
    }

    /// Returns `dxn`; accumulates every parameter gradient into `grad`.
    pub fn backward(&self, xn: &FloatMatrix, cache: &FfnCache, dy: &FloatMatrix, grad: &mut DecoupledLinear) -> FloatMatrix {
        let bit_scale = self.bit_scale();
        if self.variant == FfnVariant::Decoupled {
            grad.beta += frobenius_dot(dy, &cache.bit.down.z);
        }
        let mut dz = dy.clone();
        dz.scale(bit_scale);
        let mut dx = mlp_backward(
            &self.bit_up,
            &self.bit_down,
            &cache.bit,
            &dz,
            &mut grad.bit_up.weight,
            &mut grad.bit_down.weight,
        );
        let Some(routing) = &cache.routing else {
            return dx;
        };
        let n = self.n_branches();
        let mut dlogits = FloatMatrix::zeros(xn.rows(), n);
        for bc in &cache.branches {
            let k = routing.choice[bc.tokens[0]];
            let mut dzk = dy.gather_rows(&bc.tokens);
            for (row, &t) in bc.tokens.iter().enumerate() {
                let g = routing.gate[t];
                let zrow = bc.mlp.down.z.row(row);
                let inner: f32 = dzk.row(row).iter().zip(zrow).map(|(a, b)| a * b).sum();
                grad.alpha += g * inner;
                if n > 1 {
                    // d gate / d logit_j = p_k (δ_jk − p_j)
                    let dg = self.alpha * inner;
                    let p = routing.token_probs(t);
                    for j in 0..n {
                        let delta = if j == k { 1.0 } else { 0.0 };
                        dlogits.set(t, j, dg * (p[k] * (delta - p[j])) as f32);
                    }
                }
                dzk.row_mut(row).iter_mut().for_each(|v| *v *= self.alpha * g);
            }
            let gb = &mut grad.hp[k];
            let dxk = mlp_backward(&self.hp[k].up, &self.hp[k].down, &bc.mlp, &dzk, &mut gb.up.weight, &mut gb.down.weight);
            for (row, &t) in bc.tokens.iter().enumerate() {
                for (o, &g) in dx.row_mut(t).iter_mut().zip(dxk.row(row)) {
                    *o += g;
                }
            }
        }
        if n > 1 {
            grad.router.add_assign(&crate::tensor::matmul_tn(&dlogits, xn));
            dx.add_assign(&crate::tensor::matmul_nn(&dlogits, &self.router));
        }
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

    fn layer(rng: &mut ChaCha8Rng, d: usize, hidden: usize, r: usize, n: usize, alpha: f32, beta: f32) -> DecoupledLinear {
        let hp = (0..n).map(|_| (rand_matrix(rng, r, d), rand_matrix(rng, d, r))).collect();
        DecoupledLinear::decoupled(
            rand_matrix(rng, hidden, d),
            rand_matrix(rng, d, hidden),
            hp,
            rand_matrix(rng, n, d),
            alpha,
            beta,
        )
        .unwrap()
    }

    #[test]
    fn alpha_zero_isolates_bit_branch() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let l = layer(&mut rng, 8, 12, 4, 2, 0.0, 0.3);
        let x = rand_matrix(&mut rng, 5, 8);
        let y = l.forward(&x).unwrap();
        let bit = l.bit_down.forward(&silu_matrix(&l.bit_up.forward(&x, 1.0).unwrap()), 0.3).unwrap();
        assert_eq!(y, bit);
    }

    #[test]
    fn beta_zero_single_branch_is_hp_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let l = layer(&mut rng, 8, 12, 4, 1, 1.7, 0.0);
        let x = rand_matrix(&mut rng, 5, 8);
        let y = l.forward(&x).unwrap();
        let hp = &l.hp[0];
        let want = hp.down.forward(&silu_matrix(&hp.up.forward(&x, 1.0).unwrap()), 1.7).unwrap();
        assert_eq!(y, want);
    }

    #[test]
    fn routed_equals_selected_branch_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let l = layer(&mut rng, 8, 12, 4, 4, 2.0, 0.2);
        let x = rand_matrix(&mut rng, 16, 8);
        let y = l.forward(&x).unwrap();
        let routing = l.route(&x).unwrap();
        for t in 0..16 {
            let k = routing.choice[t];
            let single = DecoupledLinear {
                hp: vec![l.hp[k].clone()],
                router: FloatMatrix::zeros(1, 8),
                ..l.clone()
            };
            let xt = x.gather_rows(&[t]);
            let mut dense_hp = single.hp[0].down.forward(&silu_matrix(&single.hp[0].up.forward(&xt, 1.0).unwrap()), 2.0).unwrap();
            dense_hp.scale(routing.gate[t]);
            let mut want = single.bit_down.forward(&silu_matrix(&single.bit_up.forward(&xt, 1.0).unwrap()), 0.2).unwrap();
            want.add_assign(&dense_hp);
            assert_eq!(y.row(t), want.row(0), "token {t}");
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut l = layer(&mut rng, 6, 8, 4, 3, 1.3, 0.6);
        // identity quantizers make the layer smooth so finite differences apply
        for q in [&mut l.bit_up, &mut l.bit_down] {
            q.quantizer = WeightQuantizer::Identity;
            q.quantize_input = false;
        }
        for b in &mut l.hp {
            for q in [&mut b.up, &mut b.down] {
                q.quantizer = WeightQuantizer::Identity;
                q.quantize_input = false;
            }
        }
        let x = rand_matrix(&mut rng, 7, 6);
        let w = rand_matrix(&mut rng, 7, 6);
        let loss = |l: &DecoupledLinear, x: &FloatMatrix| -> f64 {
            let y = l.forward(x).unwrap();
            y.as_slice().iter().zip(w.as_slice()).map(|(a, b)| (a * b) as f64).sum()
        };
        let (_, cache) = l.forward_train(&x).unwrap();
        let mut grad = l.clone();
        zero(&mut grad);
        let dx = l.backward(&x, &cache, &w, &mut grad);
        let h = 1e-3f32;
        for idx in 0..x.as_slice().len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp.as_mut_slice()[idx] += h;
            xm.as_mut_slice()[idx] -= h;
            let fd = (loss(&l, &xp) - loss(&l, &xm)) / (2.0 * h as f64);
            assert!((fd - dx.as_slice()[idx] as f64).abs() < 5e-3, "x[{idx}] {fd} vs {}", dx.as_slice()[idx]);
        }
        let fd_scalar = |f: &dyn Fn(&mut DecoupledLinear, f32)| {
            let (mut lp, mut lm) = (l.clone(), l.clone());
            f(&mut lp, h);
            f(&mut lm, -h);
            (loss(&lp, &x) - loss(&lm, &x)) / (2.0 * h as f64)
        };
        assert!((fd_scalar(&|l, e| l.alpha += e) - grad.alpha as f64).abs() < 5e-3);
        assert!((fd_scalar(&|l, e| l.beta += e) - grad.beta as f64).abs() < 5e-3);
        for idx in 0..l.router.as_slice().len() {
            let fd = fd_scalar(&|l, e| l.router.as_mut_slice()[idx] += e);
            assert!((fd - grad.router.as_slice()[idx] as f64).abs() < 5e-3, "router[{idx}]");
        }
    }

    fn zero(g: &mut DecoupledLinear) {
        g.bit_up.weight.fill(0.0);
        g.bit_down.weight.fill(0.0);
        for b in &mut g.hp {
            b.up.weight.fill(0.0);
            b.down.weight.fill(0.0);
        }
        g.router.fill(0.0);
        g.alpha = 0.0;
        g.beta = 0.0;
    }
}
