//! Decoder-only transformer: learned token and position embeddings,
//! pre-norm blocks (1-bit attention, decoupled FFN), final RMSNorm and a
//! float output head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::ModelConfig;
use crate::error::{invalid, mismatch, Result};
use crate::layers::attention::AttentionCache;
use crate::layers::ffn::FfnCache;
use crate::layers::norm::RmsNormCache;
use crate::layers::{argmax, Attention, DecoupledLinear, FfnVariant, RmsNorm, SeqShape};
use crate::tensor::{matmul_nn, matmul_nt, matmul_tn, FloatMatrix};

#[derive(Debug, Clone)]
pub struct Block {
    pub norm1: RmsNorm,
    pub attn: Attention,
    pub norm2: RmsNorm,
    pub ffn: DecoupledLinear,
}

#[derive(Debug, Clone)]
pub struct Transformer {
    pub cfg: ModelConfig,
    pub tok_emb: FloatMatrix,
    pub pos_emb: FloatMatrix,
    pub blocks: Vec<Block>,
    pub norm_f: RmsNorm,
    pub head: FloatMatrix,
}

/// Read-only view of one parameter tensor.
#[derive(Debug)]
pub struct ParamRef<'a> {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: &'a [f32],
    pub decay: bool,
}

#[derive(Debug)]
pub struct ParamMut<'a> {
    pub name: String,
    pub data: &'a mut [f32],
    pub decay: bool,
}

#[derive(Debug, Clone)]
struct BlockCache {
    n1: RmsNormCache,
    attn: AttentionCache,
    n2: RmsNormCache,
    xn2: FloatMatrix,
    ffn: FfnCache,
}

/// Everything the backward pass needs from a training forward.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    shape: SeqShape,
    tokens: Vec<u32>,
    blocks: Vec<BlockCache>,
    nf: RmsNormCache,
    xf: FloatMatrix,
}

impl ForwardCache {
    /// Fraction of tokens routed to each branch, averaged over layers.
    pub fn branch_utilization(&self, n_branches: usize) -> Vec<f64> {
        let mut util = vec![0.0; n_branches];
        let mut layers = 0;
        for b in &self.blocks {
            if let Some(r) = b.ffn.routing() {
                r.utilization().iter().zip(&mut util).for_each(|(u, acc)| *acc += u);
                layers += 1;
            }
        }
        if layers > 0 {
            util.iter_mut().for_each(|u| *u /= layers as f64);
        }
        util
    }
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f32) -> FloatMatrix {
    let dist = Normal::new(0.0f32, std).expect("std is positive");
    FloatMatrix::from_fn(rows, cols, |_, _| dist.sample(rng))
}

pub(crate) fn check_tokens(tokens: &[u32], shape: SeqShape, max_seq_len: usize, vocab: usize) -> Result<()> {
    if tokens.len() != shape.tokens() || shape.tokens() == 0 {
        return Err(mismatch(format!("{} tokens for a {}x{} batch", tokens.len(), shape.batch, shape.seq)));
    }
    if shape.seq > max_seq_len {
        return Err(invalid(format!("sequence length {} exceeds max_seq_len {max_seq_len}", shape.seq)));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= vocab) {
        return Err(invalid(format!("token {t} outside vocabulary of {vocab}")));
    }
    Ok(())
}

pub(crate) fn embed_tokens(tok_emb: &FloatMatrix, pos_emb: &FloatMatrix, tokens: &[u32], shape: SeqShape) -> FloatMatrix {
    let mut x = FloatMatrix::zeros(tokens.len(), tok_emb.cols());
    for (t, &tok) in tokens.iter().enumerate() {
        let (e, p) = (tok_emb.row(tok as usize), pos_emb.row(t % shape.seq));
        for ((o, a), b) in x.row_mut(t).iter_mut().zip(e).zip(p) {
            *o = a + b;
        }
    }
    x
}

impl Transformer {
    /// Random initialization. Linear weights are `N(0, 1/fan_in)`, with
    /// residual-output projections further scaled by `1/sqrt(2·layers)`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if cfg.vocab_size == 0 {
            return Err(invalid("vocab_size must be set before building a model"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.d_model;
        let v = cfg.vocab_size;
        let lin = |rng: &mut ChaCha8Rng, out: usize, inp: usize| normal_matrix(rng, out, inp, 1.0 / (inp as f32).sqrt());
        let resid = 1.0 / (2.0 * cfg.n_layers as f32).sqrt();
        let tok_emb = normal_matrix(&mut rng, v, d, 0.02);
        let pos_emb = normal_matrix(&mut rng, cfg.max_seq_len, d, 0.02);
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for _ in 0..cfg.n_layers {
            let q = lin(&mut rng, d, d);
            let k = lin(&mut rng, d, d);
            let vv = lin(&mut rng, d, d);
            let mut o = lin(&mut rng, d, d);
            o.scale(resid);
            let attn = Attention::new(cfg.n_heads, q, k, vv, o);
            let hidden = cfg.bit_hidden();
            let bit_up = lin(&mut rng, hidden, d);
            let mut bit_down = lin(&mut rng, d, hidden);
            bit_down.scale(resid);
            let ffn = match cfg.ffn_variant {
                FfnVariant::Binary => DecoupledLinear::binary(bit_up, bit_down),
                FfnVariant::Decoupled => {
                    let hp = (0..cfg.n_branches)
                        .map(|_| {
                            let up = lin(&mut rng, cfg.r, d);
                            let mut down = lin(&mut rng, d, cfg.r);
                            down.scale(resid);
                            (up, down)
                        })
                        .collect();
                    let router = normal_matrix(&mut rng, cfg.n_branches, d, 1.0 / (d as f32).sqrt());
                    DecoupledLinear::decoupled(bit_up, bit_down, hp, router, cfg.alpha_init, cfg.beta_init)?
                }
            };
            blocks.push(Block { norm1: RmsNorm::new(d, cfg.norm_eps), attn, norm2: RmsNorm::new(d, cfg.norm_eps), ffn });
        }
        let head = normal_matrix(&mut rng, v, d, 0.02);
        Ok(Self { cfg: cfg.clone(), tok_emb, pos_emb, blocks, norm_f: RmsNorm::new(d, cfg.norm_eps), head })
    }

    pub fn vocab_size(&self) -> usize {
        self.tok_emb.rows()
    }

    /// Parameters in declaration order.
    pub fn params(&self) -> Vec<ParamRef<'_>> {
        fn m<'a>(out: &mut Vec<ParamRef<'a>>, name: String, x: &'a FloatMatrix, decay: bool) {
            out.push(ParamRef { name, rows: x.rows(), cols: x.cols(), data: x.as_slice(), decay });
        }
        fn v<'a>(out: &mut Vec<ParamRef<'a>>, name: String, x: &'a [f32], decay: bool) {
            out.push(ParamRef { name, rows: 1, cols: x.len(), data: x, decay });
        }
        let mut out = Vec::new();
        m(&mut out, "tok_emb".into(), &self.tok_emb, false);
        m(&mut out, "pos_emb".into(), &self.pos_emb, false);
        for (l, b) in self.blocks.iter().enumerate() {
            let p = format!("blocks.{l}");
            v(&mut out, format!("{p}.norm1.gain"), &b.norm1.gain, false);
            for (n, lin) in ["q", "k", "v", "o"].iter().zip(b.attn.projections()) {
                m(&mut out, format!("{p}.attn.{n}"), &lin.weight, true);
            }
            v(&mut out, format!("{p}.norm2.gain"), &b.norm2.gain, false);
            m(&mut out, format!("{p}.ffn.bit_up"), &b.ffn.bit_up.weight, true);
            m(&mut out, format!("{p}.ffn.bit_down"), &b.ffn.bit_down.weight, true);
            for (k, br) in b.ffn.hp.iter().enumerate() {
                m(&mut out, format!("{p}.ffn.hp.{k}.up"), &br.up.weight, true);
                m(&mut out, format!("{p}.ffn.hp.{k}.down"), &br.down.weight, true);
            }
            if b.ffn.variant == FfnVariant::Decoupled {
                m(&mut out, format!("{p}.ffn.router"), &b.ffn.router, true);
                v(&mut out, format!("{p}.ffn.alpha"), std::slice::from_ref(&b.ffn.alpha), false);
                v(&mut out, format!("{p}.ffn.beta"), std::slice::from_ref(&b.ffn.beta), false);
            }
        }
        v(&mut out, "norm_f.gain".into(), &self.norm_f.gain, false);
        m(&mut out, "head".into(), &self.head, true);
        out
    }

    /// Mutable parameters, same order and names as [`Transformer::params`].
    pub fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        fn m<'a>(out: &mut Vec<ParamMut<'a>>, name: String, x: &'a mut FloatMatrix, decay: bool) {
            out.push(ParamMut { name, data: x.as_mut_slice(), decay });
        }
        fn v<'a>(out: &mut Vec<ParamMut<'a>>, name: String, x: &'a mut [f32], decay: bool) {
            out.push(ParamMut { name, data: x, decay });
        }
        let mut out = Vec::new();
        m(&mut out, "tok_emb".into(), &mut self.tok_emb, false);
        m(&mut out, "pos_emb".into(), &mut self.pos_emb, false);
        for (l, b) in self.blocks.iter_mut().enumerate() {
            let p = format!("blocks.{l}");
            v(&mut out, format!("{p}.norm1.gain"), &mut b.norm1.gain, false);
            let a = &mut b.attn;
            for (n, lin) in ["q", "k", "v", "o"].iter().zip([&mut a.q, &mut a.k, &mut a.v, &mut a.o]) {
                m(&mut out, format!("{p}.attn.{n}"), &mut lin.weight, true);
            }
            v(&mut out, format!("{p}.norm2.gain"), &mut b.norm2.gain, false);
            let f = &mut b.ffn;
            m(&mut out, format!("{p}.ffn.bit_up"), &mut f.bit_up.weight, true);
            m(&mut out, format!("{p}.ffn.bit_down"), &mut f.bit_down.weight, true);
            for (k, br) in f.hp.iter_mut().enumerate() {
                m(&mut out, format!("{p}.ffn.hp.{k}.up"), &mut br.up.weight, true);
                m(&mut out, format!("{p}.ffn.hp.{k}.down"), &mut br.down.weight, true);
            }
            if f.variant == FfnVariant::Decoupled {
                m(&mut out, format!("{p}.ffn.router"), &mut f.router, true);
                v(&mut out, format!("{p}.ffn.alpha"), std::slice::from_mut(&mut f.alpha), false);
                v(&mut out, format!("{p}.ffn.beta"), std::slice::from_mut(&mut f.beta), false);
            }
        }
        v(&mut out, "norm_f.gain".into(), &mut self.norm_f.gain, false);
        m(&mut out, "head".into(), &mut self.head, true);
        out
    }

    pub fn n_params(&self) -> usize {
        self.params().iter().map(|p| p.data.len()).sum()
    }

    /// Same structure with every parameter set to zero (gradient buffer).
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.params_mut().into_iter().for_each(|p| p.data.fill(0.0));
        z
    }

    fn check_tokens(&self, tokens: &[u32], shape: SeqShape) -> Result<()> {
        check_tokens(tokens, shape, self.cfg.max_seq_len, self.vocab_size())
    }

    /// Token plus position embedding for each input row.
    pub fn embed(&self, tokens: &[u32], shape: SeqShape) -> Result<FloatMatrix> {
        self.check_tokens(tokens, shape)?;
        Ok(embed_tokens(&self.tok_emb, &self.pos_emb, tokens, shape))
    }

    /// Calls `hook(site, input)` with the normalized input of every
    /// attention (`blocks.L.attn`) and FFN (`blocks.L.ffn`) sublayer.
    pub fn forward_with_hook(
        &self,
        tokens: &[u32],
        shape: SeqShape,
        hook: &mut dyn FnMut(&str, &FloatMatrix),
    ) -> Result<FloatMatrix> {
        let mut x = self.embed(tokens, shape)?;
        for (l, b) in self.blocks.iter().enumerate() {
            let xn1 = b.norm1.forward(&x)?;
            hook(&format!("blocks.{l}.attn"), &xn1);
            x.add_assign(&b.attn.forward(&xn1, shape)?);
            let xn2 = b.norm2.forward(&x)?;
            hook(&format!("blocks.{l}.ffn"), &xn2);
            x.add_assign(&b.ffn.forward(&xn2)?);
        }
        let xf = self.norm_f.forward(&x)?;
        Ok(matmul_nt(&xf, &self.head))
    }

    /// Logits, `tokens × vocab`.
    pub fn forward(&self, tokens: &[u32], shape: SeqShape) -> Result<FloatMatrix> {
        self.forward_with_hook(tokens, shape, &mut |_, _| {})
    }

    pub fn forward_train(&self, tokens: &[u32], shape: SeqShape) -> Result<(FloatMatrix, ForwardCache)> {
        let mut x = self.embed(tokens, shape)?;
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (xn1, n1) = b.norm1.forward_train(&x)?;
            let (a, attn) = b.attn.forward_train(&xn1, shape)?;
            x.add_assign(&a);
            let (xn2, n2) = b.norm2.forward_train(&x)?;
            let (f, ffn) = b.ffn.forward_train(&xn2)?;
            x.add_assign(&f);
            caches.push(BlockCache { n1, attn, n2, xn2, ffn });
        }
        let (xf, nf) = self.norm_f.forward_train(&x)?;
        let logits = matmul_nt(&xf, &self.head);
        Ok((logits, ForwardCache { shape, tokens: tokens.to_vec(), blocks: caches, nf, xf }))
    }

    /// Full gradient for `dlogits`, as a parameter-shaped buffer.
    pub fn backward(&self, cache: &ForwardCache, dlogits: &FloatMatrix) -> Transformer {
        let mut g = self.zeros_like();
        g.head.add_assign(&matmul_tn(dlogits, &cache.xf));
        let dxf = matmul_nn(dlogits, &self.head);
        let mut dx = self.norm_f.backward(&cache.nf, &dxf, &mut g.norm_f.gain);
        for (l, b) in self.blocks.iter().enumerate().rev() {
            let c = &cache.blocks[l];
            let gb = &mut g.blocks[l];
            let dxn2 = b.ffn.backward(&c.xn2, &c.ffn, &dx, &mut gb.ffn);
            dx.add_assign(&b.norm2.backward(&c.n2, &dxn2, &mut gb.norm2.gain));
            let dxn1 = b.attn.backward(&c.attn, &dx, cache.shape, &mut gb.attn);
            dx.add_assign(&b.norm1.backward(&c.n1, &dxn1, &mut gb.norm1.gain));
        }
        for (t, &tok) in cache.tokens.iter().enumerate() {
            let row = dx.row(t);
            g.tok_emb.row_mut(tok as usize).iter_mut().zip(row).for_each(|(a, b)| *a += b);
            g.pos_emb.row_mut(t % cache.shape.seq).iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
        g
    }

    /// Greedy continuation through the training-mode forward. Returns the
    /// generated tokens and the logits each choice was taken from.
    pub fn generate_greedy(&self, prompt: &[u32], n_tokens: usize) -> Result<(Vec<u32>, Vec<Vec<f32>>)> {
        greedy_decode(prompt, n_tokens, self.cfg.max_seq_len, |ctx| {
            let shape = SeqShape { batch: 1, seq: ctx.len() };
            self.forward(ctx, shape)
        })
    }
}

/// Shared greedy loop: `step` maps a context window to its logits; the
/// last row picks the next token. The window is the trailing `max_ctx`
/// tokens (no key-value cache).
pub fn greedy_decode(
    prompt: &[u32],
    n_tokens: usize,
    max_ctx: usize,
    mut step: impl FnMut(&[u32]) -> Result<FloatMatrix>,
) -> Result<(Vec<u32>, Vec<Vec<f32>>)> {
    if n_tokens == 0 {
        return Ok((Vec::new(), Vec::new()));
    }
    if prompt.is_empty() {
        return Err(invalid("generation needs a non-empty prompt"));
    }
    let mut ctx = prompt.to_vec();
    let mut out = Vec::with_capacity(n_tokens);
    let mut trace = Vec::with_capacity(n_tokens);
    for _ in 0..n_tokens {
        let start = ctx.len().saturating_sub(max_ctx);
        let logits = step(&ctx[start..])?;
        let last = logits.row(logits.rows() - 1).to_vec();
        let next = argmax(&last) as u32;
        out.push(next);
        ctx.push(next);
        trace.push(last);
    }
    Ok((out, trace))
}

/// Mean next-token cross-entropy (nats) and its gradient w.r.t. the logits.
pub fn cross_entropy(logits: &FloatMatrix, targets: &[u32]) -> Result<(f64, FloatMatrix)> {
    if logits.rows() != targets.len() {
        return Err(mismatch(format!("{} logit rows for {} targets", logits.rows(), targets.len())));
    }
    let n = targets.len() as f32;
    let mut grad = logits.clone();
    let mut total = 0.0f64;
    for (t, &y) in targets.iter().enumerate() {
        let row = grad.row_mut(t);
        if y as usize >= row.len() {
            return Err(invalid(format!("target {y} outside vocabulary of {}", row.len())));
        }
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        total += ((sum.ln() + max) - logits.get(t, y as usize)) as f64;
        for v in row.iter_mut() {
            *v /= sum * n;
        }
        row[y as usize] -= 1.0 / n;
    }
    Ok((total / targets.len() as f64, grad))
}

/// Mean cross-entropy without gradient.
pub fn eval_loss(model: &Transformer, windows: &[crate::corpus::Batch]) -> Result<f64> {
    if windows.is_empty() {
        return Err(invalid("no evaluation windows"));
    }
    let mut total = 0.0;
    for w in windows {
        let logits = model.forward(&w.inputs, SeqShape { batch: w.batch, seq: w.seq })?;
        total += cross_entropy(&logits, &w.targets)?.0;
    }
    Ok(total / windows.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::WeightQuantizer;

    fn tiny(variant: FfnVariant, n: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: 11,
            max_seq_len: 8,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ffn_nominal: 40,
            r: 8,
            n_branches: n,
            r_alignment: 8,
            ffn_variant: variant,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn param_views_agree() {
        let mut m = Transformer::init(&tiny(FfnVariant::Decoupled, 3), 1).unwrap();
        let a: Vec<(String, usize)> = m.params().iter().map(|p| (p.name.clone(), p.data.len())).collect();
        let b: Vec<(String, usize)> = m.params_mut().iter().map(|p| (p.name.clone(), p.data.len())).collect();
        assert_eq!(a, b);
        assert!(a.iter().any(|(n, _)| n == "blocks.1.ffn.hp.2.down"));
        let bin = Transformer::init(&tiny(FfnVariant::Binary, 1), 1).unwrap();
        assert!(bin.params().iter().all(|p| !p.name.contains("alpha") && !p.name.contains("hp.")));
    }

    #[test]
    fn cross_entropy_of_uniform_logits() {
        let logits = FloatMatrix::zeros(3, 5);
        let (loss, grad) = cross_entropy(&logits, &[0, 1, 4]).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-6);
        for t in 0..3 {
            let s: f32 = grad.row(t).iter().sum();
            assert!(s.abs() < 1e-7);
        }
    }

    #[test]
    fn causal_logits_ignore_future_tokens() {
        let m = Transformer::init(&tiny(FfnVariant::Decoupled, 2), 3).unwrap();
        let shape = SeqShape { batch: 1, seq: 6 };
        let a = m.forward(&[1, 2, 3, 4, 5, 6], shape).unwrap();
        let b = m.forward(&[1, 2, 3, 4, 9, 0], shape).unwrap();
        for t in 0..4 {
            assert_eq!(a.row(t), b.row(t));
        }
    }

    /// With identity quantizers every op is smooth, so the full backward
    /// must agree with central differences of the loss.
    #[test]
    fn backward_matches_finite_differences_with_identity_quantizers() {
        let mut m = Transformer::init(&tiny(FfnVariant::Decoupled, 2), 5).unwrap();
        for b in &mut m.blocks {
            let f = &mut b.ffn;
            for lin in [&mut b.attn.q, &mut b.attn.k, &mut b.attn.v, &mut b.attn.o, &mut f.bit_up, &mut f.bit_down] {
                lin.quantizer = WeightQuantizer::Identity;
                lin.quantize_input = false;
            }
            for br in &mut f.hp {
                for lin in [&mut br.up, &mut br.down] {
                    lin.quantizer = WeightQuantizer::Identity;
                    lin.quantize_input = false;
                }
            }
        }
        let tokens = [1u32, 5, 2, 7, 3, 3, 0, 9];
        let targets = [5u32, 2, 7, 3, 3, 0, 9, 4];
        let shape = SeqShape { batch: 2, seq: 4 };
        let loss = |m: &Transformer| -> f64 {
            let logits = m.forward(&tokens, shape).unwrap();
            cross_entropy(&logits, &targets).unwrap().0
        };
        let (logits, cache) = m.forward_train(&tokens, shape).unwrap();
        let (_, dl) = cross_entropy(&logits, &targets).unwrap();
        let g = m.backward(&cache, &dl);
        let grads: Vec<Vec<f32>> = g.params().iter().map(|p| p.data.to_vec()).collect();
        let names: Vec<String> = m.params().iter().map(|p| p.name.clone()).collect();
        let h = 1e-3f32;
        for (pi, name) in names.iter().enumerate() {
            let len = grads[pi].len();
            for idx in [0, len / 2, len - 1] {
                let orig = m.params_mut()[pi].data[idx];
                m.params_mut()[pi].data[idx] = orig + h;
                let up = loss(&m);
                m.params_mut()[pi].data[idx] = orig - h;
                let down = loss(&m);
                m.params_mut()[pi].data[idx] = orig;
                let fd = (up - down) / (2.0 * h as f64);
                let an = grads[pi][idx] as f64;
                assert!((fd - an).abs() < 2e-3 + 2e-2 * an.abs(), "{name}[{idx}]: fd {fd} vs {an}");
            }
        }
    }

    #[test]
    fn greedy_decode_edge_cases() {
        let m = Transformer::init(&tiny(FfnVariant::Decoupled, 1), 2).unwrap();
        assert!(m.generate_greedy(&[1, 2], 0).unwrap().0.is_empty());
        let (a, _) = m.generate_greedy(&[1, 2], 12).unwrap();
        let (b, _) = m.generate_greedy(&[1, 2], 12).unwrap();
        assert_eq!(a.len(), 12);
        assert_eq!(a, b);
        assert!(m.generate_greedy(&[], 3).is_err());
        assert!(m.generate_greedy(&[42], 3).is_err());
    }
}
