use crate::config::TrainConfig;
use crate::error::{mismatch, Result};
use crate::model::Transformer;

/// AdamW over the latent parameters with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(model: &Transformer, cfg: &TrainConfig) -> Self {
        let zeros: Vec<Vec<f32>> = model.params().iter().map(|p| vec![0.0; p.data.len()]).collect();
        Self { beta1: cfg.adam_beta1, beta2: cfg.adam_beta2, eps: cfg.adam_eps, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments_finite(&self) -> bool {
        self.m.iter().chain(&self.v).all(|b| b.iter().all(|x| x.is_finite()))
    }

    /// One update. Weight decay touches only parameters flagged for it.
    pub fn update(&mut self, model: &mut Transformer, grads: &Transformer, lr: f64, wd: f64) -> Result<()> {
        let g = grads.params();
        let mut p = model.params_mut();
        if g.len() != p.len() || p.len() != self.m.len() {
            return Err(mismatch("gradient and optimizer state do not match the model"));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        for (i, param) in p.iter_mut().enumerate() {
            let decay = if param.decay { wd } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &gr), mi), vi) in param.data.iter_mut().zip(g[i].data).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * gr;
                *vi = b2 * *vi + (1.0 - b2) * gr * gr;
                let mhat = *mi as f64 / bc1;
                let vhat = *vi as f64 / bc2;
                let upd = mhat / (vhat.sqrt() + self.eps) + decay * *w as f64;
                *w -= (lr * upd) as f32;
            }
        }
        Ok(())
    }
}

/// Global L2 norm of all gradients.
pub fn grad_norm(grads: &Transformer) -> f64 {
    grads.params().iter().flat_map(|p| p.data.iter()).map(|&g| (g as f64) * (g as f64)).sum::<f64>().sqrt()
}

/// Rescales gradients to `max_norm` when above it. Returns the pre-clip
/// norm and whether clipping was applied; `max_norm = 0` disables.
pub fn clip_grad_norm(grads: &mut Transformer, max_norm: f64) -> (f64, bool) {
    let norm = grad_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s = (max_norm / norm) as f32;
        grads.params_mut().into_iter().for_each(|p| p.data.iter_mut().for_each(|g| *g *= s));
        (norm, true)
    } else {
        (norm, false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;

    fn model() -> Transformer {
        let cfg = ModelConfig { vocab_size: 5, d_model: 8, n_heads: 2, d_ffn_nominal: 24, r: 8, r_alignment: 8, max_seq_len: 4, n_layers: 1, ..ModelConfig::default() };
        Transformer::init(&cfg, 0).unwrap()
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut m = model();
        let before = m.clone();
        let mut g = m.zeros_like();
        g.head.as_mut_slice()[0] = 0.3;
        g.head.as_mut_slice()[1] = -2.0;
        let mut opt = AdamW::new(&m, &TrainConfig::default());
        opt.update(&mut m, &g, 0.01, 0.0).unwrap();
        let d0 = m.head.as_slice()[0] - before.head.as_slice()[0];
        let d1 = m.head.as_slice()[1] - before.head.as_slice()[1];
        assert!((d0 + 0.01).abs() < 1e-6 && (d1 - 0.01).abs() < 1e-6);
        assert_eq!(m.head.as_slice()[2], before.head.as_slice()[2]);
        assert_eq!(m.tok_emb, before.tok_emb);
    }

    #[test]
    fn weight_decay_only_on_flagged_params() {
        let mut m = model();
        let before = m.clone();
        let g = m.zeros_like();
        let mut opt = AdamW::new(&m, &TrainConfig::default());
        opt.update(&mut m, &g, 0.1, 0.5).unwrap();
        let w0 = before.blocks[0].attn.q.weight.as_slice()[0];
        assert!((m.blocks[0].attn.q.weight.as_slice()[0] - w0 * 0.95).abs() < 1e-7);
        assert_eq!(m.blocks[0].norm1.gain, before.blocks[0].norm1.gain);
        assert_eq!(m.blocks[0].ffn.alpha, before.blocks[0].ffn.alpha);
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        let mut m = model();
        let before = m.clone();
        let mut g = m.zeros_like();
        g.params_mut().into_iter().for_each(|p| p.data.fill(1.0));
        AdamW::new(&m, &TrainConfig::default()).update(&mut m, &g, 0.0, 0.1).unwrap();
        assert!(m.params().iter().zip(before.params()).all(|(a, b)| a.data == b.data));
    }

    #[test]
    fn clipping_caps_global_norm() {
        let m = model();
        let mut g = m.zeros_like();
        g.head.as_mut_slice()[0] = 3.0;
        g.tok_emb.as_mut_slice()[0] = 4.0;
        let (n, clipped) = clip_grad_norm(&mut g, 1.0);
        assert!((n - 5.0).abs() < 1e-9 && clipped);
        assert!((grad_norm(&g) - 1.0).abs() < 1e-6);
        assert!(!clip_grad_norm(&mut g, 0.0).1);
    }
}
