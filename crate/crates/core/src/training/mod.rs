//! Quantization-aware training from scratch on a character corpus.

pub mod checkpoint;
pub mod optim;
pub mod schedule;

use std::fmt::Write as _;

use crate::config::{ModelConfig, TrainConfig};
use crate::corpus::{eval_windows, split, unigram_entropy, Batch, BatchSampler, CharVocab};
use crate::error::{invalid, Error, Result};
use crate::layers::SeqShape;
use crate::model::{cross_entropy, eval_loss, Transformer};

pub use checkpoint::Checkpoint;
pub use optim::{clip_grad_norm, grad_norm, AdamW};
pub use schedule::two_phase_schedule;

#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub wd: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
    /// Fraction of tokens per branch, averaged over layers.
    pub branch_util: Vec<f64>,
}

/// Forward, backward, clip and one AdamW update at the given `(lr, wd)`.
pub fn train_step(
    model: &mut Transformer,
    batch: &Batch,
    opt: &mut AdamW,
    step: usize,
    lr: f64,
    wd: f64,
    clip: f64,
) -> Result<StepMetrics> {
    let shape = SeqShape { batch: batch.batch, seq: batch.seq };
    let (logits, cache) = model.forward_train(&batch.inputs, shape)?;
    let (loss, dlogits) = cross_entropy(&logits, &batch.targets)?;
    if !loss.is_finite() {
        return Err(Error::Divergence { step, loss: loss as f32 });
    }
    let mut grads = model.backward(&cache, &dlogits);
    let (norm, clipped) = clip_grad_norm(&mut grads, clip);
    if !norm.is_finite() {
        return Err(Error::Divergence { step, loss: loss as f32 });
    }
    opt.update(model, &grads, lr, wd)?;
    Ok(StepMetrics {
        step,
        loss,
        lr,
        wd,
        grad_norm: norm,
        clipped,
        branch_util: cache.branch_utilization(model.cfg.branches()),
    })
}

/// Everything a finished run produces.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub model: Transformer,
    pub vocab: CharVocab,
    pub train_cfg: TrainConfig,
    pub metrics: Vec<StepMetrics>,
    /// Held-out mean cross-entropy (nats) after the last step.
    pub eval_loss: f64,
    /// Unigram entropy (nats) of the whole corpus.
    pub unigram_entropy: f64,
    pub clipped_steps: usize,
}

impl TrainRun {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            train: self.train_cfg.clone(),
            vocab: self.vocab.clone(),
            step: self.metrics.last().map_or(0, |m| m.step as u64),
        }
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.metrics.last().map(|m| m.loss)
    }

    /// `step,loss,lr,wd,branch_util_0..N-1,grad_norm`.
    pub fn metrics_csv(&self) -> String {
        metrics_csv(&self.metrics, self.model.cfg.branches())
    }

    pub fn alpha_beta_csv(&self) -> String {
        alpha_beta_csv(&self.model)
    }
}

pub fn metrics_csv(metrics: &[StepMetrics], n_branches: usize) -> String {
    let mut s = String::from("step,loss,lr,wd");
    for k in 0..n_branches {
        write!(s, ",branch_util_{k}").unwrap();
    }
    s.push_str(",grad_norm\n");
    for m in metrics {
        write!(s, "{},{},{},{}", m.step, m.loss, m.lr, m.wd).unwrap();
        for u in &m.branch_util {
            write!(s, ",{u}").unwrap();
        }
        writeln!(s, ",{}", m.grad_norm).unwrap();
    }
    s
}

/// Per-layer feature-scaling table: `layer,alpha,beta`.
pub fn alpha_beta_csv(model: &Transformer) -> String {
    let mut s = String::from("layer,alpha,beta\n");
    for (l, b) in model.blocks.iter().enumerate() {
        writeln!(s, "{l},{},{}", b.ffn.alpha, b.ffn.bit_scale()).unwrap();
    }
    s
}

/// Builds the vocabulary, fills in `vocab_size` when it is 0, and encodes.
pub fn prepare_corpus(model_cfg: &ModelConfig, corpus: &[u8]) -> Result<(ModelConfig, CharVocab, Vec<u32>)> {
    let vocab = CharVocab::from_text(corpus)?;
    let mut cfg = model_cfg.clone();
    if cfg.vocab_size == 0 {
        cfg.vocab_size = vocab.len();
    } else if cfg.vocab_size != vocab.len() {
        return Err(Error::Config(format!("vocab_size {} but the corpus has {} distinct bytes", cfg.vocab_size, vocab.len())));
    }
    let tokens = vocab.encode(corpus)?;
    Ok((cfg, vocab, tokens))
}

/// Runs `total_steps` updates, calling `observe` with every logged step.
pub fn train_loop_with(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    corpus: &[u8],
    observe: &mut dyn FnMut(&StepMetrics),
) -> Result<TrainRun> {
    train_cfg.validate()?;
    if train_cfg.seq_len > model_cfg.max_seq_len {
        return Err(Error::Config(format!("seq_len {} exceeds max_seq_len {}", train_cfg.seq_len, model_cfg.max_seq_len)));
    }
    let (cfg, vocab, tokens) = prepare_corpus(model_cfg, corpus)?;
    let entropy = unigram_entropy(&tokens);
    let (train_tokens, eval_tokens) = split(&tokens, train_cfg.eval_fraction);
    let windows = eval_windows(eval_tokens, train_cfg.seq_len, train_cfg.eval_windows);
    if windows.is_empty() || train_tokens.len() <= train_cfg.seq_len {
        return Err(invalid("corpus too small for the configured seq_len and eval split"));
    }
    let mut model = Transformer::init(&cfg, train_cfg.seed)?;
    let mut opt = AdamW::new(&model, train_cfg);
    let mut sampler = BatchSampler::new(train_cfg.seed ^ 0x5eed_ba7c);
    let batch_size = train_cfg.batch_size();
    let mut metrics = Vec::new();
    let mut clipped_steps = 0;
    for step in 1..=train_cfg.total_steps {
        let batch = sampler.sample(train_tokens, batch_size, train_cfg.seq_len)?;
        let (lr, wd) = two_phase_schedule(step, train_cfg)?;
        let m = train_step(&mut model, &batch, &mut opt, step, lr, wd, train_cfg.grad_clip)?;
        clipped_steps += m.clipped as usize;
        if step % train_cfg.log_every == 0 || step == train_cfg.total_steps {
            observe(&m);
            metrics.push(m);
        }
    }
    let eval = eval_loss(&model, &windows)?;
    Ok(TrainRun {
        model,
        vocab,
        train_cfg: train_cfg.clone(),
        metrics,
        eval_loss: eval,
        unigram_entropy: entropy,
        clipped_steps,
    })
}

pub fn train_loop(model_cfg: &ModelConfig, train_cfg: &TrainConfig, corpus: &[u8]) -> Result<TrainRun> {
    train_loop_with(model_cfg, train_cfg, corpus, &mut |_| {})
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::synthetic_corpus;
    use crate::layers::FfnVariant;

    fn cfgs(steps: usize) -> (ModelConfig, TrainConfig) {
        let m = ModelConfig { d_model: 16, n_heads: 2, d_ffn_nominal: 48, r: 16, r_alignment: 16, n_branches: 2, max_seq_len: 16, n_layers: 1, ..ModelConfig::default() };
        let t = TrainConfig { total_steps: steps, warmup_steps: 2, batch_tokens: 64, seq_len: 16, eval_windows: 4, ..TrainConfig::default() };
        (m, t)
    }

    #[test]
    fn identical_seeds_give_identical_runs() {
        let corpus = synthetic_corpus(4000, 1);
        let (m, t) = cfgs(6);
        let a = train_loop(&m, &t, corpus.as_bytes()).unwrap();
        let b = train_loop(&m, &t, corpus.as_bytes()).unwrap();
        assert_eq!(a.metrics_csv(), b.metrics_csv());
        assert_eq!(a.checkpoint().to_bytes(), b.checkpoint().to_bytes());
        assert_eq!(a.metrics.len(), 6);
        assert_eq!(a.metrics[0].branch_util.len(), 2);
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let corpus = synthetic_corpus(4000, 1);
        let (m, t) = cfgs(0);
        let run = train_loop(&m, &t, corpus.as_bytes()).unwrap();
        let (cfg, _, _) = prepare_corpus(&m, corpus.as_bytes()).unwrap();
        let init = Transformer::init(&cfg, t.seed).unwrap();
        assert!(run.model.params().iter().zip(init.params()).all(|(a, b)| a.data == b.data));
        assert_eq!(run.metrics_csv(), "step,loss,lr,wd,branch_util_0,branch_util_1,grad_norm\n");
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let corpus = synthetic_corpus(4000, 2);
        let (mut m, t) = cfgs(0);
        m.vocab_size = 0;
        let (cfg, _, tokens) = prepare_corpus(&m, corpus.as_bytes()).unwrap();
        let mut model = Transformer::init(&cfg, 0).unwrap();
        let before = model.clone();
        let mut opt = AdamW::new(&model, &t);
        let batch = BatchSampler::new(0).sample(&tokens, 4, 16).unwrap();
        let l1 = train_step(&mut model, &batch, &mut opt, 1, 0.0, 0.0, 1.0).unwrap().loss;
        let l2 = train_step(&mut model, &batch, &mut opt, 2, 0.0, 0.0, 1.0).unwrap().loss;
        assert_eq!(l1, l2);
        assert!(model.params().iter().zip(before.params()).all(|(a, b)| a.data == b.data));
    }

    #[test]
    fn binary_variant_logs_no_branches() {
        let corpus = synthetic_corpus(4000, 3);
        let (mut m, t) = cfgs(6);
        m.ffn_variant = FfnVariant::Binary;
        let run = train_loop(&m, &t, corpus.as_bytes()).unwrap();
        assert!(run.metrics_csv().starts_with("step,loss,lr,wd,grad_norm\n"));
        assert!(run.alpha_beta_csv().contains("0,0,1"));
    }

    #[test]
    fn mismatched_vocab_is_a_config_error() {
        let (mut m, t) = cfgs(1);
        m.vocab_size = 3;
        assert!(matches!(train_loop(&m, &t, synthetic_corpus(4000, 1).as_bytes()), Err(Error::Config(_))));
    }
}
