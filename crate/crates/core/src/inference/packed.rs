//! Packed inference model (`PQTM` files). See `docs/packed_format.md`.

use std::path::Path;

use crate::binio::{Reader, Writer};
use crate::config::ModelConfig;
use crate::corpus::CharVocab;
use crate::error::{invalid, Error, Result};
use crate::layers::{
    causal_attention, packed_binary_forward, packed_int8_forward, route, silu, FfnVariant, QuantLinear, RmsNorm,
    SeqShape,
};
use crate::model::{check_tokens, embed_tokens, greedy_decode};
use crate::quant::{absmax_quantize, binarize, BinaryMatrix, Int8Tensor};
use crate::tensor::{matmul_nt, FloatMatrix};
use crate::training::Checkpoint;

pub const PACKED_MAGIC: &[u8; 4] = b"PQTM";
pub const PACKED_VERSION: u32 = 1;

/// Folds static per-path factors into per-row constants: `c_i = s_i · path`.
///
/// `weight_scales` holds `lambda` (one entry, 1-bit) or `1/gamma_w_i` (INT8
/// rows); `path` is `alpha`, `beta` or 1. The runtime division by the
/// per-token activation scale stays outside. The product is formed in the
/// same order as the training forward, so the packed model reproduces it
/// exactly.
pub fn fuse_scales(weight_scales: &[f32], path: f32) -> Vec<f32> {
    weight_scales.iter().map(|&s| s * path).collect()
}

/// 1-bit tensor plus its fused output constant.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedBinary {
    pub weight: BinaryMatrix,
    pub scale: f32,
}

impl PackedBinary {
    fn from_linear(lin: &QuantLinear, path: f32) -> Result<Self> {
        let weight = binarize(&lin.weight)?;
        let scale = fuse_scales(&[weight.lambda()], path)[0];
        Ok(Self { weight, scale })
    }

    pub fn forward(&self, x: &FloatMatrix) -> Result<FloatMatrix> {
        packed_binary_forward(&self.weight, self.scale, x)
    }
}

/// INT8 tensor (per-row `gamma_w`) plus fused per-row constants.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedInt8 {
    pub weight: Int8Tensor,
    pub scales: Vec<f32>,
}

impl PackedInt8 {
    fn from_linear(lin: &QuantLinear, path: f32) -> Self {
        let weight = absmax_quantize(&lin.weight);
        let inv: Vec<f32> = weight.gamma().iter().map(|&g| 1.0 / g).collect();
        Self { scales: fuse_scales(&inv, path), weight }
    }

    pub fn forward(&self, x: &FloatMatrix) -> Result<FloatMatrix> {
        packed_int8_forward(&self.weight, &self.scales, x)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PackedFfn {
    pub variant: FfnVariant,
    pub alpha: f32,
    pub beta: f32,
    pub bit_up: PackedBinary,
    /// Carries `lambda · beta`.
    pub bit_down: PackedBinary,
    /// `(up, down)`; `down` carries `alpha / gamma_w_i`.
    pub hp: Vec<(PackedInt8, PackedInt8)>,
    pub router: FloatMatrix,
}

impl PackedFfn {
    pub fn forward(&self, xn: &FloatMatrix) -> Result<FloatMatrix> {
        let act = |m: FloatMatrix| {
            let mut m = m;
            m.as_mut_slice().iter_mut().for_each(|v| *v = silu(*v));
            m
        };
        let mut y = self.bit_down.forward(&act(self.bit_up.forward(xn)?))?;
        if self.variant == FfnVariant::Decoupled {
            let routing = route(&self.router, xn);
            for (k, tokens) in routing.groups().into_iter().enumerate() {
                if tokens.is_empty() {
                    continue;
                }
                let (up, down) = &self.hp[k];
                let h = down.forward(&act(up.forward(&xn.gather_rows(&tokens))?))?;
                for (row, &t) in tokens.iter().enumerate() {
                    let g = routing.gate[t];
                    for (o, &v) in y.row_mut(t).iter_mut().zip(h.row(row)) {
                        *o += v * g;
                    }
                }
            }
        }
        Ok(y)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PackedBlock {
    pub norm1: RmsNorm,
    /// q, k, v, o.
    pub attn: [PackedBinary; 4],
    pub norm2: RmsNorm,
    pub ffn: PackedFfn,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PackedModel {
    pub cfg: ModelConfig,
    pub vocab: CharVocab,
    pub tok_emb: FloatMatrix,
    pub pos_emb: FloatMatrix,
    pub blocks: Vec<PackedBlock>,
    pub norm_f: RmsNorm,
    pub head: FloatMatrix,
}

/// Converts a checkpoint into its packed form; the latent weights are not carried over.
pub fn export_packed(ckpt: &Checkpoint) -> Result<PackedModel> {
    let m = &ckpt.model;
    if let Some(p) = m.params().iter().find(|p| p.data.iter().any(|v| !v.is_finite())) {
        return Err(invalid(format!("parameter {} is not finite", p.name)));
    }
    let mut blocks = Vec::with_capacity(m.blocks.len());
    for b in &m.blocks {
        let a = &b.attn;
        let attn = [
            PackedBinary::from_linear(&a.q, 1.0)?,
            PackedBinary::from_linear(&a.k, 1.0)?,
            PackedBinary::from_linear(&a.v, 1.0)?,
            PackedBinary::from_linear(&a.o, 1.0)?,
        ];
        let f = &b.ffn;
        let ffn = PackedFfn {
            variant: f.variant,
            alpha: f.alpha,
            beta: f.beta,
            bit_up: PackedBinary::from_linear(&f.bit_up, 1.0)?,
            bit_down: PackedBinary::from_linear(&f.bit_down, f.bit_scale())?,
            hp: f.hp.iter().map(|br| (PackedInt8::from_linear(&br.up, 1.0), PackedInt8::from_linear(&br.down, f.alpha))).collect(),
            router: f.router.clone(),
        };
        blocks.push(PackedBlock { norm1: b.norm1.clone(), attn, norm2: b.norm2.clone(), ffn });
    }
    Ok(PackedModel {
        cfg: m.cfg.clone(),
        vocab: ckpt.vocab.clone(),
        tok_emb: m.tok_emb.clone(),
        pos_emb: m.pos_emb.clone(),
        blocks,
        norm_f: m.norm_f.clone(),
        head: m.head.clone(),
    })
}

impl PackedModel {
    /// Logits through LUT GEMV (1-bit) and INT8 GEMV (branches).
    pub fn forward(&self, tokens: &[u32], shape: SeqShape) -> Result<FloatMatrix> {
        check_tokens(tokens, shape, self.cfg.max_seq_len, self.tok_emb.rows())?;
        let mut x = embed_tokens(&self.tok_emb, &self.pos_emb, tokens, shape);
        for b in &self.blocks {
            let xn = b.norm1.forward(&x)?;
            let [q, k, v, o] = &b.attn;
            let (ctx, _) = causal_attention(&q.forward(&xn)?, &k.forward(&xn)?, &v.forward(&xn)?, shape, self.cfg.n_heads);
            x.add_assign(&o.forward(&ctx)?);
            let xn = b.norm2.forward(&x)?;
            x.add_assign(&b.ffn.forward(&xn)?);
        }
        let xf = self.norm_f.forward(&x)?;
        Ok(matmul_nt(&xf, &self.head))
    }

    /// Greedy continuation; also returns the logits behind each choice.
    pub fn generate_with_logits(&self, prompt: &[u32], n_tokens: usize) -> Result<(Vec<u32>, Vec<Vec<f32>>)> {
        greedy_decode(prompt, n_tokens, self.cfg.max_seq_len, |ctx| {
            self.forward(ctx, SeqShape { batch: 1, seq: ctx.len() })
        })
    }

    pub fn generate(&self, prompt: &[u32], n_tokens: usize) -> Result<Vec<u32>> {
        self.generate_with_logits(prompt, n_tokens).map(|(t, _)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(PACKED_MAGIC);
        w.u32(PACKED_VERSION);
        w.str(&toml::to_string(&self.cfg).expect("config is always serializable"));
        w.blob(self.vocab.symbols());
        section(&mut w, b"EMBD", |s| {
            matrix(s, &self.tok_emb);
            matrix(s, &self.pos_emb);
        });
        w.u64(self.blocks.len() as u64);
        for b in &self.blocks {
            section(&mut w, b"LAYR", |s| {
                s.f32s(&b.norm1.gain);
                b.attn.iter().for_each(|p| binary(s, p));
                s.f32s(&b.norm2.gain);
                let f = &b.ffn;
                s.u32(match f.variant {
                    FfnVariant::Decoupled => 0,
                    FfnVariant::Binary => 1,
                });
                s.f32(f.alpha);
                s.f32(f.beta);
                binary(s, &f.bit_up);
                binary(s, &f.bit_down);
                matrix(s, &f.router);
                s.u64(f.hp.len() as u64);
                for (up, down) in &f.hp {
                    int8(s, up);
                    int8(s, down);
                }
            });
        }
        section(&mut w, b"HEAD", |s| {
            s.f32s(&self.norm_f.gain);
            matrix(s, &self.head);
        });
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(PACKED_MAGIC)?;
        let version = r.u32()?;
        if version != PACKED_VERSION {
            return Err(Error::Format(format!("packed model version {version}, this build reads {PACKED_VERSION}")));
        }
        let cfg: ModelConfig = toml::from_str(&r.str()?).map_err(|e| Error::Format(e.to_string()))?;
        cfg.validate()?;
        let vocab = CharVocab::from_symbols(r.blob()?.to_vec())?;
        let eps = cfg.norm_eps;
        let (tok_emb, pos_emb) = read_section(&mut r, b"EMBD", |s| Ok((read_matrix(s)?, read_matrix(s)?)))?;
        let n_blocks = r.len()?;
        let mut blocks = Vec::with_capacity(n_blocks);
        for _ in 0..n_blocks {
            blocks.push(read_section(&mut r, b"LAYR", |s| {
                let norm1 = RmsNorm { gain: s.f32s()?, eps };
                let attn = [read_binary(s)?, read_binary(s)?, read_binary(s)?, read_binary(s)?];
                let norm2 = RmsNorm { gain: s.f32s()?, eps };
                let variant = match s.u32()? {
                    0 => FfnVariant::Decoupled,
                    1 => FfnVariant::Binary,
                    v => return Err(Error::Format(format!("unknown ffn variant {v}"))),
                };
                let (alpha, beta) = (s.f32()?, s.f32()?);
                let bit_up = read_binary(s)?;
                let bit_down = read_binary(s)?;
                let router = read_matrix(s)?;
                let n = s.len()?;
                let hp = (0..n).map(|_| Ok((read_int8(s)?, read_int8(s)?))).collect::<Result<Vec<_>>>()?;
                Ok(PackedBlock { norm1, attn, norm2, ffn: PackedFfn { variant, alpha, beta, bit_up, bit_down, hp, router } })
            })?);
        }
        let (gain, head) = read_section(&mut r, b"HEAD", |s| Ok((s.f32s()?, read_matrix(s)?)))?;
        r.finish()?;
        let pm = Self { cfg, vocab, tok_emb, pos_emb, blocks, norm_f: RmsNorm { gain, eps }, head };
        pm.check_shapes()?;
        Ok(pm)
    }

    fn check_shapes(&self) -> Result<()> {
        let c = &self.cfg;
        let d = c.d_model;
        let bad = |what: &str| Err(Error::Format(format!("{what} does not match the stored config")));
        if self.tok_emb.cols() != d || self.tok_emb.rows() != self.vocab.len() || self.pos_emb.shape() != (c.max_seq_len, d) {
            return bad("embedding shape");
        }
        if self.head.shape() != (self.vocab.len(), d) || self.norm_f.gain.len() != d || self.blocks.len() != c.n_layers {
            return bad("head or layer count");
        }
        for b in &self.blocks {
            let f = &b.ffn;
            let hidden = c.bit_hidden();
            let attn_ok = b.attn.iter().all(|p| p.weight.rows() == d && p.weight.cols() == d);
            let ffn_ok = f.variant == c.ffn_variant
                && f.bit_up.weight.rows() == hidden
                && f.bit_up.weight.cols() == d
                && f.bit_down.weight.rows() == d
                && f.bit_down.weight.cols() == hidden
                && f.hp.len() == c.branches()
                && f.router.rows() == c.branches()
                && f.hp.iter().all(|(u, dn)| {
                    u.weight.rows() == c.r && u.weight.cols() == d && dn.weight.rows() == d && dn.weight.cols() == c.r
                });
            if !attn_ok || !ffn_ok || b.norm1.gain.len() != d || b.norm2.gain.len() != d {
                return bad("layer shape");
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn section(w: &mut Writer, tag: &[u8; 4], body: impl FnOnce(&mut Writer)) {
    let mut s = Writer::default();
    body(&mut s);
    w.bytes(tag);
    w.blob(&s.buf);
}

fn read_section<T>(r: &mut Reader<'_>, tag: &[u8; 4], body: impl FnOnce(&mut Reader<'_>) -> Result<T>) -> Result<T> {
    r.magic(tag)?;
    let mut s = Reader::new(r.blob()?);
    let v = body(&mut s)?;
    s.finish()?;
    Ok(v)
}

fn matrix(w: &mut Writer, m: &FloatMatrix) {
    w.u64(m.rows() as u64);
    w.u64(m.cols() as u64);
    w.f32s(m.as_slice());
}

fn read_matrix(r: &mut Reader<'_>) -> Result<FloatMatrix> {
    let (rows, cols) = (r.len()?, r.len()?);
    let data = r.f32s()?;
    if data.len() != rows * cols {
        return Err(Error::Format(format!("{rows}x{cols} matrix with {} values", data.len())));
    }
    if rows == 0 {
        return Ok(FloatMatrix::zeros(0, cols));
    }
    FloatMatrix::new(rows, cols, data).map_err(|e| Error::Format(e.to_string()))
}

fn binary(w: &mut Writer, p: &PackedBinary) {
    w.u64(p.weight.rows() as u64);
    w.u64(p.weight.cols() as u64);
    w.f32(p.weight.mu());
    w.f32(p.weight.lambda());
    w.f32(p.scale);
    w.blob(p.weight.bits());
}

fn read_binary(r: &mut Reader<'_>) -> Result<PackedBinary> {
    let (rows, cols) = (r.len()?, r.len()?);
    let (mu, lambda, scale) = (r.f32()?, r.f32()?, r.f32()?);
    let bits = r.blob()?.to_vec();
    let weight = BinaryMatrix::from_parts(rows, cols, bits, mu, lambda).map_err(|e| Error::Format(e.to_string()))?;
    Ok(PackedBinary { weight, scale })
}

fn int8(w: &mut Writer, p: &PackedInt8) {
    w.u64(p.weight.rows() as u64);
    w.u64(p.weight.cols() as u64);
    let raw: Vec<u8> = p.weight.values().iter().map(|&v| v as u8).collect();
    w.blob(&raw);
    w.f32s(p.weight.gamma());
    w.f32s(&p.scales);
}

fn read_int8(r: &mut Reader<'_>) -> Result<PackedInt8> {
    let (rows, cols) = (r.len()?, r.len()?);
    let values: Vec<i8> = r.blob()?.iter().map(|&b| b as i8).collect();
    let gamma = r.f32s()?;
    let scales = r.f32s()?;
    let weight = Int8Tensor::from_parts(rows, cols, values, gamma).map_err(|e| Error::Format(e.to_string()))?;
    if scales.len() != rows {
        return Err(Error::Format("fused scale count differs from row count".into()));
    }
    Ok(PackedInt8 { weight, scales })
}
