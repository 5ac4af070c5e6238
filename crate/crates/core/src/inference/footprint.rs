//! Analytic storage accounting for deployed models.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::Result;
use crate::layers::FfnVariant;

/// Storage widths for each parameter class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrecisionPlan {
    pub name: String,
    /// Attention projections and the 1-bit FFN path.
    pub backbone_bits: u32,
    /// High-precision branch weights.
    pub branch_bits: u32,
    pub embedding_bits: u32,
    /// Norm gains, router weights and quantization scales.
    pub aux_bits: u32,
    /// 2 for up/down, 3 for a gated FFN.
    pub ffn_matrices: usize,
    pub tied_embeddings: bool,
    pub learned_positions: bool,
}

impl Default for PrecisionPlan {
    fn default() -> Self {
        Self::pquant()
    }
}

impl PrecisionPlan {
    /// Every weight in half precision.
    pub fn fp16() -> Self {
        Self {
            name: "fp16".into(),
            backbone_bits: 16,
            branch_bits: 16,
            embedding_bits: 16,
            aux_bits: 16,
            ffn_matrices: 3,
            tied_embeddings: false,
            learned_positions: false,
        }
    }

    /// 1-bit backbone, INT8 branches, full-precision embeddings.
    pub fn pquant() -> Self {
        Self {
            name: "pquant".into(),
            backbone_bits: 1,
            branch_bits: 8,
            embedding_bits: 32,
            aux_bits: 16,
            ffn_matrices: 3,
            tied_embeddings: false,
            learned_positions: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |b: u32| matches!(b, 1 | 2 | 4 | 8 | 16 | 32);
        if ![self.backbone_bits, self.branch_bits, self.embedding_bits, self.aux_bits].into_iter().all(ok) {
            return Err(crate::Error::Config("plan bit widths must be one of 1, 2, 4, 8, 16, 32".into()));
        }
        if !(2..=3).contains(&self.ffn_matrices) {
            return Err(crate::Error::Config("ffn_matrices must be 2 or 3".into()));
        }
        Ok(())
    }
}

/// Bytes per component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct Components {
    pub backbone_weights: u64,
    pub branch_weights: u64,
    pub embeddings: u64,
    pub norms: u64,
    pub router: u64,
    pub scales: u64,
}

impl Components {
    pub fn total(&self) -> u64 {
        self.backbone_weights + self.branch_weights + self.embeddings + self.norms + self.router + self.scales
    }

    fn entries(&self) -> [(&'static str, u64); 6] {
        [
            ("backbone_weights", self.backbone_weights),
            ("branch_weights", self.branch_weights),
            ("embeddings", self.embeddings),
            ("norms", self.norms),
            ("router", self.router),
            ("scales", self.scales),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FootprintReport {
    pub plan: String,
    /// Everything resident in memory.
    pub resident: Components,
    pub total_bytes: u64,
    /// Weights streamed per decoded token: the backbone, one branch per
    /// layer and everything else except the router.
    pub decode: Components,
    pub decode_bytes: u64,
    pub backbone_params: u64,
    pub branch_params: u64,
    pub embedding_params: u64,
    pub total_params: u64,
    /// Parameters touched per token.
    pub activated_params: u64,
    /// Count-weighted mean storage width of the linear-layer weights.
    pub effective_bits: f64,
}

impl FootprintReport {
    /// `component,resident_bytes,decode_bytes`, then totals.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("component,resident_bytes,decode_bytes\n");
        for ((name, r), (_, d)) in self.resident.entries().into_iter().zip(self.decode.entries()) {
            writeln!(s, "{name},{r},{d}").unwrap();
        }
        writeln!(s, "total,{},{}", self.total_bytes, self.decode_bytes).unwrap();
        s
    }

    pub fn summary(&self) -> String {
        format!(
            "plan {}: {} params ({} activated), resident {:.3} GB, per-token transfer {:.3} GB, effective bits {:.4}",
            self.plan,
            self.total_params,
            self.activated_params,
            self.total_bytes as f64 / 1e9,
            self.decode_bytes as f64 / 1e9,
            self.effective_bits
        )
    }
}

/// Parameter-count-weighted mean of storage widths. The numerator and
/// denominator are summed as integers so a mix like 96%/4% gives
/// exactly `128/100`.
pub fn effective_bits(groups: &[(u64, u32)]) -> f64 {
    let count: u128 = groups.iter().map(|&(c, _)| c as u128).sum();
    if count == 0 {
        return 0.0;
    }
    let bits: u128 = groups.iter().map(|&(c, b)| c as u128 * b as u128).sum();
    bits as f64 / count as f64
}

fn bytes(count: u64, bits: u32) -> u64 {
    (count * bits as u64).div_ceil(8)
}

/// Scale values needed by one quantized tensor with `rows` outputs.
fn scale_count(bits: u32, rows: u64) -> u64 {
    match bits {
        1 => 1,
        b if b < 16 => rows,
        _ => 0,
    }
}

struct Tensor {
    rows: u64,
    cols: u64,
}

impl Tensor {
    fn params(&self) -> u64 {
        self.rows * self.cols
    }
}

/// Storage accounting for `cfg` under `plan`. Each tensor is rounded up
/// to whole bytes.
pub fn memory_footprint(cfg: &ModelConfig, plan: &PrecisionPlan) -> FootprintReport {
    let d = cfg.d_model as u64;
    let l = cfg.n_layers as u64;
    let hidden = cfg.bit_hidden() as u64;
    let r = cfg.r as u64;
    let n = cfg.branches() as u64;
    let m = plan.ffn_matrices as u64;
    let aux = plan.aux_bits;

    // One layer's worth of tensors, counted per layer then multiplied.
    let mut backbone = vec![Tensor { rows: d, cols: d }, Tensor { rows: d, cols: d }, Tensor { rows: d, cols: d }, Tensor { rows: d, cols: d }];
    for i in 0..m {
        let down = i + 1 == m;
        backbone.push(if down { Tensor { rows: d, cols: hidden } } else { Tensor { rows: hidden, cols: d } });
    }
    let branch: Vec<Tensor> = if n == 0 {
        Vec::new()
    } else {
        (0..m).map(|i| if i + 1 == m { Tensor { rows: d, cols: r } } else { Tensor { rows: r, cols: d } }).collect()
    };

    let backbone_params: u64 = backbone.iter().map(Tensor::params).sum();
    let branch_params: u64 = branch.iter().map(Tensor::params).sum();
    let backbone_bytes: u64 = backbone.iter().map(|t| bytes(t.params(), plan.backbone_bits)).sum();
    let branch_bytes: u64 = branch.iter().map(|t| bytes(t.params(), plan.branch_bits)).sum();
    let backbone_scales: u64 = backbone.iter().map(|t| scale_count(plan.backbone_bits, t.rows)).sum();
    let branch_scales: u64 = branch.iter().map(|t| scale_count(plan.branch_bits, t.rows)).sum();
    let router_params = if n > 1 { n * d } else { 0 };

    let vocab = cfg.vocab_size as u64;
    let mut embedding_params = vocab * d;
    if !plan.tied_embeddings {
        embedding_params += vocab * d;
    }
    if plan.learned_positions {
        embedding_params += cfg.max_seq_len as u64 * d;
    }
    let norm_params = (2 * l + 1) * d;
    let embeddings = bytes(embedding_params, plan.embedding_bits);
    let norms = bytes(norm_params, aux);

    let resident = Components {
        backbone_weights: l * backbone_bytes,
        branch_weights: l * n * branch_bytes,
        embeddings,
        norms,
        router: l * bytes(router_params, aux),
        scales: l * bytes(backbone_scales + n * branch_scales, aux),
    };
    let active = n.min(1);
    let decode = Components {
        backbone_weights: l * backbone_bytes,
        branch_weights: l * active * branch_bytes,
        embeddings,
        norms,
        router: 0,
        scales: l * bytes(backbone_scales + active * branch_scales, aux),
    };

    let total_backbone = l * backbone_params;
    let total_branch = l * n * branch_params;
    let effective = if plan.backbone_bits == plan.branch_bits || total_branch == 0 {
        plan.backbone_bits as f64
    } else {
        effective_bits(&[(total_backbone, plan.backbone_bits), (total_branch, plan.branch_bits)])
    };
    let small = norm_params + l * router_params;
    FootprintReport {
        plan: plan.name.clone(),
        total_bytes: resident.total(),
        resident,
        decode_bytes: decode.total(),
        decode,
        backbone_params: total_backbone,
        branch_params: total_branch,
        embedding_params,
        total_params: total_backbone + total_branch + embedding_params + small,
        activated_params: total_backbone + l * active * branch_params + embedding_params + small,
        effective_bits: effective,
    }
}

/// The matched-parameter pQuant configuration with eight branches.
pub fn desk_1b_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 32000,
        max_seq_len: 2048,
        d_model: 1536,
        n_layers: 24,
        n_heads: 24,
        d_ffn_nominal: 5460,
        r: 512,
        n_branches: 8,
        r_alignment: 128,
        ffn_variant: FfnVariant::Decoupled,
        ..ModelConfig::default()
    }
}

/// The 1.3B half-precision reference configuration.
pub fn fp16_1b_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 32000,
        max_seq_len: 2048,
        d_model: 2048,
        n_layers: 24,
        n_heads: 32,
        d_ffn_nominal: 5460,
        r: 0,
        n_branches: 1,
        ffn_variant: FfnVariant::Binary,
        ..ModelConfig::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mixes_give_exact_effective_bits() {
        assert_eq!(effective_bits(&[(96, 1), (4, 8)]), 1.28);
        assert_eq!(effective_bits(&[(95, 1), (5, 8)]), 1.35);
        assert_eq!(effective_bits(&[]), 0.0);
    }

    #[test]
    fn components_sum_to_total() {
        for (cfg, plan) in [(fp16_1b_config(), PrecisionPlan::fp16()), (desk_1b_config(), PrecisionPlan::pquant())] {
            let rep = memory_footprint(&cfg, &plan);
            assert_eq!(rep.total_bytes, rep.resident.total());
            assert!(rep.decode_bytes <= rep.total_bytes);
        }
    }

    #[test]
    fn decode_transfer_ignores_branch_count() {
        let base = desk_1b_config();
        let plan = PrecisionPlan::pquant();
        let runs: Vec<_> = [1, 2, 4, 8]
            .into_iter()
            .map(|n| memory_footprint(&ModelConfig { n_branches: n, ..base.clone() }, &plan))
            .collect();
        assert!(runs.iter().all(|r| r.decode_bytes == runs[0].decode_bytes));
        assert!(runs.windows(2).all(|w| w[0].total_bytes < w[1].total_bytes));
    }

    #[test]
    fn fp16_has_no_scales_and_sixteen_bits() {
        let rep = memory_footprint(&fp16_1b_config(), &PrecisionPlan::fp16());
        assert_eq!(rep.resident.scales, 0);
        assert_eq!(rep.effective_bits, 16.0);
        assert_eq!(rep.resident.backbone_weights, rep.backbone_params * 2);
    }

    #[test]
    fn one_bit_tensor_is_an_eighth_of_a_byte_per_weight() {
        let cfg = ModelConfig { vocab_size: 4, d_model: 8, n_layers: 1, n_heads: 1, d_ffn_nominal: 16, r: 8, r_alignment: 8, ..ModelConfig::default() };
        let plan = PrecisionPlan { ffn_matrices: 2, embedding_bits: 16, ..PrecisionPlan::pquant() };
        let rep = memory_footprint(&cfg, &plan);
        // 4 attention 8x8 tensors plus 8x8 up and 8x8 down on the 1-bit path.
        assert_eq!(rep.resident.backbone_weights, 6 * 8);
        assert_eq!(rep.resident.branch_weights, 2 * 64);
        assert_eq!(rep.resident.scales, (6 + 16) * 2);
        assert_eq!(rep.resident.embeddings, 2 * 32 * 2);
        assert_eq!(rep.resident.router, 0);
    }
}
