//! Deployment path: checkpoint to packed model, packed generation,
//! storage accounting and kernel benchmarks.

pub mod bench;
pub mod footprint;
pub mod packed;

pub use bench::{bench_csv, bench_kernels, BenchRow};
pub use footprint::{effective_bits, memory_footprint, Components, FootprintReport, PrecisionPlan};
pub use packed::{export_packed, fuse_scales, PackedModel};
