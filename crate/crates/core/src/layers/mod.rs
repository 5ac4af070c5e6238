//! Model building blocks: quantized linears, RMSNorm, the top-1 router,
//! causal attention and the decoupled FFN.

pub mod attention;
pub mod ffn;
pub mod linear;
pub mod norm;
pub mod router;

pub use attention::{causal_attention, Attention, SeqShape};
pub use ffn::{silu, DecoupledLinear, FfnVariant, HpBranch};
pub use linear::{
    packed_binary_forward, packed_int8_forward, BitLinear, Mode, QuantLinear, QuantizedWeight, WeightQuantizer,
};
pub use norm::RmsNorm;
pub use router::{argmax, route, router_select, softmax, Routing};
