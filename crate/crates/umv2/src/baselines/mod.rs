//! Comparison layers: SwiGLU FFN, gated MoE, and Product Key Memory.
//!
//! Each layer carries a manual backward pass; the gradcheck suites hold
//! them to central finite differences.

mod ffn;
mod moe;
mod pkm;

pub use ffn::{linear_init_std, out_proj_extra, FfnCache, FfnGrads, FfnParams};
pub use moe::{moe_balance_loss, GateMode, GateStats, MoeCache, MoeGrads, MoeParams};
pub use pkm::{PkmCache, PkmGrads, PkmHead, PkmParams};
