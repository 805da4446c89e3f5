//! Memory-layer architectures at desk scale.
//!
//! Implements the UltraMemV2 layer (tucker-decomposed query-key retrieval,
//! PEER-style value FFNs, a single shared value projector, and
//! variance-calibrated initialization) next to its baselines (SwiGLU FFN,
//! gated MoE, Product Key Memory), a toy pre-norm transformer that hosts
//! them, and a byte-level training harness with deterministic seeding.
//!
//! Every layer has a manual backward pass checked against central finite
//! differences; retrieval is checked against brute-force full-grid oracles.

pub mod baselines;
pub mod error;
pub mod gradcheck;
pub mod memory;
pub mod numerics;
pub mod retrieval;

pub use error::{Result, UmvError};
