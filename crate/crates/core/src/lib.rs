//! Per-layer KV-cache compression routing.
//!
//! A small deterministic grouped-query-attention transformer ([`model`]) is
//! calibrated ([`calibration`]) to measure how much each layer is damaged by
//! every `(keep ratio, K bits, V bits)` tuple. A greedy budget solver
//! ([`solver`]) then routes each layer to one tuple under a global memory
//! budget, and a heterogeneous KV cache ([`cache`]) executes the routed plan
//! during autoregressive decoding ([`decode`]).

pub mod cache;
pub mod calibration;
pub mod config;
pub mod decode;
pub mod error;
pub mod eviction;
pub mod model;
pub mod quant;
pub mod seed;
pub mod solver;
pub mod tensor;

pub use config::{BitWidth, ConfigSpace, KeepRatio, LayerCompressionConfig, SpaceKind};
pub use error::{Error, Result};
pub use eviction::ScorerKind;
pub use model::{build_model, ModelSpec, ToyModel};
pub use tensor::Tensor;
