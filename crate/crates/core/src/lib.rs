//! Deterministic simulator and codec for a disaggregated, speculatively
//! prefetched KV cache.

pub mod adapt;
pub mod codec;
pub mod config;
pub mod memory;
pub mod model;
pub mod prefetch;
pub mod seed;
pub mod sim;
pub mod timing;
pub mod validate;
pub mod workload;
