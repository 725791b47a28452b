//! Model geometry, serving limits and closed-form KV-cache sizing.
//!
//! All byte counts use exact `u64` arithmetic. Any multiplication that would
//! overflow is reported as [`SizingError::Overflow`] instead of wrapping.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SizingError {
    #[error("KV byte count overflows u64 ({what})")]
    Overflow { what: &'static str },
    #[error("sizing argument `{0}` must be positive")]
    NonPositive(&'static str),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GeometryError {
    #[error("layers must be >= 1")]
    NoLayers,
    #[error("hidden_dim {hidden_dim} is not divisible by heads {heads}")]
    HeadSplit { hidden_dim: u64, heads: u64 },
    #[error("precision_bits must be 8 or 16, got {0}")]
    Precision(u32),
    #[error("max_seq must be >= 1")]
    NoSequence,
}

/// Transformer shape parameters that drive KV sizing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelGeometry {
    pub layers: u64,
    pub hidden_dim: u64,
    pub heads: u64,
    /// Bits per stored KV element (8 or 16).
    pub precision_bits: u32,
    /// Maximum sequence length in tokens.
    pub max_seq: u64,
}

impl ModelGeometry {
    pub fn new(
        layers: u64,
        hidden_dim: u64,
        heads: u64,
        precision_bits: u32,
        max_seq: u64,
    ) -> Result<Self, GeometryError> {
        let g = Self {
            layers,
            hidden_dim,
            heads,
            precision_bits,
            max_seq,
        };
        g.validate()?;
        Ok(g)
    }

    /// LLaMA-2 70B shape (FP16 cache, 2048-token context).
    pub fn llama2_70b() -> Self {
        Self {
            layers: 80,
            hidden_dim: 8192,
            heads: 64,
            precision_bits: 16,
            max_seq: 2048,
        }
    }

    /// Small geometry that simulates quickly on a laptop.
    pub fn desk() -> Self {
        Self {
            layers: 8,
            hidden_dim: 512,
            heads: 8,
            precision_bits: 16,
            max_seq: 256,
        }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.layers == 0 {
            return Err(GeometryError::NoLayers);
        }
        if self.heads == 0 || self.hidden_dim == 0 || !self.hidden_dim.is_multiple_of(self.heads) {
            return Err(GeometryError::HeadSplit {
                hidden_dim: self.hidden_dim,
                heads: self.heads,
            });
        }
        if self.precision_bits != 8 && self.precision_bits != 16 {
            return Err(GeometryError::Precision(self.precision_bits));
        }
        if self.max_seq == 0 {
            return Err(GeometryError::NoSequence);
        }
        Ok(())
    }

    pub fn head_dim(&self) -> u64 {
        self.hidden_dim / self.heads
    }

    fn element_bytes(&self) -> u64 {
        u64::from(self.precision_bits / 8)
    }
}

/// Bytes of K plus V produced by one token in one layer: `2 · d_h · P_bits/8`.
pub fn kv_bytes_per_token_layer(geom: &ModelGeometry) -> u64 {
    2 * geom.hidden_dim * geom.element_bytes()
}

/// Total KV footprint `2 · L · batch · seq · d_h · P_bits/8` in bytes.
pub fn kv_bytes_total(geom: &ModelGeometry, batch: u64, seq: u64) -> Result<u64, SizingError> {
    if batch == 0 {
        return Err(SizingError::NonPositive("batch"));
    }
    if seq == 0 {
        return Err(SizingError::NonPositive("seq"));
    }
    [geom.layers, batch, seq, geom.hidden_dim, geom.element_bytes()]
        .into_iter()
        .try_fold(2u64, |acc, f| acc.checked_mul(f))
        .ok_or(SizingError::Overflow { what: "kv_bytes_total" })
}

/// Footprint of a batch whose members have individual sequence lengths.
pub fn kv_bytes_for_requests(geom: &ModelGeometry, seq_lens: &[u64]) -> Result<u64, SizingError> {
    seq_lens.iter().try_fold(0u64, |acc, &s| {
        let one = kv_bytes_total(geom, 1, s)?;
        acc.checked_add(one)
            .ok_or(SizingError::Overflow { what: "kv_bytes_for_requests" })
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ServingError {
    #[error("page_size {0} is not a power of two")]
    PageSize(u64),
    #[error("l1_capacity ({l1}) must be smaller than l3_capacity ({l3})")]
    TierOrder { l1: u64, l3: u64 },
    #[error("prefetch_depth must be >= 1")]
    Depth,
    #[error("history_len must be >= 1")]
    History,
    #[error("batch_size must be >= 1")]
    Batch,
}

/// Serving-side limits: batch, tier capacities and prefetch depth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServingConfig {
    pub batch_size: u64,
    pub page_size: u64,
    pub l1_capacity: u64,
    pub l2_capacity: u64,
    pub l3_capacity: u64,
    pub prefetch_depth: u32,
    pub history_len: usize,
}

impl Default for ServingConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            page_size: 4096,
            l1_capacity: 4 << 20,
            l2_capacity: 16 << 20,
            l3_capacity: 1 << 30,
            prefetch_depth: 4,
            history_len: 16,
        }
    }
}

impl ServingConfig {
    pub fn validate(&self) -> Result<(), ServingError> {
        if !self.page_size.is_power_of_two() {
            return Err(ServingError::PageSize(self.page_size));
        }
        if self.l1_capacity >= self.l3_capacity {
            return Err(ServingError::TierOrder {
                l1: self.l1_capacity,
                l3: self.l3_capacity,
            });
        }
        if self.prefetch_depth == 0 {
            return Err(ServingError::Depth);
        }
        if self.history_len == 0 {
            return Err(ServingError::History);
        }
        if self.batch_size == 0 {
            return Err(ServingError::Batch);
        }
        Ok(())
    }
}
