//! The dual-view transformer: frozen causal AR path plus a trainable
//! diffusion path, both reading one shared KV cache.

pub mod cache;
pub mod checkpoint;
pub mod config;
pub mod forward;
pub mod params;

pub use cache::SharedKvCache;
pub use config::ModelConfig;
pub use forward::{ar_forward, causal_block_mask, diffusion_forward, ForwardOutput};
pub use params::{ParamId, Parameters, View};

/// Truncate `cache` to `new_len` committed positions.
pub fn cache_truncate(cache: &mut SharedKvCache, new_len: usize) -> crate::error::Result<()> {
    cache.truncate(new_len)
}
