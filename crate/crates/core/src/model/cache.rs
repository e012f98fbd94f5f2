use crate::autograd::KvPrefix;
use crate::error::{OrthrusError, Result};
use crate::tensor::Tensor;

use super::config::ModelConfig;

/// Committed keys and values per layer. Only the AR path appends here; the
/// diffusion path reads it as a constant prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedKvCache {
    d_model: usize,
    capacity: usize,
    len: usize,
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
}

impl SharedKvCache {
    pub fn new(config: &ModelConfig) -> Self {
        Self::with_capacity(config, config.max_seq_len)
    }

    pub fn with_capacity(config: &ModelConfig, capacity: usize) -> Self {
        let capacity = capacity.min(config.max_seq_len);
        Self {
            d_model: config.d_model,
            capacity,
            len: 0,
            keys: vec![Vec::new(); config.n_layers],
            values: vec![Vec::new(); config.n_layers],
        }
    }

    pub fn committed_len(&self) -> usize {
        self.len
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn n_layers(&self) -> usize {
        self.keys.len()
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub(crate) fn prefix(&self, layer: usize) -> KvPrefix<'_> {
        KvPrefix {
            keys: &self.keys[layer],
            values: &self.values[layer],
            len: self.len,
        }
    }

    pub fn layer_keys(&self, layer: usize) -> &[f32] {
        &self.keys[layer]
    }

    pub fn layer_values(&self, layer: usize) -> &[f32] {
        &self.values[layer]
    }

    /// Stored elements in one layer: `2 × committed_len × d_model`.
    pub fn elements_per_layer(&self) -> usize {
        self.keys[0].len() + self.values[0].len()
    }

    pub fn total_elements(&self) -> usize {
        self.keys
            .iter()
            .zip(&self.values)
            .map(|(k, v)| k.len() + v.len())
            .sum()
    }

    /// Append one block of rows to every layer.
    pub fn append(&mut self, per_layer: &[(Tensor, Tensor)]) -> Result<()> {
        assert_eq!(per_layer.len(), self.keys.len(), "layer count mismatch");
        let n = per_layer.first().map_or(0, |(k, _)| k.rows);
        if self.len + n > self.capacity {
            return Err(OrthrusError::CacheOverflow {
                needed: self.len + n,
                capacity: self.capacity,
            });
        }
        for (l, (k, v)) in per_layer.iter().enumerate() {
            assert_eq!(k.rows, n);
            assert_eq!(v.rows, n);
            self.keys[l].extend_from_slice(&k.data);
            self.values[l].extend_from_slice(&v.data);
        }
        self.len += n;
        Ok(())
    }

    /// Drop every entry at position `>= new_len`.
    pub fn truncate(&mut self, new_len: usize) -> Result<()> {
        if new_len > self.len {
            return Err(OrthrusError::Truncation {
                committed: self.len,
                requested: new_len,
            });
        }
        for (k, v) in self.keys.iter_mut().zip(&mut self.values) {
            k.truncate(new_len * self.d_model);
            v.truncate(new_len * self.d_model);
        }
        self.len = new_len;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn filled(n: usize) -> SharedKvCache {
        let cfg = ModelConfig {
            d_model: 4,
            n_heads: 2,
            n_layers: 2,
            max_seq_len: 16,
            block_size: 2,
            ..Default::default()
        };
        let mut c = SharedKvCache::new(&cfg);
        let rows: Vec<(Tensor, Tensor)> = (0..2)
            .map(|_| (Tensor::zeros(n, 4), Tensor::zeros(n, 4)))
            .collect();
        c.append(&rows).unwrap();
        c
    }

    #[test]
    fn truncate_shrinks() {
        let mut c = filled(10);
        c.truncate(7).unwrap();
        assert_eq!(c.committed_len(), 7);
        assert_eq!(c.elements_per_layer(), 2 * 7 * 4);
    }

    #[test]
    fn truncate_to_len_is_noop() {
        let mut c = filled(10);
        let before = c.clone();
        c.truncate(10).unwrap();
        assert_eq!(c, before);
    }

    #[test]
    fn truncate_past_len_fails() {
        let mut c = filled(10);
        assert!(matches!(
            c.truncate(11),
            Err(OrthrusError::Truncation { .. })
        ));
    }

    #[test]
    fn append_past_capacity_fails() {
        let mut c = filled(10);
        let rows: Vec<(Tensor, Tensor)> = (0..2)
            .map(|_| (Tensor::zeros(7, 4), Tensor::zeros(7, 4)))
            .collect();
        assert!(matches!(
            c.append(&rows),
            Err(OrthrusError::CacheOverflow { .. })
        ));
    }
}
