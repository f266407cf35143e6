//! Incremental-decode key/value cache.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

struct LayerKv {
    /// `[capacity, d_model]`; only the first `len` rows are valid
    k: Tensor<f32>,
    v: Tensor<f32>,
}

/// Per-layer K/V storage with a shared valid-length watermark. Rows past the
/// watermark are scratch: written during a step, published by `advance`.
pub struct KvCache {
    layers: Vec<LayerKv>,
    len: usize,
    capacity: usize,
    d_model: usize,
}

impl KvCache {
    pub fn new(n_layers: usize, capacity: usize, d_model: usize) -> Self {
        let layers = (0..n_layers)
            .map(|_| LayerKv {
                k: Tensor::zeros(&[capacity, d_model]),
                v: Tensor::zeros(&[capacity, d_model]),
            })
            .collect();
        KvCache {
            layers,
            len: 0,
            capacity,
            d_model,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Write one row into a layer's scratch region at absolute row index.
    pub fn write_row(&mut self, layer: usize, row: usize, k: &[f32], v: &[f32]) -> Result<()> {
        if row >= self.capacity {
            return Err(Error::SequenceOverflow {
                total: row + 1,
                max: self.capacity,
            });
        }
        debug_assert_eq!(k.len(), self.d_model);
        debug_assert_eq!(v.len(), self.d_model);
        let lk = &mut self.layers[layer];
        lk.k.row_mut(row).copy_from_slice(k);
        lk.v.row_mut(row).copy_from_slice(v);
        Ok(())
    }

    /// Publish `n` freshly written rows across every layer.
    pub fn advance(&mut self, n: usize) -> Result<()> {
        if self.len + n > self.capacity {
            return Err(Error::SequenceOverflow {
                total: self.len + n,
                max: self.capacity,
            });
        }
        self.len += n;
        Ok(())
    }

    /// Valid key rows for a layer, flattened `[len, d_model]`.
    pub fn k_rows(&self, layer: usize) -> &[f32] {
        &self.layers[layer].k.data()[..self.len * self.d_model]
    }

    pub fn v_rows(&self, layer: usize) -> &[f32] {
        &self.layers[layer].v.data()[..self.len * self.d_model]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn watermark_hides_unpublished_rows() {
        let mut c = KvCache::new(1, 4, 2);
        c.write_row(0, 0, &[1.0, 2.0], &[3.0, 4.0]).unwrap();
        assert_eq!(c.len(), 0);
        assert!(c.k_rows(0).is_empty());
        c.advance(1).unwrap();
        assert_eq!(c.k_rows(0), &[1.0, 2.0]);
        assert_eq!(c.v_rows(0), &[3.0, 4.0]);
    }

    #[test]
    fn overflow_is_rejected() {
        let mut c = KvCache::new(1, 2, 1);
        assert!(c.write_row(0, 2, &[0.0], &[0.0]).is_err());
        c.advance(2).unwrap();
        assert!(c.advance(1).is_err());
    }
}
