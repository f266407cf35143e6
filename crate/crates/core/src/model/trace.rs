//! Per-layer capture of attention maps and residual-stream activations.

use crate::error::{Error, Result};
use crate::idp::SelectionRecord;
use crate::model::layout::SegmentLayout;
use crate::tensor::Tensor;

/// One layer's capture. Attention is the post-softmax weight matrix BEFORE
/// any discard masking, so rows always sum to 1 over their allowed keys;
/// selection records carry what the discard actually did.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    /// `[n_heads, n_query_rows, n_key_cols]`
    pub attn: Tensor<f32>,
    /// head-averaged form, `[n_query_rows, n_key_cols]`
    pub attn_mean: Tensor<f32>,
    /// residual stream after this block's FFN add, `[n_query_rows, d_model]`
    pub residual: Tensor<f32>,
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub layers: Vec<LayerTrace>,
    pub layout: SegmentLayout,
    /// global position of the first query row (nonzero when prompt rows come
    /// from a cache and were not recomputed)
    pub q_start: usize,
    /// key columns injected before the layout's columns (prefix-tuning)
    pub extra_cols: usize,
    pub selections: Vec<SelectionRecord>,
}

impl ForwardTrace {
    /// Every attention row must be a probability distribution over its
    /// allowed keys.
    pub fn validate_row_stochastic(&self, tol: f64) -> Result<()> {
        for (li, layer) in self.layers.iter().enumerate() {
            let (h, nq, nk) = (layer.attn.dim(0), layer.attn.dim(1), layer.attn.dim(2));
            for hh in 0..h {
                for q in 0..nq {
                    let mut sum = 0.0f64;
                    for k in 0..nk {
                        sum += layer.attn.at3(hh, q, k) as f64;
                    }
                    if (sum - 1.0).abs() > tol {
                        return Err(Error::NonFinite(format!(
                            "layer {li} head {hh} row {q} sums to {sum}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}
