//! Weight compression stand-ins: round-to-nearest quantization and magnitude
//! pruning. Both apply to the attention and feed-forward projection matrices
//! only; embeddings, norm gains, and the tied output head stay untouched.
//!
//! Quantization is symmetric per output channel (per column, since weights
//! multiply row vectors from the left). Dequantized values are computed as
//! `level * amax / q` in f64 before the final f32 rounding. With that order
//! the max-magnitude element maps back to `amax` exactly, so re-quantizing a
//! quantized matrix recovers the same scale, the same levels, and the same
//! bits.

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub bits: u8,
}

impl QuantSpec {
    pub fn new(bits: u8) -> Result<Self> {
        if !(2..=8).contains(&bits) {
            return Err(Error::BitsOutOfRange(bits));
        }
        Ok(QuantSpec { bits })
    }

    /// largest level magnitude: 2^(bits-1) - 1
    pub fn q_max(&self) -> i64 {
        (1i64 << (self.bits - 1)) - 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneSpec {
    pub sparsity: f64,
}

impl PruneSpec {
    pub fn new(sparsity: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&sparsity) {
            return Err(Error::InvalidConfig(format!(
                "sparsity {sparsity} outside [0, 1)"
            )));
        }
        Ok(PruneSpec { sparsity })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum CompressOp {
    Quantize(QuantSpec),
    Prune(PruneSpec),
}

impl CompressOp {
    pub fn label(&self) -> String {
        match self {
            CompressOp::Quantize(q) => format!("rtn-{}bit", q.bits),
            CompressOp::Prune(p) => format!("prune-{}", p.sparsity),
        }
    }
}

/// Round-to-nearest, symmetric, per output channel. A channel whose max
/// magnitude is zero is left as-is.
pub fn quantize_rtn(w: &Tensor<f32>, spec: &QuantSpec) -> Result<Tensor<f32>> {
    if w.rank() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "quantize expects a matrix, got {:?}",
            w.shape()
        )));
    }
    let (rows, cols) = (w.dim(0), w.dim(1));
    let q = spec.q_max() as f64;
    let mut out = w.data().to_vec();
    for j in 0..cols {
        let mut amax = 0.0f32;
        for i in 0..rows {
            amax = amax.max(w.at2(i, j).abs());
        }
        if amax == 0.0 {
            continue;
        }
        let a = amax as f64;
        for i in 0..rows {
            let level = ((w.at2(i, j) as f64 * q) / a).round().clamp(-q, q);
            out[i * cols + j] = (level * a / q) as f32;
        }
    }
    Tensor::new(vec![rows, cols], out)
}

/// Zero the floor(sparsity * numel) smallest-magnitude entries; ties break
/// toward the lower flat index.
pub fn prune_magnitude(w: &Tensor<f32>, spec: &PruneSpec) -> Result<Tensor<f32>> {
    let numel = w.len();
    let k = (spec.sparsity * numel as f64).floor() as usize;
    let mut order: Vec<usize> = (0..numel).collect();
    order.sort_by(|&i, &j| {
        w.data()[i]
            .abs()
            .total_cmp(&w.data()[j].abs())
            .then(i.cmp(&j))
    });
    let mut out = w.data().to_vec();
    for &i in &order[..k] {
        out[i] = 0.0;
    }
    Tensor::new(w.shape().to_vec(), out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatrixStats {
    pub matrix: String,
    pub op: String,
    pub max_abs_err: f64,
    pub mse: f64,
    /// fraction of exactly-zero entries after the op
    pub zero_fraction: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompressionReport {
    pub op: String,
    pub entries: Vec<MatrixStats>,
}

impl CompressionReport {
    pub fn csv(&self) -> String {
        let mut s = String::from("matrix,op,max_abs_err,mse,zero_fraction\n");
        for e in &self.entries {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                e.matrix, e.op, e.max_abs_err, e.mse, e.zero_fraction
            ));
        }
        s
    }
}

pub fn matrix_stats(name: &str, op: &str, before: &Tensor<f32>, after: &Tensor<f32>) -> MatrixStats {
    let mut max_abs = 0.0f64;
    let mut sq = 0.0f64;
    let mut zeros = 0usize;
    for (&b, &a) in before.data().iter().zip(after.data()) {
        let d = (b as f64 - a as f64).abs();
        max_abs = max_abs.max(d);
        sq += d * d;
        if a == 0.0 {
            zeros += 1;
        }
    }
    MatrixStats {
        matrix: name.to_string(),
        op: op.to_string(),
        max_abs_err: max_abs,
        mse: sq / before.len() as f64,
        zero_fraction: zeros as f64 / before.len() as f64,
    }
}

/// Applies the op to every q/k/v/o and feed-forward projection, returning the
/// compressed model and per-matrix stats.
pub fn compress_model(model: &Model, op: &CompressOp) -> Result<(Model, CompressionReport)> {
    let mut out = model.clone();
    let label = op.label();
    let mut entries = Vec::new();
    for li in 0..model.config.n_layers {
        for field in ["wq", "wk", "wv", "wo", "up", "down"] {
            let name = format!("layers.{li}.{field}");
            let before = model.weights.get(&name).expect("projection name");
            let after = match op {
                CompressOp::Quantize(spec) => quantize_rtn(before, spec)?,
                CompressOp::Prune(spec) => prune_magnitude(before, spec)?,
            };
            entries.push(matrix_stats(&name, &label, before, &after));
            *out.weights.get_mut(&name).expect("projection name") = after;
        }
    }
    Ok((out, CompressionReport { op: label, entries }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use proptest::prelude::*;

    #[test]
    fn bits_must_be_two_through_eight() {
        assert!(matches!(QuantSpec::new(1), Err(Error::BitsOutOfRange(1))));
        assert!(matches!(QuantSpec::new(9), Err(Error::BitsOutOfRange(9))));
        for b in 2..=8 {
            assert_eq!(QuantSpec::new(b).unwrap().q_max(), (1 << (b - 1)) - 1);
        }
    }

    #[test]
    fn three_bit_channel_hand_case() {
        // channel [1, -1, 0.5]: scale 1/3, levels [3, -3, 2]
        let w = Tensor::new(vec![3, 1], vec![1.0, -1.0, 0.5]).unwrap();
        let out = quantize_rtn(&w, &QuantSpec::new(3).unwrap()).unwrap();
        assert_eq!(out.at2(0, 0), 1.0);
        assert_eq!(out.at2(1, 0), -1.0);
        assert_eq!(out.at2(2, 0), (2.0f64 / 3.0) as f32);
    }

    #[test]
    fn zero_channel_is_left_alone() {
        let w = Tensor::new(vec![2, 2], vec![0.0, 1.0, -0.0, 0.25]).unwrap();
        let out = quantize_rtn(&w, &QuantSpec::new(2).unwrap()).unwrap();
        assert_eq!(out.at2(0, 0).to_bits(), 0.0f32.to_bits());
        assert_eq!(out.at2(1, 0).to_bits(), (-0.0f32).to_bits());
        assert_eq!(out.at2(0, 1), 1.0);
    }

    #[test]
    fn prune_hand_case_and_tie_order() {
        let w = Tensor::new(vec![2, 2], vec![4.0, -1.0, 3.0, 2.0]).unwrap();
        let spec = PruneSpec::new(0.5).unwrap();
        let out = prune_magnitude(&w, &spec).unwrap();
        assert_eq!(out.data(), &[4.0, 0.0, 3.0, 0.0]);

        let ties = Tensor::new(vec![4], vec![1.0, -1.0, 1.0, 1.0]).unwrap();
        let out = prune_magnitude(&ties, &spec).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn prune_count_is_floored_and_zero_is_identity() {
        let w = Tensor::new(vec![5], vec![5.0, 4.0, 3.0, 2.0, 1.0]).unwrap();
        let out = prune_magnitude(&w, &PruneSpec::new(0.5).unwrap()).unwrap();
        assert_eq!(out.data().iter().filter(|&&v| v == 0.0).count(), 2);

        let out = prune_magnitude(&w, &PruneSpec::new(0.0).unwrap()).unwrap();
        assert_eq!(out.data(), w.data());
        assert!(PruneSpec::new(1.0).is_err());
        assert!(PruneSpec::new(-0.1).is_err());
    }

    #[test]
    fn error_shrinks_with_more_bits() {
        let cfg = ModelConfig {
            d_model: 16,
            n_heads: 2,
            n_layers: 1,
            d_ff: 32,
            vocab_size: 11,
            max_seq_len: 16,
            seed: 4,
        };
        let model = Model::init(cfg).unwrap();
        let w = &model.weights.layers[0].up;
        let mse = |bits: u8| {
            let out = quantize_rtn(w, &QuantSpec::new(bits).unwrap()).unwrap();
            matrix_stats("up", "q", w, &out).mse
        };
        let (m2, m4, m8) = (mse(2), mse(4), mse(8));
        assert!(m8 < m4 && m4 < m2, "{m8} {m4} {m2}");
    }

    #[test]
    fn compress_model_touches_only_projections() {
        let cfg = ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            d_ff: 16,
            vocab_size: 11,
            max_seq_len: 16,
            seed: 9,
        };
        let model = Model::init(cfg).unwrap();
        let (out, report) = compress_model(&model, &CompressOp::Quantize(QuantSpec::new(2).unwrap()))
            .unwrap();
        assert_eq!(report.entries.len(), 12);
        assert_eq!(out.weights.embed.data(), model.weights.embed.data());
        assert_eq!(out.weights.final_gain.data(), model.weights.final_gain.data());
        for li in 0..2 {
            assert_eq!(
                out.weights.layers[li].attn_gain.data(),
                model.weights.layers[li].attn_gain.data()
            );
            assert_ne!(out.weights.layers[li].wq.data(), model.weights.layers[li].wq.data());
        }
        let csv = report.csv();
        assert!(csv.starts_with("matrix,op,max_abs_err,mse,zero_fraction\n"));
        assert_eq!(csv.lines().count(), 13);
        assert!(csv.contains("layers.1.down,rtn-2bit,"));
    }

    proptest! {
        #[test]
        fn quantize_is_idempotent_bitwise(
            vals in proptest::collection::vec(-4.0f32..4.0, 12),
            bits in 2u8..=8,
        ) {
            let w = Tensor::new(vec![4, 3], vals).unwrap();
            let spec = QuantSpec::new(bits).unwrap();
            let once = quantize_rtn(&w, &spec).unwrap();
            let twice = quantize_rtn(&once, &spec).unwrap();
            let a: Vec<u32> = once.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = twice.data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn quantize_error_is_within_half_step(
            vals in proptest::collection::vec(-4.0f32..4.0, 12),
            bits in 2u8..=8,
        ) {
            let w = Tensor::new(vec![4, 3], vals).unwrap();
            let spec = QuantSpec::new(bits).unwrap();
            let out = quantize_rtn(&w, &spec).unwrap();
            let q = spec.q_max() as f64;
            for j in 0..3 {
                let mut amax = 0.0f64;
                for i in 0..4 {
                    amax = amax.max((w.at2(i, j) as f64).abs());
                }
                let bound = (amax / q) * 0.5 + amax * 1e-6;
                for i in 0..4 {
                    let err = (w.at2(i, j) as f64 - out.at2(i, j) as f64).abs();
                    prop_assert!(err <= bound, "err {} bound {}", err, bound);
                }
            }
        }

        #[test]
        fn prune_hits_exact_sparsity(
            vals in proptest::collection::vec(-2.0f32..2.0, 20),
            s in 0.0f64..0.95,
        ) {
            let w = Tensor::new(vec![4, 5], vals).unwrap();
            let spec = PruneSpec::new(s).unwrap();
            let out = prune_magnitude(&w, &spec).unwrap();
            let want = (s * 20.0).floor() as usize;
            let zeros = out.data().iter().filter(|&&v| v == 0.0).count();
            // pre-existing zeros can only add to the count
            let pre = w.data().iter().filter(|&&v| v == 0.0).count();
            prop_assert!(zeros >= want && zeros <= want + pre);
        }
    }
}
