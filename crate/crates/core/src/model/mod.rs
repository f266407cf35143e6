//! Decoder-only transformer: weights, forward engine, KV caching, traces.

pub mod cache;
pub mod container;
pub mod diffable;
pub mod forward;
pub mod layout;
pub mod trace;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

pub use cache::KvCache;
pub use forward::{DecodeSession, Feed, ForwardOut, ForwardReq};
pub use layout::{AttentionPolicy, Segment, SegmentKind, SegmentLayout};
pub use trace::{ForwardTrace, LayerTrace};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let extents = [
            self.d_model,
            self.n_heads,
            self.n_layers,
            self.d_ff,
            self.vocab_size,
            self.max_seq_len,
        ];
        if extents.iter().any(|&x| x == 0) {
            return Err(Error::InvalidConfig("all extents must be >= 1".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone)]
pub struct LayerWeights<E: Element = f32> {
    pub wq: Tensor<E>,
    pub wk: Tensor<E>,
    pub wv: Tensor<E>,
    pub wo: Tensor<E>,
    /// feed-forward expansion, `[d_model, d_ff]`
    pub up: Tensor<E>,
    /// feed-forward contraction, `[d_ff, d_model]`
    pub down: Tensor<E>,
    pub attn_gain: Tensor<E>,
    pub ffn_gain: Tensor<E>,
}

/// Static parameters. Projections use the row convention `y = x @ W`, so all
/// four attention matrices are `[d_model, d_model]`. The output head is tied
/// to the embedding table.
#[derive(Debug, Clone)]
pub struct Weights<E: Element = f32> {
    pub embed: Tensor<E>,
    pub layers: Vec<LayerWeights<E>>,
    pub final_gain: Tensor<E>,
    frozen: BTreeSet<String>,
}

impl<E: Element> Weights<E> {
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0f64, INIT_STD).expect("valid std");
        let mut draw = |shape: &[usize]| -> Tensor<E> {
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|_| E::from_f64(normal.sample(&mut rng)))
                .collect();
            Tensor::new(shape.to_vec(), data).expect("shape/data consistent")
        };
        let d = config.d_model;
        let embed = draw(&[config.vocab_size, d]);
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                wq: draw(&[d, d]),
                wk: draw(&[d, d]),
                wv: draw(&[d, d]),
                wo: draw(&[d, d]),
                up: draw(&[d, config.d_ff]),
                down: draw(&[config.d_ff, d]),
                attn_gain: Tensor::filled(&[d], E::ONE),
                ffn_gain: Tensor::filled(&[d], E::ONE),
            })
            .collect();
        Ok(Weights {
            embed,
            layers,
            final_gain: Tensor::filled(&[d], E::ONE),
            frozen: BTreeSet::new(),
        })
    }

    /// Stable name list: "embed", "final_gain", then per-layer entries.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = vec!["embed".to_string(), "final_gain".to_string()];
        for i in 0..self.layers.len() {
            for field in ["wq", "wk", "wv", "wo", "up", "down", "attn_gain", "ffn_gain"] {
                names.push(format!("layers.{i}.{field}"));
            }
        }
        names
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<E>> {
        match name {
            "embed" => return Some(&self.embed),
            "final_gain" => return Some(&self.final_gain),
            _ => {}
        }
        let rest = name.strip_prefix("layers.")?;
        let (idx, field) = rest.split_once('.')?;
        let layer = self.layers.get(idx.parse::<usize>().ok()?)?;
        Some(match field {
            "wq" => &layer.wq,
            "wk" => &layer.wk,
            "wv" => &layer.wv,
            "wo" => &layer.wo,
            "up" => &layer.up,
            "down" => &layer.down,
            "attn_gain" => &layer.attn_gain,
            "ffn_gain" => &layer.ffn_gain,
            _ => return None,
        })
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<E>> {
        match name {
            "embed" => return Some(&mut self.embed),
            "final_gain" => return Some(&mut self.final_gain),
            _ => {}
        }
        let rest = name.strip_prefix("layers.")?;
        let (idx, field) = rest.split_once('.')?;
        let layer = self.layers.get_mut(idx.parse::<usize>().ok()?)?;
        Some(match field {
            "wq" => &mut layer.wq,
            "wk" => &mut layer.wk,
            "wv" => &mut layer.wv,
            "wo" => &mut layer.wo,
            "up" => &mut layer.up,
            "down" => &mut layer.down,
            "attn_gain" => &mut layer.attn_gain,
            "ffn_gain" => &mut layer.ffn_gain,
            _ => return None,
        })
    }

    pub fn freeze_all(&mut self) {
        self.frozen = self.param_names().into_iter().collect();
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) {
        if frozen {
            self.frozen.insert(name.to_string());
        } else {
            self.frozen.remove(name);
        }
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    pub fn cast<F: Element>(&self) -> Weights<F> {
        Weights {
            embed: self.embed.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    wq: l.wq.cast(),
                    wk: l.wk.cast(),
                    wv: l.wv.cast(),
                    wo: l.wo.cast(),
                    up: l.up.cast(),
                    down: l.down.cast(),
                    attn_gain: l.attn_gain.cast(),
                    ffn_gain: l.ffn_gain.cast(),
                })
                .collect(),
            final_gain: self.final_gain.cast(),
            frozen: self.frozen.clone(),
        }
    }
}

/// Immutable model: config plus f32 weights. Shareable across threads.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub weights: Weights<f32>,
}

impl Model {
    pub fn init(config: ModelConfig) -> Result<Self> {
        let weights = Weights::init(&config)?;
        Ok(Model { config, weights })
    }
}
