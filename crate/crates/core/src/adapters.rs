//! Recovery-method parameterizations: soft prompts, prefix hidden states,
//! low-rank deltas, and the closed-form parameter accounting behind the
//! method-size tables.

use crate::error::{Error, Result};
use crate::model::layout::SegmentLayout;
use crate::model::ModelConfig;
use crate::tensor::{matmul_bt, Element, MacCounter, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct PromptMeta {
    pub dataset: String,
    pub steps: u64,
}

/// Learnable embedding-space tokens prepended to the input.
#[derive(Debug, Clone)]
pub struct SoftPrompt {
    pub id: String,
    /// `[n_tokens, d_model]`
    pub embedding: Tensor<f32>,
    pub meta: PromptMeta,
}

impl SoftPrompt {
    pub fn init(id: &str, n_tokens: usize, d_model: usize, seed: u64) -> Result<Self> {
        if n_tokens == 0 {
            return Err(Error::InvalidConfig("prompt needs >= 1 token".into()));
        }
        Ok(SoftPrompt {
            id: id.to_string(),
            embedding: normal_tensor(&[n_tokens, d_model], seed),
            meta: PromptMeta::default(),
        })
    }

    pub fn len(&self) -> usize {
        self.embedding.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.embedding.dim(1)
    }
}

/// Ordered collection of soft prompts with unique identifiers.
#[derive(Debug, Clone, Default)]
pub struct PromptBank {
    prompts: Vec<SoftPrompt>,
}

impl PromptBank {
    pub fn new(prompts: Vec<SoftPrompt>) -> Result<Self> {
        if prompts.is_empty() {
            return Err(Error::InvalidConfig("bank needs >= 1 prompt".into()));
        }
        for (i, a) in prompts.iter().enumerate() {
            for b in &prompts[i + 1..] {
                if a.id == b.id {
                    return Err(Error::InvalidConfig(format!(
                        "duplicate prompt id {:?}",
                        a.id
                    )));
                }
            }
        }
        Ok(PromptBank { prompts })
    }

    pub fn prompts(&self) -> &[SoftPrompt] {
        &self.prompts
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn get(&self, i: usize) -> &SoftPrompt {
        &self.prompts[i]
    }

    pub fn prompt_lens(&self) -> Vec<usize> {
        self.prompts.iter().map(|p| p.len()).collect()
    }

    pub fn total_tokens(&self) -> usize {
        self.prompts.iter().map(|p| p.len()).sum()
    }
}

/// One low-rank pair. The delta for `y = x @ W` is `(x @ A^T) @ B^T`.
#[derive(Debug, Clone)]
pub struct LoraPair<E: Element = f32> {
    /// `[d_out, r]`, zero-initialized so the adapted model starts identical
    pub b: Tensor<E>,
    /// `[r, d_in]`, small random
    pub a: Tensor<E>,
}

impl<E: Element> LoraPair<E> {
    pub fn rank(&self) -> usize {
        self.a.dim(0)
    }

    /// `(x @ A^T) @ B^T`, counting both low-rank products.
    pub fn delta(&self, x: &Tensor<E>, macs: Option<&MacCounter>) -> Result<Tensor<E>> {
        let mid = matmul_bt(x, &self.a)?;
        let out = matmul_bt(&mid, &self.b)?;
        if let Some(c) = macs {
            let rows = x.dim(0) as u64;
            let r = self.rank() as u64;
            c.add(rows * r * (x.dim(1) as u64 + self.b.dim(0) as u64));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct LoraLayer<E: Element = f32> {
    pub q: LoraPair<E>,
    pub k: LoraPair<E>,
    pub v: LoraPair<E>,
    pub o: LoraPair<E>,
    pub up: LoraPair<E>,
    pub down: LoraPair<E>,
}

/// Low-rank deltas for every attention projection and both feed-forward
/// matrices of every layer. Scaling is fixed at 1.
#[derive(Debug, Clone)]
pub struct LoraAdapter<E: Element = f32> {
    pub rank: usize,
    pub layers: Vec<LoraLayer<E>>,
}

impl<E: Element> LoraAdapter<E> {
    pub fn init(config: &ModelConfig, rank: usize, seed: u64) -> Result<Self> {
        if rank == 0 {
            return Err(Error::InvalidConfig("rank must be >= 1".into()));
        }
        if rank > config.d_model.min(config.d_ff) {
            return Err(Error::InvalidConfig(format!(
                "rank {rank} exceeds a target dimension"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f64, super::model::INIT_STD).expect("valid std");
        let mut pair = |d_out: usize, d_in: usize| LoraPair {
            b: Tensor::zeros(&[d_out, rank]),
            a: {
                let n = rank * d_in;
                Tensor::new(
                    vec![rank, d_in],
                    (0..n).map(|_| E::from_f64(normal.sample(&mut rng))).collect(),
                )
                .expect("shape/data consistent")
            },
        };
        let d = config.d_model;
        let layers = (0..config.n_layers)
            .map(|_| LoraLayer {
                q: pair(d, d),
                k: pair(d, d),
                v: pair(d, d),
                o: pair(d, d),
                up: pair(config.d_ff, d),
                down: pair(d, config.d_ff),
            })
            .collect();
        Ok(LoraAdapter { rank, layers })
    }

    /// All B matrices zero means the adapted forward is the base forward.
    pub fn is_identity(&self) -> bool {
        self.layers.iter().all(|l| {
            [&l.q, &l.k, &l.v, &l.o, &l.up, &l.down]
                .iter()
                .all(|p| p.b.data().iter().all(|&v| v == E::ZERO))
        })
    }

    pub fn cast<F: Element>(&self) -> LoraAdapter<F> {
        LoraAdapter {
            rank: self.rank,
            layers: self
                .layers
                .iter()
                .map(|l| LoraLayer {
                    q: LoraPair { b: l.q.b.cast(), a: l.q.a.cast() },
                    k: LoraPair { b: l.k.b.cast(), a: l.k.a.cast() },
                    v: LoraPair { b: l.v.b.cast(), a: l.v.a.cast() },
                    o: LoraPair { b: l.o.b.cast(), a: l.o.a.cast() },
                    up: LoraPair { b: l.up.b.cast(), a: l.up.a.cast() },
                    down: LoraPair { b: l.down.b.cast(), a: l.down.a.cast() },
                })
                .collect(),
        }
    }
}

/// Per-layer learnable hidden states of shape `[t, d_model]`. At each layer
/// they pass through that layer's frozen K/V projections and are prepended
/// to the key/value sequences; they produce no output positions.
#[derive(Debug, Clone)]
pub struct PrefixSet<E: Element = f32> {
    pub blocks: Vec<Tensor<E>>,
}

impl<E: Element> PrefixSet<E> {
    pub fn init(config: &ModelConfig, t: usize, seed: u64) -> Result<Self> {
        if t == 0 {
            return Err(Error::InvalidConfig("prefix needs t >= 1".into()));
        }
        let blocks = (0..config.n_layers)
            .map(|i| normal_tensor(&[t, config.d_model], seed.wrapping_add(i as u64)))
            .collect();
        Ok(PrefixSet { blocks })
    }

    pub fn t(&self) -> usize {
        self.blocks.first().map(|b| b.dim(0)).unwrap_or(0)
    }

    pub fn cast<F: Element>(&self) -> PrefixSet<F> {
        PrefixSet {
            blocks: self.blocks.iter().map(|b| b.cast()).collect(),
        }
    }
}

fn normal_tensor<E: Element>(shape: &[usize], seed: u64) -> Tensor<E> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f64, super::model::INIT_STD).expect("valid std");
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| E::from_f64(normal.sample(&mut rng))).collect(),
    )
    .expect("shape/data consistent")
}

/// Prepend a bank's prompt rows ahead of the input embeddings. Returns the
/// combined row matrix and the segment layout describing it.
pub fn prepend_prompts(
    prompts: &[&SoftPrompt],
    input: &Tensor<f32>,
) -> Result<(Tensor<f32>, SegmentLayout)> {
    if input.rank() != 2 || input.dim(0) == 0 {
        return Err(Error::InvalidLayout("input must be a nonempty row matrix".into()));
    }
    let d = input.dim(1);
    let mut lens = Vec::with_capacity(prompts.len());
    for p in prompts {
        if p.width() != d {
            return Err(Error::ShapeMismatch(format!(
                "prompt width {} vs input width {d}",
                p.width()
            )));
        }
        lens.push(p.len());
    }
    let layout = SegmentLayout::with_prompts(&lens, input.dim(0))?;
    let mut data = Vec::with_capacity(layout.total_len() * d);
    for p in prompts {
        data.extend_from_slice(p.embedding.data());
    }
    data.extend_from_slice(input.data());
    Ok((Tensor::new(vec![layout.total_len(), d], data)?, layout))
}

/// Method whose trainable size is being reported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamQuery {
    /// single soft prompt of t tokens at width d
    Prompt { t: usize, d: usize },
    /// a dynamic bank accounted as the sum of its prompts' tokens
    Idp { t: usize, d: usize },
    /// per-layer prefix hidden states
    Prefix { layers: usize, t: usize, d: usize },
    /// low-rank deltas on Q,K,V,O and both feed-forward matrices
    Lora {
        layers: usize,
        r: usize,
        d_act: usize,
        d_inter: usize,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamReport {
    pub kind: String,
    pub config: String,
    /// closed-form count, exact integer arithmetic
    pub exact: u64,
    /// count truncated to one decimal in millions, as method tables print it
    pub millions: f64,
    /// count of the concretely instantiated tensors, when it differs from
    /// the closed form (low-rank feed-forward pairs are rectangular)
    pub shape_exact: Option<u64>,
    pub notes: Option<String>,
}

pub fn millions_label(exact: u64) -> f64 {
    (exact / 100_000) as f64 / 10.0
}

pub fn count_params(query: &ParamQuery) -> Result<ParamReport> {
    let positive = |vals: &[usize]| -> Result<()> {
        if vals.iter().any(|&v| v == 0) {
            Err(Error::InvalidConfig("accounting needs positive extents".into()))
        } else {
            Ok(())
        }
    };
    let report = match *query {
        ParamQuery::Prompt { t, d } => {
            positive(&[t, d])?;
            let exact = (t as u64) * (d as u64);
            ParamReport {
                kind: "prompt".into(),
                config: format!("t={t}, d={d}"),
                exact,
                millions: millions_label(exact),
                shape_exact: None,
                notes: None,
            }
        }
        ParamQuery::Idp { t, d } => {
            positive(&[t, d])?;
            let exact = (t as u64) * (d as u64);
            ParamReport {
                kind: "idp".into(),
                config: format!("t={t}, d={d}"),
                exact,
                millions: millions_label(exact),
                shape_exact: None,
                notes: Some("bank cost is the sum of its prompts; nothing else is added".into()),
            }
        }
        ParamQuery::Prefix { layers, t, d } => {
            positive(&[layers, t, d])?;
            let exact = (layers as u64) * (t as u64) * (d as u64);
            ParamReport {
                kind: "prefix".into(),
                config: format!("L={layers}, t={t}, d={d}"),
                exact,
                millions: millions_label(exact),
                shape_exact: None,
                notes: None,
            }
        }
        ParamQuery::Lora {
            layers,
            r,
            d_act,
            d_inter,
        } => {
            positive(&[layers, r, d_act, d_inter])?;
            let (l, r64, da, di) = (layers as u64, r as u64, d_act as u64, d_inter as u64);
            let exact = l * (8 * da * r64 + 4 * di * r64);
            // four square projections: 2*d_act*r each; rectangular
            // feed-forward pairs: r*(d_act+d_inter) each
            let shape_exact = l * (8 * da * r64 + 2 * r64 * (da + di));
            ParamReport {
                kind: "lora".into(),
                config: format!("L={layers}, r={r}, d_act={d_act}, d_inter={d_inter}"),
                exact,
                millions: millions_label(exact),
                shape_exact: Some(shape_exact),
                notes: (shape_exact != exact).then(|| {
                    "closed form assumes square feed-forward targets; instantiated tensors differ"
                        .into()
                }),
            }
        }
    };
    Ok(report)
}
