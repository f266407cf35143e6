//! Language-model training loops: base pretraining and adapter tuning on a
//! frozen base, both driven by the reverse-mode tape.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{LoraAdapter, PrefixSet, SoftPrompt};
use crate::autodiff::{Gradients, Tape};
use crate::diag::EvalMethod;
use crate::error::{Error, Result};
use crate::model::diffable::{build_loss, DiffAdapters, ScoredSpan};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// linear decay endpoint as a fraction of `lr`; 1.0 keeps it constant
    pub lr_final_fraction: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch: 8,
            lr: 3e-3,
            lr_final_fraction: 1.0,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::InvalidConfig("batch must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig("lr must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.lr_final_fraction) {
            return Err(Error::InvalidConfig(
                "lr_final_fraction must be in [0, 1]".into(),
            ));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::InvalidConfig(format!("{name} must be in [0, 1)")));
            }
        }
        if !(self.eps > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig("bad eps or weight_decay".into()));
        }
        Ok(())
    }
}

/// Decoupled weight decay: the decay term multiplies the parameter directly
/// and never enters the moment estimates.
pub struct AdamW {
    lr: f32,
    wd: f32,
    b1: f32,
    b2: f32,
    eps: f32,
    t: i32,
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.lr as f32,
            wd: cfg.weight_decay as f32,
            b1: cfg.beta1 as f32,
            b2: cfg.beta2 as f32,
            eps: cfg.eps as f32,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    pub fn set_lr(&mut self, lr: f32) {
        self.lr = lr;
    }

    pub fn update(&mut self, name: &str, param: &mut Tensor<f32>, grad: &Tensor<f32>) -> Result<()> {
        if param.shape() != grad.shape() {
            return Err(Error::ShapeMismatch(format!(
                "gradient shape mismatch for {name}"
            )));
        }
        assert!(self.t >= 1, "begin_step before update");
        let n = param.len();
        let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
        let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
        let bc1 = 1.0 - self.b1.powi(self.t);
        let bc2 = 1.0 - self.b2.powi(self.t);
        let p = param.data_mut();
        let g = grad.data();
        for i in 0..n {
            m[i] = self.b1 * m[i] + (1.0 - self.b1) * g[i];
            v[i] = self.b2 * v[i] + (1.0 - self.b2) * g[i] * g[i];
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            p[i] = p[i] * (1.0 - self.lr * self.wd) - self.lr * mh / (vh.sqrt() + self.eps);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainLog {
    /// mean batch loss per step, recorded before the update
    pub losses: Vec<f64>,
}

fn scheduled_lr(cfg: &TrainConfig, step: usize) -> f64 {
    if cfg.steps <= 1 {
        return cfg.lr;
    }
    let progress = step as f64 / (cfg.steps - 1) as f64;
    cfg.lr * (1.0 - (1.0 - cfg.lr_final_fraction) * progress)
}

fn check_docs(docs: &[Vec<u32>]) -> Result<()> {
    if docs.is_empty() {
        return Err(Error::InvalidConfig("no training docs".into()));
    }
    if docs.iter().any(|d| d.len() < 2) {
        return Err(Error::InvalidConfig("docs must have at least 2 tokens".into()));
    }
    Ok(())
}

fn accumulate(acc: &mut Gradients<f32>, grads: Gradients<f32>) -> Result<()> {
    for (name, g) in grads {
        match acc.get_mut(&name) {
            Some(t) => t.add_inplace(&g)?,
            None => {
                acc.insert(name, g);
            }
        }
    }
    Ok(())
}

/// Trains a freshly initialized model on next-token prediction over `docs`,
/// sampling batches with replacement.
pub fn pretrain_base(
    config: &ModelConfig,
    tcfg: &TrainConfig,
    docs: &[Vec<u32>],
) -> Result<(Model, TrainLog)> {
    tcfg.validate()?;
    check_docs(docs)?;
    let mut model = Model::init(*config)?;
    let mut opt = AdamW::new(tcfg);
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut log = TrainLog::default();
    let none = DiffAdapters {
        prompt: None,
        prefix: None,
        lora: None,
    };
    for step in 0..tcfg.steps {
        let mut acc = Gradients::new();
        let mut loss_sum = 0.0f64;
        for _ in 0..tcfg.batch {
            let doc = &docs[rng.gen_range(0..docs.len())];
            let mut tape = Tape::<f32>::new();
            let (loss, _) = build_loss(
                &mut tape,
                &model.weights,
                &model.config,
                &none,
                doc,
                ScoredSpan::full(doc.len()),
                true,
            )?;
            loss_sum += tape.value(loss).item() as f64;
            accumulate(&mut acc, tape.backward(loss)?)?;
        }
        let mean = loss_sum / tcfg.batch as f64;
        if !mean.is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        log.losses.push(mean);
        let scale = 1.0 / tcfg.batch as f32;
        opt.set_lr(scheduled_lr(tcfg, step) as f32);
        opt.begin_step();
        for (name, mut g) in acc {
            g.scale_inplace(scale);
            let p = model
                .weights
                .get_mut(&name)
                .ok_or_else(|| Error::InvalidConfig(format!("unknown parameter {name}")))?;
            opt.update(&name, p, &g)?;
        }
    }
    Ok((model, log))
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum AdapterKind {
    Prompt { len: usize },
    Prefix { len: usize },
    Lora { rank: usize },
}

/// Which next-token transitions the tuning loss scores.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum SpanMode {
    /// every transition, as in pretraining
    Full,
    /// only the final transition; matches the recall evaluation and keeps
    /// the adapter from spending capacity on irreducible positions
    Tail,
}

impl SpanMode {
    fn span(&self, n: usize) -> ScoredSpan {
        match self {
            SpanMode::Full => ScoredSpan::full(n),
            SpanMode::Tail => ScoredSpan {
                start: n - 2,
                len: 1,
            },
        }
    }
}

/// A trained adapter plus enough identity to evaluate and serialize it.
#[derive(Debug, Clone)]
pub enum TunedAdapter {
    Prompt(SoftPrompt),
    Prefix(PrefixSet<f32>),
    Lora(LoraAdapter<f32>),
}

impl TunedAdapter {
    pub fn as_method(&self) -> EvalMethod<'_> {
        match self {
            TunedAdapter::Prompt(p) => EvalMethod::Prompt(p),
            TunedAdapter::Prefix(p) => EvalMethod::Prefix(p),
            TunedAdapter::Lora(l) => EvalMethod::Lora(l),
        }
    }

    pub fn diff_adapters(&self) -> DiffAdapters<'_, f32> {
        let mut d = DiffAdapters {
            prompt: None,
            prefix: None,
            lora: None,
        };
        match self {
            TunedAdapter::Prompt(p) => d.prompt = Some(&p.embedding),
            TunedAdapter::Prefix(p) => d.prefix = Some(&p.blocks),
            TunedAdapter::Lora(l) => d.lora = Some(l),
        }
        d
    }

    pub fn n_params(&self) -> u64 {
        match self {
            TunedAdapter::Prompt(p) => p.embedding.len() as u64,
            TunedAdapter::Prefix(p) => p.blocks.iter().map(|b| b.len() as u64).sum(),
            TunedAdapter::Lora(l) => l
                .layers
                .iter()
                .flat_map(|layer| {
                    [&layer.q, &layer.k, &layer.v, &layer.o, &layer.up, &layer.down]
                })
                .map(|pair| (pair.a.len() + pair.b.len()) as u64)
                .sum(),
        }
    }

    fn param_mut(&mut self, name: &str) -> Result<&mut Tensor<f32>> {
        let bad = || Error::InvalidConfig(format!("unknown adapter parameter {name}"));
        let mut parts = name.split('.');
        match (self, parts.next()) {
            (TunedAdapter::Prompt(p), Some("prompt")) => Ok(&mut p.embedding),
            (TunedAdapter::Prefix(p), Some("prefix")) => {
                let i: usize = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
                p.blocks.get_mut(i).ok_or_else(bad)
            }
            (TunedAdapter::Lora(l), Some("lora")) => {
                let li: usize = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
                let layer = l.layers.get_mut(li).ok_or_else(bad)?;
                let pair = match parts.next() {
                    Some("q") => &mut layer.q,
                    Some("k") => &mut layer.k,
                    Some("v") => &mut layer.v,
                    Some("o") => &mut layer.o,
                    Some("up") => &mut layer.up,
                    Some("down") => &mut layer.down,
                    _ => return Err(bad()),
                };
                match parts.next() {
                    Some("a") => Ok(&mut pair.a),
                    Some("b") => Ok(&mut pair.b),
                    _ => Err(bad()),
                }
            }
            _ => Err(bad()),
        }
    }
}

/// Tunes a fresh adapter against a frozen base. Zero steps returns the
/// initialization untouched.
pub fn tune_adapter(
    model: &Model,
    kind: AdapterKind,
    tcfg: &TrainConfig,
    docs: &[Vec<u32>],
    id: &str,
    span: SpanMode,
) -> Result<(TunedAdapter, TrainLog)> {
    let init = match kind {
        AdapterKind::Prompt { len } => {
            let mut p = SoftPrompt::init(id, len, model.config.d_model, tcfg.seed)?;
            p.meta.dataset = id.to_string();
            TunedAdapter::Prompt(p)
        }
        AdapterKind::Prefix { len } => {
            TunedAdapter::Prefix(PrefixSet::init(&model.config, len, tcfg.seed)?)
        }
        AdapterKind::Lora { rank } => {
            TunedAdapter::Lora(LoraAdapter::init(&model.config, rank, tcfg.seed)?)
        }
    };
    tune_from(model, init, tcfg, docs, span)
}

/// Warm-starts a soft prompt from the embedding rows of real tokens, the
/// usual alternative to Gaussian init. A prompt seeded this way keeps pulling
/// attention from inputs in the same token neighbourhood, which is exactly
/// the signal bank selection keys on.
pub fn vocab_prompt(model: &Model, tokens: &[u32], id: &str) -> Result<SoftPrompt> {
    if tokens.is_empty() {
        return Err(Error::InvalidConfig("prompt needs >= 1 token".into()));
    }
    let d = model.config.d_model;
    let mut data = Vec::with_capacity(tokens.len() * d);
    for &t in tokens {
        if t as usize >= model.config.vocab_size {
            return Err(Error::InvalidConfig(format!(
                "prompt init token {t} outside vocab of {}",
                model.config.vocab_size
            )));
        }
        data.extend_from_slice(model.weights.embed.row(t as usize));
    }
    let mut p = SoftPrompt {
        id: id.to_string(),
        embedding: Tensor::new(vec![tokens.len(), d], data)?,
        meta: Default::default(),
    };
    p.meta.dataset = id.to_string();
    Ok(p)
}

/// Tunes an adapter the caller has already initialised. `tune_adapter` is the
/// random-init convenience wrapper over this.
pub fn tune_from(
    model: &Model,
    init: TunedAdapter,
    tcfg: &TrainConfig,
    docs: &[Vec<u32>],
    span: SpanMode,
) -> Result<(TunedAdapter, TrainLog)> {
    tcfg.validate()?;
    check_docs(docs)?;
    let mut tuned = init;
    let mut opt = AdamW::new(tcfg);
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut log = TrainLog::default();
    for step in 0..tcfg.steps {
        let mut acc = Gradients::new();
        let mut loss_sum = 0.0f64;
        for _ in 0..tcfg.batch {
            let doc = &docs[rng.gen_range(0..docs.len())];
            let mut tape = Tape::<f32>::new();
            let adapters = tuned.diff_adapters();
            let (loss, _) = build_loss(
                &mut tape,
                &model.weights,
                &model.config,
                &adapters,
                doc,
                span.span(doc.len()),
                false,
            )?;
            loss_sum += tape.value(loss).item() as f64;
            accumulate(&mut acc, tape.backward(loss)?)?;
        }
        let mean = loss_sum / tcfg.batch as f64;
        if !mean.is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        log.losses.push(mean);
        let scale = 1.0 / tcfg.batch as f32;
        opt.set_lr(scheduled_lr(tcfg, step) as f32);
        opt.begin_step();
        for (name, mut g) in acc {
            g.scale_inplace(scale);
            opt.update(&name, tuned.param_mut(&name)?, &g)?;
        }
    }
    if let TunedAdapter::Prompt(p) = &mut tuned {
        p.meta.steps = tcfg.steps as u64;
    }
    Ok((tuned, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            d_model: 32,
            n_heads: 2,
            n_layers: 2,
            d_ff: 64,
            vocab_size: 80,
            max_seq_len: 64,
            seed: 5,
        }
    }

    fn tiny_docs() -> Vec<Vec<u32>> {
        // a fixed functional map so memorization is possible
        (0..16u32).map(|s| vec![s, 16 + s % 4, 20 + (s * 7) % 11]).collect()
    }

    #[test]
    fn adamw_single_step_matches_hand_math() {
        let cfg = TrainConfig {
            lr: 0.1,
            weight_decay: 0.1,
            ..TrainConfig::default()
        };
        let mut opt = AdamW::new(&cfg);
        let mut p = Tensor::new(vec![1], vec![1.0f32]).unwrap();
        let g = Tensor::new(vec![1], vec![0.5f32]).unwrap();
        opt.begin_step();
        opt.update("w", &mut p, &g).unwrap();
        // m_hat = 0.5, v_hat = 0.25, decay factor 0.99
        let want = 1.0 * (1.0 - 0.1 * 0.1) - 0.1 * 0.5 / (0.25f32.sqrt() + 1e-8);
        assert!((p.data()[0] - want).abs() < 1e-5, "{} vs {want}", p.data()[0]);
    }

    #[test]
    fn adamw_rejects_shape_mismatch() {
        let mut opt = AdamW::new(&TrainConfig::default());
        let mut p = Tensor::new(vec![2], vec![1.0f32, 2.0]).unwrap();
        let g = Tensor::new(vec![1], vec![0.5f32]).unwrap();
        opt.begin_step();
        assert!(opt.update("w", &mut p, &g).is_err());
    }

    #[test]
    fn pretrain_reduces_loss_and_is_deterministic() {
        let cfg = tiny_config();
        let tcfg = TrainConfig {
            steps: 40,
            batch: 4,
            lr: 5e-3,
            seed: 1,
            ..TrainConfig::default()
        };
        let docs = tiny_docs();
        let (m1, log1) = pretrain_base(&cfg, &tcfg, &docs).unwrap();
        let (m2, log2) = pretrain_base(&cfg, &tcfg, &docs).unwrap();
        assert_eq!(log1.losses, log2.losses);
        let a = m1.weights.layers[0].wq.data();
        let b = m2.weights.layers[0].wq.data();
        assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        let head: f64 = log1.losses[..5].iter().sum::<f64>() / 5.0;
        let tail: f64 = log1.losses[log1.losses.len() - 5..].iter().sum::<f64>() / 5.0;
        assert!(tail < head, "loss did not drop: head {head} tail {tail}");
    }

    #[test]
    fn zero_step_tune_returns_initialization_bitwise() {
        let cfg = tiny_config();
        let model = Model::init(cfg).unwrap();
        let tcfg = TrainConfig {
            steps: 0,
            seed: 9,
            ..TrainConfig::default()
        };
        let (tuned, log) = tune_adapter(
            &model,
            AdapterKind::Prompt { len: 4 },
            &tcfg,
            &tiny_docs(),
            "d0",
            SpanMode::Full,
        )
        .unwrap();
        assert!(log.losses.is_empty());
        let fresh = SoftPrompt::init("d0", 4, cfg.d_model, 9).unwrap();
        let TunedAdapter::Prompt(p) = tuned else { panic!() };
        assert!(p
            .embedding
            .data()
            .iter()
            .zip(fresh.embedding.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(p.meta.dataset, "d0");
    }

    #[test]
    fn prompt_tuning_reduces_loss_without_touching_base() {
        let cfg = tiny_config();
        let model = Model::init(cfg).unwrap();
        let before: Vec<u32> = model.weights.embed.data().iter().map(|x| x.to_bits()).collect();
        let tcfg = TrainConfig {
            steps: 40,
            batch: 8,
            lr: 2e-2,
            seed: 3,
            ..TrainConfig::default()
        };
        let (_, log) = tune_adapter(
            &model,
            AdapterKind::Prompt { len: 6 },
            &tcfg,
            &tiny_docs(),
            "mix",
            SpanMode::Full,
        )
        .unwrap();
        let head: f64 = log.losses[..5].iter().sum::<f64>() / 5.0;
        let tail: f64 = log.losses[log.losses.len() - 5..].iter().sum::<f64>() / 5.0;
        assert!(tail < head, "loss did not drop: head {head} tail {tail}");
        let after: Vec<u32> = model.weights.embed.data().iter().map(|x| x.to_bits()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn each_adapter_kind_trains() {
        let cfg = tiny_config();
        let model = Model::init(cfg).unwrap();
        let tcfg = TrainConfig {
            steps: 8,
            batch: 2,
            lr: 1e-2,
            seed: 2,
            ..TrainConfig::default()
        };
        for kind in [
            AdapterKind::Prompt { len: 3 },
            AdapterKind::Prefix { len: 3 },
            AdapterKind::Lora { rank: 2 },
        ] {
            let (tuned, log) = tune_adapter(&model, kind, &tcfg, &tiny_docs(), "k", SpanMode::Tail).unwrap();
            assert_eq!(log.losses.len(), 8);
            assert!(tuned.n_params() > 0);
            if let TunedAdapter::Lora(l) = &tuned {
                assert!(!l.is_identity(), "training must move the b matrices");
            }
        }
    }

    #[test]
    fn unknown_parameter_names_are_rejected() {
        let cfg = tiny_config();
        let mut tuned =
            TunedAdapter::Prefix(PrefixSet::init(&cfg, 2, 0).unwrap());
        assert!(tuned.param_mut("prefix.9").is_err());
        assert!(tuned.param_mut("prompt").is_err());
        let mut lora = TunedAdapter::Lora(LoraAdapter::init(&cfg, 1, 0).unwrap());
        assert!(lora.param_mut("lora.0.z.a").is_err());
        assert!(lora.param_mut("lora.0.q.c").is_err());
        assert!(lora.param_mut("lora.0.q.a").is_ok());
    }
}
