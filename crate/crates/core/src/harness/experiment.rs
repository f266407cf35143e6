//! Recovery and routing study: pretrain, quantize, tune adapters on the
//! damaged model, then compare recovery methods and prompt routing against a
//! domain oracle.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::adapters::PromptBank;
use crate::compress::{compress_model, CompressOp, QuantSpec};
use crate::diag::{mc_accuracy, method_forward, perplexity, EvalMethod, McItem};
use crate::error::{Error, Result};
use crate::harness::task::{gen_corpus, Corpus, TaskSpec};
use crate::harness::train::{
    pretrain_base, tune_adapter, tune_from, vocab_prompt, AdapterKind, SpanMode, TrainConfig,
    TunedAdapter,
};
use crate::idp::{build_prompt_cache, SelectionConfig};
use crate::model::{Model, ModelConfig};
use crate::tensor::MacCounter;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub task: TaskSpec,
    pub pretrain: TrainConfig,
    pub tune: TrainConfig,
    /// length of each tuned soft prompt, shared and per-domain
    pub prompt_len: usize,
    pub lora_rank: usize,
    /// bit width used for the recovery study
    pub quant_bits: u8,
    /// widths swept for the degradation ladder, most generous first
    pub bits_ladder: Vec<u8>,
}

// The defaults sit deliberately close to the model's memorization capacity:
// with slack capacity 3-bit rounding is absorbed and there is no recovery
// story to study.
impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig {
                d_model: 24,
                n_heads: 2,
                n_layers: 2,
                d_ff: 96,
                vocab_size: 256,
                max_seq_len: 128,
                seed: 0,
            },
            task: TaskSpec {
                facts_per_domain: 128,
                subjects_per_domain: 16,
                relations_per_domain: 8,
                objects_per_domain: 16,
                options_per_item: 8,
                reviews_per_doc: 1,
                intruders_per_doc: 1,
                warmup_facts_per_item: 0,
                doc_rounds: 6,
                ..TaskSpec::default()
            },
            pretrain: TrainConfig {
                steps: 2500,
                batch: 16,
                lr: 3e-3,
                lr_final_fraction: 0.1,
                weight_decay: 0.0,
                ..TrainConfig::default()
            },
            tune: TrainConfig {
                steps: 700,
                batch: 16,
                lr: 1e-2,
                lr_final_fraction: 0.1,
                weight_decay: 0.0,
                ..TrainConfig::default()
            },
            prompt_len: 16,
            lora_rank: 2,
            quant_bits: 3,
            bits_ladder: vec![8, 4, 3, 2],
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.task.validate()?;
        self.pretrain.validate()?;
        self.tune.validate()?;
        if self.task.vocab_size != self.model.vocab_size {
            return Err(Error::InvalidConfig(
                "task and model disagree on vocab_size".into(),
            ));
        }
        if self.prompt_len == 0 || self.lora_rank == 0 {
            return Err(Error::InvalidConfig("adapter sizes must be positive".into()));
        }
        QuantSpec::new(self.quant_bits)?;
        for &b in &self.bits_ladder {
            QuantSpec::new(b)?;
        }
        Ok(())
    }
}

/// Accuracy, perplexity, and cost figures for one inference policy.
#[derive(Debug, Clone, Serialize)]
pub struct MethodOutcome {
    pub method: String,
    pub accuracy: f64,
    pub per_domain: BTreeMap<usize, f64>,
    pub perplexity: Option<f64>,
    pub adapter_params: u64,
    /// prefill multiply-accumulates on a fixed probe context
    pub prefill_macs: u64,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct LadderPoint {
    pub bits: u8,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub base: MethodOutcome,
    pub compressed: MethodOutcome,
    pub prompt: MethodOutcome,
    pub lora: MethodOutcome,
    pub idp: MethodOutcome,
    pub concat: MethodOutcome,
    pub oracle: MethodOutcome,
    pub ladder: Vec<LadderPoint>,
}

impl SeedOutcome {
    pub fn rows(&self) -> Vec<&MethodOutcome> {
        vec![
            &self.base,
            &self.compressed,
            &self.prompt,
            &self.lora,
            &self.idp,
            &self.concat,
            &self.oracle,
        ]
    }
}

/// Seed-mean accuracies plus the recovery fractions the study reports.
#[derive(Debug, Clone, Serialize)]
pub struct StudySummary {
    pub seeds: Vec<u64>,
    pub base: f64,
    pub compressed: f64,
    pub prompt: f64,
    pub lora: f64,
    pub idp: f64,
    pub concat: f64,
    pub oracle: f64,
    /// base minus compressed, in accuracy points
    pub gap: f64,
    pub prompt_recovery: f64,
    pub lora_recovery: f64,
    pub ladder: Vec<LadderPoint>,
}

/// splitmix64-style stream split so each stage gets an independent seed
pub fn mix_seed(base: u64, salt: u64) -> u64 {
    let mut z = base
        .wrapping_add(salt.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn probe_doc(corpus: &Corpus) -> &[u32] {
    &corpus.docs[0]
}

fn outcome(
    model: &Model,
    method: &EvalMethod,
    label: &str,
    items: &[McItem],
    docs: &[Vec<u32>],
    adapter_params: u64,
    probe: &[u32],
) -> Result<MethodOutcome> {
    let eval = mc_accuracy(model, method, items, false)?;
    let ppl = perplexity(model, method, docs)?;
    let macs = MacCounter::new();
    method_forward(model, method, probe, false, Some(&macs))?;
    Ok(MethodOutcome {
        method: label.to_string(),
        accuracy: eval.accuracy,
        per_domain: eval.per_domain,
        perplexity: Some(ppl),
        adapter_params,
        prefill_macs: macs.get(),
    })
}

/// Evaluates each item with the prompt tuned on its own domain. This is the
/// routing upper bound: selection cannot beat ground-truth assignment of the
/// same prompts.
fn oracle_outcome(model: &Model, bank: &PromptBank, corpus: &Corpus) -> Result<MethodOutcome> {
    let mut correct = 0usize;
    let mut total = 0usize;
    let mut per_domain = BTreeMap::new();
    let macs = MacCounter::new();
    for domain in 0..corpus.spec.n_domains {
        let items = corpus.domain_items(domain);
        if items.is_empty() {
            continue;
        }
        let method = EvalMethod::Prompt(bank.get(domain));
        let eval = mc_accuracy(model, &method, &items, false)?;
        correct += (eval.accuracy * items.len() as f64).round() as usize;
        total += items.len();
        per_domain.insert(domain, eval.accuracy);
        if domain == 0 {
            method_forward(model, &method, probe_doc(corpus), false, Some(&macs))?;
        }
    }
    if total == 0 {
        return Err(Error::InvalidConfig("no items to score".into()));
    }
    Ok(MethodOutcome {
        method: "oracle".to_string(),
        accuracy: correct as f64 / total as f64,
        per_domain,
        perplexity: None,
        adapter_params: bank
            .prompts()
            .iter()
            .map(|p| p.embedding.len() as u64)
            .sum(),
        prefill_macs: macs.get(),
    })
}

/// One full pass for one seed: generate data, pretrain, sweep the quant
/// ladder, tune every recovery method on the damaged model, evaluate all
/// policies on the recall items.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedOutcome> {
    cfg.validate()?;
    let corpus = gen_corpus(&cfg.task, mix_seed(seed, 1))?;
    let probe = probe_doc(&corpus).to_vec();

    let mut model_cfg = cfg.model;
    model_cfg.seed = mix_seed(seed, 2);
    let mut pre = cfg.pretrain;
    pre.seed = mix_seed(seed, 3);
    let (base_model, _) = pretrain_base(&model_cfg, &pre, &corpus.docs)?;

    let mut ladder = Vec::with_capacity(cfg.bits_ladder.len());
    let mut at_study_bits = None;
    for &bits in &cfg.bits_ladder {
        let op = CompressOp::Quantize(QuantSpec::new(bits)?);
        let (m, _) = compress_model(&base_model, &op)?;
        let eval = mc_accuracy(&m, &EvalMethod::Plain, &corpus.items, false)?;
        ladder.push(LadderPoint {
            bits,
            accuracy: eval.accuracy,
        });
        if bits == cfg.quant_bits {
            at_study_bits = Some(m);
        }
    }
    let compressed_model = match at_study_bits {
        Some(m) => m,
        None => {
            let op = CompressOp::Quantize(QuantSpec::new(cfg.quant_bits)?);
            compress_model(&base_model, &op)?.0
        }
    };

    // Recovery adapters train on fact triples scored at the answer position,
    // the same recall format the quiz items use; chained pretraining docs are
    // the wrong input distribution for a 2-token quiz context.
    let recall_docs = corpus.fact_docs(None);
    let mut tune = cfg.tune;
    tune.seed = mix_seed(seed, 4);
    let (single_prompt, _) = tune_adapter(
        &compressed_model,
        AdapterKind::Prompt {
            len: cfg.prompt_len,
        },
        &tune,
        &recall_docs,
        "mixed",
        SpanMode::Tail,
    )?;

    let mut domain_prompts = Vec::with_capacity(cfg.task.n_domains);
    for domain in 0..cfg.task.n_domains {
        let mut t = cfg.tune;
        t.seed = mix_seed(seed, 5 + domain as u64);
        // Domain prompts warm-start from embedding rows of their own fact
        // triples. The prompt then reads as in-domain context: matching quiz
        // queries attend it sharply (the review pathway), which is the signal
        // bank selection keys on, while Gaussian-init prompts route no better
        // than chance.
        let docs = corpus.fact_docs(Some(domain));
        let triple_stream: Vec<u32> = corpus
            .facts
            .iter()
            .filter(|f| f.domain == domain)
            .flat_map(|f| f.doc())
            .collect();
        let tokens: Vec<u32> = (0..cfg.prompt_len)
            .map(|i| triple_stream[i % triple_stream.len()])
            .collect();
        let init = vocab_prompt(&compressed_model, &tokens, &format!("domain{domain}"))?;
        let (tuned, _) = tune_from(
            &compressed_model,
            TunedAdapter::Prompt(init),
            &t,
            &docs,
            SpanMode::Tail,
        )?;
        let TunedAdapter::Prompt(p) = tuned else {
            unreachable!()
        };
        domain_prompts.push(p);
    }
    let bank = PromptBank::new(domain_prompts)?;
    let store = build_prompt_cache(&compressed_model, &bank)?;

    let mut lora_cfg = cfg.tune;
    lora_cfg.seed = mix_seed(seed, 64);
    let (lora, _) = tune_adapter(
        &compressed_model,
        AdapterKind::Lora {
            rank: cfg.lora_rank,
        },
        &lora_cfg,
        &recall_docs,
        "lora",
        SpanMode::Tail,
    )?;

    let items = &corpus.items;
    let docs = &corpus.docs;
    let base = outcome(
        &base_model,
        &EvalMethod::Plain,
        "base",
        items,
        docs,
        0,
        &probe,
    )?;
    let compressed = outcome(
        &compressed_model,
        &EvalMethod::Plain,
        "compressed",
        items,
        docs,
        0,
        &probe,
    )?;
    let prompt = outcome(
        &compressed_model,
        &single_prompt.as_method(),
        "prompt",
        items,
        docs,
        single_prompt.n_params(),
        &probe,
    )?;
    let lora_row = outcome(
        &compressed_model,
        &lora.as_method(),
        "lora",
        items,
        docs,
        lora.n_params(),
        &probe,
    )?;
    let bank_params: u64 = bank.prompts().iter().map(|p| p.embedding.len() as u64).sum();
    let idp = outcome(
        &compressed_model,
        &EvalMethod::Idp {
            bank: &bank,
            store: Some(&store),
            config: SelectionConfig::default(),
        },
        "idp",
        items,
        docs,
        bank_params,
        &probe,
    )?;
    let concat = outcome(
        &compressed_model,
        &EvalMethod::Concat { bank: &bank },
        "concat",
        items,
        docs,
        bank_params,
        &probe,
    )?;
    let oracle = oracle_outcome(&compressed_model, &bank, &corpus)?;

    Ok(SeedOutcome {
        seed,
        base,
        compressed,
        prompt,
        lora: lora_row,
        idp,
        concat,
        oracle,
        ladder,
    })
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn summarize(outcomes: &[SeedOutcome]) -> Result<StudySummary> {
    if outcomes.is_empty() {
        return Err(Error::InvalidConfig("no seeds to summarize".into()));
    }
    let base = mean(outcomes.iter().map(|o| o.base.accuracy));
    let compressed = mean(outcomes.iter().map(|o| o.compressed.accuracy));
    let prompt = mean(outcomes.iter().map(|o| o.prompt.accuracy));
    let lora = mean(outcomes.iter().map(|o| o.lora.accuracy));
    let gap = base - compressed;
    let recovery = |m: f64| {
        if gap.abs() < f64::EPSILON {
            0.0
        } else {
            (m - compressed) / gap
        }
    };
    let n_ladder = outcomes[0].ladder.len();
    if outcomes.iter().any(|o| o.ladder.len() != n_ladder) {
        return Err(Error::InvalidConfig("ladders differ across seeds".into()));
    }
    let ladder = (0..n_ladder)
        .map(|i| LadderPoint {
            bits: outcomes[0].ladder[i].bits,
            accuracy: mean(outcomes.iter().map(|o| o.ladder[i].accuracy)),
        })
        .collect();
    Ok(StudySummary {
        seeds: outcomes.iter().map(|o| o.seed).collect(),
        base,
        compressed,
        prompt,
        lora,
        idp: mean(outcomes.iter().map(|o| o.idp.accuracy)),
        concat: mean(outcomes.iter().map(|o| o.concat.accuracy)),
        oracle: mean(outcomes.iter().map(|o| o.oracle.accuracy)),
        gap,
        prompt_recovery: recovery(prompt),
        lora_recovery: recovery(lora),
        ladder,
    })
}

pub fn run_study(
    cfg: &ExperimentConfig,
    seeds: &[u64],
) -> Result<(Vec<SeedOutcome>, StudySummary)> {
    let outcomes: Vec<SeedOutcome> = seeds
        .iter()
        .map(|&s| run_seed(cfg, s))
        .collect::<Result<_>>()?;
    let summary = summarize(&outcomes)?;
    Ok((outcomes, summary))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn smoke_config() -> ExperimentConfig {
        ExperimentConfig {
            model: ModelConfig {
                d_model: 24,
                n_heads: 2,
                n_layers: 1,
                d_ff: 32,
                vocab_size: 64,
                max_seq_len: 32,
                seed: 0,
            },
            task: TaskSpec {
                n_domains: 2,
                facts_per_domain: 6,
                subjects_per_domain: 4,
                relations_per_domain: 2,
                objects_per_domain: 6,
                options_per_item: 3,
                facts_per_doc: 2,
                reviews_per_doc: 1,
                intruders_per_doc: 1,
                warmup_facts_per_item: 1,
                doc_rounds: 2,
                vocab_size: 64,
            },
            pretrain: TrainConfig {
                steps: 5,
                batch: 2,
                ..TrainConfig::default()
            },
            tune: TrainConfig {
                steps: 3,
                batch: 2,
                ..TrainConfig::default()
            },
            prompt_len: 3,
            lora_rank: 1,
            quant_bits: 3,
            bits_ladder: vec![4, 3],
        }
    }

    #[test]
    fn mix_seed_is_deterministic_and_spreads() {
        assert_eq!(mix_seed(1, 2), mix_seed(1, 2));
        assert_ne!(mix_seed(1, 2), mix_seed(1, 3));
        assert_ne!(mix_seed(1, 2), mix_seed(2, 2));
    }

    #[test]
    fn run_seed_populates_every_row() {
        let cfg = smoke_config();
        let out = run_seed(&cfg, 0).unwrap();
        assert_eq!(out.ladder.len(), 2);
        for row in out.rows() {
            assert!((0.0..=1.0).contains(&row.accuracy), "{}", row.method);
            assert_eq!(row.per_domain.len(), 2);
        }
        assert!(out.base.prefill_macs > 0);
        assert!(out.idp.prefill_macs > out.compressed.prefill_macs);
        assert!(out.concat.prefill_macs > out.idp.prefill_macs);
        assert_eq!(out.prompt.adapter_params, (3 * 16) as u64);
        assert_eq!(out.oracle.adapter_params, (2 * 3 * 16) as u64);
    }

    #[test]
    fn run_seed_is_deterministic() {
        let cfg = smoke_config();
        let a = run_seed(&cfg, 4).unwrap();
        let b = run_seed(&cfg, 4).unwrap();
        assert_eq!(a.base.accuracy.to_bits(), b.base.accuracy.to_bits());
        assert_eq!(a.idp.accuracy.to_bits(), b.idp.accuracy.to_bits());
        assert_eq!(
            a.prompt.perplexity.unwrap().to_bits(),
            b.prompt.perplexity.unwrap().to_bits()
        );
    }

    #[test]
    fn summary_means_and_recoveries_line_up() {
        let cfg = smoke_config();
        let (outs, summary) = run_study(&cfg, &[0, 1]).unwrap();
        assert_eq!(outs.len(), 2);
        let want_base = (outs[0].base.accuracy + outs[1].base.accuracy) / 2.0;
        assert!((summary.base - want_base).abs() < 1e-12);
        let want_gap = want_base - summary.compressed;
        assert!((summary.gap - want_gap).abs() < 1e-12);
        if summary.gap.abs() > f64::EPSILON {
            let want = (summary.prompt - summary.compressed) / summary.gap;
            assert!((summary.prompt_recovery - want).abs() < 1e-12);
        }
        assert_eq!(summary.ladder.len(), 2);
    }

    #[test]
    fn mismatched_vocab_is_rejected() {
        let mut cfg = smoke_config();
        cfg.task.vocab_size = 72;
        cfg.model.vocab_size = 80;
        assert!(run_seed(&cfg, 0).is_err());
    }
}
