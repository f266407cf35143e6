//! Diagnostics: cosine probes over forward traces, perplexity, and
//! multiple-choice scoring, all parameterized by an inference-time method so
//! every recovery variant is measured through one code path.

use crate::adapters::{prepend_prompts, LoraAdapter, PrefixSet, PromptBank, SoftPrompt};
use crate::error::{Error, Result};
use crate::idp::{concat_forward, idp_forward, PromptKvStore, SelectionConfig};
use crate::model::forward::{Feed, ForwardOut, ForwardReq};
use crate::model::layout::AttentionPolicy;
use crate::model::trace::ForwardTrace;
use crate::model::Model;
use crate::tensor::{embed, log_softmax_rows, MacCounter};
use std::collections::BTreeMap;

/// Cosine similarity with f64 accumulation. A zero vector on either side
/// yields 0 rather than NaN.
pub fn cosine(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!(
            "cosine over {} vs {} elements",
            a.len(),
            b.len()
        )));
    }
    let a64: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    let b64: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    Ok(cosine64(&a64, &b64))
}

fn cosine64(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na.sqrt() * nb.sqrt())
}

#[derive(Debug, Clone)]
pub struct LayerSimilarity {
    /// per-layer mean cosine between attention rows, input queries against
    /// input keys only, renormalized over the retained columns
    pub attention: Vec<f64>,
    /// per-layer mean cosine between residual vectors at input positions
    pub activation: Vec<f64>,
}

pub fn similarity_csv(sim: &LayerSimilarity) -> String {
    let mut s = String::from("layer,attn_cos,act_cos\n");
    for (i, (a, x)) in sim.attention.iter().zip(&sim.activation).enumerate() {
        s.push_str(&format!("{i},{a},{x}\n"));
    }
    s
}

struct InputView {
    /// first input row in the trace's computed-row space
    row_start: usize,
    /// input columns in the trace's absolute column space
    col_start: usize,
    len: usize,
}

fn input_view(trace: &ForwardTrace) -> Result<InputView> {
    let ir = trace
        .layout
        .input_range()
        .ok_or_else(|| Error::InvalidLayout("trace has no input segment".into()))?;
    Ok(InputView {
        row_start: ir.start - trace.q_start,
        col_start: trace.extra_cols + ir.start,
        len: ir.len(),
    })
}

/// Layer-by-layer comparison of two runs over the same input tokens. Prompt
/// and prefix positions are excluded on both sides, so runs with different
/// layouts align on the shared input span.
pub fn layer_similarity(a: &ForwardTrace, b: &ForwardTrace) -> Result<LayerSimilarity> {
    if a.layers.len() != b.layers.len() {
        return Err(Error::ShapeMismatch(format!(
            "traces cover {} vs {} layers",
            a.layers.len(),
            b.layers.len()
        )));
    }
    let va = input_view(a)?;
    let vb = input_view(b)?;
    if va.len != vb.len {
        return Err(Error::ShapeMismatch(format!(
            "traces cover {} vs {} input positions",
            va.len, vb.len
        )));
    }
    let n = va.len;
    let mut attention = Vec::with_capacity(a.layers.len());
    let mut activation = Vec::with_capacity(a.layers.len());
    for (la, lb) in a.layers.iter().zip(&b.layers) {
        let mut attn_sum = 0.0;
        let mut act_sum = 0.0;
        for i in 0..n {
            let ra = retained_row(la.attn_mean.row(va.row_start + i), va.col_start, n);
            let rb = retained_row(lb.attn_mean.row(vb.row_start + i), vb.col_start, n);
            attn_sum += cosine64(&ra, &rb);
            act_sum += cosine(
                la.residual.row(va.row_start + i),
                lb.residual.row(vb.row_start + i),
            )?;
        }
        attention.push(attn_sum / n as f64);
        activation.push(act_sum / n as f64);
    }
    Ok(LayerSimilarity {
        attention,
        activation,
    })
}

/// Input-key slice of a head-averaged attention row, renormalized to sum to
/// one over what was kept. Rows that kept no mass stay all-zero.
fn retained_row(row: &[f32], col_start: usize, n: usize) -> Vec<f64> {
    let mut out: Vec<f64> = row[col_start..col_start + n]
        .iter()
        .map(|&v| v as f64)
        .collect();
    let sum: f64 = out.iter().sum();
    if sum > 0.0 {
        for v in out.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// One inference-time policy per recovery method under study.
pub enum EvalMethod<'a> {
    Plain,
    Prompt(&'a SoftPrompt),
    Prefix(&'a PrefixSet<f32>),
    Lora(&'a LoraAdapter<f32>),
    Idp {
        bank: &'a PromptBank,
        store: Option<&'a PromptKvStore>,
        config: SelectionConfig,
    },
    /// whole bank prepended with full mutual attention, no selection
    Concat { bank: &'a PromptBank },
}

impl<'a> EvalMethod<'a> {
    pub fn label(&self) -> &'static str {
        match self {
            EvalMethod::Plain => "plain",
            EvalMethod::Prompt(_) => "prompt",
            EvalMethod::Prefix(_) => "prefix",
            EvalMethod::Lora(_) => "lora",
            EvalMethod::Idp { .. } => "idp",
            EvalMethod::Concat { .. } => "concat",
        }
    }
}

pub fn method_forward(
    model: &Model,
    method: &EvalMethod,
    tokens: &[u32],
    capture_trace: bool,
    macs: Option<&MacCounter>,
) -> Result<ForwardOut> {
    match method {
        EvalMethod::Plain => {
            let mut req = ForwardReq::tokens(tokens);
            req.capture_trace = capture_trace;
            req.macs = macs;
            model.forward(&req)
        }
        EvalMethod::Prompt(p) => {
            let input = embed(tokens, &model.weights.embed)?;
            let (rows, layout) = prepend_prompts(&[p], &input)?;
            let mut req = ForwardReq::new(Feed::Embeddings {
                rows: &rows,
                layout,
            });
            req.policy = AttentionPolicy::PromptIsolated;
            req.capture_trace = capture_trace;
            req.macs = macs;
            model.forward(&req)
        }
        EvalMethod::Prefix(p) => {
            let mut req = ForwardReq::tokens(tokens);
            req.prefix = Some(p);
            req.capture_trace = capture_trace;
            req.macs = macs;
            model.forward(&req)
        }
        EvalMethod::Lora(a) => {
            let mut req = ForwardReq::tokens(tokens);
            req.lora = Some(a);
            req.capture_trace = capture_trace;
            req.macs = macs;
            model.forward(&req)
        }
        EvalMethod::Idp {
            bank,
            store,
            config,
        } => idp_forward(model, tokens, bank, *store, config, capture_trace, macs),
        EvalMethod::Concat { bank } => concat_forward(model, tokens, bank, capture_trace, macs),
    }
}

/// exp of the mean next-token NLL over every position with a successor.
/// Prompt and prefix positions are structurally unscored: logits only cover
/// input rows.
pub fn perplexity(model: &Model, method: &EvalMethod, docs: &[Vec<u32>]) -> Result<f64> {
    let mut total = 0.0f64;
    let mut count = 0usize;
    for doc in docs {
        if doc.len() < 2 {
            continue;
        }
        let out = method_forward(model, method, doc, false, None)?;
        let logp = log_softmax_rows(&out.logits)?;
        for t in 0..doc.len() - 1 {
            total -= logp.at2(t, doc[t + 1] as usize) as f64;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::InvalidConfig(
            "no scorable positions: every doc is shorter than 2 tokens".into(),
        ));
    }
    Ok((total / count as f64).exp())
}

/// One recall item: a context, candidate continuations, the correct index,
/// and a domain tag for per-domain aggregation.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct McItem {
    pub context: Vec<u32>,
    pub options: Vec<Vec<u32>>,
    pub answer: usize,
    pub domain: usize,
}

#[derive(Debug, Clone)]
pub struct EvalResult {
    /// filled by callers that also run a perplexity pass
    pub perplexity: Option<f64>,
    pub accuracy: f64,
    pub per_domain: BTreeMap<usize, f64>,
    pub n_items: usize,
    pub predictions: Vec<usize>,
}

/// Picks each item's option by summed log-probability of the option tokens
/// given the context. Ties go to the lowest index. `length_norm` divides each
/// score by its option length; it defaults off everywhere in this crate.
pub fn mc_accuracy(
    model: &Model,
    method: &EvalMethod,
    items: &[McItem],
    length_norm: bool,
) -> Result<EvalResult> {
    if items.is_empty() {
        return Err(Error::InvalidConfig("no items to score".into()));
    }
    let mut predictions = Vec::with_capacity(items.len());
    let mut correct = 0usize;
    let mut by_domain: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for item in items {
        if item.context.is_empty() || item.options.is_empty() || item.answer >= item.options.len()
        {
            return Err(Error::InvalidConfig("malformed recall item".into()));
        }
        let mut best = 0usize;
        let mut best_score = f64::NEG_INFINITY;
        for (oi, option) in item.options.iter().enumerate() {
            if option.is_empty() {
                return Err(Error::InvalidConfig("empty option".into()));
            }
            let mut seq = item.context.clone();
            seq.extend_from_slice(option);
            let out = method_forward(model, method, &seq, false, None)?;
            let logp = log_softmax_rows(&out.logits)?;
            let mut score = 0.0f64;
            for (t, &tok) in option.iter().enumerate() {
                score += logp.at2(item.context.len() - 1 + t, tok as usize) as f64;
            }
            if length_norm {
                score /= option.len() as f64;
            }
            if score > best_score {
                best_score = score;
                best = oi;
            }
        }
        predictions.push(best);
        let e = by_domain.entry(item.domain).or_insert((0, 0));
        e.1 += 1;
        if best == item.answer {
            correct += 1;
            e.0 += 1;
        }
    }
    let per_domain = by_domain
        .into_iter()
        .map(|(d, (c, t))| (d, c as f64 / t as f64))
        .collect();
    Ok(EvalResult {
        perplexity: None,
        accuracy: correct as f64 / items.len() as f64,
        per_domain,
        n_items: items.len(),
        predictions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::tensor::Tensor;
    use std::f64::consts::FRAC_1_SQRT_2;

    fn cfg() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_heads: 2,
            n_layers: 2,
            d_ff: 32,
            vocab_size: 13,
            max_seq_len: 64,
            seed: 3,
        }
    }

    fn model() -> Model {
        Model::init(cfg()).unwrap()
    }

    fn uniform_model() -> Model {
        let mut m = model();
        m.weights.embed = Tensor::zeros(&[13, 16]);
        m
    }

    #[test]
    fn cosine_hand_cases() {
        assert!((cosine(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((c - FRAC_1_SQRT_2).abs() < 1e-12, "{c}");
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!(cosine(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn self_similarity_is_one() {
        let m = model();
        let tokens = [1u32, 5, 2, 9];
        let trace = method_forward(&m, &EvalMethod::Plain, &tokens, true, None)
            .unwrap()
            .trace
            .unwrap();
        let sim = layer_similarity(&trace, &trace).unwrap();
        for (a, x) in sim.attention.iter().zip(&sim.activation) {
            assert!((a - 1.0).abs() < 1e-6, "attention {a}");
            assert!((x - 1.0).abs() < 1e-6, "activation {x}");
        }
    }

    #[test]
    fn similarity_aligns_runs_with_different_layouts() {
        let m = model();
        let tokens = [1u32, 5, 2, 9];
        let base = method_forward(&m, &EvalMethod::Plain, &tokens, true, None)
            .unwrap()
            .trace
            .unwrap();
        let p = SoftPrompt::init("p", 3, 16, 4).unwrap();
        let bank = PromptBank::new(vec![p]).unwrap();
        let variant = method_forward(
            &m,
            &EvalMethod::Idp {
                bank: &bank,
                store: None,
                config: SelectionConfig::default(),
            },
            &tokens,
            true,
            None,
        )
        .unwrap()
        .trace
        .unwrap();
        let sim = layer_similarity(&base, &variant).unwrap();
        assert_eq!(sim.attention.len(), 2);
        for (a, x) in sim.attention.iter().zip(&sim.activation) {
            assert!(a.is_finite() && *a <= 1.0 + 1e-9 && *a >= -1.0 - 1e-9);
            assert!(x.is_finite());
        }
        let csv = similarity_csv(&sim);
        assert!(csv.starts_with("layer,attn_cos,act_cos\n"));
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn mismatched_traces_are_rejected() {
        let m = model();
        let a = method_forward(&m, &EvalMethod::Plain, &[1, 2, 3], true, None)
            .unwrap()
            .trace
            .unwrap();
        let b = method_forward(&m, &EvalMethod::Plain, &[1, 2, 3, 4], true, None)
            .unwrap()
            .trace
            .unwrap();
        assert!(layer_similarity(&a, &b).is_err());
    }

    #[test]
    fn uniform_logits_give_vocab_perplexity() {
        let m = uniform_model();
        let docs = vec![vec![1u32, 2, 3, 4], vec![5u32, 6]];
        let ppl = perplexity(&m, &EvalMethod::Plain, &docs).unwrap();
        assert!((ppl - 13.0).abs() < 1e-3, "{ppl}");
    }

    #[test]
    fn perplexity_needs_scorable_positions() {
        let m = model();
        assert!(perplexity(&m, &EvalMethod::Plain, &[vec![1u32]]).is_err());
        let ppl = perplexity(&m, &EvalMethod::Plain, &[vec![1u32, 2, 3]]).unwrap();
        assert!(ppl >= 1.0);
    }

    #[test]
    fn mc_ties_pick_lowest_index() {
        let m = uniform_model();
        let items = vec![McItem {
            context: vec![1, 2],
            options: vec![vec![3], vec![4], vec![5]],
            answer: 1,
            domain: 0,
        }];
        let r = mc_accuracy(&m, &EvalMethod::Plain, &items, false).unwrap();
        assert_eq!(r.predictions, vec![0]);
        assert_eq!(r.accuracy, 0.0);
    }

    #[test]
    fn mc_prediction_tracks_option_permutation() {
        let m = model();
        let base = McItem {
            context: vec![1, 2, 3],
            options: vec![vec![4], vec![5], vec![6]],
            answer: 0,
            domain: 0,
        };
        let r1 = mc_accuracy(&m, &EvalMethod::Plain, &[base.clone()], false).unwrap();
        let swapped = McItem {
            options: vec![vec![6], vec![5], vec![4]],
            ..base
        };
        let r2 = mc_accuracy(&m, &EvalMethod::Plain, &[swapped], false).unwrap();
        let map = |i: usize| 2 - i;
        assert_eq!(r2.predictions[0], map(r1.predictions[0]));
    }

    #[test]
    fn mc_aggregates_per_domain() {
        let m = uniform_model();
        let items = vec![
            McItem {
                context: vec![1],
                options: vec![vec![2], vec![3]],
                answer: 0,
                domain: 0,
            },
            McItem {
                context: vec![1],
                options: vec![vec![2], vec![3]],
                answer: 1,
                domain: 1,
            },
        ];
        let r = mc_accuracy(&m, &EvalMethod::Plain, &items, false).unwrap();
        assert_eq!(r.per_domain[&0], 1.0);
        assert_eq!(r.per_domain[&1], 0.0);
        assert_eq!(r.accuracy, 0.5);
        assert_eq!(r.n_items, 2);
    }

    #[test]
    fn malformed_items_are_rejected() {
        let m = model();
        let bad = McItem {
            context: vec![],
            options: vec![vec![1]],
            answer: 0,
            domain: 0,
        };
        assert!(mc_accuracy(&m, &EvalMethod::Plain, &[bad], false).is_err());
        let bad = McItem {
            context: vec![1],
            options: vec![vec![1]],
            answer: 3,
            domain: 0,
        };
        assert!(mc_accuracy(&m, &EvalMethod::Plain, &[bad], false).is_err());
    }
}
