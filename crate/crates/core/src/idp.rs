//! Dynamic prompt selection: isolate prompts behind the attention mask,
//! score them by mean input attention, keep the winner, discard the rest,
//! and reuse pre-computed prompt K/V so the bank costs nothing at runtime.

use crate::adapters::{prepend_prompts, PromptBank};
use crate::error::{Error, Result};
use crate::model::forward::{Feed, ForwardOut, ForwardReq};
use crate::model::layout::{AttentionPolicy, SegmentLayout};
use crate::model::Model;
use crate::tensor::{embed, MacCounter, Tensor};
use serde::{Deserialize, Serialize};

/// Where selection happens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SelectionScope {
    /// each layer scores and selects from its own attention
    PerLayer,
    /// layer 0 selects; later layers reuse the choice
    FirstLayerGlobal,
    /// bypass scoring entirely
    Forced(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub scope: SelectionScope,
    /// rescale surviving weights to sum to 1 after the discard
    pub renormalize: bool,
    /// keep prefill selections for all decode steps
    pub freeze_after_prefill: bool,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            scope: SelectionScope::PerLayer,
            renormalize: true,
            freeze_after_prefill: true,
        }
    }
}

impl SelectionConfig {
    pub fn forced(index: usize) -> Self {
        SelectionConfig {
            scope: SelectionScope::Forced(index),
            ..Default::default()
        }
    }

    pub fn validate(&self, m: usize) -> Result<()> {
        if let SelectionScope::Forced(i) = self.scope {
            if i >= m {
                return Err(Error::SelectionOutOfRange { index: i, len: m });
            }
        }
        Ok(())
    }
}

/// Audit record: what one layer saw and chose.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub layer: usize,
    pub scores: Vec<f32>,
    pub chosen: usize,
}

/// Per-prompt, per-layer K/V computed by isolated prompt forwards. Entry i
/// depends only on the weights and prompt i, so the store outlives any
/// particular input or bank composition.
#[derive(Debug, Clone)]
pub struct PromptKvStore {
    /// `[prompt][layer] = (k, v)`, each `[n_i, d_model]`
    entries: Vec<Vec<(Tensor<f32>, Tensor<f32>)>>,
    lens: Vec<usize>,
}

impl PromptKvStore {
    pub fn prompt_lens(&self) -> &[usize] {
        &self.lens
    }

    pub fn n_prompts(&self) -> usize {
        self.lens.len()
    }

    pub fn k(&self, prompt: usize, layer: usize) -> &Tensor<f32> {
        &self.entries[prompt][layer].0
    }

    pub fn v(&self, prompt: usize, layer: usize) -> &Tensor<f32> {
        &self.entries[prompt][layer].1
    }
}

/// Run each prompt through the model alone and keep every layer's K/V.
pub fn build_prompt_cache(model: &Model, bank: &PromptBank) -> Result<PromptKvStore> {
    let mut entries = Vec::with_capacity(bank.len());
    for prompt in bank.prompts() {
        if prompt.len() > model.config.max_seq_len {
            return Err(Error::SequenceOverflow {
                total: prompt.len(),
                max: model.config.max_seq_len,
            });
        }
        if prompt.width() != model.config.d_model {
            return Err(Error::ShapeMismatch(format!(
                "prompt width {} vs d_model {}",
                prompt.width(),
                model.config.d_model
            )));
        }
        let layout = SegmentLayout::with_prompts(&[prompt.len()], 0)?;
        let mut req = ForwardReq::new(Feed::Embeddings {
            rows: &prompt.embedding,
            layout,
        });
        req.policy = AttentionPolicy::PromptIsolated;
        req.capture_kv = true;
        let out = model.forward(&req)?;
        entries.push(out.kv.expect("capture_kv was requested"));
    }
    Ok(PromptKvStore {
        entries,
        lens: bank.prompt_lens(),
    })
}

/// Mean post-softmax attention from input rows onto each prompt's columns,
/// averaged over heads, input rows, and that prompt's columns. Accepts the
/// full `tk x tk` weight matrix or the input-rows-only slice; `q_start` is
/// the global position of the first attention row.
pub fn score_prompts(
    attn: &Tensor<f32>,
    layout: &SegmentLayout,
    q_start: usize,
) -> Result<Vec<f32>> {
    let input = layout
        .input_range()
        .ok_or_else(|| Error::InvalidLayout("scoring needs an input segment".into()))?;
    let (heads, nq, nk) = match attn.rank() {
        2 => (1, attn.dim(0), attn.dim(1)),
        3 => (attn.dim(0), attn.dim(1), attn.dim(2)),
        _ => {
            return Err(Error::ShapeMismatch(format!(
                "attention rank {} unsupported",
                attn.rank()
            )))
        }
    };
    if nk != layout.total_len() {
        return Err(Error::ShapeMismatch(format!(
            "attention has {nk} key columns, layout has {}",
            layout.total_len()
        )));
    }
    if input.start < q_start || input.end > q_start + nq {
        return Err(Error::InvalidLayout(
            "attention rows do not cover the input segment".into(),
        ));
    }
    let m = layout.prompt_count();
    let mut scores = vec![0.0f32; m];
    let data = attn.data();
    for i in 0..m {
        let cols = layout.prompt_range(i).expect("prompt segments are 0..m");
        let mut acc = 0.0f64;
        for h in 0..heads {
            for q in input.clone() {
                let row = ((h * nq) + (q - q_start)) * nk;
                for c in cols.clone() {
                    acc += data[row + c] as f64;
                }
            }
        }
        let denom = (heads * input.len() * cols.len()) as f64;
        scores[i] = (acc / denom) as f32;
    }
    Ok(scores)
}

/// Argmax with ties to the lowest index; forced scope bypasses the scores.
pub fn select(scores: &[f32], config: &SelectionConfig) -> Result<usize> {
    if scores.is_empty() {
        return Err(Error::InvalidConfig("no prompts to select from".into()));
    }
    if let SelectionScope::Forced(i) = config.scope {
        if i >= scores.len() {
            return Err(Error::SelectionOutOfRange {
                index: i,
                len: scores.len(),
            });
        }
        return Ok(i);
    }
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Zero input-row weights on non-selected prompt columns; optionally rescale
/// each touched row to sum to 1 over what remains. Prompt rows are untouched.
/// Rows that lose nothing are left bitwise intact.
pub fn discard_in_place(
    attn: &mut Tensor<f32>,
    layout: &SegmentLayout,
    q_start: usize,
    selected: usize,
    renormalize: bool,
) -> Result<()> {
    let m = layout.prompt_count();
    if selected >= m {
        return Err(Error::SelectionOutOfRange {
            index: selected,
            len: m,
        });
    }
    let input = match layout.input_range() {
        Some(r) => r,
        None => return Ok(()),
    };
    let (heads, nq, nk) = match attn.rank() {
        2 => (1, attn.dim(0), attn.dim(1)),
        3 => (attn.dim(0), attn.dim(1), attn.dim(2)),
        _ => {
            return Err(Error::ShapeMismatch(format!(
                "attention rank {} unsupported",
                attn.rank()
            )))
        }
    };
    if nk != layout.total_len() {
        return Err(Error::ShapeMismatch(format!(
            "attention has {nk} key columns, layout has {}",
            layout.total_len()
        )));
    }
    let drop_ranges: Vec<std::ops::Range<usize>> = (0..m)
        .filter(|&i| i != selected)
        .map(|i| layout.prompt_range(i).expect("prompt segments are 0..m"))
        .collect();
    let data = attn.data_mut();
    for h in 0..heads {
        for q in input.clone() {
            if q < q_start || q - q_start >= nq {
                continue;
            }
            let row = ((h * nq) + (q - q_start)) * nk;
            let mut removed = 0.0f64;
            for r in &drop_ranges {
                for c in r.clone() {
                    removed += data[row + c] as f64;
                    data[row + c] = 0.0;
                }
            }
            if renormalize && removed != 0.0 {
                let mut remaining = 0.0f64;
                for c in 0..nk {
                    remaining += data[row + c] as f64;
                }
                if remaining > 0.0 {
                    for c in 0..nk {
                        data[row + c] = ((data[row + c] as f64) / remaining) as f32;
                    }
                }
            }
        }
    }
    Ok(())
}

/// Pure form of [`discard_in_place`].
pub fn discard_and_renormalize(
    attn: &Tensor<f32>,
    layout: &SegmentLayout,
    q_start: usize,
    selected: usize,
    renormalize: bool,
) -> Result<Tensor<f32>> {
    let mut out = attn.clone();
    discard_in_place(&mut out, layout, q_start, selected, renormalize)?;
    Ok(out)
}

/// Full pipeline: embed the input, prepend the bank (or substitute cached
/// prompt K/V), isolate prompts, score/select/discard per the config.
pub fn idp_forward(
    model: &Model,
    tokens: &[u32],
    bank: &PromptBank,
    store: Option<&PromptKvStore>,
    config: &SelectionConfig,
    capture_trace: bool,
    macs: Option<&MacCounter>,
) -> Result<ForwardOut> {
    config.validate(bank.len())?;
    let input = embed(tokens, &model.weights.embed)?;
    match store {
        Some(store) => {
            if store.prompt_lens() != bank.prompt_lens().as_slice() {
                return Err(Error::InvalidConfig(
                    "prompt cache does not match the bank".into(),
                ));
            }
            let layout = SegmentLayout::with_prompts(&bank.prompt_lens(), tokens.len())?;
            let mut req = ForwardReq::new(Feed::CachedPrompts {
                input: &input,
                layout,
                store,
            });
            req.policy = AttentionPolicy::PromptIsolated;
            req.selection = Some(*config);
            req.capture_trace = capture_trace;
            req.macs = macs;
            model.forward(&req)
        }
        None => {
            let refs: Vec<&crate::adapters::SoftPrompt> = bank.prompts().iter().collect();
            let (rows, layout) = prepend_prompts(&refs, &input)?;
            let mut req = ForwardReq::new(Feed::Embeddings {
                rows: &rows,
                layout,
            });
            req.policy = AttentionPolicy::PromptIsolated;
            req.selection = Some(*config);
            req.capture_trace = capture_trace;
            req.macs = macs;
            model.forward(&req)
        }
    }
}

/// Naive baseline: every prompt prepended with full mutual attention and no
/// selection or discard.
pub fn concat_forward(
    model: &Model,
    tokens: &[u32],
    bank: &PromptBank,
    capture_trace: bool,
    macs: Option<&MacCounter>,
) -> Result<ForwardOut> {
    let input = embed(tokens, &model.weights.embed)?;
    let refs: Vec<&crate::adapters::SoftPrompt> = bank.prompts().iter().collect();
    let (rows, layout) = prepend_prompts(&refs, &input)?;
    let mut req = ForwardReq::new(Feed::Embeddings {
        rows: &rows,
        layout,
    });
    req.policy = AttentionPolicy::DenseCausal;
    req.capture_trace = capture_trace;
    req.macs = macs;
    model.forward(&req)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scores_mean_per_prompt_token() {
        // 2-token prompt holds 0.30 of each input row, 4-token prompt 0.20
        let layout = SegmentLayout::with_prompts(&[2, 4], 3).unwrap();
        let tk = layout.total_len();
        let mut attn = Tensor::<f32>::zeros(&[tk, tk]);
        for q in 6..9 {
            for c in 0..2 {
                attn.set2(q, c, 0.15);
            }
            for c in 2..6 {
                attn.set2(q, c, 0.05);
            }
            attn.set2(q, q, 0.50);
        }
        let scores = score_prompts(&attn, &layout, 0).unwrap();
        assert!((scores[0] - 0.15).abs() < 1e-7);
        assert!((scores[1] - 0.05).abs() < 1e-7);
        assert_eq!(select(&scores, &SelectionConfig::default()).unwrap(), 0);
    }

    #[test]
    fn scores_accept_input_rows_only_slice() {
        let layout = SegmentLayout::with_prompts(&[2, 4], 3).unwrap();
        let tk = layout.total_len();
        let mut attn = Tensor::<f32>::zeros(&[2, 3, tk]);
        for h in 0..2 {
            for q in 0..3 {
                for c in 0..2 {
                    attn.set3(h, q, c, 0.15);
                }
                for c in 2..6 {
                    attn.set3(h, q, c, 0.05);
                }
            }
        }
        let scores = score_prompts(&attn, &layout, 6).unwrap();
        assert!((scores[0] - 0.15).abs() < 1e-7);
        assert!((scores[1] - 0.05).abs() < 1e-7);
    }

    #[test]
    fn scoring_requires_input_segment() {
        let layout = SegmentLayout::with_prompts(&[2], 0).unwrap();
        let attn = Tensor::<f32>::zeros(&[2, 2]);
        assert!(score_prompts(&attn, &layout, 0).is_err());
    }

    #[test]
    fn single_prompt_scores_len_one() {
        let layout = SegmentLayout::with_prompts(&[2], 1).unwrap();
        let mut attn = Tensor::<f32>::zeros(&[3, 3]);
        attn.set2(2, 0, 0.25);
        attn.set2(2, 1, 0.25);
        attn.set2(2, 2, 0.5);
        let scores = score_prompts(&attn, &layout, 0).unwrap();
        assert_eq!(scores.len(), 1);
        assert_eq!(select(&scores, &SelectionConfig::default()).unwrap(), 0);
    }

    #[test]
    fn select_argmax_ties_and_forced() {
        let cfg = SelectionConfig::default();
        assert_eq!(select(&[0.1, 0.4, 0.2], &cfg).unwrap(), 1);
        assert_eq!(select(&[0.3, 0.3, 0.3], &cfg).unwrap(), 0);
        assert_eq!(select(&[0.5, 0.5], &cfg).unwrap(), 0);
        let forced = SelectionConfig::forced(2);
        assert_eq!(select(&[0.9, 0.1, 0.0], &forced).unwrap(), 2);
        assert!(select(&[0.9, 0.1], &forced).is_err());
        assert!(select(&[], &cfg).is_err());
    }

    #[test]
    fn discard_renormalizes_hand_row() {
        let layout = SegmentLayout::with_prompts(&[1, 1], 1).unwrap();
        let mut attn = Tensor::<f32>::zeros(&[3, 3]);
        attn.set2(2, 0, 0.2);
        attn.set2(2, 1, 0.3);
        attn.set2(2, 2, 0.5);
        let on = discard_and_renormalize(&attn, &layout, 0, 1, true).unwrap();
        assert_eq!(on.at2(2, 0), 0.0);
        assert!((on.at2(2, 1) - 0.375).abs() < 1e-7);
        assert!((on.at2(2, 2) - 0.625).abs() < 1e-7);
        let off = discard_and_renormalize(&attn, &layout, 0, 1, false).unwrap();
        assert_eq!(off.at2(2, 0), 0.0);
        assert_eq!(off.at2(2, 1), 0.3);
        assert_eq!(off.at2(2, 2), 0.5);
        // prompt rows untouched in both modes
        discard_in_place(&mut attn, &layout, 0, 1, true).unwrap();
        assert_eq!(attn.at2(0, 0), 0.0);
    }

    #[test]
    fn discard_single_prompt_is_bitwise_noop() {
        let layout = SegmentLayout::with_prompts(&[2], 2).unwrap();
        let mut attn = Tensor::<f32>::zeros(&[4, 4]);
        for q in 0..4 {
            for c in 0..4 {
                attn.set2(q, c, 0.1 + 0.07 * (q * 4 + c) as f32);
            }
        }
        let before = attn.clone();
        discard_in_place(&mut attn, &layout, 0, 0, true).unwrap();
        assert_eq!(attn.data(), before.data());
    }

    #[test]
    fn discard_rejects_bad_selection() {
        let layout = SegmentLayout::with_prompts(&[1, 1], 1).unwrap();
        let mut attn = Tensor::<f32>::zeros(&[3, 3]);
        assert!(discard_in_place(&mut attn, &layout, 0, 2, true).is_err());
    }

    #[test]
    fn config_validation_and_defaults() {
        let cfg = SelectionConfig::default();
        assert_eq!(cfg.scope, SelectionScope::PerLayer);
        assert!(cfg.renormalize);
        assert!(cfg.freeze_after_prefill);
        assert!(SelectionConfig::forced(3).validate(3).is_err());
        assert!(SelectionConfig::forced(2).validate(3).is_ok());
    }

    #[test]
    fn selection_record_roundtrips_as_json() {
        let rec = SelectionRecord {
            layer: 1,
            scores: vec![0.25, 0.75],
            chosen: 1,
        };
        let line = serde_json::to_string(&rec).unwrap();
        let back: SelectionRecord = serde_json::from_str(&line).unwrap();
        assert_eq!(back.layer, 1);
        assert_eq!(back.chosen, 1);
        assert_eq!(back.scores, rec.scores);
    }
}
