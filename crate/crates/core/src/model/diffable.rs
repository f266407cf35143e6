//! Tape-backed twin of the inference engine, used for training. It rebuilds
//! the same computation out of differentiable primitives: identical kernels,
//! identical masking, identical rotary tables. Adapter tensors always enter
//! the tape as trainable leaves; base weights do only when `train_base` is
//! set and the name is not in the frozen set.
//!
//! Prompt selection is not represented here. Tuning runs against a single
//! prompt (or prefix, or low-rank delta), so the mask never has anything to
//! discard.

use crate::adapters::LoraAdapter;
use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::model::layout::{AttentionPolicy, SegmentKind, SegmentLayout};
use crate::model::{ModelConfig, Weights};
use crate::tensor::{Element, Tensor};

#[derive(Default)]
pub struct DiffAdapters<'a, E: Element> {
    /// `[t, d_model]` soft prompt rows
    pub prompt: Option<&'a Tensor<E>>,
    /// per-layer `[t, d_model]` hidden states projected into extra keys
    pub prefix: Option<&'a [Tensor<E>]>,
    pub lora: Option<&'a LoraAdapter<E>>,
}

impl<'a, E: Element> DiffAdapters<'a, E> {
    pub fn none() -> Self {
        DiffAdapters {
            prompt: None,
            prefix: None,
            lora: None,
        }
    }
}

/// Input rows whose next-token predictions enter the loss: rows
/// `start..start+len` score targets `tokens[start+1..start+1+len]`.
#[derive(Debug, Clone, Copy)]
pub struct ScoredSpan {
    pub start: usize,
    pub len: usize,
}

impl ScoredSpan {
    /// Score every position that has a successor.
    pub fn full(n_tokens: usize) -> Self {
        ScoredSpan {
            start: 0,
            len: n_tokens.saturating_sub(1),
        }
    }
}

/// Builds the forward graph and returns the input-row logits node
/// `[n_tokens, vocab]`.
pub fn build_logits<E: Element>(
    tape: &mut Tape<E>,
    weights: &Weights<E>,
    config: &ModelConfig,
    adapters: &DiffAdapters<E>,
    tokens: &[u32],
    train_base: bool,
) -> Result<NodeId> {
    config.validate()?;
    if tokens.is_empty() {
        return Err(Error::InvalidLayout("empty input".into()));
    }
    let (d, heads, dh) = (config.d_model, config.n_heads, config.head_dim());
    let n = tokens.len();

    let t_p = match adapters.prompt {
        Some(p) => {
            if p.rank() != 2 || p.dim(1) != d {
                return Err(Error::ShapeMismatch(format!(
                    "prompt {:?} vs d_model {d}",
                    p.shape()
                )));
            }
            p.dim(0)
        }
        None => 0,
    };
    let prefix_t = match adapters.prefix {
        Some(blocks) => {
            if blocks.len() != config.n_layers {
                return Err(Error::ShapeMismatch(format!(
                    "prefix has {} blocks for {} layers",
                    blocks.len(),
                    config.n_layers
                )));
            }
            if blocks[0].rank() != 2 || blocks[0].dim(1) != d {
                return Err(Error::ShapeMismatch(format!(
                    "prefix block {:?} vs d_model {d}",
                    blocks[0].shape()
                )));
            }
            blocks[0].dim(0)
        }
        None => 0,
    };
    if t_p > 0 && prefix_t > 0 {
        return Err(Error::Unsupported(
            "prefix keys cannot combine with a soft prompt".into(),
        ));
    }
    if let Some(lora) = adapters.lora {
        if lora.layers.len() != config.n_layers {
            return Err(Error::ShapeMismatch(format!(
                "adapter has {} layers for {} model layers",
                lora.layers.len(),
                config.n_layers
            )));
        }
    }
    let layout = if t_p > 0 {
        SegmentLayout::with_prompts(&[t_p], n)?
    } else {
        SegmentLayout::input_only(n)
    };
    let policy = if t_p > 0 {
        AttentionPolicy::PromptIsolated
    } else {
        AttentionPolicy::DenseCausal
    };
    let rows = layout.total_len();
    let total = prefix_t + rows;
    if total > config.max_seq_len {
        return Err(Error::SequenceOverflow {
            total,
            max: config.max_seq_len,
        });
    }

    let base = |tape: &mut Tape<E>, name: &str| -> NodeId {
        let value = weights.get(name).expect("known weight name").clone();
        if train_base && !weights.is_frozen(name) {
            tape.param(name, value)
        } else {
            tape.leaf(value)
        }
    };

    let embed = base(tape, "embed");
    let x_tok = tape.gather(embed, tokens)?;
    let mut x = match adapters.prompt {
        Some(p) => {
            let pn = tape.param("prompt", p.clone());
            tape.concat_rows(&[pn, x_tok])?
        }
        None => x_tok,
    };

    // rotary tables over every row: identity rotation for prompt rows,
    // input-local angles elsewhere, matching the engine bit for bit
    let half = dh / 2;
    let mut cos = vec![E::ONE; rows * half];
    let mut sin = vec![E::ZERO; rows * half];
    for r in t_p..rows {
        let pos = (r - t_p) as f64;
        for j in 0..half {
            let freq = 10000.0f64.powf(-2.0 * j as f64 / dh as f64);
            let angle = pos * freq;
            cos[r * half + j] = E::from_f64(angle.cos());
            sin[r * half + j] = E::from_f64(angle.sin());
        }
    }

    // additive mask over the absolute column space [prefix][layout]
    let mut mask = Tensor::<E>::zeros(&[rows, total]);
    for q in 0..rows {
        let is_input = matches!(layout.kind_at(q), Some(SegmentKind::Input));
        for c in 0..prefix_t {
            if !is_input {
                mask.set2(q, c, E::mask_neg_inf());
            }
        }
        for cl in 0..rows {
            if !layout.allows(policy, q, cl) {
                mask.set2(q, prefix_t + cl, E::mask_neg_inf());
            }
        }
    }

    let scale = E::ONE / E::from_f64(dh as f64).sqrt();

    for li in 0..config.n_layers {
        let lora_l = adapters.lora.map(|a| &a.layers[li]);
        let delta = |tape: &mut Tape<E>,
                         x: NodeId,
                         target: &str,
                         pair: &crate::adapters::LoraPair<E>|
         -> Result<NodeId> {
            let a = tape.param(&format!("lora.{li}.{target}.a"), pair.a.clone());
            let b = tape.param(&format!("lora.{li}.{target}.b"), pair.b.clone());
            let xa = tape.matmul_bt(x, a)?;
            tape.matmul_bt(xa, b)
        };

        let attn_gain = base(tape, &format!("layers.{li}.attn_gain"));
        let normed = tape.rms_norm(x, attn_gain)?;
        let wq = base(tape, &format!("layers.{li}.wq"));
        let wk = base(tape, &format!("layers.{li}.wk"));
        let wv = base(tape, &format!("layers.{li}.wv"));
        let mut q = tape.matmul(normed, wq)?;
        let mut k = tape.matmul(normed, wk)?;
        let mut v = tape.matmul(normed, wv)?;
        if let Some(ll) = lora_l {
            let dq = delta(tape, normed, "q", &ll.q)?;
            q = tape.add(q, dq)?;
            let dk = delta(tape, normed, "k", &ll.k)?;
            k = tape.add(k, dk)?;
            let dv = delta(tape, normed, "v", &ll.v)?;
            v = tape.add(v, dv)?;
        }
        let qh = tape.split_heads(q, heads)?;
        let qh = tape.rope(qh, cos.clone(), sin.clone())?;
        let kh = tape.split_heads(k, heads)?;
        let kh = tape.rope(kh, cos.clone(), sin.clone())?;
        let vh = tape.split_heads(v, heads)?;

        let (keys, values) = match adapters.prefix {
            Some(blocks) => {
                // direct projection through the frozen k/v maps, no norm, no
                // rotation; the extra columns sit in front of the layout
                let block = tape.param(&format!("prefix.{li}"), blocks[li].clone());
                let kp = tape.matmul(block, wk)?;
                let vp = tape.matmul(block, wv)?;
                let kp_h = tape.split_heads(kp, heads)?;
                let vp_h = tape.split_heads(vp, heads)?;
                (tape.concat_mid(kp_h, kh)?, tape.concat_mid(vp_h, vh)?)
            }
            None => (kh, vh),
        };

        let scores = tape.bmm_bt(qh, keys)?;
        let scaled = tape.scale(scores, scale);
        let w = tape.softmax_rows(scaled, Some(&mask))?;
        let ctx_h = tape.bmm(w, values)?;
        let ctx = tape.merge_heads(ctx_h)?;

        let wo = base(tape, &format!("layers.{li}.wo"));
        let mut attn_out = tape.matmul(ctx, wo)?;
        if let Some(ll) = lora_l {
            let dout = delta(tape, ctx, "o", &ll.o)?;
            attn_out = tape.add(attn_out, dout)?;
        }
        x = tape.add(x, attn_out)?;

        let ffn_gain = base(tape, &format!("layers.{li}.ffn_gain"));
        let normed2 = tape.rms_norm(x, ffn_gain)?;
        let up = base(tape, &format!("layers.{li}.up"));
        let mut u = tape.matmul(normed2, up)?;
        if let Some(ll) = lora_l {
            let du = delta(tape, normed2, "up", &ll.up)?;
            u = tape.add(u, du)?;
        }
        let g = tape.gelu(u);
        let down = base(tape, &format!("layers.{li}.down"));
        let mut f = tape.matmul(g, down)?;
        if let Some(ll) = lora_l {
            let df = delta(tape, g, "down", &ll.down)?;
            f = tape.add(f, df)?;
        }
        x = tape.add(x, f)?;
    }

    let final_gain = base(tape, "final_gain");
    let xf = tape.rms_norm(x, final_gain)?;
    let x_in = tape.slice_rows(xf, t_p, n)?;
    tape.matmul_bt(x_in, embed)
}

/// Mean next-token NLL over the span. Returns the scalar loss node and the
/// full input-row logits node.
pub fn build_loss<E: Element>(
    tape: &mut Tape<E>,
    weights: &Weights<E>,
    config: &ModelConfig,
    adapters: &DiffAdapters<E>,
    tokens: &[u32],
    span: ScoredSpan,
    train_base: bool,
) -> Result<(NodeId, NodeId)> {
    let n = tokens.len();
    if span.len == 0 || span.start + span.len + 1 > n {
        return Err(Error::InvalidConfig(format!(
            "scored span {}..{} needs targets inside {n} tokens",
            span.start,
            span.start + span.len
        )));
    }
    let logits = build_logits(tape, weights, config, adapters, tokens, train_base)?;
    let scored = tape.slice_rows(logits, span.start, span.len)?;
    let targets = &tokens[span.start + 1..span.start + 1 + span.len];
    let loss = tape.cross_entropy(scored, targets)?;
    Ok((loss, logits))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{PrefixSet, PromptBank, SoftPrompt};
    use crate::autodiff::{assert_grads_match, Gradients};
    use crate::model::forward::{Feed, ForwardReq};
    use crate::model::Model;
    use std::collections::BTreeMap;

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

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            d_ff: 16,
            vocab_size: 11,
            max_seq_len: 32,
            seed: 5,
        }
    }

    fn max_rel(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| {
                let (x, y) = (x as f64, y as f64);
                (x - y).abs() / x.abs().max(y.abs()).max(1e-9)
            })
            .fold(0.0, f64::max)
    }

    fn tape_logits(model: &Model, adapters: &DiffAdapters<f32>, tokens: &[u32]) -> Tensor<f32> {
        let mut tape = Tape::<f32>::new();
        let id = build_logits(&mut tape, &model.weights, &model.config, adapters, tokens, false)
            .unwrap();
        tape.value(id).clone()
    }

    #[test]
    fn plain_logits_match_engine() {
        let model = Model::init(cfg()).unwrap();
        let tokens = [1u32, 5, 2, 9];
        let engine = model.forward(&ForwardReq::tokens(&tokens)).unwrap();
        let tape = tape_logits(&model, &DiffAdapters::none(), &tokens);
        let rel = max_rel(&tape, &engine.logits);
        assert!(rel < 1e-5, "rel {rel}");
    }

    #[test]
    fn prompt_logits_match_engine() {
        let model = Model::init(cfg()).unwrap();
        let tokens = [1u32, 5, 2];
        let prompt = SoftPrompt::init("p", 3, 16, 10).unwrap();
        let bank = PromptBank::new(vec![prompt.clone()]).unwrap();
        let refs: Vec<&SoftPrompt> = bank.prompts().iter().collect();
        let input = crate::tensor::embed(&tokens, &model.weights.embed).unwrap();
        let (rows, layout) = crate::adapters::prepend_prompts(&refs, &input).unwrap();
        let mut req = ForwardReq::new(Feed::Embeddings {
            rows: &rows,
            layout,
        });
        req.policy = AttentionPolicy::PromptIsolated;
        let engine = model.forward(&req).unwrap();

        let adapters = DiffAdapters {
            prompt: Some(&prompt.embedding),
            ..DiffAdapters::none()
        };
        let tape = tape_logits(&model, &adapters, &tokens);
        let rel = max_rel(&tape, &engine.logits);
        assert!(rel < 1e-5, "rel {rel}");
    }

    #[test]
    fn prefix_logits_match_engine() {
        let model = Model::init(cfg()).unwrap();
        let tokens = [4u32, 2, 7, 1];
        let prefix = PrefixSet::<f32>::init(&cfg(), 4, 21).unwrap();
        let mut req = ForwardReq::tokens(&tokens);
        req.prefix = Some(&prefix);
        let engine = model.forward(&req).unwrap();

        let adapters = DiffAdapters {
            prefix: Some(&prefix.blocks),
            ..DiffAdapters::none()
        };
        let tape = tape_logits(&model, &adapters, &tokens);
        let rel = max_rel(&tape, &engine.logits);
        assert!(rel < 1e-5, "rel {rel}");
    }

    #[test]
    fn lora_logits_match_engine() {
        let model = Model::init(cfg()).unwrap();
        let tokens = [3u32, 8, 6];
        let mut adapter = LoraAdapter::<f32>::init(&cfg(), 2, 33).unwrap();
        for l in adapter.layers.iter_mut() {
            for pair in [&mut l.q, &mut l.k, &mut l.v, &mut l.o, &mut l.up, &mut l.down] {
                let (r, c) = (pair.b.dim(0), pair.b.dim(1));
                for i in 0..r {
                    for j in 0..c {
                        pair.b.set2(i, j, 0.03 * ((i * c + j) % 5) as f32 - 0.05);
                    }
                }
            }
        }
        let mut req = ForwardReq::tokens(&tokens);
        req.lora = Some(&adapter);
        let engine = model.forward(&req).unwrap();

        let adapters = DiffAdapters {
            lora: Some(&adapter),
            ..DiffAdapters::none()
        };
        let tape = tape_logits(&model, &adapters, &tokens);
        let rel = max_rel(&tape, &engine.logits);
        assert!(rel < 1e-5, "rel {rel}");
    }

    #[test]
    fn loss_matches_manual_cross_entropy() {
        let model = Model::init(cfg()).unwrap();
        let tokens = [1u32, 5, 2, 9, 4];
        let engine = model.forward(&ForwardReq::tokens(&tokens)).unwrap();
        let scored = engine.logits.slice_rows(0, 4).unwrap();
        let want = crate::tensor::cross_entropy(&scored, &tokens[1..]).unwrap();

        let mut tape = Tape::<f32>::new();
        let (loss, _) = build_loss(
            &mut tape,
            &model.weights,
            &model.config,
            &DiffAdapters::none(),
            &tokens,
            ScoredSpan::full(tokens.len()),
            false,
        )
        .unwrap();
        let got = tape.value(loss).item();
        assert!((got - want).abs() < 1e-5, "{got} vs {want}");
    }

    #[test]
    fn span_and_combination_validation() {
        let model = Model::init(small_cfg()).unwrap();
        let mut tape = Tape::<f32>::new();
        let bad = build_loss(
            &mut tape,
            &model.weights,
            &model.config,
            &DiffAdapters::none(),
            &[1, 2, 3],
            ScoredSpan { start: 1, len: 2 },
            false,
        );
        assert!(matches!(bad, Err(Error::InvalidConfig(_))));

        let prompt = Tensor::<f32>::zeros(&[2, 8]);
        let prefix = PrefixSet::<f32>::init(&small_cfg(), 2, 1).unwrap();
        let adapters = DiffAdapters {
            prompt: Some(&prompt),
            prefix: Some(&prefix.blocks),
            lora: None,
        };
        let mut tape = Tape::<f32>::new();
        let bad = build_logits(
            &mut tape,
            &model.weights,
            &model.config,
            &adapters,
            &[1, 2],
            false,
        );
        assert!(matches!(bad, Err(Error::Unsupported(_))));
    }

    type Params = BTreeMap<String, Tensor<f64>>;

    fn fd_loss_fn<'m>(
        model: &'m Model,
        tokens: &'m [u32],
        rebuild: impl Fn(&Params) -> DiffAdaptersOwned + 'm,
        train_base: bool,
        unfrozen: &'m [&'m str],
    ) -> impl Fn(&Params) -> Result<(f64, Gradients<f64>)> + 'm {
        let mut w64 = model.weights.cast::<f64>();
        w64.freeze_all();
        for name in unfrozen {
            w64.set_frozen(name, false);
        }
        move |p: &Params| {
            let mut w = w64.clone();
            for name in unfrozen {
                if let Some(v) = p.get(*name) {
                    *w.get_mut(name).unwrap() = v.clone();
                }
            }
            let owned = rebuild(p);
            let adapters = owned.borrow();
            let mut tape = Tape::<f64>::new();
            let (loss, _) = build_loss(
                &mut tape,
                &w,
                &model.config,
                &adapters,
                tokens,
                ScoredSpan::full(tokens.len()),
                train_base,
            )?;
            let g = tape.backward(loss)?;
            Ok((tape.value(loss).item(), g))
        }
    }

    /// Owned mirror of [`DiffAdapters`] so FD closures can hand out borrows.
    #[derive(Default)]
    struct DiffAdaptersOwned {
        prompt: Option<Tensor<f64>>,
        prefix: Option<Vec<Tensor<f64>>>,
        lora: Option<LoraAdapter<f64>>,
    }

    impl DiffAdaptersOwned {
        fn borrow(&self) -> DiffAdapters<'_, f64> {
            DiffAdapters {
                prompt: self.prompt.as_ref(),
                prefix: self.prefix.as_deref(),
                lora: self.lora.as_ref(),
            }
        }
    }

    #[test]
    fn prompt_gradients_match_finite_differences() {
        let model = Model::init(small_cfg()).unwrap();
        let tokens = [1u32, 5, 2, 9];
        let prompt = SoftPrompt::init("p", 2, 8, 7).unwrap();
        let params: Params = [("prompt".to_string(), prompt.embedding.cast::<f64>())]
            .into_iter()
            .collect();
        let f = fd_loss_fn(
            &model,
            &tokens,
            |p| DiffAdaptersOwned {
                prompt: Some(p["prompt"].clone()),
                ..Default::default()
            },
            false,
            &[],
        );
        assert_grads_match(&f, &params);
    }

    #[test]
    fn prefix_gradients_match_finite_differences() {
        let model = Model::init(small_cfg()).unwrap();
        let tokens = [3u32, 1, 4];
        let prefix = PrefixSet::<f32>::init(&small_cfg(), 2, 9).unwrap();
        let params: Params = prefix
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| (format!("prefix.{i}"), b.cast::<f64>()))
            .collect();
        let n = prefix.blocks.len();
        let f = fd_loss_fn(
            &model,
            &tokens,
            move |p| DiffAdaptersOwned {
                prefix: Some((0..n).map(|i| p[&format!("prefix.{i}")].clone()).collect()),
                ..Default::default()
            },
            false,
            &[],
        );
        assert_grads_match(&f, &params);
    }

    fn lora_params(adapter: &LoraAdapter<f64>) -> Params {
        let mut out = Params::new();
        for (li, l) in adapter.layers.iter().enumerate() {
            for (t, pair) in ["q", "k", "v", "o", "up", "down"]
                .iter()
                .zip([&l.q, &l.k, &l.v, &l.o, &l.up, &l.down])
            {
                out.insert(format!("lora.{li}.{t}.a"), pair.a.clone());
                out.insert(format!("lora.{li}.{t}.b"), pair.b.clone());
            }
        }
        out
    }

    fn lora_from(base: &LoraAdapter<f64>, p: &Params) -> LoraAdapter<f64> {
        let mut out = base.clone();
        for (li, l) in out.layers.iter_mut().enumerate() {
            for (t, pair) in ["q", "k", "v", "o", "up", "down"]
                .iter()
                .zip([&mut l.q, &mut l.k, &mut l.v, &mut l.o, &mut l.up, &mut l.down])
            {
                pair.a = p[&format!("lora.{li}.{t}.a")].clone();
                pair.b = p[&format!("lora.{li}.{t}.b")].clone();
            }
        }
        out
    }

    #[test]
    fn lora_gradients_match_finite_differences() {
        let model = Model::init(small_cfg()).unwrap();
        let tokens = [2u32, 7, 5];
        let mut adapter = LoraAdapter::<f32>::init(&small_cfg(), 2, 13).unwrap();
        // random-ish B so gradients flow through both factors
        for l in adapter.layers.iter_mut() {
            for pair in [&mut l.q, &mut l.k, &mut l.v, &mut l.o, &mut l.up, &mut l.down] {
                let (r, c) = (pair.b.dim(0), pair.b.dim(1));
                for i in 0..r {
                    for j in 0..c {
                        pair.b.set2(i, j, 0.05 * ((i * c + j) % 3) as f32 - 0.04);
                    }
                }
            }
        }
        let adapter64 = adapter.cast::<f64>();
        let params = lora_params(&adapter64);
        let f = fd_loss_fn(
            &model,
            &tokens,
            move |p| DiffAdaptersOwned {
                lora: Some(lora_from(&adapter64, p)),
                ..Default::default()
            },
            false,
            &[],
        );
        assert_grads_match(&f, &params);
    }

    #[test]
    fn tied_embedding_gradient_matches_finite_differences() {
        let model = Model::init(small_cfg()).unwrap();
        let tokens = [1u32, 5, 2];
        let params: Params = [(
            "embed".to_string(),
            model.weights.embed.cast::<f64>(),
        )]
        .into_iter()
        .collect();
        let f = fd_loss_fn(
            &model,
            &tokens,
            |_| DiffAdaptersOwned::default(),
            true,
            &["embed"],
        );
        assert_grads_match(&f, &params);
    }

    #[test]
    fn base_projection_gradient_matches_finite_differences() {
        let model = Model::init(small_cfg()).unwrap();
        let tokens = [4u32, 2, 7, 1];
        let params: Params = [(
            "layers.0.wq".to_string(),
            model.weights.layers[0].wq.cast::<f64>(),
        )]
        .into_iter()
        .collect();
        let f = fd_loss_fn(
            &model,
            &tokens,
            |_| DiffAdaptersOwned::default(),
            true,
            &["layers.0.wq"],
        );
        assert_grads_match(&f, &params);
    }

    #[test]
    fn frozen_base_receives_no_gradients() {
        let model = Model::init(small_cfg()).unwrap();
        let mut w = model.weights.clone();
        w.freeze_all();
        let prompt = SoftPrompt::init("p", 2, 8, 3).unwrap();
        let adapters = DiffAdapters {
            prompt: Some(&prompt.embedding),
            ..DiffAdapters::none()
        };
        let mut tape = Tape::<f32>::new();
        let (loss, _) = build_loss(
            &mut tape,
            &w,
            &model.config,
            &adapters,
            &[1, 2, 3],
            ScoredSpan::full(3),
            true,
        )
        .unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.keys().collect::<Vec<_>>(), vec!["prompt"]);
    }
}
