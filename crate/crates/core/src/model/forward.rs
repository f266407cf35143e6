//! The inference engine: full-sequence forward, prompt-cached forward, and
//! incremental decoding.
//!
//! Attention is computed pairwise over an explicit allowed-column set rather
//! than through a dense masked matmul. That buys two properties the rest of
//! the system leans on: multiply-accumulate counts reflect only work that is
//! actually done (masked pairs cost nothing), and a prompt row's summation
//! set is identical whether the prompt runs alone or inside a joint
//! sequence, making cached prompt K/V agree with joint recomputation to the
//! last bit.

use crate::adapters::{LoraAdapter, PrefixSet, PromptBank};
use crate::error::{Error, Result};
use crate::idp::{
    discard_in_place, score_prompts, select, PromptKvStore, SelectionConfig, SelectionRecord,
    SelectionScope,
};
use crate::model::cache::KvCache;
use crate::model::layout::{AttentionPolicy, SegmentKind, SegmentLayout};
use crate::model::trace::{ForwardTrace, LayerTrace};
use crate::model::Model;
use crate::tensor::{embed as embed_rows, gelu, matmul, matmul_bt, rms_norm, MacCounter, Tensor};

pub enum Feed<'a> {
    /// input token ids, no prompts
    Tokens(&'a [u32]),
    /// explicit rows covering the whole layout (prompt rows included)
    Embeddings {
        rows: &'a Tensor<f32>,
        layout: SegmentLayout,
    },
    /// input rows only; prompt K/V come from the store and prompt positions
    /// are never recomputed
    CachedPrompts {
        input: &'a Tensor<f32>,
        layout: SegmentLayout,
        store: &'a PromptKvStore,
    },
}

pub struct ForwardReq<'a> {
    pub feed: Feed<'a>,
    pub policy: AttentionPolicy,
    pub selection: Option<SelectionConfig>,
    pub lora: Option<&'a LoraAdapter<f32>>,
    pub prefix: Option<&'a PrefixSet<f32>>,
    pub capture_trace: bool,
    pub capture_kv: bool,
    pub macs: Option<&'a MacCounter>,
    /// ablation: rotate every row (prompts included) by its global position
    pub rotary_global_positions: bool,
}

impl<'a> ForwardReq<'a> {
    pub fn new(feed: Feed<'a>) -> Self {
        ForwardReq {
            feed,
            policy: AttentionPolicy::DenseCausal,
            selection: None,
            lora: None,
            prefix: None,
            capture_trace: false,
            capture_kv: false,
            macs: None,
            rotary_global_positions: false,
        }
    }

    pub fn tokens(tokens: &'a [u32]) -> Self {
        ForwardReq::new(Feed::Tokens(tokens))
    }
}

pub struct ForwardOut {
    /// `[input_len, vocab]`
    pub logits: Tensor<f32>,
    pub trace: Option<ForwardTrace>,
    pub selections: Vec<SelectionRecord>,
    /// per-layer computed-row (k, v), each `[rows, d_model]`, post-rotation
    pub kv: Option<Vec<(Tensor<f32>, Tensor<f32>)>>,
}

impl Model {
    pub fn forward(&self, req: &ForwardReq) -> Result<ForwardOut> {
        run(self, req)
    }

    /// Prefill `tokens` (optionally behind a prompt bank with its cache) and
    /// hand back a decode session plus the prefill logits.
    pub fn start_decode(
        &self,
        tokens: &[u32],
        bank: Option<(&PromptBank, &PromptKvStore, SelectionConfig)>,
        capture_trace: bool,
    ) -> Result<(DecodeSession<'_>, ForwardOut)> {
        DecodeSession::start(self, tokens, bank, capture_trace)
    }
}

fn add_macs(c: Option<&MacCounter>, n: u64) {
    if let Some(c) = c {
        c.add(n);
    }
}

/// cos/sin tables for the given positions, flattened `[pos][dh/2]`.
pub(crate) fn rope_tables(positions: &[usize], dh: usize) -> (Vec<f32>, Vec<f32>) {
    let half = dh / 2;
    let mut cos = vec![0.0f32; positions.len() * half];
    let mut sin = vec![0.0f32; positions.len() * half];
    for (pi, &pos) in positions.iter().enumerate() {
        for j in 0..half {
            let freq = 10000.0f64.powf(-2.0 * j as f64 / dh as f64);
            let angle = pos as f64 * freq;
            cos[pi * half + j] = angle.cos() as f32;
            sin[pi * half + j] = angle.sin() as f32;
        }
    }
    (cos, sin)
}

/// Rotate one `[d_model]` row in place, head by head.
fn rope_rotate_row(row: &mut [f32], cos: &[f32], sin: &[f32], n_heads: usize, dh: usize) {
    let half = dh / 2;
    for hh in 0..n_heads {
        let base = hh * dh;
        for i in 0..half {
            let (c, s) = (cos[i], sin[i]);
            let x0 = row[base + 2 * i];
            let x1 = row[base + 2 * i + 1];
            row[base + 2 * i] = x0 * c - x1 * s;
            row[base + 2 * i + 1] = x0 * s + x1 * c;
        }
    }
}

/// Numerically stable softmax over a gathered score list; f64 accumulation
/// mirrors the dense kernel in `tensor::softmax_rows`.
fn softmax_gathered(scores: &mut [f32]) {
    let mut max = f32::NEG_INFINITY;
    for &s in scores.iter() {
        if s > max {
            max = s;
        }
    }
    let mut denom = 0.0f64;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        denom += *s as f64;
    }
    for s in scores.iter_mut() {
        *s = ((*s as f64) / denom) as f32;
    }
}

struct Resolved<'a> {
    x0: Tensor<f32>,
    layout: SegmentLayout,
    q_start: usize,
    store: Option<&'a PromptKvStore>,
}

fn resolve_feed<'a>(model: &Model, req: &'a ForwardReq<'a>) -> Result<Resolved<'a>> {
    let d = model.config.d_model;
    match &req.feed {
        Feed::Tokens(tokens) => {
            if tokens.is_empty() {
                return Err(Error::InvalidLayout("empty input".into()));
            }
            Ok(Resolved {
                x0: embed_rows(tokens, &model.weights.embed)?,
                layout: SegmentLayout::input_only(tokens.len()),
                q_start: 0,
                store: None,
            })
        }
        Feed::Embeddings { rows, layout } => {
            if rows.rank() != 2 || rows.dim(1) != d {
                return Err(Error::ShapeMismatch(format!(
                    "embedding rows {:?} vs d_model {d}",
                    rows.shape()
                )));
            }
            if rows.dim(0) != layout.total_len() {
                return Err(Error::InvalidLayout(format!(
                    "layout covers {} rows, got {}",
                    layout.total_len(),
                    rows.dim(0)
                )));
            }
            Ok(Resolved {
                x0: (*rows).clone(),
                layout: layout.clone(),
                q_start: 0,
                store: None,
            })
        }
        Feed::CachedPrompts {
            input,
            layout,
            store,
        } => {
            if input.rank() != 2 || input.dim(1) != d {
                return Err(Error::ShapeMismatch(format!(
                    "input rows {:?} vs d_model {d}",
                    input.shape()
                )));
            }
            let layout_lens: Vec<usize> = layout
                .segments()
                .iter()
                .filter(|s| matches!(s.kind, SegmentKind::Prompt(_)))
                .map(|s| s.len)
                .collect();
            if layout_lens != store.prompt_lens() {
                return Err(Error::InvalidConfig(
                    "prompt cache does not match the layout".into(),
                ));
            }
            if input.dim(0) != layout.input_len() || input.dim(0) == 0 {
                return Err(Error::InvalidLayout(format!(
                    "layout input {} rows, got {}",
                    layout.input_len(),
                    input.dim(0)
                )));
            }
            Ok(Resolved {
                x0: (*input).clone(),
                layout: layout.clone(),
                q_start: layout.prompt_cols_total(),
                store: Some(store),
            })
        }
    }
}

fn run(model: &Model, req: &ForwardReq) -> Result<ForwardOut> {
    let cfg = &model.config;
    let Resolved {
        x0,
        layout,
        q_start,
        store,
    } = resolve_feed(model, req)?;
    let (d, heads, dh) = (cfg.d_model, cfg.n_heads, cfg.head_dim());
    let m = layout.prompt_count();

    let prefix_t = req.prefix.map(|p| p.t()).unwrap_or(0);
    if prefix_t > 0 && m > 0 {
        return Err(Error::Unsupported(
            "prefix keys cannot combine with a prompt bank".into(),
        ));
    }
    if let Some(p) = req.prefix {
        if p.blocks.len() != cfg.n_layers {
            return Err(Error::ShapeMismatch(format!(
                "prefix has {} blocks for {} layers",
                p.blocks.len(),
                cfg.n_layers
            )));
        }
    }
    let total = prefix_t + layout.total_len();
    if total > cfg.max_seq_len {
        return Err(Error::SequenceOverflow {
            total,
            max: cfg.max_seq_len,
        });
    }
    if req.rotary_global_positions && store.is_some() {
        return Err(Error::Unsupported(
            "global rotary positions invalidate prompt caches".into(),
        ));
    }
    if store.is_some() && req.lora.is_some() {
        return Err(Error::Unsupported(
            "prompt caches are built without adapters; rebuild instead".into(),
        ));
    }
    if let Some(sel) = &req.selection {
        if m == 0 {
            return Err(Error::InvalidConfig("selection without prompts".into()));
        }
        if req.policy != AttentionPolicy::PromptIsolated {
            return Err(Error::InvalidConfig(
                "selection requires prompt isolation".into(),
            ));
        }
        sel.validate(m)?;
    }
    if let Some(lora) = req.lora {
        if lora.layers.len() != cfg.n_layers {
            return Err(Error::ShapeMismatch(format!(
                "adapter has {} layers for {} model layers",
                lora.layers.len(),
                cfg.n_layers
            )));
        }
    }

    let rows = x0.dim(0);
    let input_range = layout.input_range();

    // rotary positions per computed row: input-local by default, global
    // under the ablation flag, none for prompt rows
    let pos_of: Vec<Option<usize>> = (0..rows)
        .map(|r| {
            let qg = q_start + r;
            if req.rotary_global_positions {
                Some(qg)
            } else {
                input_range
                    .as_ref()
                    .filter(|ir| ir.contains(&qg))
                    .map(|ir| qg - ir.start)
            }
        })
        .collect();
    let max_pos = pos_of.iter().flatten().copied().max();
    let (cos_tab, sin_tab) = match max_pos {
        Some(mp) => rope_tables(&(0..=mp).collect::<Vec<_>>(), dh),
        None => (Vec::new(), Vec::new()),
    };
    let half = dh / 2;

    // allowed key columns per query row, fixed across layers; absolute
    // column space is [prefix][layout]
    let total_cols = prefix_t + layout.total_len();
    let allowed: Vec<Vec<usize>> = (0..rows)
        .map(|r| {
            let qg = q_start + r;
            let is_input = matches!(layout.kind_at(qg), Some(SegmentKind::Input));
            let mut cols = Vec::new();
            for c in 0..prefix_t {
                if is_input {
                    cols.push(c);
                }
            }
            for cl in 0..layout.total_len() {
                if layout.allows(req.policy, qg, cl) {
                    cols.push(prefix_t + cl);
                }
            }
            cols
        })
        .collect();
    let pair_count: u64 = allowed.iter().map(|a| a.len() as u64).sum::<u64>() * heads as u64;

    // map layout prompt columns to (prompt index, local row) for store reads
    let prompt_cols = layout.prompt_cols_total();
    let mut col_to_prompt = Vec::with_capacity(prompt_cols);
    for i in 0..m {
        let r = layout.prompt_range(i).expect("prompt segments are 0..m");
        for local in 0..r.len() {
            col_to_prompt.push((i, local));
        }
    }

    let idp_active = req.selection.is_some() && m > 0;
    let sel_cfg = req.selection.unwrap_or_default();
    let mut global_choice: Option<usize> = None;
    let mut selections: Vec<SelectionRecord> = Vec::new();
    let mut layer_traces: Vec<LayerTrace> = Vec::new();
    let mut kv_out: Option<Vec<(Tensor<f32>, Tensor<f32>)>> =
        req.capture_kv.then(Vec::new);

    let scale = 1.0 / (dh as f32).sqrt();
    let mut x = x0;

    for (li, lw) in model.weights.layers.iter().enumerate() {
        let lora_l = req.lora.map(|a| &a.layers[li]);
        let normed = rms_norm(&x, &lw.attn_gain)?;
        let mut q = matmul(&normed, &lw.wq)?;
        let mut k = matmul(&normed, &lw.wk)?;
        let mut v = matmul(&normed, &lw.wv)?;
        add_macs(req.macs, 3 * (rows * d * d) as u64);
        if let Some(ll) = lora_l {
            q.add_inplace(&ll.q.delta(&normed, req.macs)?)?;
            k.add_inplace(&ll.k.delta(&normed, req.macs)?)?;
            v.add_inplace(&ll.v.delta(&normed, req.macs)?)?;
        }
        for r in 0..rows {
            if let Some(pos) = pos_of[r] {
                let ct = &cos_tab[pos * half..(pos + 1) * half];
                let st = &sin_tab[pos * half..(pos + 1) * half];
                rope_rotate_row(q.row_mut(r), ct, st, heads, dh);
                rope_rotate_row(k.row_mut(r), ct, st, heads, dh);
            }
        }

        let prefix_kv: Option<(Tensor<f32>, Tensor<f32>)> = match req.prefix {
            Some(p) => {
                let block = &p.blocks[li];
                let kp = matmul(block, &lw.wk)?;
                let vp = matmul(block, &lw.wv)?;
                add_macs(req.macs, 2 * (prefix_t * d * d) as u64);
                Some((kp, vp))
            }
            None => None,
        };

        let k_col = |c: usize| -> &[f32] {
            if c < prefix_t {
                return prefix_kv.as_ref().expect("prefix cols imply prefix").0.row(c);
            }
            let cl = c - prefix_t;
            if let (Some(store), true) = (store, cl < prompt_cols) {
                let (p, local) = col_to_prompt[cl];
                return store.k(p, li).row(local);
            }
            k.row(cl - q_start)
        };
        let v_col = |c: usize| -> &[f32] {
            if c < prefix_t {
                return prefix_kv.as_ref().expect("prefix cols imply prefix").1.row(c);
            }
            let cl = c - prefix_t;
            if let (Some(store), true) = (store, cl < prompt_cols) {
                let (p, local) = col_to_prompt[cl];
                return store.v(p, li).row(local);
            }
            v.row(cl - q_start)
        };

        // post-softmax weights over the absolute column space
        let mut w = Tensor::<f32>::zeros(&[heads, rows, total_cols]);
        add_macs(req.macs, pair_count * dh as u64);
        {
            let wdata = w.data_mut();
            let mut scores: Vec<f32> = Vec::new();
            for hh in 0..heads {
                for r in 0..rows {
                    let cols = &allowed[r];
                    if cols.is_empty() {
                        return Err(Error::FullyMaskedRow { row: q_start + r });
                    }
                    scores.clear();
                    let qrow = &q.row(r)[hh * dh..(hh + 1) * dh];
                    for &c in cols {
                        let krow = &k_col(c)[hh * dh..(hh + 1) * dh];
                        let mut acc = 0.0f32;
                        for j in 0..dh {
                            acc += qrow[j] * krow[j];
                        }
                        scores.push(acc * scale);
                    }
                    softmax_gathered(&mut scores);
                    let base = (hh * rows + r) * total_cols;
                    for (j, &c) in cols.iter().enumerate() {
                        wdata[base + c] = scores[j];
                    }
                }
            }
        }

        let w_trace = req.capture_trace.then(|| w.clone());

        if idp_active {
            let scores = score_prompts(&w, &layout, q_start)?;
            let chosen = match sel_cfg.scope {
                SelectionScope::Forced(i) => i,
                SelectionScope::PerLayer => select(&scores, &sel_cfg)?,
                SelectionScope::FirstLayerGlobal => match global_choice {
                    Some(c) => c,
                    None => {
                        let c = select(&scores, &sel_cfg)?;
                        global_choice = Some(c);
                        c
                    }
                },
            };
            selections.push(SelectionRecord {
                layer: li,
                scores,
                chosen,
            });
            discard_in_place(&mut w, &layout, q_start, chosen, sel_cfg.renormalize)?;
        }

        // context = weights x values over the same allowed pairs
        add_macs(req.macs, pair_count * dh as u64);
        let mut ctx = Tensor::<f32>::zeros(&[rows, d]);
        {
            let cdata = ctx.data_mut();
            for hh in 0..heads {
                for r in 0..rows {
                    let base = (hh * rows + r) * total_cols;
                    let out = &mut cdata[r * d + hh * dh..r * d + (hh + 1) * dh];
                    for &c in &allowed[r] {
                        let weight = w.data()[base + c];
                        let vrow = &v_col(c)[hh * dh..(hh + 1) * dh];
                        for j in 0..dh {
                            out[j] += weight * vrow[j];
                        }
                    }
                }
            }
        }

        let mut attn_out = matmul(&ctx, &lw.wo)?;
        add_macs(req.macs, (rows * d * d) as u64);
        if let Some(ll) = lora_l {
            attn_out.add_inplace(&ll.o.delta(&ctx, req.macs)?)?;
        }
        x.add_inplace(&attn_out)?;

        let normed2 = rms_norm(&x, &lw.ffn_gain)?;
        let mut u = matmul(&normed2, &lw.up)?;
        add_macs(req.macs, (rows * d * cfg.d_ff) as u64);
        if let Some(ll) = lora_l {
            u.add_inplace(&ll.up.delta(&normed2, req.macs)?)?;
        }
        let g = gelu(&u);
        let mut f = matmul(&g, &lw.down)?;
        add_macs(req.macs, (rows * cfg.d_ff * d) as u64);
        if let Some(ll) = lora_l {
            f.add_inplace(&ll.down.delta(&g, req.macs)?)?;
        }
        x.add_inplace(&f)?;

        if let Some(kv) = kv_out.as_mut() {
            kv.push((k.clone(), v.clone()));
        }
        if let Some(attn) = w_trace {
            let mut mean = Tensor::<f32>::zeros(&[rows, total_cols]);
            for hh in 0..heads {
                for r in 0..rows {
                    for c in 0..total_cols {
                        let cur = mean.at2(r, c);
                        mean.set2(r, c, cur + attn.at3(hh, r, c) / heads as f32);
                    }
                }
            }
            layer_traces.push(LayerTrace {
                attn,
                attn_mean: mean,
                residual: x.clone(),
            });
        }
    }

    let xf = rms_norm(&x, &model.weights.final_gain)?;
    let logits = match &input_range {
        Some(ir) => {
            let local = ir.start - q_start;
            let inp = xf.slice_rows(local, ir.len())?;
            add_macs(req.macs, (ir.len() * d * cfg.vocab_size) as u64);
            matmul_bt(&inp, &model.weights.embed)?
        }
        None => Tensor::zeros(&[0, cfg.vocab_size]),
    };

    let trace = req.capture_trace.then(|| ForwardTrace {
        layers: layer_traces,
        layout: layout.clone(),
        q_start,
        extra_cols: prefix_t,
        selections: selections.clone(),
    });
    Ok(ForwardOut {
        logits,
        trace,
        selections,
        kv: kv_out,
    })
}

/// One autoregressive stream. Prompt columns (when present) sit at the front
/// of the cache; decode steps append one input row at a time. Selections
/// made at prefill stay frozen unless the config said otherwise, in which
/// case each step re-scores from its own row's attention. Adapters are not
/// supported during decoding.
pub struct DecodeSession<'m> {
    model: &'m Model,
    cache: KvCache,
    layout: SegmentLayout,
    selection: Option<SelectionConfig>,
    frozen: Vec<Option<usize>>,
    input_len: usize,
    log: Vec<SelectionRecord>,
}

impl<'m> DecodeSession<'m> {
    fn start(
        model: &'m Model,
        tokens: &[u32],
        bank: Option<(&PromptBank, &PromptKvStore, SelectionConfig)>,
        capture_trace: bool,
    ) -> Result<(Self, ForwardOut)> {
        let cfg = &model.config;
        let input = embed_rows(tokens, &model.weights.embed)?;
        let (out, layout, selection) = match bank {
            Some((bank, store, sel)) => {
                sel.validate(bank.len())?;
                let layout = SegmentLayout::with_prompts(&bank.prompt_lens(), tokens.len())?;
                let mut req = ForwardReq::new(Feed::CachedPrompts {
                    input: &input,
                    layout: layout.clone(),
                    store,
                });
                req.policy = AttentionPolicy::PromptIsolated;
                req.selection = Some(sel);
                req.capture_kv = true;
                req.capture_trace = capture_trace;
                (model.forward(&req)?, layout, Some(sel))
            }
            None => {
                let layout = SegmentLayout::input_only(tokens.len());
                let mut req = ForwardReq::tokens(tokens);
                req.capture_kv = true;
                req.capture_trace = capture_trace;
                (model.forward(&req)?, layout, None)
            }
        };

        let mut cache = KvCache::new(cfg.n_layers, cfg.max_seq_len, cfg.d_model);
        let prompt_cols = layout.prompt_cols_total();
        let kv = out.kv.as_ref().expect("capture_kv was requested");
        for li in 0..cfg.n_layers {
            if let Some((bank, store, _)) = bank {
                let mut row = 0;
                for p in 0..bank.len() {
                    let (kp, vp) = (store.k(p, li), store.v(p, li));
                    for local in 0..kp.dim(0) {
                        cache.write_row(li, row, kp.row(local), vp.row(local))?;
                        row += 1;
                    }
                }
                debug_assert_eq!(row, prompt_cols);
            }
            let (kc, vc) = &kv[li];
            for r in 0..kc.dim(0) {
                cache.write_row(li, prompt_cols + r, kc.row(r), vc.row(r))?;
            }
        }
        cache.advance(prompt_cols + tokens.len())?;

        let frozen: Vec<Option<usize>> = match &selection {
            Some(sel) if sel.freeze_after_prefill => {
                let mut per_layer = vec![None; cfg.n_layers];
                for rec in &out.selections {
                    per_layer[rec.layer] = Some(rec.chosen);
                }
                // first-layer-global records carry the same choice everywhere
                per_layer
            }
            _ => vec![None; cfg.n_layers],
        };

        let session = DecodeSession {
            model,
            cache,
            layout,
            selection,
            frozen,
            input_len: tokens.len(),
            log: out.selections.clone(),
        };
        Ok((session, out))
    }

    pub fn selections(&self) -> &[SelectionRecord] {
        &self.log
    }

    pub fn input_len(&self) -> usize {
        self.input_len
    }

    /// Append one token; returns its next-token logits `[1, vocab]`.
    pub fn step(&mut self, token: u32) -> Result<Tensor<f32>> {
        let cfg = &self.model.config;
        let (d, heads, dh) = (cfg.d_model, cfg.n_heads, cfg.head_dim());
        if self.cache.len() + 1 > self.cache.capacity() {
            return Err(Error::SequenceOverflow {
                total: self.cache.len() + 1,
                max: self.cache.capacity(),
            });
        }
        let mut x = embed_rows(&[token], &self.model.weights.embed)?;
        let pos = self.input_len;
        let (cos_tab, sin_tab) = rope_tables(&[pos], dh);
        let scale = 1.0 / (dh as f32).sqrt();
        let m = self.layout.prompt_count();
        let prompt_ranges: Vec<std::ops::Range<usize>> = (0..m)
            .map(|i| self.layout.prompt_range(i).expect("prompt segments are 0..m"))
            .collect();
        let self_col = self.cache.len();
        let mut step_choice: Option<usize> = None;

        for li in 0..cfg.n_layers {
            let lw = &self.model.weights.layers[li];
            let normed = rms_norm(&x, &lw.attn_gain)?;
            let mut q = matmul(&normed, &lw.wq)?;
            let mut k = matmul(&normed, &lw.wk)?;
            let v = matmul(&normed, &lw.wv)?;
            rope_rotate_row(q.row_mut(0), &cos_tab, &sin_tab, heads, dh);
            rope_rotate_row(k.row_mut(0), &cos_tab, &sin_tab, heads, dh);

            let kc = self.cache.k_rows(li);
            let vc = self.cache.v_rows(li);
            let cols = self_col + 1;
            let kk = |c: usize| -> &[f32] {
                if c == self_col {
                    k.row(0)
                } else {
                    &kc[c * d..(c + 1) * d]
                }
            };
            let vv = |c: usize| -> &[f32] {
                if c == self_col {
                    v.row(0)
                } else {
                    &vc[c * d..(c + 1) * d]
                }
            };

            // every published column is visible to the new input row
            let mut w = vec![0.0f32; heads * cols];
            for hh in 0..heads {
                let qrow = &q.row(0)[hh * dh..(hh + 1) * dh];
                let row = &mut w[hh * cols..(hh + 1) * cols];
                for (c, slot) in row.iter_mut().enumerate() {
                    let krow = &kk(c)[hh * dh..(hh + 1) * dh];
                    let mut acc = 0.0f32;
                    for j in 0..dh {
                        acc += qrow[j] * krow[j];
                    }
                    *slot = acc * scale;
                }
                softmax_gathered(row);
            }

            if let Some(sel) = self.selection {
                if m > 0 {
                    let chosen = match self.frozen[li] {
                        Some(c) => c,
                        None => {
                            // re-score from this row's own attention
                            let mut scores = vec![0.0f32; m];
                            for (i, range) in prompt_ranges.iter().enumerate() {
                                let mut acc = 0.0f64;
                                for hh in 0..heads {
                                    for c in range.clone() {
                                        acc += w[hh * cols + c] as f64;
                                    }
                                }
                                scores[i] = (acc / (heads * range.len()) as f64) as f32;
                            }
                            let chosen = match sel.scope {
                                SelectionScope::Forced(i) => i,
                                SelectionScope::PerLayer => select(&scores, &sel)?,
                                SelectionScope::FirstLayerGlobal => match step_choice {
                                    Some(c) => c,
                                    None => {
                                        let c = select(&scores, &sel)?;
                                        step_choice = Some(c);
                                        c
                                    }
                                },
                            };
                            self.log.push(SelectionRecord {
                                layer: li,
                                scores,
                                chosen,
                            });
                            chosen
                        }
                    };
                    for hh in 0..heads {
                        let row = &mut w[hh * cols..(hh + 1) * cols];
                        let mut removed = 0.0f64;
                        for (i, range) in prompt_ranges.iter().enumerate() {
                            if i == chosen {
                                continue;
                            }
                            for c in range.clone() {
                                removed += row[c] as f64;
                                row[c] = 0.0;
                            }
                        }
                        if sel.renormalize && removed != 0.0 {
                            let mut remaining = 0.0f64;
                            for &val in row.iter() {
                                remaining += val as f64;
                            }
                            if remaining > 0.0 {
                                for val in row.iter_mut() {
                                    *val = ((*val as f64) / remaining) as f32;
                                }
                            }
                        }
                    }
                }
            }

            let mut ctx = Tensor::<f32>::zeros(&[1, d]);
            {
                let cdata = ctx.data_mut();
                for hh in 0..heads {
                    let out = &mut cdata[hh * dh..(hh + 1) * dh];
                    for c in 0..cols {
                        let weight = w[hh * cols + c];
                        let vrow = &vv(c)[hh * dh..(hh + 1) * dh];
                        for j in 0..dh {
                            out[j] += weight * vrow[j];
                        }
                    }
                }
            }

            let attn_out = matmul(&ctx, &lw.wo)?;
            x.add_inplace(&attn_out)?;
            let normed2 = rms_norm(&x, &lw.ffn_gain)?;
            let u = matmul(&normed2, &lw.up)?;
            let g = gelu(&u);
            let f = matmul(&g, &lw.down)?;
            x.add_inplace(&f)?;

            self.cache.write_row(li, self_col, k.row(0), v.row(0))?;
        }

        self.cache.advance(1)?;
        self.input_len += 1;
        self.layout.grow_input(1);
        let xf = rms_norm(&x, &self.model.weights.final_gain)?;
        matmul_bt(&xf, &self.model.weights.embed)
    }
}
