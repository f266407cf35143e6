//! Sequence composition and attention masking rules.
//!
//! A forward pass runs over an ordered sequence of segments: zero or more
//! prompt segments followed by at most one input segment. The mask policy
//! decides which key columns each query row may see; everything downstream
//! (scoring, discard, caching) is phrased in terms of these segments.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};
use serde::{Deserialize, Serialize};
use std::ops::Range;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SegmentKind {
    /// Index into the prompt bank.
    Prompt(usize),
    Input,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub kind: SegmentKind,
    pub len: usize,
}

/// How query rows may attend to key columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttentionPolicy {
    /// Plain causal attention over the whole concatenation; prompts see
    /// earlier prompts. This is the naive-concatenation baseline.
    DenseCausal,
    /// Causal, but each prompt segment sees only itself; input rows see
    /// every prompt plus the causal input prefix.
    PromptIsolated,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentLayout {
    segments: Vec<Segment>,
}

impl SegmentLayout {
    pub fn new(segments: Vec<Segment>) -> Result<Self> {
        let mut seen_input = false;
        let mut next_prompt = 0;
        for seg in &segments {
            if seg.len == 0 {
                return Err(Error::InvalidLayout("zero-length segment".into()));
            }
            match seg.kind {
                SegmentKind::Prompt(i) => {
                    if seen_input {
                        return Err(Error::InvalidLayout(
                            "prompt segment after input".into(),
                        ));
                    }
                    if i != next_prompt {
                        return Err(Error::InvalidLayout(format!(
                            "prompt indices must run 0..m in order, got {i}"
                        )));
                    }
                    next_prompt += 1;
                }
                SegmentKind::Input => {
                    if seen_input {
                        return Err(Error::InvalidLayout("two input segments".into()));
                    }
                    seen_input = true;
                }
            }
        }
        Ok(SegmentLayout { segments })
    }

    pub fn input_only(n: usize) -> Self {
        SegmentLayout::new(vec![Segment {
            kind: SegmentKind::Input,
            len: n,
        }])
        .expect("valid by construction")
    }

    /// Prompt segments in bank order, then an input segment when
    /// `input_len > 0`.
    pub fn with_prompts(prompt_lens: &[usize], input_len: usize) -> Result<Self> {
        let mut segments: Vec<Segment> = prompt_lens
            .iter()
            .enumerate()
            .map(|(i, &len)| Segment {
                kind: SegmentKind::Prompt(i),
                len,
            })
            .collect();
        if input_len > 0 {
            segments.push(Segment {
                kind: SegmentKind::Input,
                len: input_len,
            });
        }
        SegmentLayout::new(segments)
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn total_len(&self) -> usize {
        self.segments.iter().map(|s| s.len).sum()
    }

    pub fn prompt_count(&self) -> usize {
        self.segments
            .iter()
            .filter(|s| matches!(s.kind, SegmentKind::Prompt(_)))
            .count()
    }

    pub fn prompt_cols_total(&self) -> usize {
        self.segments
            .iter()
            .filter(|s| matches!(s.kind, SegmentKind::Prompt(_)))
            .map(|s| s.len)
            .sum()
    }

    pub fn input_range(&self) -> Option<Range<usize>> {
        let mut start = 0;
        for seg in &self.segments {
            if seg.kind == SegmentKind::Input {
                return Some(start..start + seg.len);
            }
            start += seg.len;
        }
        None
    }

    pub fn input_len(&self) -> usize {
        self.input_range().map(|r| r.len()).unwrap_or(0)
    }

    pub fn prompt_range(&self, index: usize) -> Option<Range<usize>> {
        let mut start = 0;
        for seg in &self.segments {
            if seg.kind == SegmentKind::Prompt(index) {
                return Some(start..start + seg.len);
            }
            start += seg.len;
        }
        None
    }

    /// Segment kind owning a global position.
    pub fn kind_at(&self, pos: usize) -> Option<SegmentKind> {
        let mut start = 0;
        for seg in &self.segments {
            if pos < start + seg.len {
                return Some(seg.kind);
            }
            start += seg.len;
        }
        None
    }

    /// Extend the input segment (or add one) by `n` positions; used by
    /// incremental decoding.
    pub fn grow_input(&mut self, n: usize) {
        if let Some(seg) = self
            .segments
            .iter_mut()
            .find(|s| s.kind == SegmentKind::Input)
        {
            seg.len += n;
        } else {
            self.segments.push(Segment {
                kind: SegmentKind::Input,
                len: n,
            });
        }
    }

    /// May query row `q` attend to key column `k`? Positions are global
    /// indices into the concatenated sequence.
    pub fn allows(&self, policy: AttentionPolicy, q: usize, k: usize) -> bool {
        if k > q {
            return false;
        }
        match policy {
            AttentionPolicy::DenseCausal => true,
            AttentionPolicy::PromptIsolated => match (self.kind_at(q), self.kind_at(k)) {
                (Some(SegmentKind::Prompt(i)), Some(SegmentKind::Prompt(j))) => i == j,
                (Some(SegmentKind::Input), Some(_)) => true,
                // a prompt row never looks ahead into the input; k > q already
                // rules that out, so this arm is only reachable out of bounds
                _ => false,
            },
        }
    }

    /// Additive mask rows `[q_start, q_start+q_len) x [0, total_len)`.
    /// Allowed pairs are 0, blocked pairs the engine's -inf surrogate.
    pub fn build_mask_rows<E: Element>(
        &self,
        policy: AttentionPolicy,
        q_start: usize,
        q_len: usize,
    ) -> Tensor<E> {
        let cols = self.total_len();
        let mut m = Tensor::zeros(&[q_len, cols]);
        for r in 0..q_len {
            for c in 0..cols {
                if !self.allows(policy, q_start + r, c) {
                    m.set2(r, c, E::mask_neg_inf());
                }
            }
        }
        m
    }

    /// Full square additive mask over the layout.
    pub fn build_mask<E: Element>(&self, policy: AttentionPolicy) -> Tensor<E> {
        self.build_mask_rows(policy, 0, self.total_len())
    }
}
