//! Synthetic fact-recall task with disjoint token vocabularies per domain.
//!
//! Each domain owns a block of the vocabulary split into subjects, relations,
//! and objects. A corpus is a set of functional facts (one object per
//! (subject, relation) pair), rendered both as three-token training docs and
//! as multiple-choice recall items whose distractors come from the same
//! domain.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diag::McItem;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub struct TaskSpec {
    pub n_domains: usize,
    pub facts_per_domain: usize,
    pub subjects_per_domain: usize,
    pub relations_per_domain: usize,
    pub objects_per_domain: usize,
    pub options_per_item: usize,
    /// facts chained into one training doc; >1 teaches the model to ignore
    /// unrelated context, which prepended prompts later rely on
    pub facts_per_doc: usize,
    /// facts from the doc repeated at its end; teaches in-context recall
    pub reviews_per_doc: usize,
    /// other-domain facts spliced into each chain so cross-domain attention
    /// is trained rather than left to drift
    pub intruders_per_doc: usize,
    /// same-domain facts prepended to each quiz context
    pub warmup_facts_per_item: usize,
    /// times each fact appears across the docs, each time with fresh
    /// neighbors and position
    pub doc_rounds: usize,
    pub vocab_size: usize,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            n_domains: 2,
            facts_per_domain: 48,
            subjects_per_domain: 12,
            relations_per_domain: 8,
            objects_per_domain: 16,
            options_per_item: 4,
            facts_per_doc: 4,
            reviews_per_doc: 1,
            intruders_per_doc: 1,
            warmup_facts_per_item: 1,
            doc_rounds: 3,
            vocab_size: 256,
        }
    }
}

impl TaskSpec {
    pub fn block_size(&self) -> usize {
        self.subjects_per_domain + self.relations_per_domain + self.objects_per_domain
    }

    /// Start-of-sequence token. Every doc and quiz context opens with it so
    /// attention heads have a constant, uninformative key to park mass on;
    /// without such a sink, softmax forces 2-token quiz inputs to dump mass
    /// onto whatever prompt is prepended, relevant or not.
    pub fn bos_token(&self) -> u32 {
        (self.n_domains * self.block_size()) as u32
    }

    /// Tokens actually used; the rest of the vocab stays dark.
    pub fn used_vocab(&self) -> usize {
        self.n_domains * self.block_size() + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_domains == 0
            || self.subjects_per_domain == 0
            || self.relations_per_domain == 0
            || self.objects_per_domain == 0
        {
            return Err(Error::InvalidConfig("task dimensions must be positive".into()));
        }
        let pairs = self.subjects_per_domain * self.relations_per_domain;
        if self.facts_per_domain == 0 || self.facts_per_domain > pairs {
            return Err(Error::InvalidConfig(format!(
                "facts_per_domain must be in 1..={pairs} for this subject/relation grid"
            )));
        }
        if self.options_per_item < 2 || self.options_per_item > self.objects_per_domain {
            return Err(Error::InvalidConfig(
                "options_per_item must be in 2..=objects_per_domain".into(),
            ));
        }
        if self.facts_per_doc == 0 || self.doc_rounds == 0 {
            return Err(Error::InvalidConfig(
                "facts_per_doc and doc_rounds must be positive".into(),
            ));
        }
        if self.used_vocab() > self.vocab_size {
            return Err(Error::VocabTooSmall(format!(
                "need {} tokens, have {}",
                self.used_vocab(),
                self.vocab_size
            )));
        }
        Ok(())
    }

    pub fn subject_token(&self, domain: usize, i: usize) -> u32 {
        debug_assert!(i < self.subjects_per_domain);
        (domain * self.block_size() + i) as u32
    }

    pub fn relation_token(&self, domain: usize, i: usize) -> u32 {
        debug_assert!(i < self.relations_per_domain);
        (domain * self.block_size() + self.subjects_per_domain + i) as u32
    }

    pub fn object_token(&self, domain: usize, i: usize) -> u32 {
        debug_assert!(i < self.objects_per_domain);
        (domain * self.block_size() + self.subjects_per_domain + self.relations_per_domain + i)
            as u32
    }

    /// Domain owning `token`, or None for BOS and unused ids.
    pub fn token_domain(&self, token: u32) -> Option<usize> {
        let t = token as usize;
        if t >= self.n_domains * self.block_size() {
            return None;
        }
        Some(t / self.block_size())
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub struct Fact {
    pub domain: usize,
    pub subject: u32,
    pub relation: u32,
    pub object: u32,
}

impl Fact {
    pub fn doc(&self) -> Vec<u32> {
        vec![self.subject, self.relation, self.object]
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub spec: TaskSpec,
    pub facts: Vec<Fact>,
    /// chains of `facts_per_doc` facts drawn across domains, plus reviews
    pub docs: Vec<Vec<u32>>,
    pub items: Vec<McItem>,
}

impl Corpus {
    /// One `[bos, subject, relation, object]` doc per fact, the recall
    /// geometry the quiz items use. Adapters tuned for recovery train on
    /// these.
    pub fn fact_docs(&self, domain: Option<usize>) -> Vec<Vec<u32>> {
        let bos = self.spec.bos_token();
        self.facts
            .iter()
            .filter(|f| domain.map_or(true, |d| f.domain == d))
            .map(|f| {
                let mut doc = vec![bos];
                doc.extend(f.doc());
                doc
            })
            .collect()
    }

    pub fn domain_items(&self, domain: usize) -> Vec<McItem> {
        self.items
            .iter()
            .filter(|it| it.domain == domain)
            .cloned()
            .collect()
    }
}

/// Deterministic for a given (spec, seed). Within each domain the
/// (subject, relation) pairs are unique, so the mapping to objects is a
/// function and a small model can memorize it.
pub fn gen_corpus(spec: &TaskSpec, seed: u64) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut facts = Vec::with_capacity(spec.n_domains * spec.facts_per_domain);
    for domain in 0..spec.n_domains {
        let mut pairs: Vec<(usize, usize)> = (0..spec.subjects_per_domain)
            .flat_map(|s| (0..spec.relations_per_domain).map(move |r| (s, r)))
            .collect();
        pairs.shuffle(&mut rng);
        pairs.truncate(spec.facts_per_domain);
        for (s, r) in pairs {
            let o = rng.gen_range(0..spec.objects_per_domain);
            facts.push(Fact {
                domain,
                subject: spec.subject_token(domain, s),
                relation: spec.relation_token(domain, r),
                object: spec.object_token(domain, o),
            });
        }
    }

    let mut docs = Vec::new();
    for domain in 0..spec.n_domains {
        let own: Vec<usize> = (0..facts.len()).filter(|&i| facts[i].domain == domain).collect();
        let foreign: Vec<usize> = (0..facts.len()).filter(|&i| facts[i].domain != domain).collect();
        for _ in 0..spec.doc_rounds {
            let mut order = own.clone();
            order.shuffle(&mut rng);
            for chunk in order.chunks(spec.facts_per_doc) {
                // Chains are domain-flavored but not domain-pure: intruder
                // facts from the other domain keep cross-domain attention
                // trained, otherwise its drift swamps the bank-selection
                // signal.
                let mut members: Vec<usize> = chunk.to_vec();
                for _ in 0..spec.intruders_per_doc {
                    let at = rng.gen_range(0..=members.len());
                    members.insert(at, foreign[rng.gen_range(0..foreign.len())]);
                }
                let mut doc = Vec::with_capacity(1 + 3 * (members.len() + spec.reviews_per_doc));
                doc.push(spec.bos_token());
                for &i in &members {
                    doc.extend(facts[i].doc());
                }
                // Reviews: facts from this doc repeat at its end. Copying
                // their objects from earlier context is always cheaper than
                // memorizing, so the base learns in-context recall alongside
                // rote storage; prompts later exploit exactly that pathway.
                for _ in 0..spec.reviews_per_doc {
                    let review = members[rng.gen_range(0..members.len())];
                    doc.extend(facts[review].doc());
                }
                docs.push(doc);
            }
        }
    }

    let mut items = Vec::with_capacity(facts.len());
    for (fi, fact) in facts.iter().enumerate() {
        let mut pool: Vec<u32> = (0..spec.objects_per_domain)
            .map(|o| spec.object_token(fact.domain, o))
            .filter(|&t| t != fact.object)
            .collect();
        pool.shuffle(&mut rng);
        let mut options: Vec<Vec<u32>> = pool[..spec.options_per_item - 1]
            .iter()
            .map(|&t| vec![t])
            .collect();
        let answer = rng.gen_range(0..spec.options_per_item);
        options.insert(answer, vec![fact.object]);
        // Same-domain warmup facts precede the query, mirroring the docs'
        // mid-chain shape. The queried fact itself must not be among them.
        let mut context = Vec::with_capacity(3 + 3 * spec.warmup_facts_per_item);
        context.push(spec.bos_token());
        for _ in 0..spec.warmup_facts_per_item {
            let warmup = loop {
                let j = rng.gen_range(0..facts.len());
                if j != fi && facts[j].domain == fact.domain {
                    break &facts[j];
                }
            };
            context.extend(warmup.doc());
        }
        context.push(fact.subject);
        context.push(fact.relation);
        items.push(McItem {
            context,
            options,
            answer,
            domain: fact.domain,
        });
    }

    Ok(Corpus {
        spec: *spec,
        facts,
        docs,
        items,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn default_spec_fits_vocab() {
        let spec = TaskSpec::default();
        spec.validate().unwrap();
        assert_eq!(spec.block_size(), 36);
        assert_eq!(spec.bos_token(), 72);
        assert_eq!(spec.used_vocab(), 73);
    }

    #[test]
    fn docs_open_with_bos_then_domain_tokens() {
        let spec = TaskSpec::default();
        let c = gen_corpus(&spec, 3).unwrap();
        let mut seen = vec![false; spec.n_domains];
        for doc in &c.docs {
            assert_eq!(doc[0], spec.bos_token());
            for &tok in &doc[1..] {
                seen[spec.token_domain(tok).unwrap()] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn same_seed_reproduces_corpus() {
        let spec = TaskSpec::default();
        let a = gen_corpus(&spec, 7).unwrap();
        let b = gen_corpus(&spec, 7).unwrap();
        assert_eq!(a.facts, b.facts);
        assert_eq!(a.docs, b.docs);
        for (x, y) in a.items.iter().zip(&b.items) {
            assert_eq!(x.context, y.context);
            assert_eq!(x.options, y.options);
            assert_eq!(x.answer, y.answer);
        }
    }

    #[test]
    fn different_seeds_differ() {
        let spec = TaskSpec::default();
        let a = gen_corpus(&spec, 7).unwrap();
        let b = gen_corpus(&spec, 8).unwrap();
        assert_ne!(a.facts, b.facts);
    }

    #[test]
    fn subject_relation_pairs_are_unique_per_domain() {
        let spec = TaskSpec::default();
        let c = gen_corpus(&spec, 11).unwrap();
        let mut seen = BTreeSet::new();
        for f in &c.facts {
            assert!(seen.insert((f.domain, f.subject, f.relation)));
        }
        assert_eq!(c.facts.len(), spec.n_domains * spec.facts_per_domain);
    }

    #[test]
    fn items_quiz_the_matching_fact() {
        let spec = TaskSpec::default();
        let c = gen_corpus(&spec, 5).unwrap();
        assert_eq!(c.items.len(), c.facts.len());
        let known: BTreeSet<(u32, u32, u32)> = c
            .facts
            .iter()
            .map(|f| (f.subject, f.relation, f.object))
            .collect();
        for (item, fact) in c.items.iter().zip(&c.facts) {
            assert_eq!(item.context.len(), 3 + 3 * spec.warmup_facts_per_item);
            assert_eq!(item.context[0], spec.bos_token());
            for w in item.context[1..item.context.len() - 2].chunks(3) {
                let warmup = (w[0], w[1], w[2]);
                assert!(known.contains(&warmup));
                assert_ne!((warmup.0, warmup.1), (fact.subject, fact.relation));
                assert_eq!(c.spec.token_domain(warmup.0), Some(fact.domain));
            }
            let tail = &item.context[item.context.len() - 2..];
            assert_eq!(tail, &[fact.subject, fact.relation]);
            assert_eq!(item.options[item.answer], vec![fact.object]);
            assert_eq!(item.options.len(), spec.options_per_item);
            let distinct: BTreeSet<_> = item.options.iter().collect();
            assert_eq!(distinct.len(), item.options.len());
            for opt in &item.options {
                assert_eq!(opt.len(), 1);
                assert_eq!(spec.token_domain(opt[0]), Some(fact.domain));
                let t = opt[0] as usize - fact.domain * spec.block_size();
                assert!(t >= spec.subjects_per_domain + spec.relations_per_domain);
            }
        }
    }

    #[test]
    fn domain_filters_partition_the_corpus() {
        let spec = TaskSpec::default();
        let c = gen_corpus(&spec, 9).unwrap();
        let d0 = c.fact_docs(Some(0));
        let d1 = c.fact_docs(Some(1));
        assert_eq!(d0.len() + d1.len(), c.fact_docs(None).len());
        assert_eq!(c.domain_items(0).len(), spec.facts_per_domain);
    }

    #[test]
    fn docs_chain_whole_facts_with_even_coverage() {
        let spec = TaskSpec::default();
        let c = gen_corpus(&spec, 13).unwrap();
        let known: BTreeSet<(u32, u32, u32)> = c
            .facts
            .iter()
            .map(|f| (f.subject, f.relation, f.object))
            .collect();
        let mut counts: std::collections::BTreeMap<(u32, u32, u32), usize> =
            Default::default();
        for doc in &c.docs {
            assert_eq!(doc.len() % 3, 1);
            assert!(
                doc.len()
                    <= 1 + 3 * (spec.facts_per_doc + spec.intruders_per_doc + spec.reviews_per_doc)
            );
            let triples: Vec<(u32, u32, u32)> =
                doc[1..].chunks(3).map(|t| (t[0], t[1], t[2])).collect();
            for t in &triples {
                assert!(known.contains(t));
            }
            // trailing triples review earlier ones
            let body_len = triples.len() - spec.reviews_per_doc;
            let (body, reviews) = triples.split_at(body_len);
            for r in reviews {
                assert!(body.contains(r));
            }
            for t in body {
                *counts.entry(*t).or_default() += 1;
            }
        }
        assert!(counts.values().all(|&n| n >= spec.doc_rounds));
        assert_eq!(counts.len(), c.facts.len());
    }

    #[test]
    fn small_vocab_is_rejected() {
        let spec = TaskSpec {
            vocab_size: 72,
            ..TaskSpec::default()
        };
        assert!(matches!(gen_corpus(&spec, 0), Err(Error::VocabTooSmall(_))));
    }

    #[test]
    fn oversubscribed_fact_grid_is_rejected() {
        let spec = TaskSpec {
            facts_per_domain: 97,
            ..TaskSpec::default()
        };
        assert!(gen_corpus(&spec, 0).is_err());
    }
}
