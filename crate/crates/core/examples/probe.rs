//! Scratch: item-shape ablation. Same model and prompts, two quiz formats.

use dynaprompt::adapters::{PromptBank, SoftPrompt};
use dynaprompt::compress::{compress_model, CompressOp, QuantSpec};
use dynaprompt::diag::{mc_accuracy, EvalMethod, McItem};
use dynaprompt::harness::experiment::{mix_seed, ExperimentConfig};
use dynaprompt::harness::{
    gen_corpus, pretrain_base, tune_adapter, tune_from, vocab_prompt, AdapterKind, Corpus,
    SpanMode, TunedAdapter,
};
use dynaprompt::idp::{build_prompt_cache, idp_forward, SelectionConfig};
use dynaprompt::model::Model;

fn bank_for(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    model: &Model,
    seed: u64,
    lr: f64,
    len: usize,
    steps: usize,
) -> PromptBank {
    let mut prompts: Vec<SoftPrompt> = Vec::new();
    for domain in 0..cfg.task.n_domains {
        let mut t = cfg.tune;
        t.steps = steps;
        t.lr = lr;
        t.seed = mix_seed(seed, 5 + domain as u64);
        let docs = corpus.fact_docs(Some(domain));
        let stream: Vec<u32> = corpus
            .facts
            .iter()
            .filter(|f| f.domain == domain)
            .flat_map(|f| f.doc())
            .collect();
        let tokens: Vec<u32> = (0..len).map(|i| stream[i % stream.len()]).collect();
        let init_p = vocab_prompt(model, &tokens, &format!("domain{domain}")).unwrap();
        let (tuned, _) =
            tune_from(model, TunedAdapter::Prompt(init_p), &t, &docs, SpanMode::Tail).unwrap();
        let TunedAdapter::Prompt(p) = tuned else { unreachable!() };
        prompts.push(p);
    }
    PromptBank::new(prompts).unwrap()
}

fn eval_set(
    label: &str,
    model: &Model,
    bank: &PromptBank,
    single: &SoftPrompt,
    items: &[McItem],
    n_domains: usize,
) {
    let store = build_prompt_cache(model, bank).unwrap();
    let sel = SelectionConfig::default();
    let comp = mc_accuracy(model, &EvalMethod::Plain, items, true)
        .unwrap()
        .accuracy;
    let single_bank = PromptBank::new(vec![single.clone()]).unwrap();
    let single_store = build_prompt_cache(model, &single_bank).unwrap();
    let rec = mc_accuracy(
        model,
        &EvalMethod::Idp {
            bank: &single_bank,
            store: Some(&single_store),
            config: sel.clone(),
        },
        items,
        true,
    )
    .unwrap()
    .accuracy;
    let idp = mc_accuracy(
        model,
        &EvalMethod::Idp {
            bank,
            store: Some(&store),
            config: sel.clone(),
        },
        items,
        true,
    )
    .unwrap()
    .accuracy;
    let concat = mc_accuracy(model, &EvalMethod::Concat { bank }, items, true)
        .unwrap()
        .accuracy;
    let mut right = 0usize;
    for domain in 0..n_domains {
        let sub = PromptBank::new(vec![bank.get(domain).clone()]).unwrap();
        let st = build_prompt_cache(model, &sub).unwrap();
        let dom_items: Vec<McItem> =
            items.iter().filter(|i| i.domain == domain).cloned().collect();
        let r = mc_accuracy(
            model,
            &EvalMethod::Idp {
                bank: &sub,
                store: Some(&st),
                config: sel.clone(),
            },
            &dom_items,
            true,
        )
        .unwrap();
        right += (r.accuracy * dom_items.len() as f64).round() as usize;
    }
    let oracle = right as f64 / items.len() as f64;
    let mut hits = [[0usize; 2]; 2];
    for item in items {
        let out =
            idp_forward(model, &item.context, bank, Some(&store), &sel, false, None).unwrap();
        for r in &out.selections {
            if r.chosen == item.domain {
                hits[r.layer][item.domain] += 1;
            }
        }
    }
    let n = items.len() as f64;
    println!(
        "  {label}: comp {comp:.3} mixed {rec:.3} idp {idp:.3} oracle {oracle:.3} ratio {:.3} concat {concat:.3} route L0 {:.2}/{:.2} L1 {:.2}/{:.2}",
        idp / oracle,
        hits[0][0] as f64 * 2.0 / n,
        hits[0][1] as f64 * 2.0 / n,
        hits[1][0] as f64 * 2.0 / n,
        hits[1][1] as f64 * 2.0 / n,
    );
}

fn main() {
    let base_cfg = ExperimentConfig::default();
    let mut worlds: Vec<(String, ExperimentConfig)> = Vec::new();
    let mut d32 = base_cfg.clone();
    d32.model.d_model = 32;
    d32.model.n_heads = 4;
    d32.model.d_ff = 128;
    let mut w = d32.clone();
    w.task.intruders_per_doc = 2;
    worlds.push(("d32h4 intr2".into(), w));
    let mut w = d32.clone();
    w.task.reviews_per_doc = 2;
    worlds.push(("d32h4 rev2".into(), w));
    let mut w = d32.clone();
    w.task.intruders_per_doc = 2;
    w.task.reviews_per_doc = 2;
    worlds.push(("d32h4 intr2rev2".into(), w));
    for (name, cfg) in &worlds {
        println!("== {name} ==");
        for seed in [0u64, 1, 2] {
            let corpus = gen_corpus(&cfg.task, mix_seed(seed, 1)).unwrap();
            let mut mc = cfg.model.clone();
            mc.seed = mix_seed(seed, 2);
            let mut pre = cfg.pretrain;
            pre.seed = mix_seed(seed, 3);
            let (base_model, _) = pretrain_base(&mc, &pre, &corpus.docs).unwrap();
            let base = mc_accuracy(&base_model, &EvalMethod::Plain, &corpus.items, true)
                .unwrap()
                .accuracy;
            let op = CompressOp::Quantize(QuantSpec::new(cfg.quant_bits).unwrap());
            let (model, _) = compress_model(&base_model, &op).unwrap();
            println!("seed {seed}: base {base:.3}");
            let mut t = cfg.tune;
            t.seed = mix_seed(seed, 4);
            let (tuned, _) = tune_adapter(
                &model,
                AdapterKind::Prompt { len: cfg.prompt_len },
                &t,
                &corpus.fact_docs(None),
                "mixed",
                SpanMode::Tail,
            )
            .unwrap();
            let TunedAdapter::Prompt(single) = tuned else { unreachable!() };
            for len in [16usize, 24] {
                let bank = bank_for(cfg, &corpus, &model, seed, 1e-2, len, 700);
                let label = format!("len {len:2}");
                eval_set(&label, &model, &bank, &single, &corpus.items, 2);
            }
        }
    }
}
