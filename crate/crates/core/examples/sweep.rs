//! Scratch calibration sweep over task hardness and model width.

use dynaprompt::compress::{compress_model, CompressOp, QuantSpec};
use dynaprompt::diag::{mc_accuracy, EvalMethod};
use dynaprompt::harness::experiment::mix_seed;
use dynaprompt::harness::task::{gen_corpus, TaskSpec};
use dynaprompt::harness::train::{pretrain_base, TrainConfig};
use dynaprompt::model::ModelConfig;

fn main() {
    // facts subj rel obj opts d_model d_ff layers steps wd
    let cases: Vec<(usize, usize, usize, usize, usize, usize, usize, usize, usize, f64)> = vec![
        (128, 16, 8, 16, 8, 28, 112, 2, 2000, 0.0),
        (128, 16, 8, 16, 8, 32, 128, 2, 1500, 0.0),
        (128, 16, 8, 16, 8, 32, 128, 2, 2000, 0.0),
        (160, 20, 8, 16, 8, 32, 128, 2, 2000, 0.0),
    ];
    for (facts, subj, rel, obj, opts, d, dff, layers, steps, wd) in cases {
        let task = TaskSpec {
            n_domains: 2,
            facts_per_domain: facts,
            subjects_per_domain: subj,
            relations_per_domain: rel,
            objects_per_domain: obj,
            options_per_item: opts,
            facts_per_doc: 4,
            doc_rounds: 6,
            vocab_size: 256,
        };
        let model_cfg = ModelConfig {
            d_model: d,
            n_heads: 2,
            n_layers: layers,
            d_ff: dff,
            vocab_size: 256,
            max_seq_len: 128,
            seed: 0,
        };
        let mut accs = vec![];
        let mut ladders = vec![];
        let t0 = std::time::Instant::now();
        for seed in 0..2u64 {
            let corpus = gen_corpus(&task, mix_seed(seed, 1)).unwrap();
            let mut mc = model_cfg;
            mc.seed = mix_seed(seed, 2);
            let tc = TrainConfig {
                steps,
                batch: 16,
                lr: 3e-3,
                lr_final_fraction: 0.1,
                weight_decay: wd,
                seed: mix_seed(seed, 3),
                ..TrainConfig::default()
            };
            let (model, _) = pretrain_base(&mc, &tc, &corpus.docs).unwrap();
            let base = mc_accuracy(&model, &EvalMethod::Plain, &corpus.items, false)
                .unwrap()
                .accuracy;
            accs.push(base);
            let mut lad = vec![];
            for bits in [8u8, 4, 3, 2] {
                let op = CompressOp::Quantize(QuantSpec::new(bits).unwrap());
                let (m, _) = compress_model(&model, &op).unwrap();
                let a = mc_accuracy(&m, &EvalMethod::Plain, &corpus.items, false)
                    .unwrap()
                    .accuracy;
                lad.push(a);
            }
            println!("  seed {seed}: base {base:.3} 3b {:.3}", lad[2]);
            ladders.push(lad);
        }
        let mean = |i: usize| ladders.iter().map(|l| l[i]).sum::<f64>() / ladders.len() as f64;
        println!(
            "f{facts} s{subj} r{rel} o{obj} k{opts} d{d} ff{dff} L{layers} st{steps} wd{wd}: base {:.3} | 8b {:.3} 4b {:.3} 3b {:.3} 2b {:.3} | {:.0?}",
            accs.iter().sum::<f64>() / accs.len() as f64,
            mean(0),
            mean(1),
            mean(2),
            mean(3),
            t0.elapsed()
        );
    }
}
