//! Runs the full recovery and routing study at the default configuration and
//! prints the per-seed and aggregate numbers.

use dynaprompt::harness::experiment::{run_study, ExperimentConfig};

fn main() {
    let cfg = ExperimentConfig::default();
    let seeds: Vec<u64> = (0..5).collect();
    let t0 = std::time::Instant::now();
    let (outcomes, summary) = run_study(&cfg, &seeds).expect("study failed");
    for o in &outcomes {
        println!(
            "seed {}: base {:.3} compressed {:.3} prompt {:.3} lora {:.3} idp {:.3} concat {:.3} oracle {:.3}",
            o.seed,
            o.base.accuracy,
            o.compressed.accuracy,
            o.prompt.accuracy,
            o.lora.accuracy,
            o.idp.accuracy,
            o.concat.accuracy,
            o.oracle.accuracy
        );
        let ladder: Vec<String> = o
            .ladder
            .iter()
            .map(|p| format!("{}b {:.3}", p.bits, p.accuracy))
            .collect();
        println!("        ladder: {}", ladder.join("  "));
    }
    println!(
        "means: base {:.3} compressed {:.3} gap {:.3} prompt {:.3} (rec {:.2}) lora {:.3} (rec {:.2})",
        summary.base,
        summary.compressed,
        summary.gap,
        summary.prompt,
        summary.prompt_recovery,
        summary.lora,
        summary.lora_recovery
    );
    println!(
        "routing: idp {:.3} concat {:.3} oracle {:.3} (idp/oracle {:.3})",
        summary.idp,
        summary.concat,
        summary.oracle,
        summary.idp / summary.oracle
    );
    let ladder: Vec<String> = summary
        .ladder
        .iter()
        .map(|p| format!("{}b {:.3}", p.bits, p.accuracy))
        .collect();
    println!("mean ladder: {}", ladder.join("  "));
    println!("elapsed: {:.1?}", t0.elapsed());
}
