//! End-to-end experiment driver: synthetic task, training loops, recovery and
//! routing studies, and the latency benchmark.

pub mod bench;
pub mod experiment;
pub mod report;
pub mod task;
pub mod train;

pub use task::{gen_corpus, Corpus, Fact, TaskSpec};
pub use train::{
    
    pretrain_base, tune_adapter, tune_from, vocab_prompt, AdamW, AdapterKind, SpanMode,
    TrainConfig, TrainLog, TunedAdapter,
};
