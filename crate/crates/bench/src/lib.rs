//! Shared fixtures for the criterion benches.

use ulab_core::databench::{generate_benchmark, GenConfig, SyntheticBenchmark};
use ulab_core::model::{LMConfig, LMParams, TokenId};

/// A benchmark small enough to evaluate in milliseconds.
pub fn small_bench() -> SyntheticBenchmark {
    let cfg = GenConfig {
        n_forget_facts: 16,
        n_retain_facts: 16,
        paraphrases_per_fact: 4,
        record_len: 32,
        n_records: 16,
        n_subjects: 16,
        n_relations: 4,
        n_objects: 12,
        n_filler: 8,
        n_finetune_facts: 8,
        n_finetune_records: 16,
        ..GenConfig::default()
    };
    generate_benchmark(&cfg).expect("fixture config is valid")
}

/// Freshly initialized model over `bench`'s vocabulary at the default width.
pub fn model(bench: &SyntheticBenchmark) -> LMParams<f32> {
    let cfg = LMConfig { vocab_size: bench.vocab_size(), ..LMConfig::default() };
    LMParams::init(cfg).expect("default architecture is valid")
}

pub fn tokens(records: &[ulab_core::databench::Record]) -> Vec<Vec<TokenId>> {
    records.iter().map(|r| r.tokens.clone()).collect()
}
