//! Shared fixtures for the criterion benchmarks.

use dyrate_core::engine::{DecodeConfig, PruneMode, PruneStrategy};
use dyrate_core::model::{init_model, ModelConfig, Params, TokenSegmentation};
use dyrate_core::workload::{gen_example, Example, SyntheticTask};

pub fn bench_model() -> Params {
    init_model(&ModelConfig { max_seq: 256, seed: 17, ..Default::default() }).unwrap()
}

pub fn bench_task() -> SyntheticTask {
    SyntheticTask { n_sys: 2, n_img: 16, n_ins: 2, response_len: 12, ..Default::default() }
}

pub fn bench_example() -> Example {
    gen_example(&bench_task(), 0).unwrap()
}

pub fn bench_decode_config(max_new_tokens: usize) -> DecodeConfig {
    DecodeConfig { max_new_tokens, prune_layer: 1, ..Default::default() }
}

/// One full generation run, returning the FLOPs ratio so the result is used.
pub fn run_generation(params: &Params, ex: &Example, strat: &PruneStrategy, mode: PruneMode) -> f64 {
    let cfg = bench_decode_config(12);
    let (_, schedule) = dyrate_core::engine::generate(
        params,
        None,
        &ex.prompt,
        &ex.seg,
        &cfg,
        strat,
        mode,
    )
    .unwrap();
    schedule.flops_ratio_pct()
}

pub fn prompt_segmentation() -> TokenSegmentation {
    bench_example().seg
}
