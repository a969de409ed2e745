//! Experiment orchestration: configuration, training/loading, attack runs,
//! ablation grids, and report files.

mod config;
mod experiment;

pub use config::ExperimentConfig;
pub use experiment::{
    ablation_variants, build_eval_set, compressed_token_count, ensure_models, run_experiment,
    run_variant, write_summary_csv, AblationGrid, ClipResult, HarnessError, VariantSpec, World,
    SURROGATE_ARCH, TARGET_ARCHS,
};
