//! Configuration, evaluation, ablations, the exact oracle and plot export.

mod ablation;
mod config;
mod eval;
mod oracle;
mod plot;
mod run;

pub use ablation::{
    mean_std, run_ablation, run_ablation_parallel, run_seed, summarize, AblationAggregate, AblationResult, AblationRow, OrderingCheck,
    ORDERING_TOLERANCE,
};
pub use config::{EvalMode, RunConfig, Variant, OUT_DIR_ENV};
pub use eval::{
    evaluate, lvip_retrieval, make_answerer, puzzle_rng, Answerer, CategoryReport, DecodeSettings, EvalReport,
    GreedyAnswerer, MapAnswerer, SampleAnswerer,
};
pub use oracle::{
    enumerate_posterior, enumerate_trajectories, policy_distribution, run_oracle, OracleConfig, OracleOutcome,
    PositionalReward, Posterior, TvPoint, ENUMERATION_LIMIT,
};
pub use plot::{collect_plotdata, melt_csv, write_csv, PlotRow};
pub use run::{
    build_datasets, eval_set, evaluate_variant, initial_model, load_model, run_gfn, run_name, run_sft, save_model,
    sft_config, Datasets, RunDir, MONITOR_PUZZLES,
};
