//! End-to-end orchestration: victim, attack samples, attack, evaluation and
//! report artifacts.

mod config;
mod eval;
mod judge;
mod pipeline;
mod samples;

pub use config::PipelineConfig;
pub use eval::{eval_accuracy, eval_perplexity};
pub use judge::{judge_naturalness, parse_score, JudgeConfig, ENV_API_BASE, ENV_API_KEY, JUDGE_PROMPT};
pub use pipeline::{
    flip_log_entries, load_lexicon, load_prompts, load_victim, read_report, report_csv, run_pipeline,
    run_with_victim, train_victim, EvalReport, PipelineOutcome, VictimSource, BUNDLED_PROMPTS, FLIP_LOG,
    MANIFEST, REPORT_CSV, REPORT_JSON,
};
pub use samples::{prepare_samples, PreparedSamples, PromptSet, Rejection};
