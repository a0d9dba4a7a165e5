//! Precision plans and the inference loop that executes them.

mod build;
mod engine;
mod plan;
mod qos;

pub use build::{compile_plan, CompiledPlan};
pub use engine::{
    decode, eval_perplexity, uses_exact_immediate, DecodeOutput, DynamicProvider, EvalMode,
    EvalResult, LayerTally, RuntimeOptions, StepRecord, Trace, TraceSummary,
};
pub use plan::{dynamic_pair, LayerPlan, PlanMethod, PrecisionPlan, Provenance, PLAN_VERSION};
pub use qos::{nearest_rank, qos_stats, QosStats};
