//! Scoring: WER, pipeline comparison, mixing-ratio sweeps and latency.

pub mod latency;
pub mod metrics;
pub mod pipeline;
pub mod report;
pub mod sweep;

pub use latency::{measure_latency, LatencyConfig, LatencyReport, LatencySystem, SystemLatency};
pub use metrics::{align, relative_improvement, relative_reduction, wer, EditCounts, UtteranceErrors, WerReport};
pub use pipeline::{
    decode_testset, evaluate_pipeline, DecodedUtterance, EvalConfig, PipelineReport, RescorerSelector, Selector,
    SystemResult, BASELINE,
};
pub use report::{pipeline_rows, sweep_rows, sweep_svg, write_csv, write_json, CsvRow};
pub use sweep::{mixing_sweep, PerDomain, PerDomainReduction, SweepConfig, SweepInputs, SweepReport, SweepRow, SweepRun, DEFAULT_RATIOS};
