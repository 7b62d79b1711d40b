//! Synthetic benchmark, experimental protocols, evaluation and reports.

mod protocols;
mod report;
mod synth;

pub use protocols::{
    audit_disjoint, curve_label, evaluate, load_corpus, run_compare_prompts, run_experiment, run_experiment_with,
    run_fixed_lm_scale, run_migration, run_pre_ap, scale_label, Bench, DataSource, ExperimentSpec, Hyper,
    ModelSettings, PromptLayerSettings, Protocol, BENCHMARK_PATTERNS, PRE_AP,
};
pub use report::{
    format_3dp, format_aggregates, format_report, parse_report_jsonl, Aggregate, Report, ReportRow, ReportStyle,
};
pub use synth::{
    benchmark_domains, by_domain, gen_glosses, gen_synthetic_corpus, CueSpec, GlossSpec, DomainSpec, SyntheticSpec, NEGATIVE, POSITIVE,
};
