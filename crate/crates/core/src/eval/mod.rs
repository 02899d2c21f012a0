//! Episodic evaluation with confidence intervals, validation sweeps and
//! report tables.

mod compare;
mod evaluate;
mod sweep;

pub use compare::{compare_report, ComparisonRow, ComparisonTable};
pub use evaluate::{
    evaluate, mean_and_ci95, EvalConfig, EvalContext, EvalReport, Method, MethodKind, REPORT_CSV, REPORT_JSON,
};
pub use sweep::{sweep, MethodChoice, SweepConfig, SweepOutcome, SweepPoint, SweepRow, SweepSpace};
