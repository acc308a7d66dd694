//! Correlation metrics, the Williams significance test and per-pair reports.

pub mod report;
pub mod stats;
pub mod williams;

pub use report::{build_report, Report, RunPredictions};
pub use stats::{average_ranks, pearson, spearman};
pub use williams::{student_t_cdf, williams_test, Tails, WilliamsInput, WilliamsResult};
