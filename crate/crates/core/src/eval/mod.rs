//! Evaluation metrics and harness pieces.

pub mod bench;
pub mod dataset;
pub mod f1;
pub mod factor;
pub mod manifest;
pub mod mc;

pub use bench::{bench_step, BenchReport, LatencyStats};
pub use dataset::{
    load_factor, load_mc, load_predictions, load_qa, Candidate, FactorItem, GoodSetConvention,
    LengthClass, McDataset, McItem, QaItem,
};
pub use f1::{exact_match, normalize_answer, squad_f1, squad_f1_with, token_f1, Normalization};
pub use factor::{factor_accuracy, FactorResult, FactorScores};
pub use manifest::TraceIndex;
pub use mc::{mc_metrics, Mc3Averaging, McItemRow, McResult, McScores};
