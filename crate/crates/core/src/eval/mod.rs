//! Metrics, reports, embedding-space analyses and the synthetic corpus.

pub mod distance;
pub mod metrics;
pub mod report;
pub mod synth;

pub use distance::{embedding_distance_report, DistanceReport, EmbeddingRow, EmbeddingSet, MeanStd};
pub use metrics::{accuracy, anxiety_target, auroc, auroc_macro, ccc, f1_macro, f1_macro_multilabel};
pub use report::{evaluate, EvalReport, Prediction};
pub use synth::{synth_corpus, SynthConfig};
