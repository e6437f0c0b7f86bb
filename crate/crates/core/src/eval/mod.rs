//! Pair scoring: cosine similarity, F1max threshold search, distance and
//! accuracy, plus a TF-IDF baseline.

mod metrics;
mod report;
mod tfidf;

pub use metrics::{cosine_similarity, distance_and_accuracy, f1max_search, F1Search, ScoredPair, ThresholdRange};
pub use report::{evaluate_model, evaluate_scored, score_pairs, EvalMode, EvalReport, SplitMetrics};
pub use tfidf::{tfidf_baseline, TfIdf};
