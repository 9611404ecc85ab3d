//! Three-stage feature selection and k-NN classification for binary
//! screening from tabular transcript features.
//!
//! The cascade screens features with random-forest Gini importance and a
//! Spearman correlation floor, refines them by backward elimination on
//! logistic-regression Wald p-values, and classifies with k-nearest
//! neighbours whose k is chosen by cross-validation.

pub mod cli;
pub mod error;
pub mod forest;
pub mod logit;
pub mod metrics;
pub mod neighbors;
pub mod pipeline;
pub mod rng;
pub mod stats;
pub mod tabular;

pub use error::{Error, Result};
pub use forest::{fit_forest, predict_forest, Forest, ForestParams};
pub use logit::{backward_eliminate, fit_logit, wald_table, EliminationTrace, LogitModel};
pub use metrics::{evaluate, ConfusionMatrix, EvaluationReport};
pub use neighbors::{fit_knn, select_k, KSelectionReport, KnnModel};
pub use pipeline::{run_cascade, CascadeConfig, CascadeReport, StageOneCriteria};
pub use tabular::{load_csv, split, synth_dataset, FeatureMatrix, SplitPair};
