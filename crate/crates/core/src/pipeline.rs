//! The three-stage selection cascade.
//!
//! 1. Screening: a random forest ranks features by mean decrease in Gini.
//!    A feature survives iff its importance exceeds the threshold and the
//!    absolute Spearman correlation with the label exceeds the floor (both
//!    strict).
//! 2. Refinement: backward elimination by Wald p-value on the survivors.
//! 3. Classification: k-NN on the refined features, k chosen by 5-fold CV.
//!
//! Stages 1 and 2 and the choice of k use the training split only (or the
//! full data with `select_on_all`); the held-out rows are touched once, for
//! the final evaluation. Random draws use seeds derived from the master seed
//! by component name: `"split"`, `"forest"` and `"folds"`.
//!
//! Each stage reads and extends a [`PartialReport`], which is also the on-disk
//! artifact of the stage-by-stage CLI.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forest::{fit_forest, ForestParams};
use crate::logit::{backward_eliminate, wald_table, EliminationTrace, WaldRow};
use crate::metrics::{evaluate, EvaluationReport};
use crate::neighbors::{default_k_max, fit_knn, select_k, KSelectionReport};
use crate::rng::{derive_seed, fnv1a64};
use crate::stats::{median, quartile, spearman};
use crate::tabular::{split, FeatureMatrix, SplitPair};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum ImportanceThreshold {
    Fixed { value: f64 },
    /// Mean of the median and the upper quartile of all importances.
    MedianQ3Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageOneCriteria {
    pub importance: ImportanceThreshold,
    pub correlation_floor: f64,
}

impl Default for StageOneCriteria {
    fn default() -> Self {
        Self {
            importance: ImportanceThreshold::Fixed { value: 6.0 },
            correlation_floor: 0.1,
        }
    }
}

impl StageOneCriteria {
    pub fn resolve_threshold(&self, importance: &[f64]) -> Result<f64> {
        match self.importance {
            ImportanceThreshold::Fixed { value } => Ok(value),
            ImportanceThreshold::MedianQ3Mean => {
                Ok((median(importance)? + quartile(importance, 75)?) / 2.0)
            }
        }
    }
}

/// Everything that determines a cascade run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CascadeConfig {
    pub seed: u64,
    pub train_fraction: f64,
    pub n_trees: usize,
    pub mtry: Option<usize>,
    pub min_leaf: usize,
    pub max_depth: Option<usize>,
    pub criteria: StageOneCriteria,
    pub alpha: f64,
    pub max_elimination_rounds: Option<usize>,
    /// `None` means `floor(sqrt(training rows))`.
    pub k_max: Option<usize>,
    pub folds: usize,
    pub stratify: bool,
    pub select_on_all: bool,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train_fraction: 0.7,
            n_trees: 500,
            mtry: None,
            min_leaf: 1,
            max_depth: None,
            criteria: StageOneCriteria::default(),
            alpha: 0.05,
            max_elimination_rounds: None,
            k_max: None,
            folds: 5,
            stratify: false,
            select_on_all: false,
        }
    }
}

impl CascadeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad(format!("train_fraction must lie in (0,1), got {}", self.train_fraction));
        }
        if self.n_trees == 0 {
            return bad("n_trees must be at least 1".into());
        }
        if self.min_leaf == 0 {
            return bad("min_leaf must be at least 1".into());
        }
        if self.mtry == Some(0) {
            return bad("mtry must be at least 1".into());
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha must lie in (0,1), got {}", self.alpha));
        }
        if !(self.criteria.correlation_floor >= 0.0) {
            return bad("correlation_floor must be non-negative".into());
        }
        if let ImportanceThreshold::Fixed { value } = self.criteria.importance {
            if !value.is_finite() {
                return bad("importance threshold must be finite".into());
            }
        }
        if self.k_max == Some(0) {
            return bad("k_max must be at least 1".into());
        }
        if self.folds < 2 {
            return bad("folds must be at least 2".into());
        }
        Ok(())
    }

    pub fn forest_params(&self) -> ForestParams {
        ForestParams {
            n_trees: self.n_trees,
            mtry: self.mtry,
            min_leaf: self.min_leaf,
            max_depth: self.max_depth,
            bootstrap: true,
            seed: derive_seed(self.seed, "forest"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureDiagnostic {
    pub name: String,
    pub importance: f64,
    /// `None` for a constant column.
    pub spearman: Option<f64>,
    pub kept: bool,
}

/// Applies the screening rule to precomputed statistics.
pub fn screen_features(
    names: &[String],
    importance: &[f64],
    correlations: &[Option<f64>],
    criteria: &StageOneCriteria,
) -> Result<(f64, Vec<FeatureDiagnostic>)> {
    if names.len() != importance.len() || names.len() != correlations.len() {
        return Err(Error::LengthMismatch {
            left: names.len(),
            right: importance.len().min(correlations.len()),
        });
    }
    let threshold = criteria.resolve_threshold(importance)?;
    let diagnostics = names
        .iter()
        .zip(importance.iter().zip(correlations))
        .map(|(name, (&imp, &r))| FeatureDiagnostic {
            name: name.clone(),
            importance: imp,
            spearman: r,
            kept: imp > threshold && r.is_some_and(|r| r.abs() > criteria.correlation_floor),
        })
        .collect();
    Ok((threshold, diagnostics))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Result {
    pub forest_seed: u64,
    pub oob_error: Option<f64>,
    pub threshold: f64,
    pub correlation_floor: f64,
    pub diagnostics: Vec<FeatureDiagnostic>,
    pub kept: Vec<String>,
}

/// Forest importance and Spearman screening of every column of `data`.
pub fn stage1_screen(
    data: &FeatureMatrix,
    params: &ForestParams,
    criteria: &StageOneCriteria,
) -> Result<Stage1Result> {
    let forest = fit_forest(data, params)?;
    let labels = data.labels_f64();
    let correlations = (0..data.n_features())
        .map(|j| match spearman(&data.column(j), &labels) {
            Ok(r) => Ok(Some(r)),
            Err(Error::ConstantVector) => Ok(None),
            Err(e) => Err(e),
        })
        .collect::<Result<Vec<_>>>()?;
    let (threshold, diagnostics) =
        screen_features(data.names(), forest.importance(), &correlations, criteria)?;
    let kept: Vec<String> = diagnostics
        .iter()
        .filter(|d| d.kept)
        .map(|d| d.name.clone())
        .collect();
    if kept.is_empty() {
        return Err(Error::NoStage1Survivors { diagnostics });
    }
    Ok(Stage1Result {
        forest_seed: params.seed,
        oob_error: forest.oob_error(),
        threshold,
        correlation_floor: criteria.correlation_floor,
        diagnostics,
        kept,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Result {
    pub input: Vec<String>,
    pub trace: EliminationTrace,
    pub wald_table: Vec<WaldRow>,
}

/// Backward elimination over the named columns of `data`.
pub fn stage2_refine(
    data: &FeatureMatrix,
    features: &[String],
    alpha: f64,
    max_rounds: Option<usize>,
) -> Result<Stage2Result> {
    let subset = data.select_named(features)?;
    let (model, trace) = backward_eliminate(&subset, alpha, max_rounds)?;
    Ok(Stage2Result {
        input: features.to_vec(),
        trace,
        wald_table: wald_table(&model)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage3Result {
    pub features: Vec<String>,
    pub selection: KSelectionReport,
}

/// Cross-validated choice of k on the named columns of `data`.
pub fn stage3_select(
    data: &FeatureMatrix,
    features: &[String],
    k_max: Option<usize>,
    folds: usize,
    seed: u64,
    stratify: bool,
) -> Result<Stage3Result> {
    let subset = data.select_named(features)?;
    let k_max = k_max.unwrap_or_else(|| default_k_max(subset.n_rows()));
    Ok(Stage3Result {
        features: features.to_vec(),
        selection: select_k(&subset, k_max, folds, seed, stratify)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeldOutPrediction {
    /// Row index in the input data.
    pub row: usize,
    pub label: u8,
    pub proba: f64,
    pub predicted: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSection {
    pub k: usize,
    pub features: Vec<String>,
    pub metrics: EvaluationReport,
    pub predictions: Vec<HeldOutPrediction>,
}

/// Fits k-NN on `train` and scores it on `test`, both restricted to
/// `features`. `test_rows` are the original row numbers of `test`.
pub fn evaluate_knn(
    train: &FeatureMatrix,
    test: &FeatureMatrix,
    test_rows: &[usize],
    features: &[String],
    k: usize,
) -> Result<EvaluationSection> {
    let model = fit_knn(&train.select_named(features)?, k)?;
    let test = test.select_named(features)?;
    let mut predictions = Vec::with_capacity(test.n_rows());
    for i in 0..test.n_rows() {
        let nb_proba = model.predict_proba(test.row(i))?;
        predictions.push(HeldOutPrediction {
            row: test_rows[i],
            label: test.labels()[i],
            proba: nb_proba,
            predicted: model.predict(test.row(i))?,
        });
    }
    let truth: Vec<u8> = predictions.iter().map(|p| p.label).collect();
    let pred: Vec<u8> = predictions.iter().map(|p| p.predicted).collect();
    let proba: Vec<f64> = predictions.iter().map(|p| p.proba).collect();
    Ok(EvaluationSection {
        k,
        features: features.to_vec(),
        metrics: evaluate(&truth, &pred, Some(&proba))?,
        predictions,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitInfo {
    pub seed: u64,
    pub train_rows: Vec<usize>,
    pub test_rows: Vec<usize>,
}

/// Hash of column names, labels and the exact bit patterns of all values.
pub fn data_fingerprint(data: &FeatureMatrix) -> String {
    let mut bytes = Vec::with_capacity(data.values().len() * 8 + data.n_rows());
    for name in data.names() {
        bytes.extend_from_slice(name.as_bytes());
        bytes.push(0);
    }
    bytes.extend_from_slice(data.labels());
    for v in data.values() {
        bytes.extend_from_slice(&v.to_bits().to_le_bytes());
    }
    format!("{:016x}", fnv1a64(&bytes))
}

/// State of a cascade after zero or more stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartialReport {
    pub schema_version: u32,
    pub seed: u64,
    pub config: CascadeConfig,
    pub data_fingerprint: String,
    pub n_rows: usize,
    pub features: Vec<String>,
    pub split: SplitInfo,
    pub stage1: Option<Stage1Result>,
    pub stage2: Option<Stage2Result>,
    pub stage3: Option<Stage3Result>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeReport {
    pub schema_version: u32,
    pub seed: u64,
    pub config: CascadeConfig,
    pub data_fingerprint: String,
    pub n_rows: usize,
    pub features: Vec<String>,
    pub split: SplitInfo,
    pub stage1: Stage1Result,
    pub stage2: Stage2Result,
    pub stage3: Stage3Result,
    pub evaluation: EvaluationSection,
    pub summary: String,
}

/// Validates the config and draws the train/test split.
pub fn begin(data: &FeatureMatrix, config: &CascadeConfig) -> Result<PartialReport> {
    config.validate()?;
    data.require_both_classes()?;
    let seed = derive_seed(config.seed, "split");
    let pair = split(data, config.train_fraction, seed)?;
    Ok(PartialReport {
        schema_version: SCHEMA_VERSION,
        seed: config.seed,
        config: config.clone(),
        data_fingerprint: data_fingerprint(data),
        n_rows: data.n_rows(),
        features: data.names().to_vec(),
        split: SplitInfo {
            seed,
            train_rows: pair.train_rows,
            test_rows: pair.test_rows,
        },
        stage1: None,
        stage2: None,
        stage3: None,
    })
}

impl PartialReport {
    /// Errors unless `data` is the matrix this report was started on.
    pub fn check_data(&self, data: &FeatureMatrix) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                artifact: "cascade",
                expected: SCHEMA_VERSION,
                found: self.schema_version,
            });
        }
        let found = data_fingerprint(data);
        if found != self.data_fingerprint {
            return Err(Error::ArtifactMismatch {
                artifact: "cascade",
                reason: format!(
                    "data fingerprint {found} differs from recorded {}",
                    self.data_fingerprint
                ),
            });
        }
        Ok(())
    }

    fn split_pair(&self, data: &FeatureMatrix) -> Result<SplitPair> {
        Ok(SplitPair {
            train: data.select_rows(&self.split.train_rows)?,
            test: data.select_rows(&self.split.test_rows)?,
            train_rows: self.split.train_rows.clone(),
            test_rows: self.split.test_rows.clone(),
            seed: self.split.seed,
            train_fraction: self.config.train_fraction,
        })
    }

    /// Rows used for feature selection.
    fn selection_data(&self, data: &FeatureMatrix) -> Result<FeatureMatrix> {
        if self.config.select_on_all {
            Ok(data.clone())
        } else {
            data.select_rows(&self.split.train_rows)
        }
    }

    pub fn run_stage1(&mut self, data: &FeatureMatrix) -> Result<()> {
        self.check_data(data)?;
        let selection = self.selection_data(data)?;
        self.stage1 = Some(stage1_screen(
            &selection,
            &self.config.forest_params(),
            &self.config.criteria,
        )?);
        Ok(())
    }

    pub fn run_stage2(&mut self, data: &FeatureMatrix) -> Result<()> {
        self.check_data(data)?;
        let kept = &self.stage1.as_ref().ok_or(Error::MissingArtifact("stage1"))?.kept;
        let selection = self.selection_data(data)?;
        self.stage2 = Some(stage2_refine(
            &selection,
            kept,
            self.config.alpha,
            self.config.max_elimination_rounds,
        )?);
        Ok(())
    }

    pub fn run_stage3(&mut self, data: &FeatureMatrix) -> Result<()> {
        self.check_data(data)?;
        let surviving = &self.stage2.as_ref().ok_or(Error::MissingArtifact("stage2"))?.trace.surviving;
        let train = data.select_rows(&self.split.train_rows)?;
        self.stage3 = Some(stage3_select(
            &train,
            surviving,
            self.config.k_max,
            self.config.folds,
            derive_seed(self.config.seed, "folds"),
            self.config.stratify,
        )?);
        Ok(())
    }

    /// Held-out evaluation; consumes a report whose three stages are done.
    pub fn finish(self, data: &FeatureMatrix) -> Result<CascadeReport> {
        self.check_data(data)?;
        let pair = self.split_pair(data)?;
        let stage1 = self.stage1.ok_or(Error::MissingArtifact("stage1"))?;
        let stage2 = self.stage2.ok_or(Error::MissingArtifact("stage2"))?;
        let stage3 = self.stage3.ok_or(Error::MissingArtifact("stage3"))?;
        let evaluation = evaluate_knn(
            &pair.train,
            &pair.test,
            &pair.test_rows,
            &stage3.features,
            stage3.selection.chosen_k,
        )?;
        let summary = summary_text(self.features.len(), &stage1, &stage2, &stage3, &evaluation);
        Ok(CascadeReport {
            schema_version: self.schema_version,
            seed: self.seed,
            config: self.config,
            data_fingerprint: self.data_fingerprint,
            n_rows: self.n_rows,
            features: self.features,
            split: self.split,
            stage1,
            stage2,
            stage3,
            evaluation,
            summary,
        })
    }

    /// The train/test partition recorded in this report.
    pub fn split_of(&self, data: &FeatureMatrix) -> Result<SplitPair> {
        self.check_data(data)?;
        self.split_pair(data)
    }
}

fn summary_text(
    n_features: usize,
    stage1: &Stage1Result,
    stage2: &Stage2Result,
    stage3: &Stage3Result,
    evaluation: &EvaluationSection,
) -> String {
    format!(
        "{} features -> {} after screening (importance > {:.4}, |spearman| > {}) -> {} after \
         backward elimination ({} dropped); {}-NN chosen from k <= {}; held-out accuracy {:.4} on {} rows",
        n_features,
        stage1.kept.len(),
        stage1.threshold,
        stage1.correlation_floor,
        stage2.trace.surviving.len(),
        stage2.trace.rounds.len(),
        stage3.selection.chosen_k,
        stage3.selection.k_max,
        evaluation.metrics.accuracy,
        evaluation.metrics.n,
    )
}

/// Split, screen, refine, choose k and evaluate. A failing stage aborts
/// with [`Error::Stage`], which carries the report up to that point.
pub fn run_cascade(data: &FeatureMatrix, config: &CascadeConfig) -> Result<CascadeReport> {
    let mut partial = begin(data, config)?;
    let steps: [(&'static str, fn(&mut PartialReport, &FeatureMatrix) -> Result<()>); 3] = [
        ("stage1", PartialReport::run_stage1),
        ("stage2", PartialReport::run_stage2),
        ("stage3", PartialReport::run_stage3),
    ];
    for (stage, step) in steps {
        if let Err(source) = step(&mut partial, data) {
            return Err(Error::Stage {
                stage,
                source: Box::new(source),
                partial: Box::new(partial),
            });
        }
    }
    let snapshot = partial.clone();
    partial.finish(data).map_err(|source| Error::Stage {
        stage: "evaluation",
        source: Box::new(source),
        partial: Box::new(snapshot),
    })
}
