//! End-to-end fitting and prediction on top of the individual stages.

use std::time::{Duration, Instant};

use log::info;

use crate::classifier::{
    argmax_rows, fit_ensemble, fit_llsr, predict_ensemble_scores, predict_scores, EnsembleConfig,
    LlsrOptions,
};
use crate::container::{Classifier, ModelContainer, Selection};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::matrix::Matrix;
use crate::ranking::{rank_features, RankConfig, RankMode};
use crate::tree::{fit_tree, TreeConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub tree: TreeConfig,
    pub rank: RankConfig,
    pub rank_mode: RankMode,
    /// Number of top-ranked features fed to the classifier; `None` keeps all.
    pub num_features: Option<usize>,
    /// Rotation ensemble; `None` fits a single LLSR.
    pub ensemble: Option<EnsembleConfig>,
    pub llsr: LlsrOptions,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            tree: TreeConfig::default(),
            rank: RankConfig::default(),
            rank_mode: RankMode::CrossEntropy,
            num_features: None,
            ensemble: None,
            llsr: LlsrOptions::default(),
        }
    }
}

/// A fitted model together with by-products useful for reporting.
#[derive(Debug, Clone)]
pub struct FitOutput {
    pub model: ModelContainer,
    /// Unrotated training features, all columns.
    pub train_features: Matrix,
    /// Wall-clock time per phase, in execution order.
    pub timings: Vec<(&'static str, Duration)>,
}

/// Fits the tree, ranks its features, and trains the classifier.
pub fn fit_model(train: &Dataset, config: &PipelineConfig) -> Result<FitOutput> {
    let labels = train.labels();
    let num_classes = train.num_classes();
    let mut timings = Vec::new();

    let t = Instant::now();
    let fitted = fit_tree(&train.clouds, &config.tree)?;
    timings.push(("tree", t.elapsed()));
    info!(
        "tree: {} nodes, {} leaves, {} features",
        fitted.tree.nodes().len(),
        fitted.tree.leaf_order().len(),
        fitted.tree.feature_dim()
    );

    let t = Instant::now();
    let ranked = rank_features(
        &fitted.features,
        &labels,
        num_classes,
        &fitted.tree.column_energies(),
        config.rank,
    )?;
    let columns = match config.num_features {
        Some(m) => ranked.select(config.rank_mode, m)?,
        None => Vec::new(),
    };
    timings.push(("rank", t.elapsed()));

    let t = Instant::now();
    let classifier = match &config.ensemble {
        None => {
            let x = if columns.is_empty() {
                fitted.features.clone()
            } else {
                fitted.features.select_columns(&columns)
            };
            Classifier::Single(fit_llsr(&x, &labels, num_classes, config.llsr)?)
        }
        Some(ens) => {
            let cols = (!columns.is_empty()).then_some(&columns[..]);
            Classifier::Ensemble(fit_ensemble(&fitted.tree, &train.clouds, &labels, num_classes, cols, ens)?)
        }
    };
    timings.push(("classifier", t.elapsed()));

    Ok(FitOutput {
        model: ModelContainer {
            tree: fitted.tree,
            class_names: train.class_names.clone(),
            selection: Some(Selection {
                ranked,
                mode: config.rank_mode,
                columns,
            }),
            classifier: Some(classifier),
        },
        train_features: fitted.features,
        timings,
    })
}

impl FitOutput {
    /// Predictions for the training clouds, reusing the cached features when
    /// the classifier is a single LLSR. `clouds` must be the training clouds.
    pub fn predict_train(&self, clouds: &[PointCloud]) -> Result<Vec<usize>> {
        match &self.model.classifier {
            Some(Classifier::Single(m)) => {
                let x = match self.model.selected_columns() {
                    Some(c) => self.train_features.select_columns(c),
                    None => self.train_features.clone(),
                };
                Ok(argmax_rows(&predict_scores(m, &x)?))
            }
            _ => self.model.predict(clouds),
        }
    }
}

impl ModelContainer {
    /// Feature columns the classifier consumes, or `None` for all of them.
    pub fn selected_columns(&self) -> Option<&[usize]> {
        self.selection.as_ref().and_then(Selection::columns)
    }

    /// Per-class scores, one row per cloud.
    pub fn predict_scores(&self, clouds: &[PointCloud]) -> Result<Matrix> {
        let columns = self.selected_columns();
        match &self.classifier {
            None => Err(Error::InvalidState("model has no classifier".into())),
            Some(Classifier::Single(m)) => {
                let x = self.tree.transform_batch(clouds)?;
                let x = match columns {
                    Some(c) => x.select_columns(c),
                    None => x,
                };
                predict_scores(m, &x)
            }
            Some(Classifier::Ensemble(e)) => predict_ensemble_scores(e, &self.tree, clouds, columns),
        }
    }

    pub fn predict(&self, clouds: &[PointCloud]) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.predict_scores(clouds)?))
    }
}
