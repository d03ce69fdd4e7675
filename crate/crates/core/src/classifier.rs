//! Linear least-squares classification, metrics, and the rotation ensemble.

use std::f64::consts::PI;

use log::warn;
use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{rotate_about, Axis, PointCloud};
use crate::matrix::Matrix;
use crate::tree::FeatureTree;

pub const DEFAULT_RIDGE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LlsrOptions {
    /// Added to the diagonal of the normal equations.
    pub ridge: f64,
    pub standardize: bool,
}

impl Default for LlsrOptions {
    fn default() -> Self {
        Self {
            ridge: DEFAULT_RIDGE,
            standardize: true,
        }
    }
}

/// Per-feature affine standardization; zero-variance features keep std 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &Matrix) -> Self {
        let n = x.rows().max(1) as f64;
        let f = x.cols();
        let mut mean = vec![0.0; f];
        for r in x.iter_rows() {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; f];
        for r in x.iter_rows() {
            for j in 0..f {
                let d = r[j] - mean[j];
                var[j] += d * d;
            }
        }
        let std = var
            .into_iter()
            .map(|v| {
                let s = (v / n).sqrt();
                if s > 0.0 && s.is_finite() { s } else { 1.0 }
            })
            .collect();
        Self { mean, std }
    }

    fn apply_row(&self, row: &[f64], out: &mut [f64]) {
        for j in 0..row.len() {
            out[j] = (row[j] - self.mean[j]) / self.std[j];
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LlsrModel {
    /// (F + 1) x M; the last row multiplies the constant-1 bias input.
    pub weights: Matrix,
    pub standardizer: Option<Standardizer>,
}

impl LlsrModel {
    pub fn feature_dim(&self) -> usize {
        self.weights.rows() - 1
    }

    pub fn num_classes(&self) -> usize {
        self.weights.cols()
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.rows() * self.weights.cols()
            + self.standardizer.as_ref().map_or(0, |s| 2 * s.mean.len())
    }
}

/// Design matrix with standardized features and a trailing bias column.
fn design(x: &Matrix, std: Option<&Standardizer>) -> DMatrix<f64> {
    let (s, f) = (x.rows(), x.cols());
    let mut out = DMatrix::zeros(s, f + 1);
    let mut buf = vec![0.0; f];
    for r in 0..s {
        let row = x.row(r);
        match std {
            Some(st) => st.apply_row(row, &mut buf),
            None => buf.copy_from_slice(row),
        }
        for j in 0..f {
            out[(r, j)] = buf[j];
        }
        out[(r, f)] = 1.0;
    }
    out
}

fn solve_spd(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<DMatrix<f64>> {
    if let Some(ch) = a.clone().cholesky() {
        return Ok(ch.solve(&b));
    }
    a.lu()
        .solve(&b)
        .ok_or_else(|| Error::InvalidState("least-squares system is singular".into()))
}

/// Minimizes `|X_aug W - Y|^2 + ridge |W|^2` for one-hot targets `Y`.
pub fn fit_llsr(features: &Matrix, labels: &[usize], num_classes: usize, opts: LlsrOptions) -> Result<LlsrModel> {
    let s = features.rows();
    if labels.len() != s {
        return Err(Error::InvalidInput(format!("{} labels for {s} samples", labels.len())));
    }
    if s == 0 || num_classes == 0 {
        return Err(Error::InsufficientData("LLSR needs samples and classes".into()));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::InvalidInput(format!("label {l} outside [0, {num_classes})")));
    }
    if !features.is_finite() {
        return Err(Error::InvalidInput("features contain non-finite values".into()));
    }
    if labels.iter().all(|&l| l == labels[0]) {
        warn!("all training labels are {}; the fitted model is a constant predictor", labels[0]);
    }
    let standardizer = opts.standardize.then(|| Standardizer::fit(features));
    let x = design(features, standardizer.as_ref());
    let mut y = DMatrix::zeros(s, num_classes);
    for (r, &l) in labels.iter().enumerate() {
        y[(r, l)] = 1.0;
    }
    let p = x.ncols();
    let w = if p <= s {
        let mut a = x.tr_mul(&x);
        for i in 0..p {
            a[(i, i)] += opts.ridge;
        }
        solve_spd(a, x.tr_mul(&y))?
    } else {
        // (X^T X + rI)^-1 X^T Y = X^T (X X^T + rI)^-1 Y, solved in the smaller space
        let mut k = &x * x.transpose();
        for i in 0..s {
            k[(i, i)] += opts.ridge;
        }
        x.tr_mul(&solve_spd(k, y)?)
    };
    let mut weights = Matrix::zeros(p, num_classes);
    for r in 0..p {
        for c in 0..num_classes {
            weights.set(r, c, w[(r, c)]);
        }
    }
    Ok(LlsrModel { weights, standardizer })
}

/// Score matrix (S x M). Scores are unnormalized; only their argmax and the
/// ensemble's second stage consume them.
pub fn predict_scores(model: &LlsrModel, features: &Matrix) -> Result<Matrix> {
    let f = model.feature_dim();
    if features.cols() != f {
        return Err(Error::InvalidInput(format!(
            "model expects {f} features, got {}",
            features.cols()
        )));
    }
    let m = model.num_classes();
    let mut out = Matrix::zeros(features.rows(), m);
    let mut buf = vec![0.0; f];
    for r in 0..features.rows() {
        let row = features.row(r);
        match &model.standardizer {
            Some(st) => st.apply_row(row, &mut buf),
            None => buf.copy_from_slice(row),
        }
        let scores = out.row_mut(r);
        scores.copy_from_slice(model.weights.row(f));
        for (j, &v) in buf.iter().enumerate() {
            let w = model.weights.row(j);
            for c in 0..m {
                scores[c] += v * w[c];
            }
        }
    }
    Ok(out)
}

/// Row-wise argmax; the lowest class index wins ties.
pub fn argmax_rows(scores: &Matrix) -> Vec<usize> {
    scores
        .iter_rows()
        .map(|r| (0..r.len()).fold(0, |best, c| if r[c] > r[best] { c } else { best }))
        .collect()
}

pub fn predict(model: &LlsrModel, features: &Matrix) -> Result<Vec<usize>> {
    Ok(argmax_rows(&predict_scores(model, features)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub overall_accuracy: f64,
    /// Mean of per-class recalls over classes present in the labels.
    pub class_avg_accuracy: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

pub fn evaluate(predictions: &[usize], labels: &[usize], num_classes: usize) -> Result<Evaluation> {
    if predictions.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut confusion = vec![vec![0usize; num_classes]; num_classes];
    for (&p, &t) in predictions.iter().zip(labels) {
        if p >= num_classes || t >= num_classes {
            return Err(Error::InvalidInput(format!("class index outside [0, {num_classes})")));
        }
        confusion[t][p] += 1;
    }
    let total = labels.len();
    let correct: usize = (0..num_classes).map(|c| confusion[c][c]).sum();
    let recalls: Vec<f64> = confusion
        .iter()
        .enumerate()
        .filter_map(|(c, row)| {
            let n: usize = row.iter().sum();
            (n > 0).then(|| row[c] as f64 / n as f64)
        })
        .collect();
    Ok(Evaluation {
        overall_accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        class_avg_accuracy: if recalls.is_empty() {
            0.0
        } else {
            recalls.iter().sum::<f64>() / recalls.len() as f64
        },
        confusion,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleConfig {
    pub axis: Axis,
    pub angles: Vec<f64>,
    pub llsr: LlsrOptions,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            axis: Axis::Z,
            angles: (0..8).map(|i| i as f64 * PI / 4.0).collect(),
            llsr: LlsrOptions::default(),
        }
    }
}

/// One LLSR per rotated copy of the data, combined by a second LLSR over the
/// concatenated first-stage scores. A single-angle ensemble has no second
/// stage.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleModel {
    pub axis: Axis,
    pub angles: Vec<f64>,
    pub stage1: Vec<LlsrModel>,
    pub stage2: Option<LlsrModel>,
}

/// Features of rotated clouds, restricted to `columns` when given.
pub fn rotated_features(tree: &FeatureTree, clouds: &[PointCloud], axis: Axis, angle: f64, columns: Option<&[usize]>) -> Result<Matrix> {
    let rotated: Vec<PointCloud> = clouds.par_iter().map(|c| rotate_about(c, axis, angle)).collect();
    let feats = tree.transform_batch(&rotated)?;
    Ok(match columns {
        Some(cols) => feats.select_columns(cols),
        None => feats,
    })
}

pub fn fit_ensemble(
    tree: &FeatureTree,
    clouds: &[PointCloud],
    labels: &[usize],
    num_classes: usize,
    columns: Option<&[usize]>,
    config: &EnsembleConfig,
) -> Result<EnsembleModel> {
    if config.angles.is_empty() {
        return Err(Error::InvalidInput("ensemble needs at least one angle".into()));
    }
    let mut stage1 = Vec::with_capacity(config.angles.len());
    let mut scores = Vec::with_capacity(config.angles.len());
    for &angle in &config.angles {
        let x = rotated_features(tree, clouds, config.axis, angle, columns)?;
        let model = fit_llsr(&x, labels, num_classes, config.llsr)?;
        scores.push(predict_scores(&model, &x)?);
        stage1.push(model);
    }
    let stage2 = if stage1.len() > 1 {
        let refs: Vec<&Matrix> = scores.iter().collect();
        Some(fit_llsr(&Matrix::hstack(&refs)?, labels, num_classes, config.llsr)?)
    } else {
        None
    };
    Ok(EnsembleModel {
        axis: config.axis,
        angles: config.angles.clone(),
        stage1,
        stage2,
    })
}

pub fn predict_ensemble_scores(
    model: &EnsembleModel,
    tree: &FeatureTree,
    clouds: &[PointCloud],
    columns: Option<&[usize]>,
) -> Result<Matrix> {
    let mut scores = Vec::with_capacity(model.angles.len());
    for (&angle, m) in model.angles.iter().zip(&model.stage1) {
        let x = rotated_features(tree, clouds, model.axis, angle, columns)?;
        scores.push(predict_scores(m, &x)?);
    }
    match &model.stage2 {
        Some(s2) => {
            let refs: Vec<&Matrix> = scores.iter().collect();
            predict_scores(s2, &Matrix::hstack(&refs)?)
        }
        None => Ok(scores.pop().expect("one stage-1 model")),
    }
}

pub fn predict_ensemble(
    model: &EnsembleModel,
    tree: &FeatureTree,
    clouds: &[PointCloud],
    columns: Option<&[usize]>,
) -> Result<Vec<usize>> {
    Ok(argmax_rows(&predict_ensemble_scores(model, tree, clouds, columns)?))
}
