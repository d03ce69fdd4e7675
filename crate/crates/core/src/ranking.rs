//! Discriminability ranking of scalar feature columns.
//!
//! A column is split into intervals by 1D k-means; its score is the mean
//! negative log-probability of each sample's class inside its own interval.
//! Lower scores mean purer intervals, i.e. more discriminant features.

use log::warn;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const DEFAULT_INTERVALS: usize = 32;
const LOG_FLOOR: f64 = 1e-12;
const MAX_ITERS: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    /// Interval index per sample, intervals numbered by ascending centroid.
    pub assignment: Vec<usize>,
    pub centroids: Vec<f64>,
}

impl Partition {
    pub fn num_intervals(&self) -> usize {
        self.centroids.len()
    }
}

/// Lloyd's k-means on a 1D column, started from `j` quantile midpoints.
///
/// If the column has fewer than `j` distinct values, `j` shrinks to that count.
pub fn partition_1d(values: &[f64], j: usize) -> Result<Partition> {
    if values.is_empty() {
        return Err(Error::InvalidInput("cannot partition an empty column".into()));
    }
    if j < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 intervals, got {j}")));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("column has non-finite values".into()));
    }
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let sorted: Vec<f64> = order.iter().map(|&i| values[i]).collect();

    let distinct = 1 + sorted.windows(2).filter(|w| w[0] != w[1]).count();
    let j = if distinct < j {
        if distinct < n {
            warn!("column has {distinct} distinct values; reducing intervals from {j} to {distinct}");
        }
        distinct
    } else {
        j
    };

    let mut centroids: Vec<f64> = (0..j)
        .map(|q| sorted[(((2 * q + 1) * n) / (2 * j)).min(n - 1)])
        .collect();
    centroids.dedup();

    // `ends[c]` is one past the last sorted position assigned to cluster c.
    let mut ends: Vec<usize> = Vec::new();
    for _ in 0..MAX_ITERS {
        let new_ends = interval_ends(&sorted, &centroids);
        let mut next = Vec::with_capacity(centroids.len());
        let mut kept_ends = Vec::with_capacity(centroids.len());
        let mut start = 0;
        for &end in &new_ends {
            if end > start {
                next.push(sorted[start..end].iter().sum::<f64>() / (end - start) as f64);
                kept_ends.push(end);
            }
            start = end;
        }
        let converged = kept_ends == ends;
        ends = kept_ends;
        centroids = next;
        if converged {
            break;
        }
    }

    let mut assignment = vec![0; n];
    let mut start = 0;
    for (c, &end) in ends.iter().enumerate() {
        for &i in &order[start..end] {
            assignment[i] = c;
        }
        start = end;
    }
    Ok(Partition { assignment, centroids })
}

/// Nearest-centroid assignment over sorted values; a value exactly halfway
/// goes to the lower centroid.
fn interval_ends(sorted: &[f64], centroids: &[f64]) -> Vec<usize> {
    let mut ends: Vec<usize> = centroids
        .windows(2)
        .map(|w| sorted.partition_point(|&v| v - w[0] <= w[1] - v))
        .collect();
    ends.push(sorted.len());
    ends
}

/// How the per-sample indicator inside the log-loss is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CrossEntropyMode {
    /// Indicator of the sample's true class (standard cross entropy).
    #[default]
    GroundTruth,
    /// Indicator of the interval's majority class: only samples that the
    /// majority vote classifies correctly contribute.
    MajorityVote,
}

impl std::str::FromStr for CrossEntropyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ground_truth" => Ok(Self::GroundTruth),
            "majority_vote" => Ok(Self::MajorityVote),
            other => Err(Error::InvalidInput(format!("unknown cross-entropy mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for CrossEntropyMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::GroundTruth => "ground_truth",
            Self::MajorityVote => "majority_vote",
        })
    }
}

/// Per-sample cross entropy of a column's interval partition against the
/// labels.
pub fn cross_entropy_score(values: &[f64], labels: &[usize], num_classes: usize, j: usize) -> Result<f64> {
    cross_entropy_score_with(values, labels, num_classes, j, CrossEntropyMode::GroundTruth)
}

pub fn cross_entropy_score_with(
    values: &[f64],
    labels: &[usize],
    num_classes: usize,
    j: usize,
    mode: CrossEntropyMode,
) -> Result<f64> {
    if values.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "{} values but {} labels",
            values.len(),
            labels.len()
        )));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::InvalidInput(format!("label {l} outside [0, {num_classes})")));
    }
    let part = partition_1d(values, j)?;
    Ok(partition_cross_entropy(&part, labels, num_classes, mode))
}

pub(crate) fn partition_cross_entropy(part: &Partition, labels: &[usize], num_classes: usize, mode: CrossEntropyMode) -> f64 {
    let bins = part.num_intervals();
    let mut counts = vec![0usize; bins * num_classes];
    let mut sizes = vec![0usize; bins];
    for (&b, &l) in part.assignment.iter().zip(labels) {
        counts[b * num_classes + l] += 1;
        sizes[b] += 1;
    }
    let majority: Vec<usize> = (0..bins)
        .map(|b| {
            let row = &counts[b * num_classes..(b + 1) * num_classes];
            // first maximum wins
            (0..num_classes).fold(0, |best, c| if row[c] > row[best] { c } else { best })
        })
        .collect();
    let mut loss = 0.0;
    for b in 0..bins {
        if sizes[b] == 0 {
            continue;
        }
        let n_b = sizes[b] as f64;
        for c in 0..num_classes {
            let k = counts[b * num_classes + c];
            if k == 0 {
                continue;
            }
            let counted = match mode {
                CrossEntropyMode::GroundTruth => true,
                CrossEntropyMode::MajorityVote => c == majority[b],
            };
            if counted {
                loss += k as f64 * -((k as f64 / n_b) + LOG_FLOOR).ln();
            }
        }
    }
    // p + floor can round to slightly above 1
    (loss / labels.len() as f64).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RankMode {
    CrossEntropy,
    Energy,
}

impl std::str::FromStr for RankMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross_entropy" | "ce" => Ok(Self::CrossEntropy),
            "energy" | "e" => Ok(Self::Energy),
            other => Err(Error::InvalidInput(format!("unknown ranking mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for RankMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::CrossEntropy => "cross_entropy",
            Self::Energy => "energy",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedFeatureSet {
    pub cross_entropy: Vec<f64>,
    pub energy: Vec<f64>,
    /// Column indices, lowest cross entropy first.
    pub by_cross_entropy: Vec<usize>,
    /// Column indices, highest energy first.
    pub by_energy: Vec<usize>,
}

impl RankedFeatureSet {
    pub fn order(&self, mode: RankMode) -> &[usize] {
        match mode {
            RankMode::CrossEntropy => &self.by_cross_entropy,
            RankMode::Energy => &self.by_energy,
        }
    }

    pub fn select(&self, mode: RankMode, m: usize) -> Result<Vec<usize>> {
        let order = self.order(mode);
        if m > order.len() {
            return Err(Error::InvalidInput(format!(
                "cannot select {m} of {} features",
                order.len()
            )));
        }
        Ok(order[..m].to_vec())
    }

    /// Rank of each column (0 = best) under the given mode.
    pub fn ranks(&self, mode: RankMode) -> Vec<usize> {
        let mut r = vec![0; self.energy.len()];
        for (pos, &col) in self.order(mode).iter().enumerate() {
            r[col] = pos;
        }
        r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RankConfig {
    pub intervals: usize,
    pub mode: CrossEntropyMode,
}

impl Default for RankConfig {
    fn default() -> Self {
        Self {
            intervals: DEFAULT_INTERVALS,
            mode: CrossEntropyMode::GroundTruth,
        }
    }
}

/// Scores every column; ties in either ordering fall back to column order.
pub fn rank_features(
    features: &Matrix,
    labels: &[usize],
    num_classes: usize,
    energies: &[f64],
    config: RankConfig,
) -> Result<RankedFeatureSet> {
    if energies.len() != features.cols() {
        return Err(Error::InvalidInput(format!(
            "{} energies for {} columns",
            energies.len(),
            features.cols()
        )));
    }
    if labels.len() != features.rows() {
        return Err(Error::InvalidInput(format!(
            "{} labels for {} rows",
            labels.len(),
            features.rows()
        )));
    }
    let cross_entropy: Vec<f64> = (0..features.cols())
        .into_par_iter()
        .map(|c| cross_entropy_score_with(&features.column(c), labels, num_classes, config.intervals, config.mode))
        .collect::<Result<_>>()?;
    let mut by_cross_entropy: Vec<usize> = (0..features.cols()).collect();
    by_cross_entropy.sort_by(|&a, &b| cross_entropy[a].total_cmp(&cross_entropy[b]).then(a.cmp(&b)));
    let mut by_energy: Vec<usize> = (0..features.cols()).collect();
    by_energy.sort_by(|&a, &b| energies[b].total_cmp(&energies[a]).then(a.cmp(&b)));
    Ok(RankedFeatureSet {
        cross_entropy,
        energy: energies.to_vec(),
        by_cross_entropy,
        by_energy,
    })
}

/// Top-`m` columns under `mode`.
pub fn rank_and_select(
    features: &Matrix,
    labels: &[usize],
    num_classes: usize,
    energies: &[f64],
    mode: RankMode,
    m: usize,
    config: RankConfig,
) -> Result<Vec<usize>> {
    rank_features(features, labels, num_classes, energies, config)?.select(mode, m)
}
