//! Run configuration: a `key = value` file plus `--set` overrides.

use std::f64::consts::PI;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use pointhop::classifier::EnsembleConfig;
use pointhop::ranking::CrossEntropyMode;
use pointhop::{Aggregation, Axis, Error, LlsrOptions, PipelineConfig, RankConfig, RankMode, Result, SparsePolicy, TreeConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub tree: TreeConfig,
    pub intervals: usize,
    pub ce_mode: CrossEntropyMode,
    pub rank_mode: RankMode,
    pub num_features: Option<usize>,
    pub ensemble: bool,
    pub axis: Axis,
    pub rotations: usize,
    pub ridge: f64,
    pub standardize: bool,
    /// Points kept per cloud at load time; larger clouds are subsampled once.
    pub num_points: usize,
    pub val_fraction: f64,
    pub seed: u64,
    pub data: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub thresholds: Vec<f64>,
    pub feature_counts: Vec<usize>,
    pub density_sizes: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            tree: TreeConfig::default(),
            intervals: RankConfig::default().intervals,
            ce_mode: CrossEntropyMode::GroundTruth,
            rank_mode: RankMode::CrossEntropy,
            num_features: None,
            ensemble: false,
            axis: Axis::Z,
            rotations: 8,
            ridge: LlsrOptions::default().ridge,
            standardize: true,
            num_points: 1024,
            val_fraction: 0.1,
            seed: 0,
            data: None,
            model: None,
            out: None,
            thresholds: vec![1e-1, 1e-2, 1e-3, 1e-4, 1e-5],
            feature_counts: vec![64, 128, 256, 512, 1024],
            density_sizes: vec![1024, 768, 512, 256],
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| Error::InvalidInput(format!("bad value `{value}` for `{key}`: {e}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        other => Err(Error::InvalidInput(format!("bad boolean `{other}` for `{key}`"))),
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "num_hops" => self.tree.num_hops = parse(key, v)?,
            "k_per_hop" => self.tree.k_per_hop = parse_list(key, v)?,
            "points_per_hop" => self.tree.points_per_hop = parse_list(key, v)?,
            "energy_threshold" => self.tree.energy_threshold = parse(key, v)?,
            "aggregations" => self.tree.aggregations = parse_list::<Aggregation>(key, v)?,
            "normalize" => self.tree.normalize = parse_bool(key, v)?,
            "drop_below_threshold" => self.tree.drop_below_threshold = parse_bool(key, v)?,
            "sparse_policy" => self.tree.sparse_policy = parse::<SparsePolicy>(key, v)?,
            "intervals" => self.intervals = parse(key, v)?,
            "ce_mode" => self.ce_mode = parse(key, v)?,
            "rank_mode" => self.rank_mode = parse(key, v)?,
            "num_features" => {
                self.num_features = match v {
                    "all" => None,
                    _ => Some(parse(key, v)?),
                }
            }
            "ensemble" => self.ensemble = parse_bool(key, v)?,
            "axis" => self.axis = parse(key, v)?,
            "rotations" => self.rotations = parse(key, v)?,
            "ridge" => self.ridge = parse(key, v)?,
            "standardize" => self.standardize = parse_bool(key, v)?,
            "num_points" => self.num_points = parse(key, v)?,
            "val_fraction" => self.val_fraction = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "data" => self.data = Some(PathBuf::from(v)),
            "model" => self.model = Some(PathBuf::from(v)),
            "out" => self.out = Some(PathBuf::from(v)),
            "thresholds" => self.thresholds = parse_list(key, v)?,
            "feature_counts" => self.feature_counts = parse_list(key, v)?,
            "density_sizes" => self.density_sizes = parse_list(key, v)?,
            other => return Err(Error::InvalidInput(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies one `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::InvalidInput(format!("expected key=value, got `{pair}`")))?;
        self.set(k, v)
    }

    /// Applies a config file: one `key = value` per line, `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            self.set_pair(line).map_err(|e| Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        self.apply_text(&text, path)
    }

    /// Checks cross-field constraints and returns the tree config with the
    /// run seed applied.
    pub fn validate(&mut self) -> Result<()> {
        self.tree.seed = self.seed;
        self.tree.validate()?;
        if self.intervals == 0 {
            return Err(Error::InvalidInput("intervals must be positive".into()));
        }
        if self.rotations == 0 {
            return Err(Error::InvalidInput("rotations must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::InvalidInput(format!("val_fraction {} not in [0, 1)", self.val_fraction)));
        }
        if self.num_points == 0 {
            return Err(Error::InvalidInput("num_points must be positive".into()));
        }
        if self.num_features == Some(0) {
            return Err(Error::InvalidInput("num_features must be positive or `all`".into()));
        }
        Ok(())
    }

    pub fn pipeline(&self) -> PipelineConfig {
        let llsr = LlsrOptions {
            ridge: self.ridge,
            standardize: self.standardize,
        };
        PipelineConfig {
            tree: TreeConfig {
                seed: self.seed,
                ..self.tree.clone()
            },
            rank: RankConfig {
                intervals: self.intervals,
                mode: self.ce_mode,
            },
            rank_mode: self.rank_mode,
            num_features: self.num_features,
            ensemble: self.ensemble.then(|| EnsembleConfig {
                axis: self.axis,
                angles: (0..self.rotations)
                    .map(|i| i as f64 * 2.0 * PI / self.rotations as f64)
                    .collect(),
                llsr,
            }),
            llsr,
        }
    }
}
