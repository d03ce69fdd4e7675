//! Point-cloud datasets on disk and the sampling protocols used around them.
//!
//! On-disk layout: `root/<split>/<class_name>/<sample>.xyz`, where each file
//! holds one point per line as whitespace-separated `x y z` (further columns
//! are ignored, blank lines and `#` comments skipped).

use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{knn_indices, lex_cmp, Point, PointCloud};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidInput(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Every cloud carries its label.
    pub clouds: Vec<PointCloud>,
    pub class_names: Vec<String>,
    pub split: Split,
}

impl Dataset {
    pub fn new(clouds: Vec<PointCloud>, class_names: Vec<String>, split: Split) -> Result<Self> {
        let m = class_names.len();
        for (i, c) in clouds.iter().enumerate() {
            match c.label {
                Some(l) if l < m => {}
                _ => {
                    return Err(Error::InvalidInput(format!(
                        "cloud {i} has label {:?}, expected one in [0, {m})",
                        c.label
                    )))
                }
            }
            if c.is_empty() {
                return Err(Error::InvalidInput(format!("cloud {i} is empty")));
            }
        }
        Ok(Self {
            clouds,
            class_names,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.clouds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clouds.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.clouds.iter().map(|c| c.label.expect("validated")).collect()
    }

    /// Seeded shuffle into two disjoint parts; the second gets
    /// `round(len * val_fraction)` clouds. Each part keeps the original order.
    pub fn split_validation(&self, val_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&val_fraction) {
            return Err(Error::InvalidInput(format!(
                "validation fraction {val_fraction} must be in [0, 1)"
            )));
        }
        let n = self.len();
        let n_val = ((n as f64) * val_fraction).round() as usize;
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut val_idx = idx[..n_val].to_vec();
        let mut train_idx = idx[n_val..].to_vec();
        val_idx.sort_unstable();
        train_idx.sort_unstable();
        let pick = |ids: &[usize], split| Dataset {
            clouds: ids.iter().map(|&i| self.clouds[i].clone()).collect(),
            class_names: self.class_names.clone(),
            split,
        };
        Ok((pick(&train_idx, Split::Train), pick(&val_idx, Split::Val)))
    }
}

/// Parses one `.xyz` file.
pub fn read_xyz(path: &Path) -> Result<Vec<Point>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut points = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            msg,
        };
        let mut fields = line.split_whitespace();
        let mut p = [0.0; 3];
        for (a, slot) in p.iter_mut().enumerate() {
            let tok = fields
                .next()
                .ok_or_else(|| parse_err(format!("expected 3 coordinates, found {a}")))?;
            *slot = tok
                .parse::<f64>()
                .map_err(|_| parse_err(format!("`{tok}` is not a number")))?;
            if !slot.is_finite() {
                return Err(parse_err(format!("`{tok}` is not finite")));
            }
        }
        points.push(p);
    }
    if points.is_empty() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg: "file contains no points".into(),
        });
    }
    Ok(points)
}

pub fn write_xyz(path: &Path, points: &[Point]) -> Result<()> {
    let mut s = String::with_capacity(points.len() * 32);
    for p in points {
        s.push_str(&format!("{} {} {}\n", p[0], p[1], p[2]));
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn sorted_entries(dir: &Path, want_dirs: bool) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        let keep = if want_dirs {
            path.is_dir()
        } else {
            path.is_file() && path.extension().is_some_and(|e| e == "xyz")
        };
        if keep {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Loads `root/<split>/<class>/<sample>.xyz`. Class directories are sorted
/// lexicographically to assign labels; files are sorted within each class.
pub fn load_xyz_dir(root: &Path, split: Split) -> Result<Dataset> {
    let split_dir = root.join(split.dir_name());
    let class_dirs = sorted_entries(&split_dir, true)?;
    if class_dirs.is_empty() {
        return Err(Error::InvalidInput(format!(
            "{} contains no class directories",
            split_dir.display()
        )));
    }
    let mut class_names = Vec::with_capacity(class_dirs.len());
    let mut files = Vec::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let class_files = sorted_entries(dir, false)?;
        if class_files.is_empty() {
            warn!("class directory {} has no .xyz files", dir.display());
        }
        files.extend(class_files.into_iter().map(|f| (f, label)));
        class_names.push(name);
    }
    let clouds = files
        .par_iter()
        .map(|(path, label)| {
            let pts = read_xyz(path)?;
            PointCloud::with_label(pts, Some(*label))
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(clouds, class_names, split)
}

/// Writes a dataset in the layout [`load_xyz_dir`] reads.
pub fn save_xyz_dir(root: &Path, ds: &Dataset) -> Result<()> {
    let split_dir = root.join(ds.split.dir_name());
    let mut counters = vec![0usize; ds.num_classes()];
    for name in &ds.class_names {
        let d = split_dir.join(name);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    for cloud in &ds.clouds {
        let label = cloud.label.expect("validated");
        let path = split_dir
            .join(&ds.class_names[label])
            .join(format!("{:05}.xyz", counters[label]));
        counters[label] += 1;
        write_xyz(&path, &cloud.points)?;
    }
    Ok(())
}

/// Seeded uniform resampling to `n` points: without replacement when
/// `n <= N`, with replacement otherwise.
pub fn subsample(cloud: &PointCloud, n: usize, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = cloud.len();
    let points = if n <= total {
        index::sample(&mut rng, total, n)
            .into_iter()
            .map(|i| cloud.points[i])
            .collect()
    } else {
        (0..n).map(|_| cloud.points[rng.random_range(0..total)]).collect()
    };
    PointCloud {
        points,
        label: cloud.label,
    }
}

/// Grows a cloud to `n` points by inserting points on segments between each
/// point and one of its nearest neighbours. Unlike drawing with replacement
/// this creates no coincident points, so local neighbourhoods keep both
/// their spatial extent and their spread of offsets. Every original point
/// is kept. Clouds with at least `n` points are returned unchanged.
///
/// The result depends only on the set of input points, not their order.
pub fn densify(cloud: &PointCloud, n: usize, seed: u64) -> PointCloud {
    if cloud.len() >= n {
        return cloud.clone();
    }
    let mut base = cloud.points.clone();
    base.sort_by(lex_cmp);
    let mut points = base.clone();
    if base.len() == 1 {
        points.resize(n, base[0]);
        return PointCloud { points, label: cloud.label };
    }
    let k = base.len().min(DENSIFY_NEIGHBORS + 1);
    let neighbors: Vec<Vec<usize>> = (0..base.len())
        .into_par_iter()
        .map(|i| knn_indices(&base, i, k).map(|v| v[1..].to_vec()).unwrap_or_default())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..base.len()).collect();
    while points.len() < n {
        order.shuffle(&mut rng);
        for &i in &order {
            if points.len() == n {
                break;
            }
            let nb = &neighbors[i];
            let j = nb[rng.random_range(0..nb.len())];
            let t: f64 = rng.random_range(0.2..0.8);
            let (a, b) = (base[i], base[j]);
            points.push([
                a[0] + t * (b[0] - a[0]),
                a[1] + t * (b[1] - a[1]),
                a[2] + t * (b[2] - a[2]),
            ]);
        }
    }
    PointCloud { points, label: cloud.label }
}

const DENSIFY_NEIGHBORS: usize = 6;
