//! Point clouds and the spatial primitives used by the feature tree.
//!
//! Every selection rule here is deterministic: ties on distance are broken by
//! lexicographic comparison of the coordinate triples and then by the smaller
//! point index. Because the first two keys only depend on coordinates, the
//! selected *point set* does not depend on the order the points are stored in.

use std::cmp::Ordering;

use crate::error::{Error, Result};

pub type Point = [f64; 3];

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
    pub label: Option<usize>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        Self::with_label(points, None)
    }

    pub fn with_label(points: Vec<Point>, label: Option<usize>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidInput("point cloud is empty".into()));
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::InvalidInput(format!(
                "point {i} has a non-finite coordinate"
            )));
        }
        Ok(Self { points, label })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Point {
        centroid(&self.points)
    }
}

/// Rotation axis for [`rotate_about`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl std::str::FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "x" => Ok(Axis::X),
            "y" => Ok(Axis::Y),
            "z" => Ok(Axis::Z),
            other => Err(Error::InvalidInput(format!("unknown axis `{other}`"))),
        }
    }
}

impl std::fmt::Display for Axis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Axis::X => "x",
            Axis::Y => "y",
            Axis::Z => "z",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborSet {
    pub center_index: usize,
    /// Ordered by increasing distance; the center comes first.
    pub neighbor_indices: Vec<usize>,
}

#[inline]
pub(crate) fn dist2(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[inline]
pub(crate) fn lex_cmp(a: &Point, b: &Point) -> Ordering {
    a[0].total_cmp(&b[0])
        .then(a[1].total_cmp(&b[1]))
        .then(a[2].total_cmp(&b[2]))
}

/// Centroid summed in lexicographic point order, so the result is bit-identical
/// for any permutation of the input.
pub(crate) fn centroid(points: &[Point]) -> Point {
    let mut sorted: Vec<&Point> = points.iter().collect();
    sorted.sort_by(|a, b| lex_cmp(a, b));
    let mut sum = [0.0; 3];
    for p in sorted {
        sum[0] += p[0];
        sum[1] += p[1];
        sum[2] += p[2];
    }
    let n = points.len() as f64;
    [sum[0] / n, sum[1] / n, sum[2] / n]
}

/// Centers the cloud at the origin and scales it to unit maximum norm.
pub fn normalize(cloud: &PointCloud) -> Result<PointCloud> {
    let checked = PointCloud::with_label(cloud.points.clone(), cloud.label)?;
    let c = checked.centroid();
    let mut points: Vec<Point> = checked
        .points
        .iter()
        .map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]])
        .collect();
    let max_norm = points
        .iter()
        .map(|p| dist2(p, &[0.0; 3]).sqrt())
        .fold(0.0_f64, f64::max);
    if max_norm > 0.0 {
        for p in &mut points {
            for v in p.iter_mut() {
                *v /= max_norm;
            }
        }
    }
    Ok(PointCloud {
        points,
        label: cloud.label,
    })
}

/// `true` when candidate `a` should be preferred over `b` in a
/// "largest distance wins" contest.
#[inline]
fn farther(points: &[Point], a: usize, da: f64, b: usize, db: f64) -> bool {
    match da.total_cmp(&db) {
        Ordering::Greater => true,
        Ordering::Less => false,
        Ordering::Equal => lex_cmp(&points[a], &points[b]).then(a.cmp(&b)) == Ordering::Less,
    }
}

pub(crate) fn fps_indices(points: &[Point], m: usize) -> Result<Vec<usize>> {
    let n = points.len();
    if m == 0 || m > n {
        return Err(Error::InvalidInput(format!(
            "farthest point sampling needs 1 <= m <= N, got m={m}, N={n}"
        )));
    }
    let c = centroid(points);
    let mut first = 0;
    let mut first_d = dist2(&points[0], &c);
    for i in 1..n {
        let d = dist2(&points[i], &c);
        if farther(points, i, d, first, first_d) {
            first = i;
            first_d = d;
        }
    }

    let mut selected = Vec::with_capacity(m);
    let mut taken = vec![false; n];
    let mut min_d = vec![f64::INFINITY; n];
    let mut last = first;
    selected.push(first);
    taken[first] = true;
    while selected.len() < m {
        let anchor = points[last];
        let mut best: Option<(usize, f64)> = None;
        for i in 0..n {
            if taken[i] {
                continue;
            }
            let d = dist2(&points[i], &anchor);
            if d < min_d[i] {
                min_d[i] = d;
            }
            let di = min_d[i];
            best = match best {
                Some((b, db)) if !farther(points, i, di, b, db) => Some((b, db)),
                _ => Some((i, di)),
            };
        }
        let (next, _) = best.expect("m <= N leaves a candidate");
        selected.push(next);
        taken[next] = true;
        last = next;
    }
    Ok(selected)
}

/// Greedy farthest point sampling. The seed is the point farthest from the
/// centroid; every later pick maximizes the distance to the selected set.
pub fn farthest_point_sample(cloud: &PointCloud, m: usize) -> Result<Vec<usize>> {
    fps_indices(&cloud.points, m)
}

/// Exact k nearest neighbours of `points[center]` among `points`, the center
/// itself always first.
pub(crate) fn knn_indices(points: &[Point], center: usize, k: usize) -> Result<Vec<usize>> {
    let mut scratch = Vec::with_capacity(points.len());
    knn_into(points, &points[center], Some(center), k, &mut scratch)?;
    Ok(scratch.into_iter().map(|(_, i)| i as usize).collect())
}

/// Shared kNN kernel. `query` need not be one of `points`; when `center` is
/// given that index is forced to rank first.
pub(crate) fn knn_into(
    points: &[Point],
    query: &Point,
    center: Option<usize>,
    k: usize,
    scratch: &mut Vec<(f64, u32)>,
) -> Result<()> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::InvalidInput(format!(
            "kNN needs 1 <= k <= N, got k={k}, N={n}"
        )));
    }
    scratch.clear();
    scratch.extend(points.iter().enumerate().map(|(i, p)| (dist2(p, query), i as u32)));
    let cmp = |a: &(f64, u32), b: &(f64, u32)| {
        let a_center = center == Some(a.1 as usize);
        let b_center = center == Some(b.1 as usize);
        b_center
            .cmp(&a_center)
            .then(a.0.total_cmp(&b.0))
            .then_with(|| lex_cmp(&points[a.1 as usize], &points[b.1 as usize]))
            .then(a.1.cmp(&b.1))
    };
    if k < n {
        scratch.select_nth_unstable_by(k - 1, cmp);
        scratch.truncate(k);
    }
    scratch.sort_unstable_by(cmp);
    Ok(())
}

pub fn knn(cloud: &PointCloud, center_index: usize, k: usize) -> Result<NeighborSet> {
    if center_index >= cloud.len() {
        return Err(Error::InvalidInput(format!(
            "center index {center_index} out of range for {} points",
            cloud.len()
        )));
    }
    Ok(NeighborSet {
        center_index,
        neighbor_indices: knn_indices(&cloud.points, center_index, k)?,
    })
}

/// Octant code of an offset: bit2 = dx >= 0, bit1 = dy >= 0, bit0 = dz >= 0.
#[inline]
pub fn octant_of(offset: &Point) -> usize {
    ((offset[0] >= 0.0) as usize) << 2 | ((offset[1] >= 0.0) as usize) << 1 | (offset[2] >= 0.0) as usize
}

/// Splits the non-center neighbours into the eight octants around the center.
pub fn octant_partition(cloud: &PointCloud, ns: &NeighborSet) -> Result<[Vec<usize>; 8]> {
    let center = cloud
        .points
        .get(ns.center_index)
        .ok_or_else(|| Error::InvalidInput("center index out of range".into()))?;
    let mut groups: [Vec<usize>; 8] = Default::default();
    for &i in &ns.neighbor_indices {
        if i == ns.center_index {
            continue;
        }
        let p = cloud
            .points
            .get(i)
            .ok_or_else(|| Error::InvalidInput(format!("neighbor index {i} out of range")))?;
        let off = [p[0] - center[0], p[1] - center[1], p[2] - center[2]];
        groups[octant_of(&off)].push(i);
    }
    Ok(groups)
}

pub fn rotate_about(cloud: &PointCloud, axis: Axis, angle: f64) -> PointCloud {
    let (s, c) = angle.sin_cos();
    let points = cloud
        .points
        .iter()
        .map(|&[x, y, z]| match axis {
            Axis::Z => [c * x - s * y, s * x + c * y, z],
            Axis::X => [x, c * y - s * z, s * y + c * z],
            Axis::Y => [c * x + s * z, y, -s * x + c * z],
        })
        .collect();
    PointCloud {
        points,
        label: cloud.label,
    }
}

pub fn rotate_about_z(cloud: &PointCloud, angle: f64) -> PointCloud {
    rotate_about(cloud, Axis::Z, angle)
}
