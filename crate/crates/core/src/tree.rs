//! The feature tree: a cascade of hops, each building octant attributes
//! around FPS-selected centers and decomposing them with one Saab bank per
//! surviving channel.
//!
//! Point sets per hop: the input cloud is level 0. Hop `h` picks
//! `points_per_hop[h]` centers from level `h` by farthest point sampling,
//! searches neighbours among all of level `h`, and its channel values live on
//! the centers, which form level `h + 1`.

use std::fmt;
use std::str::FromStr;

use log::{debug, warn};
use rayon::prelude::*;

use crate::dataset::{densify, subsample};
use crate::error::{Error, Result};
use crate::geometry::{self, octant_of, Point, PointCloud};
use crate::matrix::Matrix;
use crate::saab::{energy_shares, fit_from_moments, Moments, SaabFilterBank};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Aggregation {
    Mean,
    Max,
    /// Mean absolute value.
    L1,
    /// Root mean square.
    L2,
}

impl Aggregation {
    pub fn name(self) -> &'static str {
        match self {
            Aggregation::Mean => "mean",
            Aggregation::Max => "max",
            Aggregation::L1 => "l1",
            Aggregation::L2 => "l2",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Aggregation::Mean => 0,
            Aggregation::Max => 1,
            Aggregation::L1 => 2,
            Aggregation::L2 => 3,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        [Aggregation::Mean, Aggregation::Max, Aggregation::L1, Aggregation::L2]
            .get(c as usize)
            .copied()
    }

    fn apply(self, values: &[f64]) -> f64 {
        let n = values.len() as f64;
        match self {
            Aggregation::Mean => values.iter().sum::<f64>() / n,
            Aggregation::Max => values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            Aggregation::L1 => values.iter().map(|v| v.abs()).sum::<f64>() / n,
            Aggregation::L2 => (values.iter().map(|v| v * v).sum::<f64>() / n).sqrt(),
        }
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mean" => Ok(Aggregation::Mean),
            "max" => Ok(Aggregation::Max),
            "l1" => Ok(Aggregation::L1),
            "l2" => Ok(Aggregation::L2),
            other => Err(Error::InvalidInput(format!("unknown aggregation `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeConfig {
    pub num_hops: usize,
    pub k_per_hop: Vec<usize>,
    pub points_per_hop: Vec<usize>,
    pub energy_threshold: f64,
    pub aggregations: Vec<Aggregation>,
    /// Center and scale every cloud to unit max norm before hop 0.
    pub normalize: bool,
    /// Leaves that stopped early (energy below threshold) contribute no features.
    pub drop_below_threshold: bool,
    /// Handling of clouds with fewer points than hop 0 needs.
    pub sparse_policy: SparsePolicy,
    /// Seed for resampling sparse clouds.
    pub seed: u64,
}

/// What to do with a cloud smaller than `points_per_hop[0]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SparsePolicy {
    /// Draw points with replacement up to the required count.
    Resample,
    /// Keep the cloud as is and shrink every hop's point count and `k` by
    /// the same factor, so neighbourhoods keep their spatial extent.
    Rescale,
    /// Insert points between near neighbours until the count is reached.
    Interpolate,
}

impl SparsePolicy {
    pub fn name(self) -> &'static str {
        match self {
            SparsePolicy::Resample => "resample",
            SparsePolicy::Rescale => "rescale",
            SparsePolicy::Interpolate => "interpolate",
        }
    }
}

impl FromStr for SparsePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "resample" => Ok(SparsePolicy::Resample),
            "rescale" => Ok(SparsePolicy::Rescale),
            "interpolate" => Ok(SparsePolicy::Interpolate),
            other => Err(Error::InvalidInput(format!("unknown sparse policy `{other}`"))),
        }
    }
}

impl Default for TreeConfig {
    fn default() -> Self {
        Self {
            num_hops: 4,
            k_per_hop: vec![32, 16, 16, 16],
            points_per_hop: vec![1024, 768, 512, 384],
            energy_threshold: 1e-4,
            aggregations: vec![Aggregation::Mean, Aggregation::Max],
            normalize: true,
            drop_below_threshold: false,
            sparse_policy: SparsePolicy::Interpolate,
            seed: 0,
        }
    }
}

impl TreeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidInput(msg));
        if self.num_hops == 0 {
            return bad("num_hops must be >= 1".into());
        }
        if self.k_per_hop.len() != self.num_hops || self.points_per_hop.len() != self.num_hops {
            return bad(format!(
                "k_per_hop ({}) and points_per_hop ({}) need one entry per hop ({})",
                self.k_per_hop.len(),
                self.points_per_hop.len(),
                self.num_hops
            ));
        }
        if self.points_per_hop.contains(&0) {
            return bad("points_per_hop entries must be >= 1".into());
        }
        if self.points_per_hop.windows(2).any(|w| w[1] > w[0]) {
            return bad("points_per_hop must be nonincreasing".into());
        }
        for (h, (&k, &p)) in self.k_per_hop.iter().zip(&self.points_per_hop).enumerate() {
            if k == 0 || k > p {
                return bad(format!("hop {h}: k = {k} must be in [1, {p}]"));
            }
        }
        if !(self.energy_threshold > 0.0 && self.energy_threshold <= 1.0) {
            return bad(format!(
                "energy threshold {} must be in (0, 1]",
                self.energy_threshold
            ));
        }
        if self.aggregations.is_empty() {
            return bad("at least one aggregation is required".into());
        }
        Ok(())
    }

    /// Attribute dimension entering hop `h`.
    pub fn input_dim(hop: usize) -> usize {
        if hop == 0 {
            24
        } else {
            8
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeNode {
    pub id: usize,
    pub hop: usize,
    /// Channel index inside the parent's bank (the root bank for hop 0).
    pub channel: usize,
    /// `None` for children of the root bank.
    pub parent: Option<usize>,
    pub energy: f64,
    /// Bank feeding this node's children; `None` marks a leaf.
    pub bank: Option<SaabFilterBank>,
    pub children: Vec<usize>,
}

impl TreeNode {
    pub fn is_leaf(&self) -> bool {
        self.bank.is_none()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTree {
    config: TreeConfig,
    root_bank: SaabFilterBank,
    nodes: Vec<TreeNode>,
    leaf_order: Vec<usize>,
}

/// One scalar per (leaf, aggregation), plus where each entry came from.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalFeature {
    pub values: Vec<f64>,
    pub provenance: Vec<(usize, Aggregation)>,
}

impl FeatureTree {
    /// Reassembles a tree from stored parts; node ids must equal positions and
    /// children lists must agree with parent links.
    pub fn from_parts(config: TreeConfig, root_bank: SaabFilterBank, nodes: Vec<TreeNode>) -> Result<Self> {
        config.validate()?;
        for (i, n) in nodes.iter().enumerate() {
            if n.id != i || n.hop >= config.num_hops {
                return Err(Error::InvalidInput(format!("node {i} is malformed")));
            }
            let expected_dim = TreeConfig::input_dim(n.hop + 1);
            if let Some(b) = &n.bank {
                if n.hop + 1 >= config.num_hops || b.input_dim() != expected_dim || n.children.len() != expected_dim {
                    return Err(Error::InvalidInput(format!("node {i} has an inconsistent bank")));
                }
            } else if !n.children.is_empty() {
                return Err(Error::InvalidInput(format!("leaf node {i} has children")));
            }
            for &c in &n.children {
                if nodes.get(c).and_then(|ch| ch.parent) != Some(i) {
                    return Err(Error::InvalidInput(format!("node {i} has a dangling child {c}")));
                }
            }
        }
        if root_bank.input_dim() != TreeConfig::input_dim(0) {
            return Err(Error::InvalidInput("root bank must have 24 inputs".into()));
        }
        let leaf_order = nodes.iter().filter(|n| n.is_leaf()).map(|n| n.id).collect();
        Ok(Self {
            config,
            root_bank,
            nodes,
            leaf_order,
        })
    }

    pub fn config(&self) -> &TreeConfig {
        &self.config
    }

    pub fn root_bank(&self) -> &SaabFilterBank {
        &self.root_bank
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn leaf_order(&self) -> &[usize] {
        &self.leaf_order
    }

    /// Leaves that produce features, in leaf order.
    pub fn feature_leaves(&self) -> Vec<usize> {
        self.leaf_order
            .iter()
            .copied()
            .filter(|&id| self.leaf_contributes(&self.nodes[id]))
            .collect()
    }

    fn leaf_contributes(&self, n: &TreeNode) -> bool {
        !(self.config.drop_below_threshold
            && n.hop + 1 < self.config.num_hops
            && n.energy < self.config.energy_threshold)
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_leaves().len() * self.config.aggregations.len()
    }

    /// (leaf id, aggregation) for each feature column.
    pub fn provenance(&self) -> Vec<(usize, Aggregation)> {
        self.feature_leaves()
            .into_iter()
            .flat_map(|id| self.config.aggregations.iter().map(move |&a| (id, a)))
            .collect()
    }

    /// Leaf energy for each feature column.
    pub fn column_energies(&self) -> Vec<f64> {
        self.provenance()
            .into_iter()
            .map(|(id, _)| self.nodes[id].energy)
            .collect()
    }

    pub fn root_children(&self) -> Vec<usize> {
        self.nodes
            .iter()
            .filter(|n| n.parent.is_none())
            .map(|n| n.id)
            .collect()
    }

    /// Number of stored filter scalars (means plus weight matrices).
    pub fn parameter_count(&self) -> usize {
        self.root_bank.parameter_count()
            + self
                .nodes
                .iter()
                .filter_map(|n| n.bank.as_ref())
                .map(SaabFilterBank::parameter_count)
                .sum::<usize>()
    }

    pub fn transform(&self, cloud: &PointCloud) -> Result<GlobalFeature> {
        let values = self.transform_values(cloud)?;
        Ok(GlobalFeature {
            values,
            provenance: self.provenance(),
        })
    }

    fn transform_values(&self, cloud: &PointCloud) -> Result<Vec<f64>> {
        let geom = CloudGeometry::build(cloud, &self.config)?;
        let root = root_coefficients(&geom, &self.root_bank);
        Ok(self.features_from_root(&geom, &root))
    }

    /// Root-bank coefficients (DC first) of every hop-0 center of every
    /// cloud, stacked in cloud order.
    pub fn root_coefficients(&self, clouds: &[PointCloud]) -> Result<Matrix> {
        let blocks: Vec<Matrix> = clouds
            .par_iter()
            .map(|c| Ok(root_coefficients(&CloudGeometry::build(c, &self.config)?, &self.root_bank)))
            .collect::<Result<_>>()?;
        let d = self.root_bank.input_dim();
        let mut data = Vec::with_capacity(blocks.iter().map(|b| b.rows() * d).sum());
        for b in &blocks {
            data.extend_from_slice(b.as_slice());
        }
        Matrix::from_vec(data.len() / d, d, data)
    }

    /// Features of many clouds, one row each, computed in parallel.
    pub fn transform_batch(&self, clouds: &[PointCloud]) -> Result<Matrix> {
        let rows: Vec<Vec<f64>> = clouds
            .par_iter()
            .map(|c| self.transform_values(c))
            .collect::<Result<_>>()?;
        let dim = self.feature_dim();
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            data.extend(r);
        }
        Matrix::from_vec(clouds.len(), dim, data)
    }

    /// Replays the tree below the root bank. `root` holds one row of root
    /// coefficients per hop-0 center.
    pub(crate) fn features_from_root(&self, geom: &CloudGeometry, root: &Matrix) -> Vec<f64> {
        let mut per_leaf: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        for id in self.root_children() {
            let channel = root.column(self.nodes[id].channel);
            self.descend(geom, id, channel, &mut per_leaf);
        }
        let aggs = &self.config.aggregations;
        let mut out = Vec::with_capacity(self.feature_dim());
        for id in self.feature_leaves() {
            let vals = per_leaf[id].as_ref().expect("every leaf is reached");
            out.extend(aggs.iter().map(|a| a.apply(vals)));
        }
        out
    }

    fn descend(&self, geom: &CloudGeometry, id: usize, values: Vec<f64>, per_leaf: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        match &node.bank {
            None => per_leaf[id] = Some(values),
            Some(bank) => {
                let coeffs = child_coefficients(geom, node.hop + 1, &values, bank);
                for &c in &node.children {
                    let ch = coeffs.column(self.nodes[c].channel);
                    self.descend(geom, c, ch, per_leaf);
                }
            }
        }
    }
}

/// Neighbourhood structure of one hop: for every center, its neighbours in the
/// previous level grouped by octant.
#[derive(Debug, Clone)]
pub(crate) struct HopGeometry {
    /// Indices of the centers within the previous level.
    centers: Vec<u32>,
    /// Concatenated octant members (previous-level indices), 8 groups per center.
    members: Vec<u32>,
    /// `bounds[9 * c + o] .. bounds[9 * c + o + 1]` spans octant `o` of center `c`.
    bounds: Vec<u32>,
}

impl HopGeometry {
    fn build(pool: &[Point], m: usize, k: usize) -> Result<Self> {
        let centers = geometry::fps_indices(pool, m)?;
        let mut members = Vec::with_capacity(m * (k - 1));
        let mut bounds = Vec::with_capacity(m * 9);
        let mut scratch = Vec::with_capacity(pool.len());
        let mut buckets: [Vec<u32>; 8] = Default::default();
        for &c in &centers {
            geometry::knn_into(pool, &pool[c], Some(c), k, &mut scratch)?;
            buckets.iter_mut().for_each(Vec::clear);
            let cp = pool[c];
            for &(_, i) in scratch.iter().skip(1) {
                let p = pool[i as usize];
                buckets[octant_of(&[p[0] - cp[0], p[1] - cp[1], p[2] - cp[2]])].push(i);
            }
            for b in &buckets {
                bounds.push(members.len() as u32);
                members.extend_from_slice(b);
            }
            bounds.push(members.len() as u32);
        }
        Ok(Self {
            centers: centers.into_iter().map(|c| c as u32).collect(),
            members,
            bounds,
        })
    }

    fn len(&self) -> usize {
        self.centers.len()
    }

    fn octant(&self, center: usize, o: usize) -> &[u32] {
        let s = self.bounds[9 * center + o] as usize;
        let e = self.bounds[9 * center + o + 1] as usize;
        &self.members[s..e]
    }
}

/// All coordinate-only structure of one cloud, shared by every tree node.
#[derive(Debug, Clone)]
pub(crate) struct CloudGeometry {
    /// Level 0: the (normalized, resampled) input points.
    input: Vec<Point>,
    hops: Vec<HopGeometry>,
}

impl CloudGeometry {
    pub(crate) fn build(cloud: &PointCloud, config: &TreeConfig) -> Result<Self> {
        let mut cloud = if config.normalize {
            geometry::normalize(cloud)?
        } else {
            PointCloud::with_label(cloud.points.clone(), cloud.label)?
        };
        let mut ratio = 1.0;
        if cloud.len() < config.points_per_hop[0] {
            match config.sparse_policy {
                SparsePolicy::Resample => cloud = subsample(&cloud, config.points_per_hop[0], config.seed),
                SparsePolicy::Interpolate => cloud = densify(&cloud, config.points_per_hop[0], config.seed),
                SparsePolicy::Rescale => ratio = cloud.len() as f64 / config.points_per_hop[0] as f64,
            }
        }
        let scaled = |v: usize, min: usize| ((v as f64 * ratio).round() as usize).max(min);
        let mut hops = Vec::with_capacity(config.num_hops);
        let mut level = cloud.points.clone();
        for h in 0..config.num_hops {
            let m = scaled(config.points_per_hop[h], 1).min(level.len());
            let k = scaled(config.k_per_hop[h], 2.min(config.k_per_hop[h])).min(level.len());
            let hg = HopGeometry::build(&level, m, k)?;
            level = hg.centers.iter().map(|&c| level[c as usize]).collect();
            hops.push(hg);
        }
        Ok(Self {
            input: cloud.points,
            hops,
        })
    }
}

/// Hop-0 attributes: per-octant mean offset of the neighbours from the center.
fn root_attributes(geom: &CloudGeometry) -> Matrix {
    let hg = &geom.hops[0];
    let pts = &geom.input;
    let mut out = Matrix::zeros(hg.len(), 24);
    for c in 0..hg.len() {
        let cp = pts[hg.centers[c] as usize];
        let row = out.row_mut(c);
        for o in 0..8 {
            let members = hg.octant(c, o);
            if members.is_empty() {
                continue;
            }
            let mut sum = [0.0; 3];
            for &i in members {
                let p = pts[i as usize];
                for a in 0..3 {
                    sum[a] += p[a] - cp[a];
                }
            }
            let n = members.len() as f64;
            for a in 0..3 {
                row[3 * o + a] = sum[a] / n;
            }
        }
    }
    out
}

/// Hop-h (h >= 1) attributes: per-octant mean of one scalar channel.
fn scalar_attributes(geom: &CloudGeometry, hop: usize, values: &[f64]) -> Matrix {
    let hg = &geom.hops[hop];
    let mut out = Matrix::zeros(hg.len(), 8);
    for c in 0..hg.len() {
        let row = out.row_mut(c);
        for (o, slot) in row.iter_mut().enumerate() {
            let members = hg.octant(c, o);
            if !members.is_empty() {
                *slot = members.iter().map(|&i| values[i as usize]).sum::<f64>() / members.len() as f64;
            }
        }
    }
    out
}

fn apply_rows(bank: &SaabFilterBank, attrs: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(attrs.rows(), bank.input_dim());
    for r in 0..attrs.rows() {
        bank.apply_row(attrs.row(r), out.row_mut(r));
    }
    out
}

pub(crate) fn root_coefficients(geom: &CloudGeometry, bank: &SaabFilterBank) -> Matrix {
    apply_rows(bank, &root_attributes(geom))
}

fn child_coefficients(geom: &CloudGeometry, hop: usize, values: &[f64], bank: &SaabFilterBank) -> Matrix {
    apply_rows(bank, &scalar_attributes(geom, hop, values))
}

/// Per-point attribute source for [`build_attributes`].
#[derive(Debug, Clone, Copy)]
pub enum PointAttributes<'a> {
    /// Hop 0: offsets of the neighbours from the center (D = 3).
    Coordinates,
    /// Later hops: one scalar per point (D = 1).
    Scalar(&'a [f64]),
}

/// Octant attribute rows (8·D columns) for the given centers of `cloud`, with
/// neighbours searched among all of `cloud`.
pub fn build_attributes(
    cloud: &PointCloud,
    centers: &[usize],
    k: usize,
    attrs: PointAttributes<'_>,
) -> Result<Matrix> {
    let pts = &cloud.points;
    if let PointAttributes::Scalar(v) = attrs {
        if v.len() != pts.len() {
            return Err(Error::InvalidInput(format!(
                "{} scalar attributes for {} points",
                v.len(),
                pts.len()
            )));
        }
    }
    let dim = match attrs {
        PointAttributes::Coordinates => 3,
        PointAttributes::Scalar(_) => 1,
    };
    let mut out = Matrix::zeros(centers.len(), 8 * dim);
    let mut scratch = Vec::new();
    for (r, &c) in centers.iter().enumerate() {
        if c >= pts.len() {
            return Err(Error::InvalidInput(format!("center {c} out of range")));
        }
        geometry::knn_into(pts, &pts[c], Some(c), k, &mut scratch)?;
        let mut sums = vec![0.0; 8 * dim];
        let mut counts = [0usize; 8];
        for &(_, i) in scratch.iter().skip(1) {
            let p = pts[i as usize];
            let off = [p[0] - pts[c][0], p[1] - pts[c][1], p[2] - pts[c][2]];
            let o = octant_of(&off);
            counts[o] += 1;
            match attrs {
                PointAttributes::Coordinates => {
                    for a in 0..3 {
                        sums[3 * o + a] += off[a];
                    }
                }
                PointAttributes::Scalar(v) => sums[o] += v[i as usize],
            }
        }
        let row = out.row_mut(r);
        for o in 0..8 {
            if counts[o] > 0 {
                for a in 0..dim {
                    row[dim * o + a] = sums[dim * o + a] / counts[o] as f64;
                }
            }
        }
    }
    Ok(out)
}

/// Result of fitting: the tree plus the training features it produced.
#[derive(Debug, Clone)]
pub struct FittedTree {
    pub tree: FeatureTree,
    pub features: Matrix,
}

struct PendingNode {
    path: Vec<usize>,
    energy: f64,
    bank: Option<SaabFilterBank>,
}

struct Grower<'a> {
    config: &'a TreeConfig,
    geoms: &'a [CloudGeometry],
    nodes: Vec<PendingNode>,
    /// Per leaf path: one vector of per-cloud aggregates.
    leaf_features: Vec<(Vec<usize>, Vec<Vec<f64>>)>,
}

impl Grower<'_> {
    fn is_leaf(&self, hop: usize, energy: f64) -> bool {
        energy < self.config.energy_threshold || hop + 1 >= self.config.num_hops
    }

    /// Registers the channels of a freshly fitted bank and recurses into the
    /// ones that stay above threshold. `coeffs` holds one matrix per cloud.
    fn expand(&mut self, hop: usize, parent_path: &[usize], parent_energy: f64, bank: &SaabFilterBank, coeffs: Vec<Matrix>) -> Result<()> {
        let energies = energy_shares(bank.eigenvalues(), parent_energy);
        for (ch, &energy) in energies.iter().enumerate() {
            let mut path = parent_path.to_vec();
            path.push(ch);
            let values: Vec<Vec<f64>> = coeffs.iter().map(|m| m.column(ch)).collect();
            if self.is_leaf(hop, energy) {
                let aggs = &self.config.aggregations;
                let feats = values
                    .iter()
                    .map(|v| aggs.iter().map(|a| a.apply(v)).collect())
                    .collect();
                self.leaf_features.push((path.clone(), feats));
                self.nodes.push(PendingNode { path, energy, bank: None });
                continue;
            }
            let next = hop + 1;
            let geoms = self.geoms;
            let attrs: Vec<Matrix> = geoms
                .par_iter()
                .zip(values.par_iter())
                .map(|(g, v)| scalar_attributes(g, next, v))
                .collect();
            let child_bank = fit_bank(&attrs)?;
            let child_coeffs: Vec<Matrix> = attrs.par_iter().map(|a| apply_rows(&child_bank, a)).collect();
            drop(attrs);
            drop(values);
            let idx = self.nodes.len();
            self.nodes.push(PendingNode {
                path: path.clone(),
                energy,
                bank: None,
            });
            self.expand(next, &path, energy, &child_bank, child_coeffs)?;
            self.nodes[idx].bank = Some(child_bank);
        }
        Ok(())
    }
}

/// Fits one bank from per-cloud attribute matrices. Partial moments are built
/// in parallel and merged in cloud order, so the result does not depend on
/// the thread count.
fn fit_bank(attrs: &[Matrix]) -> Result<SaabFilterBank> {
    let dim = attrs.first().map_or(0, Matrix::cols);
    let partial: Vec<Moments> = attrs
        .par_iter()
        .map(Moments::from_rows)
        .collect();
    let mut total = Moments::new(dim);
    for p in &partial {
        total.merge(p);
    }
    fit_from_moments(&total)
}

/// Builds the feature tree from training clouds and returns it together with
/// the training feature matrix (one row per cloud).
pub fn fit_tree(clouds: &[PointCloud], config: &TreeConfig) -> Result<FittedTree> {
    config.validate()?;
    if clouds.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "tree fitting needs >= 2 clouds, got {}",
            clouds.len()
        )));
    }
    let geoms: Vec<CloudGeometry> = clouds
        .par_iter()
        .map(|c| CloudGeometry::build(c, config))
        .collect::<Result<_>>()?;
    let root_attrs: Vec<Matrix> = geoms.par_iter().map(root_attributes).collect();
    let root_bank = fit_bank(&root_attrs)?;
    let root_coeffs: Vec<Matrix> = root_attrs.par_iter().map(|a| apply_rows(&root_bank, a)).collect();
    drop(root_attrs);

    let mut grower = Grower {
        config,
        geoms: &geoms,
        nodes: Vec::new(),
        leaf_features: Vec::new(),
    };
    grower.expand(0, &[], 1.0, &root_bank, root_coeffs)?;

    // Renumber breadth-first: by hop, then by path (parent order, then channel).
    let mut pending = grower.nodes;
    pending.sort_by(|a, b| a.path.len().cmp(&b.path.len()).then_with(|| a.path.cmp(&b.path)));
    let id_of: std::collections::HashMap<Vec<usize>, usize> =
        pending.iter().enumerate().map(|(i, n)| (n.path.clone(), i)).collect();
    let mut nodes: Vec<TreeNode> = pending
        .into_iter()
        .enumerate()
        .map(|(id, p)| TreeNode {
            id,
            hop: p.path.len() - 1,
            channel: *p.path.last().expect("non-empty path"),
            parent: (p.path.len() > 1).then(|| id_of[&p.path[..p.path.len() - 1]]),
            energy: p.energy,
            bank: p.bank,
            children: Vec::new(),
        })
        .collect();
    for id in 0..nodes.len() {
        if let Some(parent) = nodes[id].parent {
            nodes[parent].children.push(id);
        }
    }
    for h in 0..config.num_hops.saturating_sub(1) {
        let any_at_hop = nodes.iter().any(|n| n.hop == h);
        let survivors = nodes.iter().filter(|n| n.hop == h && !n.is_leaf()).count();
        if any_at_hop && survivors == 0 {
            warn!("no channel at hop {h} reached the energy threshold; tree stops early");
        }
    }

    let tree = FeatureTree::from_parts(config.clone(), root_bank, nodes)?;
    debug!(
        "fitted tree: {} nodes, {} leaves, {} features",
        tree.nodes.len(),
        tree.leaf_order.len(),
        tree.feature_dim()
    );

    let mut leaf_map: std::collections::HashMap<Vec<usize>, Vec<Vec<f64>>> =
        grower.leaf_features.into_iter().collect();
    let naggs = config.aggregations.len();
    let leaves = tree.feature_leaves();
    let mut features = Matrix::zeros(clouds.len(), leaves.len() * naggs);
    for (j, &id) in leaves.iter().enumerate() {
        let path = node_path(&tree, id);
        let per_cloud = leaf_map.remove(&path).expect("leaf features recorded");
        for (r, f) in per_cloud.iter().enumerate() {
            features.row_mut(r)[j * naggs..(j + 1) * naggs].copy_from_slice(f);
        }
    }
    Ok(FittedTree { tree, features })
}

fn node_path(tree: &FeatureTree, mut id: usize) -> Vec<usize> {
    let mut path = Vec::new();
    loop {
        let n = &tree.nodes[id];
        path.push(n.channel);
        match n.parent {
            Some(p) => id = p,
            None => break,
        }
    }
    path.reverse();
    path
}
