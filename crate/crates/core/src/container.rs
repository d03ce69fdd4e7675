//! Binary model container.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic        4 bytes  "PH2\x01"
//! version      u32
//! endianness   u32      0x01020304
//! payload_len  u64
//! payload      payload_len bytes, a sequence of sections
//! checksum     32 bytes SHA-256 of the payload
//! ```
//!
//! Each section is `tag: u8, len: u64, body`. Sections appear in tag order:
//! config (1), nodes (2), banks (3), class names (4), ranking (5, optional),
//! classifier (6, optional). A sidecar `<model>.manifest` holds a readable
//! `key = value` summary.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::classifier::{EnsembleModel, LlsrModel, Standardizer};
use crate::error::{Error, Result};
use crate::geometry::Axis;
use crate::matrix::Matrix;
use crate::ranking::{RankMode, RankedFeatureSet};
use crate::saab::SaabFilterBank;
use crate::tree::{Aggregation, FeatureTree, SparsePolicy, TreeConfig, TreeNode};

pub const MAGIC: [u8; 4] = *b"PH2\x01";
pub const FORMAT_VERSION: u32 = 1;
const ENDIAN_MARK: u32 = 0x0102_0304;
const HEADER_LEN: usize = 4 + 4 + 4 + 8;
const CHECKSUM_LEN: usize = 32;

const TAG_CONFIG: u8 = 1;
const TAG_NODES: u8 = 2;
const TAG_BANKS: u8 = 3;
const TAG_CLASSES: u8 = 4;
const TAG_RANKING: u8 = 5;
const TAG_CLASSIFIER: u8 = 6;

/// Feature ranking stored with a model, plus the columns it selected.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub ranked: RankedFeatureSet,
    pub mode: RankMode,
    /// Selected feature columns, best first. Empty means "all columns".
    pub columns: Vec<usize>,
}

impl Selection {
    pub fn columns(&self) -> Option<&[usize]> {
        (!self.columns.is_empty()).then_some(&self.columns[..])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Classifier {
    Single(LlsrModel),
    Ensemble(EnsembleModel),
}

impl Classifier {
    pub fn parameter_count(&self) -> usize {
        match self {
            Classifier::Single(m) => m.parameter_count(),
            Classifier::Ensemble(e) => {
                e.stage1.iter().map(LlsrModel::parameter_count).sum::<usize>()
                    + e.stage2.as_ref().map_or(0, LlsrModel::parameter_count)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelContainer {
    pub tree: FeatureTree,
    pub class_names: Vec<String>,
    pub selection: Option<Selection>,
    pub classifier: Option<Classifier>,
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn i64(&mut self, v: i64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        v.iter().for_each(|&x| self.f64(x));
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len());
        self.buf.extend_from_slice(s.as_bytes());
    }
    fn section(&mut self, tag: u8, body: Writer) {
        self.u8(tag);
        self.u64(body.buf.len() as u64);
        self.buf.extend_from_slice(&body.buf);
    }
    fn matrix(&mut self, m: &Matrix) {
        self.u32(m.rows());
        self.u32(m.cols());
        self.f64s(m.as_slice());
    }
    fn bank(&mut self, b: &SaabFilterBank) {
        self.u32(b.input_dim());
        self.f64s(b.mean());
        self.f64s(b.ac_weights().as_slice());
        self.f64s(b.eigenvalues());
    }
    fn llsr(&mut self, m: &LlsrModel) {
        self.matrix(&m.weights);
        match &m.standardizer {
            Some(s) => {
                self.u8(1);
                self.f64s(&s.mean);
                self.f64s(&s.std);
            }
            None => self.u8(0),
        }
    }
}

fn new_writer() -> Writer {
    Writer { buf: Vec::new() }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptModel(msg.into())
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| corrupt(format!("unexpected end of data at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        // bound the allocation by what is actually left
        if n.saturating_mul(8) > self.buf.len() - self.pos {
            return Err(corrupt(format!("array of {n} floats overruns the data")));
        }
        (0..n).map(|_| self.f64()).collect()
    }
    fn bool(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(corrupt(format!("invalid flag byte {v}"))),
        }
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| corrupt("invalid UTF-8 string"))
    }
    fn section(&mut self, tag: u8) -> Result<Reader<'a>> {
        let got = self.u8()?;
        if got != tag {
            return Err(corrupt(format!("expected section {tag}, found {got}")));
        }
        let len = self.u64()? as usize;
        Ok(Reader {
            buf: self.take(len)?,
            pos: 0,
        })
    }
    fn peek(&self) -> Option<u8> {
        self.buf.get(self.pos).copied()
    }
    fn finish(&self, what: &str) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(corrupt(format!("{} trailing bytes in {what}", self.buf.len() - self.pos)));
        }
        Ok(())
    }
    fn matrix(&mut self) -> Result<Matrix> {
        let r = self.u32()?;
        let c = self.u32()?;
        let data = self.f64s(r.checked_mul(c).ok_or_else(|| corrupt("matrix size overflow"))?)?;
        Matrix::from_vec(r, c, data).map_err(|e| corrupt(e.to_string()))
    }
    fn bank(&mut self) -> Result<SaabFilterBank> {
        let d = self.u32()?;
        if d < 2 {
            return Err(corrupt(format!("bank dimension {d}")));
        }
        let mean = self.f64s(d)?;
        let ac = Matrix::from_vec(d - 1, d, self.f64s((d - 1) * d)?).map_err(|e| corrupt(e.to_string()))?;
        let eig = self.f64s(d)?;
        SaabFilterBank::from_parts(mean, ac, eig).map_err(|e| corrupt(e.to_string()))
    }
    fn llsr(&mut self) -> Result<LlsrModel> {
        let weights = self.matrix()?;
        if weights.rows() == 0 {
            return Err(corrupt("empty LLSR weight matrix"));
        }
        let standardizer = if self.bool()? {
            let f = weights.rows() - 1;
            Some(Standardizer {
                mean: self.f64s(f)?,
                std: self.f64s(f)?,
            })
        } else {
            None
        };
        Ok(LlsrModel { weights, standardizer })
    }
}

fn axis_code(a: Axis) -> u8 {
    match a {
        Axis::X => 0,
        Axis::Y => 1,
        Axis::Z => 2,
    }
}

fn encode_config(c: &TreeConfig) -> Writer {
    let mut w = new_writer();
    w.u32(c.num_hops);
    c.k_per_hop.iter().for_each(|&k| w.u32(k));
    c.points_per_hop.iter().for_each(|&p| w.u32(p));
    w.f64(c.energy_threshold);
    w.u32(c.aggregations.len());
    c.aggregations.iter().for_each(|a| w.u8(a.code()));
    w.u8(c.normalize as u8);
    w.u8(c.drop_below_threshold as u8);
    w.u8(match c.sparse_policy {
        SparsePolicy::Resample => 0,
        SparsePolicy::Rescale => 1,
        SparsePolicy::Interpolate => 2,
    });
    w.u64(c.seed);
    w
}

fn decode_config(r: &mut Reader) -> Result<TreeConfig> {
    let num_hops = r.u32()?;
    if num_hops > 64 {
        return Err(corrupt(format!("{num_hops} hops")));
    }
    let k_per_hop = (0..num_hops).map(|_| r.u32()).collect::<Result<_>>()?;
    let points_per_hop = (0..num_hops).map(|_| r.u32()).collect::<Result<_>>()?;
    let energy_threshold = r.f64()?;
    let n_aggs = r.u32()?;
    let aggregations = (0..n_aggs)
        .map(|_| {
            let c = r.u8()?;
            Aggregation::from_code(c).ok_or_else(|| corrupt(format!("aggregation code {c}")))
        })
        .collect::<Result<_>>()?;
    let normalize = r.bool()?;
    let drop_below_threshold = r.bool()?;
    let sparse_policy = match r.u8()? {
        0 => SparsePolicy::Resample,
        1 => SparsePolicy::Rescale,
        2 => SparsePolicy::Interpolate,
        v => return Err(corrupt(format!("sparse policy code {v}"))),
    };
    let seed = r.u64()?;
    let config = TreeConfig {
        num_hops,
        k_per_hop,
        points_per_hop,
        energy_threshold,
        aggregations,
        normalize,
        drop_below_threshold,
        sparse_policy,
        seed,
    };
    config.validate().map_err(|e| corrupt(e.to_string()))?;
    Ok(config)
}

impl ModelContainer {
    fn encode_payload(&self) -> Vec<u8> {
        let mut p = new_writer();
        p.section(TAG_CONFIG, encode_config(self.tree.config()));

        let mut nodes = new_writer();
        nodes.u32(self.tree.nodes().len());
        for n in self.tree.nodes() {
            nodes.u32(n.hop);
            nodes.u32(n.channel);
            nodes.i64(n.parent.map_or(-1, |p| p as i64));
            nodes.f64(n.energy);
            nodes.u8(!n.is_leaf() as u8);
        }
        p.section(TAG_NODES, nodes);

        let mut banks = new_writer();
        banks.bank(self.tree.root_bank());
        for b in self.tree.nodes().iter().filter_map(|n| n.bank.as_ref()) {
            banks.bank(b);
        }
        p.section(TAG_BANKS, banks);

        let mut classes = new_writer();
        classes.u32(self.class_names.len());
        self.class_names.iter().for_each(|c| classes.str(c));
        p.section(TAG_CLASSES, classes);

        if let Some(sel) = &self.selection {
            let mut s = new_writer();
            let n = sel.ranked.energy.len();
            s.u32(n);
            s.f64s(&sel.ranked.cross_entropy);
            s.f64s(&sel.ranked.energy);
            sel.ranked.by_cross_entropy.iter().for_each(|&i| s.u32(i));
            sel.ranked.by_energy.iter().for_each(|&i| s.u32(i));
            s.u8(match sel.mode {
                RankMode::CrossEntropy => 0,
                RankMode::Energy => 1,
            });
            s.u32(sel.columns.len());
            sel.columns.iter().for_each(|&c| s.u32(c));
            p.section(TAG_RANKING, s);
        }

        if let Some(cls) = &self.classifier {
            let mut c = new_writer();
            match cls {
                Classifier::Single(m) => {
                    c.u8(0);
                    c.llsr(m);
                }
                Classifier::Ensemble(e) => {
                    c.u8(1);
                    c.u8(axis_code(e.axis));
                    c.u32(e.angles.len());
                    c.f64s(&e.angles);
                    e.stage1.iter().for_each(|m| c.llsr(m));
                    match &e.stage2 {
                        Some(m) => {
                            c.u8(1);
                            c.llsr(m);
                        }
                        None => c.u8(0),
                    }
                }
            }
            p.section(TAG_CLASSIFIER, c);
        }
        p.buf
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let payload = self.encode_payload();
        let mut out = Vec::with_capacity(HEADER_LEN + payload.len() + CHECKSUM_LEN);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&ENDIAN_MARK.to_le_bytes());
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&payload);
        out.extend_from_slice(&Sha256::digest(&payload));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN + CHECKSUM_LEN {
            return Err(corrupt(format!("file too short ({} bytes)", bytes.len())));
        }
        if bytes[..4] != MAGIC {
            return Err(corrupt("bad magic bytes"));
        }
        let mut head = Reader { buf: &bytes[4..HEADER_LEN], pos: 0 };
        let version = head.u32()? as u32;
        if version != FORMAT_VERSION {
            return Err(corrupt(format!("unsupported format version {version}")));
        }
        if head.u32()? as u32 != ENDIAN_MARK {
            return Err(corrupt("endianness marker mismatch"));
        }
        let len = head.u64()? as usize;
        if bytes.len() != HEADER_LEN + len + CHECKSUM_LEN {
            return Err(corrupt(format!(
                "payload length {len} does not match file size {}",
                bytes.len()
            )));
        }
        let payload = &bytes[HEADER_LEN..HEADER_LEN + len];
        let stored = &bytes[HEADER_LEN + len..];
        if Sha256::digest(payload).as_slice() != stored {
            return Err(corrupt("checksum mismatch"));
        }
        Self::decode_payload(payload)
    }

    fn decode_payload(payload: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: payload, pos: 0 };

        let mut s = r.section(TAG_CONFIG)?;
        let config = decode_config(&mut s)?;
        s.finish("config")?;

        let mut s = r.section(TAG_NODES)?;
        let n = s.u32()?;
        let mut raw = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let hop = s.u32()?;
            let channel = s.u32()?;
            let parent = s.i64()?;
            let energy = s.f64()?;
            let internal = s.bool()?;
            raw.push((hop, channel, parent, energy, internal));
        }
        s.finish("nodes")?;

        let mut s = r.section(TAG_BANKS)?;
        let root_bank = s.bank()?;
        let mut nodes = Vec::with_capacity(raw.len());
        for (id, &(hop, channel, parent, energy, internal)) in raw.iter().enumerate() {
            let parent = match parent {
                -1 => None,
                p if p >= 0 && (p as usize) < id => Some(p as usize),
                p => return Err(corrupt(format!("node {id} has invalid parent {p}"))),
            };
            nodes.push(TreeNode {
                id,
                hop,
                channel,
                parent,
                energy,
                bank: if internal { Some(s.bank()?) } else { None },
                children: Vec::new(),
            });
        }
        s.finish("banks")?;
        for id in 0..nodes.len() {
            if let Some(p) = nodes[id].parent {
                nodes[p].children.push(id);
            }
        }
        let tree = FeatureTree::from_parts(config, root_bank, nodes).map_err(|e| corrupt(e.to_string()))?;

        let mut s = r.section(TAG_CLASSES)?;
        let count = s.u32()?;
        let class_names = (0..count).map(|_| s.str()).collect::<Result<Vec<_>>>()?;
        s.finish("class names")?;

        let selection = if r.peek() == Some(TAG_RANKING) {
            let mut s = r.section(TAG_RANKING)?;
            let n = s.u32()?;
            let cross_entropy = s.f64s(n)?;
            let energy = s.f64s(n)?;
            let mut index_list = |len: usize| -> Result<Vec<usize>> {
                (0..len)
                    .map(|_| {
                        let i = s.u32()?;
                        if i < n { Ok(i) } else { Err(corrupt(format!("column {i} out of range"))) }
                    })
                    .collect()
            };
            let by_cross_entropy = index_list(n)?;
            let by_energy = index_list(n)?;
            let mode = match s.u8()? {
                0 => RankMode::CrossEntropy,
                1 => RankMode::Energy,
                v => return Err(corrupt(format!("rank mode code {v}"))),
            };
            let m = s.u32()?;
            let columns = (0..m)
                .map(|_| {
                    let i = s.u32()?;
                    if i < n { Ok(i) } else { Err(corrupt(format!("column {i} out of range"))) }
                })
                .collect::<Result<_>>()?;
            s.finish("ranking")?;
            Some(Selection {
                ranked: RankedFeatureSet {
                    cross_entropy,
                    energy,
                    by_cross_entropy,
                    by_energy,
                },
                mode,
                columns,
            })
        } else {
            None
        };

        let classifier = if r.peek() == Some(TAG_CLASSIFIER) {
            let mut s = r.section(TAG_CLASSIFIER)?;
            let c = match s.u8()? {
                0 => Classifier::Single(s.llsr()?),
                1 => {
                    let axis = match s.u8()? {
                        0 => Axis::X,
                        1 => Axis::Y,
                        2 => Axis::Z,
                        v => return Err(corrupt(format!("axis code {v}"))),
                    };
                    let n = s.u32()?;
                    let angles = s.f64s(n)?;
                    let stage1 = (0..n).map(|_| s.llsr()).collect::<Result<_>>()?;
                    let stage2 = if s.bool()? { Some(s.llsr()?) } else { None };
                    Classifier::Ensemble(EnsembleModel {
                        axis,
                        angles,
                        stage1,
                        stage2,
                    })
                }
                v => return Err(corrupt(format!("classifier kind {v}"))),
            };
            s.finish("classifier")?;
            Some(c)
        } else {
            None
        };
        r.finish("payload")?;

        Ok(Self {
            tree,
            class_names,
            selection,
            classifier,
        })
    }

    /// Hex SHA-256 of the payload, as stored in the file.
    pub fn checksum_hex(&self) -> String {
        hex(&Sha256::digest(self.encode_payload()))
    }

    /// Human-readable `key = value` summary.
    pub fn manifest(&self) -> String {
        let payload = self.encode_payload();
        let tree = &self.tree;
        let cfg = tree.config();
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let mut lines = vec![
            ("format_version".to_string(), FORMAT_VERSION.to_string()),
            ("num_hops".into(), cfg.num_hops.to_string()),
            ("k_per_hop".into(), list(&cfg.k_per_hop)),
            ("points_per_hop".into(), list(&cfg.points_per_hop)),
            ("energy_threshold".into(), format!("{}", cfg.energy_threshold)),
            (
                "aggregations".into(),
                cfg.aggregations.iter().map(|a| a.name()).collect::<Vec<_>>().join(","),
            ),
            ("nodes".into(), tree.nodes().len().to_string()),
            ("leaves".into(), tree.leaf_order().len().to_string()),
            ("feature_dim".into(), tree.feature_dim().to_string()),
            ("filter_parameters".into(), tree.parameter_count().to_string()),
            ("classes".into(), self.class_names.len().to_string()),
            (
                "selected_features".into(),
                self.selection
                    .as_ref()
                    .and_then(|s| s.columns().map(<[usize]>::len))
                    .unwrap_or(tree.feature_dim())
                    .to_string(),
            ),
        ];
        lines.push((
            "classifier".into(),
            match &self.classifier {
                None => "none".into(),
                Some(Classifier::Single(_)) => "llsr".into(),
                Some(Classifier::Ensemble(e)) => format!("ensemble_{}", e.angles.len()),
            },
        ));
        lines.push((
            "classifier_parameters".into(),
            self.classifier.as_ref().map_or(0, Classifier::parameter_count).to_string(),
        ));
        lines.push(("payload_bytes".into(), payload.len().to_string()));
        lines.push(("sha256".into(), hex(&Sha256::digest(&payload))));
        lines.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest");
    PathBuf::from(s)
}

/// Writes the container and its sidecar manifest.
pub fn save_model(container: &ModelContainer, path: &Path) -> Result<()> {
    fs::write(path, container.to_bytes()).map_err(|e| Error::io(path, e))?;
    let mpath = manifest_path(path);
    fs::write(&mpath, container.manifest()).map_err(|e| Error::io(&mpath, e))
}

pub fn load_model(path: &Path) -> Result<ModelContainer> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    ModelContainer::from_bytes(&bytes)
}
