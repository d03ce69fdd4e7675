//! PointHop++ style point-cloud classification: an unsupervised feature tree
//! built from cascaded channel-wise Saab transforms, cross-entropy feature
//! ranking, and least-squares classification.

pub mod classifier;
pub mod container;
pub mod dataset;
pub mod error;
pub mod geometry;
pub mod matrix;
pub mod pipeline;
pub mod ranking;
pub mod saab;
pub mod synthetic;
pub mod tree;

pub use classifier::{EnsembleConfig, EnsembleModel, Evaluation, LlsrModel, LlsrOptions};
pub use container::{load_model, save_model, Classifier, ModelContainer, Selection};
pub use dataset::{Dataset, Split};
pub use error::{Error, Result};
pub use geometry::{Axis, NeighborSet, Point, PointCloud};
pub use matrix::Matrix;
pub use pipeline::{fit_model, FitOutput, PipelineConfig};
pub use ranking::{RankConfig, RankMode, RankedFeatureSet};
pub use saab::{Moments, SaabFilterBank};
pub use tree::{fit_tree, Aggregation, FeatureTree, FittedTree, GlobalFeature, SparsePolicy, TreeConfig, TreeNode};
