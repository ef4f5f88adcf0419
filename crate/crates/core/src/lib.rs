//! Unsupervised metric learning by piecewise-linear approximation of the
//! data manifold.
//!
//! A batch is embedded by a slowly moving momentum encoder, each point gets
//! a low-dimensional linear patch grown from its nearest neighbors, and the
//! orthogonal and in-plane distances to those patches define a continuous
//! similarity. A small network and a set of learnable proxies are trained
//! so that embedding distances follow that similarity.

pub mod config;
pub mod dataio;
pub mod embedder;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod manifold;
pub mod similarity;
pub mod trainer;

pub use config::{RunConfig, SeedStream};
pub use dataio::{FeatureDataset, SyntheticSpec};
pub use embedder::{Adam, AdamState, EmbedderPair, Mlp};
pub use error::{Error, Result};
pub use eval::{EvalReport, SupervisionReport};
pub use linalg::{Matrix, OrthonormalBasis};
pub use manifold::{LinearNeighborhood, ManifoldConfig, ProxySet};
pub use similarity::SimilarityConfig;
pub use trainer::{Checkpoint, TrainState};
