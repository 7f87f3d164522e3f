//! Federated aggregation and clustering toolkit.
//!
//! Builds the FL algorithm layer on top of the `feddart` runtime: a model
//! abstraction with federated averaging, weighted averaging and proximal
//! local training, cluster containers for personalized FL, stopping criteria,
//! data importers, the client-side task functions and the server-side
//! orchestration routines.

pub mod aggregate;
pub mod client;
pub mod cluster;
pub mod data;
pub mod error;
pub mod kmeans;
pub mod model;
pub mod server;
pub mod stopping;

pub use crate::aggregate::aggregate_fedavg;
pub use crate::client::{build_registry, derive_seed};
pub use crate::cluster::{apply_clustering, Cluster, ClusterContainer, ClusteringAlgorithm};
pub use crate::data::{ClientDataSpec, DataImporter, Dataset, SyntheticSpec};
pub use crate::error::{FactError, Result};
pub use crate::model::{AggregationAlgorithm, Hyperparameters, Model, ModelConfig, ModelType};
pub use crate::server::{FactServer, RoundMetrics};
pub use crate::stopping::StoppingCriterion;
