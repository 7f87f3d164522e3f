//! Clusters and the cluster container.
//!
//! Each cluster holds a set of client names, its own global model and its FL
//! stopping criterion; the container orchestrates re-clustering between
//! clustering rounds. With a static algorithm and one clustering round the
//! whole setup collapses to standard FL.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use feddart::ParameterVector;

use crate::error::{FactError, Result};
use crate::kmeans::kmeans;
use crate::model::Model;
use crate::stopping::StoppingCriterion;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub id: usize,
    pub client_names: Vec<String>,
    pub model: Model,
    pub fl_stopping_criterion: StoppingCriterion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "algorithm", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ClusteringAlgorithm {
    Static,
    KmeansOnParams { k: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterContainer {
    pub clusters: Vec<Cluster>,
    pub clustering_algorithm: ClusteringAlgorithm,
    pub clustering_stopping_criterion: StoppingCriterion,
}

impl ClusterContainer {
    /// Single-cluster container: static clustering, one clustering round.
    /// The standard-FL wrapping used when initializing from a bare model.
    pub fn single(model: Model, client_names: Vec<String>, fl: StoppingCriterion) -> Self {
        Self {
            clusters: vec![Cluster {
                id: 0,
                client_names,
                model,
                fl_stopping_criterion: fl,
            }],
            clustering_algorithm: ClusteringAlgorithm::Static,
            clustering_stopping_criterion: StoppingCriterion::fixed_rounds(1),
        }
    }

    /// All participating clients, sorted.
    pub fn client_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .clusters
            .iter()
            .flat_map(|c| c.client_names.iter().cloned())
            .collect();
        names.sort();
        names
    }

    /// Clusters must be non-empty and pairwise disjoint.
    pub fn validate(&self) -> Result<()> {
        if self.clusters.is_empty() {
            return Err(FactError::BadConfig("no clusters".into()));
        }
        let mut seen = BTreeSet::new();
        for cluster in &self.clusters {
            if cluster.client_names.is_empty() {
                return Err(FactError::BadConfig(format!(
                    "cluster {} has no clients",
                    cluster.id
                )));
            }
            for name in &cluster.client_names {
                if !seen.insert(name.clone()) {
                    return Err(FactError::BadConfig(format!(
                        "client {name:?} appears in more than one cluster"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn cluster_of(&self, client: &str) -> Option<&Cluster> {
        self.clusters
            .iter()
            .find(|c| c.client_names.iter().any(|n| n == client))
    }
}

/// Applies the container's clustering algorithm.
///
/// Static returns the container unchanged. K-means runs on the clients'
/// flattened parameter vectors; each rebuilt cluster takes its centroid as
/// the new global model parameters and inherits structure, hyperparameters
/// and criteria from the existing clusters.
pub fn apply_clustering(
    container: &ClusterContainer,
    client_params: &BTreeMap<String, ParameterVector>,
    seed: u64,
) -> Result<ClusterContainer> {
    match container.clustering_algorithm {
        ClusteringAlgorithm::Static => Ok(container.clone()),
        ClusteringAlgorithm::KmeansOnParams { k } => {
            let clients = container.client_names();
            let mut points = Vec::with_capacity(clients.len());
            for client in &clients {
                let pv = client_params.get(client).ok_or_else(|| {
                    FactError::BadConfig(format!(
                        "no parameter vector for participating client {client:?}"
                    ))
                })?;
                points.push(pv.values.clone());
            }
            if k > clients.len() {
                return Err(FactError::DegenerateK(format!(
                    "k = {k} with {} participating clients",
                    clients.len()
                )));
            }
            let result = kmeans(&points, k, seed, 10)?;

            let template = &container.clusters[0];
            let mut clusters: Vec<Cluster> = (0..k)
                .map(|id| {
                    let mut model = template.model.clone();
                    model.parameters =
                        ParameterVector::new(result.centroids[id].clone(), 0);
                    Cluster {
                        id,
                        client_names: Vec::new(),
                        model,
                        fl_stopping_criterion: template.fl_stopping_criterion.clone(),
                    }
                })
                .collect();
            for (client, &assignment) in clients.iter().zip(&result.assignments) {
                clusters[assignment].client_names.push(client.clone());
                let samples = client_params
                    .get(client)
                    .map(|pv| pv.sample_count)
                    .unwrap_or(0);
                clusters[assignment].model.parameters.sample_count += samples;
            }
            let out = ClusterContainer {
                clusters,
                clustering_algorithm: container.clustering_algorithm,
                clustering_stopping_criterion: container.clustering_stopping_criterion.clone(),
            };
            out.validate()?;
            Ok(out)
        }
    }
}
