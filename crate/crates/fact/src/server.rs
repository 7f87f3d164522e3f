//! Server-side orchestration: initialization, the outer clustering loop and
//! per-cluster federated training.
//!
//! Training runs per cluster: broadcast the cluster's global parameters to
//! exactly its clients, collect whatever results arrive within the round's
//! waiting time, aggregate with the cluster model's algorithm and repeat
//! until the cluster's stopping criterion is satisfied. The outer loop
//! re-clusters clients between rounds and re-initializes the ones that moved.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use feddart::core::ParamMap;
use feddart::{ParameterVector, TaskRequest, WorkflowManager};

use crate::aggregate::aggregate_fedavg;
use crate::client::derive_seed;
use crate::cluster::{apply_clustering, Cluster, ClusterContainer};
use crate::error::{FactError, Result};
use crate::model::Model;
use crate::stopping::StoppingCriterion;

/// One training round of one cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub clustering_round: u32,
    pub cluster: usize,
    pub training_round: u32,
    /// Mean of the participating clients' reported losses.
    pub loss: Option<f64>,
    pub participants: Vec<String>,
    pub duration_seconds: f64,
}

/// Server facade binding the workflow manager to the training routines.
pub struct FactServer {
    wm: WorkflowManager,
    container: Option<ClusterContainer>,
    client_params: BTreeMap<String, ParameterVector>,
    metrics: Vec<RoundMetrics>,
    seed: u64,
    initialized: bool,
    reinit_counter: u32,
    post_training_hooks: Vec<Box<dyn FnMut(&ClusterContainer) + Send>>,
}

impl FactServer {
    pub fn new(wm: WorkflowManager, seed: u64) -> Self {
        Self {
            wm,
            container: None,
            client_params: BTreeMap::new(),
            metrics: Vec::new(),
            seed,
            initialized: false,
            reinit_counter: 0,
            post_training_hooks: Vec::new(),
        }
    }

    pub fn workflow_manager(&self) -> &WorkflowManager {
        &self.wm
    }

    /// Optional steps after training, such as saving the trained model or
    /// running an evaluation.
    pub fn add_post_training_hook(
        &mut self,
        hook: impl FnMut(&ClusterContainer) + Send + 'static,
    ) {
        self.post_training_hooks.push(Box::new(hook));
    }

    /// Initializes from an explicit cluster container: connects, then sets up
    /// the local model on every client with its cluster's model.
    pub fn initialization(
        &mut self,
        container: ClusterContainer,
        server_file: &Path,
        device_file: Option<&Path>,
    ) -> Result<()> {
        container.validate()?;
        let mut per_device: BTreeMap<String, ParamMap> = BTreeMap::new();
        for cluster in &container.clusters {
            for client in &cluster.client_names {
                per_device.insert(client.clone(), init_params_for(&cluster.model)?);
            }
        }
        self.wm
            .create_init_task(feddart::InitParams::PerDevice(per_device), "init")?;
        self.wm.start_fed_dart(server_file, device_file)?;
        self.container = Some(container);
        self.initialized = true;
        Ok(())
    }

    /// Initializes from a bare model: wraps it in a single-cluster container
    /// with static clustering and one clustering round, which makes the run
    /// equivalent to standard FL over all connected clients.
    pub fn initialization_by_model(
        &mut self,
        model: Model,
        fl_stopping_criterion: StoppingCriterion,
        server_file: &Path,
        device_file: Option<&Path>,
    ) -> Result<()> {
        self.wm.create_init_task(
            feddart::InitParams::Broadcast(init_params_for(&model)?),
            "init",
        )?;
        self.wm.start_fed_dart(server_file, device_file)?;
        let client_names = self.wm.get_all_device_names()?;
        if client_names.is_empty() {
            return Err(FactError::BadConfig(
                "no connected clients to train on".into(),
            ));
        }
        self.container = Some(ClusterContainer::single(
            model,
            client_names,
            fl_stopping_criterion,
        ));
        self.initialized = true;
        Ok(())
    }

    /// The learning routine: trains every cluster (clusters run in
    /// parallel), applies the clustering algorithm, re-initializes moved
    /// clients and repeats until the clustering stopping criterion is
    /// satisfied. Returns the trained container.
    pub fn training(&mut self, task_parameters: ParamMap) -> Result<&ClusterContainer> {
        if !self.initialized {
            return Err(FactError::NotInitialized(
                "call initialization or initialization_by_model first".into(),
            ));
        }
        let mut container = self.container.take().expect("initialized");
        let max_wait = task_parameters
            .get("max_wait_seconds")
            .and_then(Value::as_f64)
            .unwrap_or(60.0);

        let mut clustering_round: u32 = 0;
        loop {
            let wm = &self.wm;
            let outcomes: Vec<Result<ClusterOutcome>> = std::thread::scope(|scope| {
                let handles: Vec<_> = container
                    .clusters
                    .iter_mut()
                    .map(|cluster| {
                        let task_parameters = &task_parameters;
                        scope.spawn(move || {
                            train_cluster(wm, cluster, task_parameters, clustering_round, max_wait)
                        })
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("cluster training thread panicked"))
                    .collect()
            });
            for outcome in outcomes {
                let outcome = outcome?;
                self.metrics.extend(outcome.metrics);
                self.client_params.extend(outcome.client_params);
            }

            let clustering_seed =
                derive_seed(self.seed, &format!("clustering_{clustering_round}"));
            let next = apply_clustering(&container, &self.client_params, clustering_seed)?;
            self.reinitialize_moved_clients(&container, &next, max_wait)?;
            container = next;

            clustering_round += 1;
            if container
                .clustering_stopping_criterion
                .satisfied(clustering_round, &BTreeMap::new())
            {
                break;
            }
        }

        self.container = Some(container);
        let container_ref = self.container.as_ref().expect("just set");
        for hook in &mut self.post_training_hooks {
            hook(container_ref);
        }
        Ok(container_ref)
    }

    /// Clients whose cluster membership changed receive a fresh init with
    /// their new cluster's model (the centroid as the new global parameters).
    fn reinitialize_moved_clients(
        &mut self,
        old: &ClusterContainer,
        new: &ClusterContainer,
        max_wait: f64,
    ) -> Result<()> {
        let membership = |container: &ClusterContainer, client: &str| -> BTreeSet<String> {
            container
                .cluster_of(client)
                .map(|c| c.client_names.iter().cloned().collect())
                .unwrap_or_default()
        };
        for cluster in &new.clusters {
            let moved: Vec<String> = cluster
                .client_names
                .iter()
                .filter(|client| membership(old, client) != membership(new, client))
                .cloned()
                .collect();
            if moved.is_empty() {
                continue;
            }
            let mut init_params = init_params_for(&cluster.model)?;
            init_params.insert(
                "global_model_parameters".to_string(),
                serde_json::to_value(&cluster.model.parameters)?,
            );
            let parameter_dict: BTreeMap<String, ParamMap> = moved
                .iter()
                .map(|c| (c.clone(), init_params.clone()))
                .collect();
            self.reinit_counter += 1;
            let name = format!("reinit_{:03}_c{}", self.reinit_counter, cluster.id);
            let handle = self.wm.start_task(
                TaskRequest::new(parameter_dict, "init", max_wait).named(name),
            )?;
            let status = self.wm.wait_for_task(&handle, max_wait + 5.0)?;
            if !status.is_terminal() {
                self.wm.logger().warn(
                    "fact",
                    &format!("re-init task {} still pending", handle.task_name),
                );
            }
        }
        Ok(())
    }

    pub fn metrics(&self) -> &[RoundMetrics] {
        &self.metrics
    }

    pub fn container(&self) -> Option<&ClusterContainer> {
        self.container.as_ref()
    }

    /// Last known parameter vector per client.
    pub fn client_params(&self) -> &BTreeMap<String, ParameterVector> {
        &self.client_params
    }
}

/// Init-task parameters carrying the model definition.
fn init_params_for(model: &Model) -> Result<ParamMap> {
    let mut params = ParamMap::new();
    params.insert("model_config".to_string(), serde_json::to_value(model.model_config)?);
    params.insert(
        "model_hyperparameters".to_string(),
        serde_json::to_value(model.hyperparameters)?,
    );
    params.insert("model_type".to_string(), serde_json::to_value(model.model_type)?);
    params.insert(
        "aggregation_algorithm".to_string(),
        serde_json::to_value(model.aggregation_algorithm)?,
    );
    Ok(params)
}

struct ClusterOutcome {
    metrics: Vec<RoundMetrics>,
    client_params: BTreeMap<String, ParameterVector>,
}

/// Federated training of one cluster: one task per round addressed to
/// exactly the cluster's clients, aggregation over the results that arrived
/// in time, repeated until the cluster's stopping criterion is satisfied.
fn train_cluster(
    wm: &WorkflowManager,
    cluster: &mut Cluster,
    task_parameters: &ParamMap,
    clustering_round: u32,
    max_wait: f64,
) -> Result<ClusterOutcome> {
    let mut metrics = Vec::new();
    let mut client_params = BTreeMap::new();
    let mut training_round: u32 = 0;
    loop {
        let started = Instant::now();
        let task_name = format!("c{}_r{}_t{}", cluster.id, clustering_round, training_round);

        let mut round_task_params = task_parameters.clone();
        round_task_params.remove("max_wait_seconds");
        round_task_params.insert("clustering_round".to_string(), json!(clustering_round));
        round_task_params.insert("training_round".to_string(), json!(training_round));

        let global = serde_json::to_value(&cluster.model.parameters)?;
        let parameter_dict: BTreeMap<String, ParamMap> = cluster
            .client_names
            .iter()
            .map(|client| {
                let mut p = ParamMap::new();
                p.insert("global_model_parameters".to_string(), global.clone());
                p.insert(
                    "task_parameters".to_string(),
                    Value::Object(round_task_params.clone().into_iter().collect()),
                );
                (client.clone(), p)
            })
            .collect();

        let handle = wm.start_task(
            TaskRequest::new(parameter_dict, "learn", max_wait).named(task_name.clone()),
        )?;
        wm.wait_for_task(&handle, max_wait + 5.0)?;
        let mut results = wm.get_task_result(&handle)?;
        results.sort_by(|a, b| a.device_name.cmp(&b.device_name));

        if results.is_empty() {
            return Err(FactError::RoundEmpty(format!(
                "no results for task {task_name:?} before expiry"
            )));
        }
        let usable: Vec<_> = results.iter().filter(|r| !r.is_failure()).collect();
        if usable.is_empty() {
            return Err(FactError::RoundFailed(format!(
                "every client failed in task {task_name:?}"
            )));
        }

        let mut vectors = Vec::with_capacity(usable.len());
        let mut losses = Vec::with_capacity(usable.len());
        let mut participants = Vec::with_capacity(usable.len());
        for result in &usable {
            let value = result.result_dict.get("parameters").ok_or_else(|| {
                FactError::RoundFailed(format!(
                    "result from {:?} lacks parameters",
                    result.device_name
                ))
            })?;
            let pv: ParameterVector = serde_json::from_value(value.clone())?;
            client_params.insert(result.device_name.clone(), pv.clone());
            vectors.push(pv);
            if let Some(loss) = result.result_dict.get("loss").and_then(Value::as_f64) {
                losses.push(loss);
            }
            participants.push(result.device_name.clone());
        }

        let weighted = cluster.model.aggregation_algorithm.weighted();
        cluster.model.parameters = aggregate_fedavg(&vectors, weighted)?;

        let loss = if losses.is_empty() {
            None
        } else {
            Some(losses.iter().sum::<f64>() / losses.len() as f64)
        };
        wm.logger().info(
            "fact",
            &format!(
                "cluster {} round {}/{}: {} participants, mean loss {:?}",
                cluster.id,
                clustering_round,
                training_round,
                participants.len(),
                loss
            ),
        );
        metrics.push(RoundMetrics {
            clustering_round,
            cluster: cluster.id,
            training_round,
            loss,
            participants,
            duration_seconds: started.elapsed().as_secs_f64(),
        });

        training_round += 1;
        let mut kw = BTreeMap::new();
        if let Some(l) = loss {
            kw.insert("loss".to_string(), json!(l));
        }
        if cluster.fl_stopping_criterion.satisfied(training_round, &kw) {
            break;
        }
    }
    Ok(ClusterOutcome {
        metrics,
        client_params,
    })
}
