//! Experiment configuration and the run command.
//!
//! One config binds the server and device files, the model, the FL and
//! clustering settings and the per-client data into a runnable unit. The same
//! file runs in test mode or against a real server; only the transport
//! fields differ between the two.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::json;

use fact::{
    build_registry, AggregationAlgorithm, ClientDataSpec, Cluster, ClusterContainer,
    ClusteringAlgorithm, FactServer, Hyperparameters, Model, ModelConfig, ModelType,
    StoppingCriterion,
};
use feddart::config::DeviceFile;
use feddart::core::ParamMap;
use feddart::logging::LogServer;
use feddart::manager::{ManagerOptions, WorkflowManager};

use crate::ExitCategory;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSection {
    pub model_type: ModelType,
    pub model_config: ModelConfig,
    #[serde(default)]
    pub hyperparameters: Hyperparameters,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub server_file: PathBuf,
    pub device_file: PathBuf,
    pub model: ModelSection,
    pub aggregation: AggregationAlgorithm,
    #[serde(default = "default_clustering")]
    pub clustering: ClusteringAlgorithm,
    pub fl_rounds: u32,
    #[serde(default = "default_rounds")]
    pub clustering_rounds: u32,
    /// Per-client dataset specs; consumed by the simulated devices in test
    /// mode (real workers bring their own data).
    #[serde(default)]
    pub data: BTreeMap<String, ClientDataSpec>,
    pub seed: u64,
    pub test_mode: bool,
    #[serde(default = "default_max_wait")]
    pub max_wait_seconds: f64,
    pub output_dir: PathBuf,
}

fn default_clustering() -> ClusteringAlgorithm {
    ClusteringAlgorithm::Static
}

fn default_rounds() -> u32 {
    1
}

fn default_max_wait() -> f64 {
    60.0
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let config: Self =
            serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), String> {
        if !self.server_file.exists() {
            return Err(format!("server_file {} not found", self.server_file.display()));
        }
        if !self.device_file.exists() {
            return Err(format!("device_file {} not found", self.device_file.display()));
        }
        if self.fl_rounds < 1 {
            return Err("fl_rounds must be at least 1".into());
        }
        if self.clustering_rounds < 1 {
            return Err("clustering_rounds must be at least 1".into());
        }
        if !(self.max_wait_seconds > 0.0) {
            return Err("max_wait_seconds must be positive".into());
        }
        Ok(())
    }
}

pub struct RunOutcome {
    pub metrics_path: PathBuf,
    pub model_path: PathBuf,
    pub rounds: usize,
}

/// Executes an experiment: initialization, training, metrics and model
/// export. Returns the failure category for the process exit code.
pub fn run(config: &ExperimentConfig, logger: Arc<LogServer>) -> Result<RunOutcome, (ExitCategory, String)> {
    let bad = |m: String| (ExitCategory::BadConfig, m);
    let device_file = DeviceFile::load(&config.device_file)
        .map_err(|e| bad(e.to_string()))?;
    let clients = device_file.names();
    if clients.is_empty() {
        return Err(bad("device file lists no clients".into()));
    }

    std::fs::create_dir_all(&config.output_dir)
        .map_err(|e| bad(format!("output_dir: {e}")))?;

    let wm = if config.test_mode {
        for client in &clients {
            if !config.data.contains_key(client) {
                return Err(bad(format!("test mode: no data spec for client {client:?}")));
            }
        }
        let data = config.data.clone();
        let out = config.output_dir.join("clients");
        let factory: feddart::manager::RegistryFactory = Arc::new(move |device: &str| {
            let spec = data.get(device).expect("validated above");
            build_registry(device, spec, out.join(device)).expect("registry builds")
        });
        WorkflowManager::new(ManagerOptions {
            test_mode: true,
            registry_factory: Some(factory),
            logger: Arc::clone(&logger),
            ..Default::default()
        })
    } else {
        WorkflowManager::new(ManagerOptions {
            logger: Arc::clone(&logger),
            ..Default::default()
        })
    };

    let model = Model::new(
        config.model.model_type,
        config.model.model_config,
        config.model.hyperparameters,
        config.aggregation,
    );
    let container = ClusterContainer {
        clusters: vec![Cluster {
            id: 0,
            client_names: clients,
            model,
            fl_stopping_criterion: StoppingCriterion::fixed_rounds(config.fl_rounds),
        }],
        clustering_algorithm: config.clustering,
        clustering_stopping_criterion: StoppingCriterion::fixed_rounds(config.clustering_rounds),
    };

    let mut server = FactServer::new(wm, config.seed);
    server
        .initialization(container, &config.server_file, Some(&config.device_file))
        .map_err(|e| match e {
            fact::FactError::Runtime(feddart::Error::ConnectFailed(m)) => {
                (ExitCategory::ConnectFailed, m)
            }
            fact::FactError::Runtime(feddart::Error::InitTimeout(t)) => (
                ExitCategory::ConnectFailed,
                format!("initialization phase timed out after {t:.0}s"),
            ),
            fact::FactError::BadConfig(m) => (ExitCategory::BadConfig, m),
            other => (ExitCategory::ConnectFailed, other.to_string()),
        })?;

    let mut task_parameters = ParamMap::new();
    task_parameters.insert("max_wait_seconds".into(), json!(config.max_wait_seconds));
    server
        .training(task_parameters)
        .map_err(|e| (ExitCategory::Training, e.to_string()))?;

    let metrics_path = config.output_dir.join("metrics.jsonl");
    let mut lines = String::new();
    for record in server.metrics() {
        lines.push_str(&serde_json::to_string(record).expect("serializable metrics"));
        lines.push('\n');
    }
    std::fs::write(&metrics_path, lines).map_err(|e| bad(format!("metrics.jsonl: {e}")))?;

    let container = server.container().expect("training finished");
    let model_json = if container.clusters.len() == 1 {
        serde_json::to_value(&container.clusters[0].model).expect("serializable model")
    } else {
        json!({
            "clusters": container
                .clusters
                .iter()
                .map(|c| {
                    json!({
                        "id": c.id,
                        "client_names": c.client_names,
                        "model": c.model,
                    })
                })
                .collect::<Vec<_>>()
        })
    };
    let model_path = config.output_dir.join("model.json");
    std::fs::write(&model_path, serde_json::to_string_pretty(&model_json).unwrap())
        .map_err(|e| bad(format!("model.json: {e}")))?;

    logger.info(
        "run",
        &format!(
            "experiment finished: {} round records, model at {}",
            server.metrics().len(),
            model_path.display()
        ),
    );
    Ok(RunOutcome {
        metrics_path,
        model_path,
        rounds: server.metrics().len(),
    })
}
