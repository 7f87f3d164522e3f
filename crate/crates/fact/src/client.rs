//! Client-side task functions: `init`, `learn` and `evaluate`.
//!
//! `init` builds the local model from the delivered configuration. `learn`
//! replaces the local parameters with the broadcast global ones, trains on
//! the local data and returns the updated parameter vector with its sample
//! count. `evaluate` reports the local loss. The functions are registered
//! under those names, so the same set serves real workers and the simulated
//! devices of test mode.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use serde_json::{json, Value};

use feddart::core::ParamMap;
use feddart::{FunctionRegistry, ParameterVector};

use crate::data::{ClientDataSpec, Dataset};
use crate::error::Result;
use crate::model::{
    loss, train, AggregationAlgorithm, Hyperparameters, Model, ModelConfig, ModelType,
};

/// Stable seed derivation: training on a device is reproducible and
/// independent of scheduling. FNV-1a over the tag, mixed with the base seed.
pub fn derive_seed(base: u64, tag: &str) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in tag.as_bytes() {
        hash ^= u64::from(*byte);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash ^ base.rotate_left(17)
}

struct ClientState {
    model: Option<Model>,
    learn_count: u64,
}

/// Builds the task-function registry for one client.
///
/// The data importer runs once up front; every learn call trains on the
/// resulting train split. Saved parameters land in
/// `<output_dir>/params_round_<i>.json`.
pub fn build_registry(
    device_name: &str,
    data_spec: &ClientDataSpec,
    output_dir: PathBuf,
) -> Result<FunctionRegistry> {
    let importer = data_spec.build_importer()?;
    let train_set = importer.train_set().clone();
    let test_set = importer.test_set().clone();
    drop(importer);

    let state = Arc::new(Mutex::new(ClientState {
        model: None,
        learn_count: 0,
    }));
    let device = device_name.to_string();

    let mut registry = FunctionRegistry::new();

    {
        let state = Arc::clone(&state);
        registry.register("init", move |params: &ParamMap| {
            let model = model_from_init_params(params)?;
            let mut out = BTreeMap::new();
            out.insert("initialized".to_string(), json!(true));
            out.insert(
                "param_len".to_string(),
                json!(model.model_config.param_len()),
            );
            state.lock().unwrap().model = Some(model);
            Ok(out)
        });
    }

    {
        let state = Arc::clone(&state);
        let device = device.clone();
        let train_set = train_set.clone();
        registry.register("learn", move |params: &ParamMap| {
            let mut state = state.lock().unwrap();
            let model = state
                .model
                .as_mut()
                .ok_or_else(|| "NOT_INITIALIZED: learn before init".to_string())?;
            let outcome = run_learn(model, &device, &train_set, params)?;
            state.learn_count += 1;
            let round_index = state.learn_count;
            save_parameters(&output_dir, round_index, &outcome.parameters);
            let mut out = BTreeMap::new();
            out.insert("loss".to_string(), json!(outcome.loss));
            out.insert("num_samples".to_string(), json!(outcome.parameters.sample_count));
            out.insert(
                "parameters".to_string(),
                serde_json::to_value(&outcome.parameters).map_err(|e| e.to_string())?,
            );
            Ok(out)
        });
    }

    {
        let state = Arc::clone(&state);
        registry.register("evaluate", move |params: &ParamMap| {
            let state = state.lock().unwrap();
            let model = state
                .model
                .as_ref()
                .ok_or_else(|| "NOT_INITIALIZED: evaluate before init".to_string())?;
            let eval_params = match params.get("global_model_parameters") {
                Some(value) => {
                    let pv: ParameterVector =
                        serde_json::from_value(value.clone()).map_err(|e| e.to_string())?;
                    pv.values
                }
                None => model.parameters.values.clone(),
            };
            // Fall back to the training split when no test split exists.
            let data = if test_set.is_empty() { &train_set } else { &test_set };
            let l = loss(model.model_type, &model.model_config, &eval_params, data);
            let mut out = BTreeMap::new();
            out.insert("loss".to_string(), json!(l));
            out.insert("num_samples".to_string(), json!(data.len()));
            Ok(out)
        });
    }

    Ok(registry)
}

fn model_from_init_params(params: &ParamMap) -> std::result::Result<Model, String> {
    let model_config: ModelConfig = field(params, "model_config")?;
    let hyperparameters: Hyperparameters = params
        .get("model_hyperparameters")
        .map(|v| serde_json::from_value(v.clone()).map_err(|e| format!("model_hyperparameters: {e}")))
        .transpose()?
        .unwrap_or_default();
    let model_type: ModelType = field(params, "model_type")?;
    let aggregation: AggregationAlgorithm = params
        .get("aggregation_algorithm")
        .map(|v| {
            serde_json::from_value(v.clone()).map_err(|e| format!("aggregation_algorithm: {e}"))
        })
        .transpose()?
        .unwrap_or(AggregationAlgorithm::Fedavg);
    let mut model = Model::new(model_type, model_config, hyperparameters, aggregation);
    if let Some(value) = params.get("global_model_parameters") {
        let pv: ParameterVector = serde_json::from_value(value.clone())
            .map_err(|e| format!("global_model_parameters: {e}"))?;
        if pv.len() != model.model_config.param_len() {
            return Err(format!(
                "global parameters of length {} do not fit the model ({})",
                pv.len(),
                model.model_config.param_len()
            ));
        }
        model.parameters = pv;
    }
    Ok(model)
}

fn field<T: serde::de::DeserializeOwned>(
    params: &ParamMap,
    name: &str,
) -> std::result::Result<T, String> {
    let value = params
        .get(name)
        .ok_or_else(|| format!("missing init parameter {name:?}"))?;
    serde_json::from_value(value.clone()).map_err(|e| format!("{name}: {e}"))
}

struct LearnOutcome {
    parameters: ParameterVector,
    loss: f64,
}

fn run_learn(
    model: &mut Model,
    device: &str,
    train_set: &Dataset,
    params: &ParamMap,
) -> std::result::Result<LearnOutcome, String> {
    let global: ParameterVector = field(params, "global_model_parameters")?;
    if global.len() != model.model_config.param_len() {
        return Err(format!(
            "global parameters of length {} do not fit the model ({})",
            global.len(),
            model.model_config.param_len()
        ));
    }
    let task_parameters: ParamMap = params
        .get("task_parameters")
        .and_then(|v| v.as_object().cloned())
        .map(|m| m.into_iter().collect())
        .unwrap_or_default();

    // Simulated device heterogeneity, mainly for fault-injection tests.
    if let Some(secs) = task_parameters.get("sleep_seconds").and_then(Value::as_f64) {
        if secs > 0.0 {
            std::thread::sleep(std::time::Duration::from_secs_f64(secs.min(60.0)));
        }
    }

    // Task parameters override the model's hyperparameter defaults.
    let mut hyper = model.hyperparameters;
    if let Some(epochs) = task_parameters.get("epochs").and_then(Value::as_u64) {
        hyper.local_epochs = epochs as u32;
    }
    if let Some(lr) = task_parameters.get("learning_rate").and_then(Value::as_f64) {
        hyper.learning_rate = lr;
    }
    if let Some(batch) = task_parameters.get("batch_size").and_then(Value::as_u64) {
        hyper.batch_size = batch as usize;
    }
    if let Some(mu) = task_parameters.get("mu").and_then(Value::as_f64) {
        hyper.mu = mu;
    }

    let clustering_round = task_parameters
        .get("clustering_round")
        .and_then(Value::as_u64)
        .unwrap_or(0);
    let training_round = task_parameters
        .get("training_round")
        .and_then(Value::as_u64)
        .unwrap_or(0);
    let seed = derive_seed(
        clustering_round.wrapping_mul(0x9e37_79b9).wrapping_add(training_round),
        device,
    );

    // Straight replacement of the local parameters with the global ones,
    // then local training (with the proximal pull for FEDPROX).
    let prox_global = global.values.clone();
    let prox = match model.aggregation_algorithm {
        AggregationAlgorithm::Fedprox => Some((prox_global.as_slice(), hyper.mu)),
        _ => None,
    };
    let trained = train(
        model.model_type,
        &model.model_config,
        &hyper,
        &global.values,
        train_set,
        seed,
        prox,
    )
    .map_err(|e| e.to_string())?;
    let final_loss = loss(model.model_type, &model.model_config, &trained, train_set);
    model.parameters = ParameterVector::new(trained, train_set.len() as u64);
    Ok(LearnOutcome {
        parameters: model.parameters.clone(),
        loss: final_loss,
    })
}

fn save_parameters(output_dir: &PathBuf, round: u64, parameters: &ParameterVector) {
    let path = output_dir.join(format!("params_round_{round}.json"));
    if let Ok(text) = serde_json::to_string(parameters) {
        let _ = std::fs::create_dir_all(output_dir);
        let _ = std::fs::write(path, text);
    }
}
