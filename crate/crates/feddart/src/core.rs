//! Domain types shared by every other module.
//!
//! All types here are immutable value types: they are cheap to clone, safe to
//! copy between threads, and mutated only inside the modules that own them.
//! The serde encoding of each type (snake_case field names, uppercase enum
//! variants) is the canonical JSON wire and file format everywhere.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Parameter map for one device: parameter name to JSON value.
pub type ParamMap = BTreeMap<String, Value>;

/// Key used in `per_device_params` for parameters broadcast to every device.
///
/// Init tasks are delivered to all devices, including ones that register
/// later; their shared parameters live under this key. Device-specific
/// entries take precedence over the broadcast entry.
pub const BROADCAST_KEY: &str = "*";

/// Flat vector of model parameters plus the number of local training samples
/// backing it. The unit of federated exchange.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    pub values: Vec<f64>,
    pub sample_count: u64,
}

impl ParameterVector {
    pub fn new(values: Vec<f64>, sample_count: u64) -> Self {
        Self {
            values,
            sample_count,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// True when every component is finite (no NaN/Inf).
    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Task kind: init tasks run on every device before anything else.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum TaskKind {
    Init,
    Default,
}

/// A named unit of distributed work.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    /// Unique within a server's lifetime.
    pub task_name: String,
    /// Name of the registered function the workers execute.
    pub execute_function: String,
    /// Device name to parameter map. For init tasks the shared parameters
    /// live under [`BROADCAST_KEY`].
    pub per_device_params: BTreeMap<String, ParamMap>,
    pub task_kind: TaskKind,
    /// After this many seconds the server freezes the result set.
    pub max_wait_seconds: f64,
}

impl TaskSpec {
    /// Devices this task addresses (the broadcast key is not a device).
    pub fn device_names(&self) -> impl Iterator<Item = &String> {
        self.per_device_params
            .keys()
            .filter(|k| k.as_str() != BROADCAST_KEY)
    }

    /// Parameters delivered to `device`: the device's own entry, or the
    /// broadcast entry, or an empty map.
    pub fn params_for(&self, device: &str) -> ParamMap {
        self.per_device_params
            .get(device)
            .or_else(|| self.per_device_params.get(BROADCAST_KEY))
            .cloned()
            .unwrap_or_default()
    }

    /// Structural validity independent of server state.
    pub fn validate(&self) -> Result<(), String> {
        if self.task_name.is_empty() {
            return Err("task_name must be non-empty".into());
        }
        if self.execute_function.is_empty() {
            return Err("execute_function must be non-empty".into());
        }
        if !(self.max_wait_seconds > 0.0) {
            return Err("max_wait_seconds must be positive".into());
        }
        if self.task_kind == TaskKind::Default && self.device_names().next().is_none() {
            return Err("default task must name at least one device".into());
        }
        Ok(())
    }
}

/// One device's outcome for one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub device_name: String,
    pub duration_seconds: f64,
    pub result_dict: BTreeMap<String, Value>,
    /// `result_dict`'s values in lexicographic key order.
    pub result_list: Vec<Value>,
}

impl TaskResult {
    /// Builds a result; `result_list` is derived from `result_dict`.
    pub fn new(
        device_name: impl Into<String>,
        duration_seconds: f64,
        result_dict: BTreeMap<String, Value>,
    ) -> Self {
        let result_list = result_list_of(&result_dict);
        Self {
            device_name: device_name.into(),
            duration_seconds,
            result_dict,
            result_list,
        }
    }

    /// Workers mark failed executions by setting the reserved `error` key.
    pub fn is_failure(&self) -> bool {
        self.result_dict.contains_key("error")
    }
}

/// The values of `result_dict` ordered by lexicographic key.
pub fn result_list_of(result_dict: &BTreeMap<String, Value>) -> Vec<Value> {
    // BTreeMap iterates keys in lexicographic order already.
    result_dict.values().cloned().collect()
}

/// Virtual representation of a physical client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceRecord {
    pub name: String,
    pub ip_address: String,
    pub port: u16,
    pub hardware_config: Option<BTreeMap<String, Value>>,
    /// Task name to the parameters of assignments delivered but unfinished.
    pub open_tasks: BTreeMap<String, ParamMap>,
    /// Task name to the recorded result.
    pub finished_tasks: BTreeMap<String, TaskResult>,
    /// Set once an init-task result is recorded for this device.
    pub initialized: bool,
    /// Milliseconds since the Unix epoch of the last contact.
    pub last_seen: i64,
}

impl DeviceRecord {
    pub fn new(name: impl Into<String>, now_ms: i64) -> Self {
        Self {
            name: name.into(),
            ip_address: String::new(),
            port: 0,
            hardware_config: None,
            open_tasks: BTreeMap::new(),
            finished_tasks: BTreeMap::new(),
            initialized: false,
            last_seen: now_ms,
        }
    }
}

/// Compact device view returned by the device listing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceSummary {
    pub name: String,
    pub ip_address: String,
    pub port: u16,
    pub hardware_config: Option<BTreeMap<String, Value>>,
    pub initialized: bool,
    /// Heartbeat-based flag, for reporting only: the device polled within
    /// three times its poll interval.
    pub connected: bool,
    pub last_seen: i64,
}

/// Lifecycle state of a task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum TaskState {
    Queued,
    Running,
    Partial,
    Completed,
    Failed,
    Stopped,
}

/// Snapshot of a task's progress.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskStatus {
    pub state: TaskState,
    pub finished_devices: BTreeSet<String>,
    pub pending_devices: BTreeSet<String>,
}

impl TaskStatus {
    /// Classifies the state from the device sets and the terminal flags.
    ///
    /// Stop and failure dominate; a queued task has had no delivery yet;
    /// otherwise the state is a pure function of the two sets.
    pub fn classify(
        finished: BTreeSet<String>,
        pending: BTreeSet<String>,
        queued: bool,
        stopped: bool,
        failed: bool,
    ) -> Self {
        let state = if stopped {
            TaskState::Stopped
        } else if failed {
            TaskState::Failed
        } else if queued {
            TaskState::Queued
        } else if pending.is_empty() && !finished.is_empty() {
            TaskState::Completed
        } else if !finished.is_empty() {
            TaskState::Partial
        } else {
            TaskState::Running
        };
        Self {
            state,
            finished_devices: finished,
            pending_devices: pending,
        }
    }

    pub fn is_terminal(&self) -> bool {
        matches!(
            self.state,
            TaskState::Completed | TaskState::Failed | TaskState::Stopped
        )
    }
}

/// Non-blocking identifier for an accepted task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Handle {
    pub task_name: String,
    /// Milliseconds since the Unix epoch at issue time.
    pub issued_at: i64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use serde_json::json;

    #[test]
    fn result_list_follows_lexicographic_key_order() {
        let mut d = BTreeMap::new();
        d.insert("result_0".to_string(), json!(5));
        d.insert("result_1".to_string(), json!(2));
        assert_eq!(result_list_of(&d), vec![json!(5), json!(2)]);

        assert_eq!(result_list_of(&BTreeMap::new()), Vec::<Value>::new());

        let mut d = BTreeMap::new();
        d.insert("b".to_string(), json!(1));
        d.insert("a".to_string(), json!(2));
        assert_eq!(result_list_of(&d), vec![json!(2), json!(1)]);
    }

    #[test]
    fn task_result_derives_list() {
        let mut d = BTreeMap::new();
        d.insert("result_0".to_string(), json!(5));
        d.insert("result_1".to_string(), json!(2));
        let r = TaskResult::new("client1", 0.5, d);
        assert_eq!(r.result_list, vec![json!(5), json!(2)]);
        assert!(!r.is_failure());
    }

    #[test]
    fn failure_marker_is_the_error_key() {
        let mut d = BTreeMap::new();
        d.insert("error".to_string(), json!("boom"));
        assert!(TaskResult::new("c", 0.0, d).is_failure());
    }

    #[test]
    fn spec_validation_rejects_empty_default_task() {
        let spec = TaskSpec {
            task_name: "t".into(),
            execute_function: "f".into(),
            per_device_params: BTreeMap::new(),
            task_kind: TaskKind::Default,
            max_wait_seconds: 10.0,
        };
        assert!(spec.validate().is_err());

        let init = TaskSpec {
            task_kind: TaskKind::Init,
            ..spec
        };
        assert!(init.validate().is_ok());
    }

    #[test]
    fn broadcast_params_fall_back_for_unlisted_devices() {
        let mut per_device = BTreeMap::new();
        let mut shared = ParamMap::new();
        shared.insert("model_structure".into(), json!([4, 1]));
        per_device.insert(BROADCAST_KEY.to_string(), shared);
        let mut own = ParamMap::new();
        own.insert("model_structure".into(), json!([8, 1]));
        per_device.insert("client1".to_string(), own);

        let spec = TaskSpec {
            task_name: "init".into(),
            execute_function: "init".into(),
            per_device_params: per_device,
            task_kind: TaskKind::Init,
            max_wait_seconds: 30.0,
        };
        assert_eq!(spec.params_for("client1")["model_structure"], json!([8, 1]));
        assert_eq!(spec.params_for("client2")["model_structure"], json!([4, 1]));
        assert_eq!(spec.device_names().collect::<Vec<_>>(), vec!["client1"]);
    }

    #[test]
    fn canonical_field_names() {
        let pv = ParameterVector::new(vec![1.0, 2.0], 3);
        let v = serde_json::to_value(&pv).unwrap();
        assert_eq!(v, json!({"values": [1.0, 2.0], "sample_count": 3}));

        let status = TaskStatus::classify(
            BTreeSet::from(["a".to_string()]),
            BTreeSet::new(),
            false,
            false,
            false,
        );
        let v = serde_json::to_value(&status).unwrap();
        assert_eq!(v["state"], json!("COMPLETED"));
        assert_eq!(v["finished_devices"], json!(["a"]));
    }

    fn arb_value() -> impl Strategy<Value = Value> {
        prop_oneof![
            any::<bool>().prop_map(Value::from),
            any::<i32>().prop_map(Value::from),
            // Finite doubles only: the canonical encoding is JSON.
            (-1e12f64..1e12).prop_map(Value::from),
            "[a-z0-9_]{0,12}".prop_map(Value::from),
            proptest::collection::vec(-1e6f64..1e6, 0..4)
                .prop_map(|v| Value::from(v.into_iter().collect::<Vec<_>>())),
        ]
    }

    fn arb_param_map() -> impl Strategy<Value = ParamMap> {
        proptest::collection::btree_map("[a-z_][a-z0-9_]{0,8}", arb_value(), 0..5)
    }

    fn arb_task_spec() -> impl Strategy<Value = TaskSpec> {
        (
            "[a-z][a-z0-9_]{0,10}",
            "[a-z][a-z0-9_]{0,10}",
            proptest::collection::btree_map("[a-z][a-z0-9]{0,6}", arb_param_map(), 1..4),
            prop_oneof![Just(TaskKind::Init), Just(TaskKind::Default)],
            0.1f64..1e4,
        )
            .prop_map(
                |(task_name, execute_function, per_device_params, task_kind, max_wait_seconds)| {
                    TaskSpec {
                        task_name,
                        execute_function,
                        per_device_params,
                        task_kind,
                        max_wait_seconds,
                    }
                },
            )
    }

    proptest! {
        #[test]
        fn parameter_vector_round_trips(values in proptest::collection::vec(-1e9f64..1e9, 0..32), n in 0u64..1_000_000) {
            let pv = ParameterVector::new(values, n);
            let json = serde_json::to_string(&pv).unwrap();
            let back: ParameterVector = serde_json::from_str(&json).unwrap();
            prop_assert_eq!(pv, back);
        }

        #[test]
        fn task_spec_round_trips(spec in arb_task_spec()) {
            let json = serde_json::to_string(&spec).unwrap();
            let back: TaskSpec = serde_json::from_str(&json).unwrap();
            prop_assert_eq!(spec, back);
        }

        #[test]
        fn task_result_round_trips(device in "[a-z0-9]{1,8}", dur in 0.0f64..1e4, dict in arb_param_map()) {
            let r = TaskResult::new(device, dur, dict);
            let json = serde_json::to_string(&r).unwrap();
            let back: TaskResult = serde_json::from_str(&json).unwrap();
            prop_assert_eq!(r, back);
        }

        #[test]
        fn result_list_matches_sorted_keys(dict in arb_param_map()) {
            let list = result_list_of(&dict);
            let mut keys: Vec<_> = dict.keys().cloned().collect();
            keys.sort();
            let expected: Vec<_> = keys.iter().map(|k| dict[k].clone()).collect();
            prop_assert_eq!(list, expected);
        }

        #[test]
        fn status_classification_matches_definition(
            finished in proptest::collection::btree_set("[a-z]{1,4}", 0..5),
            pending in proptest::collection::btree_set("[a-z]{1,4}", 0..5),
            queued in any::<bool>(),
            stopped in any::<bool>(),
            failed in any::<bool>(),
        ) {
            let st = TaskStatus::classify(finished.clone(), pending.clone(), queued, stopped, failed);
            if stopped {
                prop_assert_eq!(st.state, TaskState::Stopped);
            } else if failed {
                prop_assert_eq!(st.state, TaskState::Failed);
            } else if queued {
                prop_assert_eq!(st.state, TaskState::Queued);
            } else if pending.is_empty() && !finished.is_empty() {
                prop_assert_eq!(st.state, TaskState::Completed);
            } else if !finished.is_empty() {
                prop_assert_eq!(st.state, TaskState::Partial);
            } else {
                prop_assert_eq!(st.state, TaskState::Running);
            }
            // COMPLETED iff no pending and at least one finished device.
            let completed = st.state == TaskState::Completed;
            prop_assert_eq!(completed, !stopped && !failed && !queued && pending.is_empty() && !finished.is_empty());
        }
    }
}
