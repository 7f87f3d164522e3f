//! The server state machine.
//!
//! All state lives here; nothing does I/O. Methods that depend on time take
//! `now_ms` explicitly. Callers (the shared wrapper, the test-mode transport,
//! journal replay) serialize access, so any concurrent request history is
//! equivalent to the order in which commands were applied.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::Serialize;

use crate::core::{
    DeviceRecord, DeviceSummary, Handle, TaskKind, TaskResult, TaskSpec, TaskState, TaskStatus,
};
use crate::error::{ApiErrorCode, Error, Result};
use crate::protocol::{Assignment, RegisterRequest};

/// Default heartbeat window multiplier: a device is considered connected if
/// it contacted the server within this many poll intervals.
const HEARTBEAT_INTERVALS: f64 = 3.0;

#[derive(Debug, Serialize)]
struct DeviceState {
    record: DeviceRecord,
    poll_interval_seconds: f64,
    init_delivered: bool,
}

#[derive(Debug, Serialize)]
struct ActiveTask {
    spec: TaskSpec,
    /// Devices the assignment has been handed to.
    delivered: BTreeSet<String>,
    finished_devices: BTreeSet<String>,
    /// Results in completion order.
    results: Vec<TaskResult>,
    started_at_ms: i64,
}

impl ActiveTask {
    fn device_set(&self) -> BTreeSet<String> {
        self.spec.device_names().cloned().collect()
    }

    fn deadline_ms(&self) -> i64 {
        self.started_at_ms + (self.spec.max_wait_seconds * 1000.0).ceil() as i64
    }
}

#[derive(Debug, Serialize)]
struct FinishedTask {
    spec: TaskSpec,
    state: TaskState,
    finished_devices: BTreeSet<String>,
    /// Devices that never responded before the task was frozen.
    missing_devices: BTreeSet<String>,
    results: Vec<TaskResult>,
    /// Devices whose delivered assignment was cancelled; a later submit from
    /// them is kept for audit but excluded from `results`.
    cancelled: BTreeSet<String>,
    late_results: Vec<TaskResult>,
}

#[derive(Debug, Serialize)]
struct InitTaskState {
    spec: TaskSpec,
    /// Results in completion order (one per device).
    results: Vec<TaskResult>,
}

/// The server state machine.
#[derive(Debug, Serialize)]
pub struct ServerCore {
    devices: BTreeMap<String, DeviceState>,
    /// Accepted tasks waiting for capacity, FIFO.
    queue: VecDeque<TaskSpec>,
    /// Running/partial tasks in promotion order.
    active_order: Vec<String>,
    active: BTreeMap<String, ActiveTask>,
    finished: BTreeMap<String, FinishedTask>,
    init_task: Option<InitTaskState>,
    /// Max concurrently running tasks.
    capacity: usize,
    /// Every task name ever accepted; names are unique per server lifetime.
    all_task_names: BTreeSet<String>,
}

impl ServerCore {
    pub fn new(capacity: usize) -> Self {
        Self {
            devices: BTreeMap::new(),
            queue: VecDeque::new(),
            active_order: Vec::new(),
            active: BTreeMap::new(),
            finished: BTreeMap::new(),
            init_task: None,
            capacity: capacity.max(1),
            all_task_names: BTreeSet::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Registers a device; idempotent by name. Re-registration refreshes the
    /// address, hardware config, poll interval and heartbeat.
    pub fn register_device(&mut self, req: &RegisterRequest, now_ms: i64) -> Result<bool> {
        if req.name.is_empty() || req.name == crate::core::BROADCAST_KEY {
            return Err(Error::api(
                ApiErrorCode::BadRequest,
                format!("invalid device name {:?}", req.name),
            ));
        }
        let entry = self
            .devices
            .entry(req.name.clone())
            .or_insert_with(|| DeviceState {
                record: DeviceRecord::new(&req.name, now_ms),
                poll_interval_seconds: req.poll_interval_seconds,
                init_delivered: false,
            });
        entry.record.ip_address = req.ip_address.clone();
        entry.record.port = req.port;
        entry.record.hardware_config = req.hardware_config.clone();
        entry.record.last_seen = now_ms;
        if req.poll_interval_seconds > 0.0 {
            entry.poll_interval_seconds = req.poll_interval_seconds;
        }
        Ok(true)
    }

    pub fn list_devices(&self, now_ms: i64) -> Vec<DeviceSummary> {
        self.devices
            .values()
            .map(|d| {
                let window_ms =
                    (d.poll_interval_seconds * HEARTBEAT_INTERVALS * 1000.0).ceil() as i64;
                DeviceSummary {
                    name: d.record.name.clone(),
                    ip_address: d.record.ip_address.clone(),
                    port: d.record.port,
                    hardware_config: d.record.hardware_config.clone(),
                    initialized: d.record.initialized,
                    connected: now_ms - d.record.last_seen <= window_ms,
                    last_seen: d.record.last_seen,
                }
            })
            .collect()
    }

    pub fn device(&self, name: &str) -> Option<&DeviceRecord> {
        self.devices.get(name).map(|d| &d.record)
    }

    /// Accepts a task. Init tasks become the server's init task; default
    /// tasks are queued and promoted while there is capacity.
    pub fn add_task(&mut self, spec: TaskSpec, now_ms: i64) -> Result<Handle> {
        spec.validate()
            .map_err(|m| Error::api(ApiErrorCode::BadRequest, m))?;
        if self.all_task_names.contains(&spec.task_name) {
            return Err(Error::api(
                ApiErrorCode::TaskRejected,
                format!("duplicate task name {:?}", spec.task_name),
            ));
        }
        let task_name = spec.task_name.clone();
        match spec.task_kind {
            TaskKind::Init => {
                if self.init_task.is_some() {
                    return Err(Error::api(
                        ApiErrorCode::TaskRejected,
                        "an init task is already registered",
                    ));
                }
                self.all_task_names.insert(task_name.clone());
                self.init_task = Some(InitTaskState {
                    spec,
                    results: Vec::new(),
                });
            }
            TaskKind::Default => {
                for device in spec.device_names() {
                    if !self.devices.contains_key(device) {
                        return Err(Error::api(
                            ApiErrorCode::TaskRejected,
                            format!("unknown device {device:?}"),
                        ));
                    }
                }
                self.all_task_names.insert(task_name.clone());
                self.queue.push_back(spec);
                self.promote(now_ms);
            }
        }
        Ok(Handle {
            task_name,
            issued_at: now_ms,
        })
    }

    fn promote(&mut self, now_ms: i64) {
        while self.active.len() < self.capacity {
            let Some(spec) = self.queue.pop_front() else {
                break;
            };
            let name = spec.task_name.clone();
            self.active_order.push(name.clone());
            self.active.insert(
                name,
                ActiveTask {
                    spec,
                    delivered: BTreeSet::new(),
                    finished_devices: BTreeSet::new(),
                    results: Vec::new(),
                    started_at_ms: now_ms,
                },
            );
        }
    }

    /// Hands out at most one assignment for `device`.
    ///
    /// Uninitialized devices get the init assignment first and nothing else
    /// until their init result is in; afterwards the oldest running task that
    /// names the device and has not been delivered to it yet, FIFO.
    pub fn dispatch(&mut self, device_name: &str, now_ms: i64) -> Result<Option<Assignment>> {
        let device = self
            .devices
            .get_mut(device_name)
            .ok_or_else(|| unknown_device(device_name))?;
        device.record.last_seen = now_ms;

        if let Some(init) = &self.init_task {
            if !device.record.initialized {
                // Re-delivery is intentional: a worker that crashed after the
                // first delivery must still be able to initialize.
                let params = init.spec.params_for(device_name);
                device
                    .record
                    .open_tasks
                    .insert(init.spec.task_name.clone(), params.clone());
                device.init_delivered = true;
                return Ok(Some(Assignment {
                    task_name: init.spec.task_name.clone(),
                    execute_function: init.spec.execute_function.clone(),
                    task_kind: TaskKind::Init,
                    params,
                    max_wait_seconds: init.spec.max_wait_seconds,
                }));
            }
        }

        for task_name in &self.active_order {
            let Some(task) = self.active.get(task_name) else {
                continue;
            };
            if task.delivered.contains(device_name) {
                continue;
            }
            if !task.spec.per_device_params.contains_key(device_name) {
                continue;
            }
            let params = task.spec.params_for(device_name);
            let assignment = Assignment {
                task_name: task.spec.task_name.clone(),
                execute_function: task.spec.execute_function.clone(),
                task_kind: TaskKind::Default,
                params: params.clone(),
                max_wait_seconds: task.spec.max_wait_seconds,
            };
            let task_name = task_name.clone();
            self.active
                .get_mut(&task_name)
                .expect("task present")
                .delivered
                .insert(device_name.to_string());
            self.devices
                .get_mut(device_name)
                .expect("device present")
                .record
                .open_tasks
                .insert(task_name, params);
            return Ok(Some(assignment));
        }
        Ok(None)
    }

    /// Records one device's result. Exactly once per (task, device); init
    /// results flip the device's initialized flag; submits for frozen tasks
    /// from cancelled assignments are kept for audit only.
    pub fn record_result(
        &mut self,
        device_name: &str,
        task_name: &str,
        result: TaskResult,
        now_ms: i64,
    ) -> Result<TaskStatus> {
        if !self.devices.contains_key(device_name) {
            return Err(unknown_device(device_name));
        }
        self.touch(device_name, now_ms);

        if let Some(init) = &mut self.init_task {
            if init.spec.task_name == task_name {
                let device = self.devices.get_mut(device_name).expect("checked above");
                if device.record.initialized {
                    return Err(Error::api(
                        ApiErrorCode::BadRequest,
                        format!("duplicate init result from {device_name:?}"),
                    ));
                }
                if !device.record.open_tasks.contains_key(task_name) {
                    return Err(task_not_open(task_name, device_name));
                }
                device.record.open_tasks.remove(task_name);
                device
                    .record
                    .finished_tasks
                    .insert(task_name.to_string(), result.clone());
                device.record.initialized = true;
                init.results.push(result);
                return Ok(self.status(task_name).expect("init task exists"));
            }
        }

        if let Some(task) = self.active.get_mut(task_name) {
            if task.finished_devices.contains(device_name) {
                return Err(Error::api(
                    ApiErrorCode::BadRequest,
                    format!("duplicate result for {task_name:?} from {device_name:?}"),
                ));
            }
            if !task.delivered.contains(device_name) {
                return Err(task_not_open(task_name, device_name));
            }
            task.finished_devices.insert(device_name.to_string());
            task.results.push(result.clone());
            let complete = task.finished_devices == task.device_set();
            let device = self.devices.get_mut(device_name).expect("checked above");
            device.record.open_tasks.remove(task_name);
            device
                .record
                .finished_tasks
                .insert(task_name.to_string(), result);
            if complete {
                self.finalize(task_name, TaskState::Completed, now_ms);
            }
            return Ok(self.status(task_name).expect("task exists"));
        }

        if let Some(done) = self.finished.get_mut(task_name) {
            if done.finished_devices.contains(device_name) {
                return Err(Error::api(
                    ApiErrorCode::BadRequest,
                    format!("duplicate result for {task_name:?} from {device_name:?}"),
                ));
            }
            if done.cancelled.contains(device_name) {
                // Record-and-ignore: kept for audit, excluded from results.
                done.late_results.push(result);
                return Ok(self.status(task_name).expect("task exists"));
            }
            return Err(task_not_open(task_name, device_name));
        }

        Err(unknown_task(task_name))
    }

    /// Moves an active task into the finished store and frees its slot.
    fn finalize(&mut self, task_name: &str, state: TaskState, now_ms: i64) {
        let Some(task) = self.active.remove(task_name) else {
            return;
        };
        self.active_order.retain(|n| n != task_name);
        let device_set = task.device_set();
        let missing: BTreeSet<String> = device_set
            .difference(&task.finished_devices)
            .cloned()
            .collect();
        let cancelled: BTreeSet<String> = task
            .delivered
            .difference(&task.finished_devices)
            .cloned()
            .collect();
        for device in &missing {
            if let Some(d) = self.devices.get_mut(device) {
                d.record.open_tasks.remove(task_name);
            }
        }
        self.finished.insert(
            task_name.to_string(),
            FinishedTask {
                spec: task.spec,
                state,
                finished_devices: task.finished_devices,
                missing_devices: missing,
                results: task.results,
                cancelled,
                late_results: Vec::new(),
            },
        );
        self.promote(now_ms);
    }

    /// Current status of a task.
    pub fn status(&self, task_name: &str) -> Result<TaskStatus> {
        if let Some(init) = &self.init_task {
            if init.spec.task_name == task_name {
                let mut finished = BTreeSet::new();
                let mut pending = BTreeSet::new();
                for (name, d) in &self.devices {
                    if d.record.initialized {
                        finished.insert(name.clone());
                    } else {
                        pending.insert(name.clone());
                    }
                }
                return Ok(TaskStatus::classify(finished, pending, false, false, false));
            }
        }
        if let Some(spec) = self.queue.iter().find(|s| s.task_name == task_name) {
            let pending = spec.device_names().cloned().collect();
            return Ok(TaskStatus::classify(
                BTreeSet::new(),
                pending,
                true,
                false,
                false,
            ));
        }
        if let Some(task) = self.active.get(task_name) {
            let pending: BTreeSet<String> = task
                .device_set()
                .difference(&task.finished_devices)
                .cloned()
                .collect();
            return Ok(TaskStatus::classify(
                task.finished_devices.clone(),
                pending,
                false,
                false,
                false,
            ));
        }
        if let Some(done) = self.finished.get(task_name) {
            return Ok(TaskStatus {
                state: done.state,
                finished_devices: done.finished_devices.clone(),
                pending_devices: BTreeSet::new(),
            });
        }
        Err(unknown_task(task_name))
    }

    /// Up to `amount` currently available results, in completion order.
    /// Never blocks on unfinished devices.
    pub fn results(&self, task_name: &str, amount: usize) -> Result<Vec<TaskResult>> {
        if let Some(init) = &self.init_task {
            if init.spec.task_name == task_name {
                return Ok(init.results.iter().take(amount).cloned().collect());
            }
        }
        if self.queue.iter().any(|s| s.task_name == task_name) {
            return Ok(Vec::new());
        }
        if let Some(task) = self.active.get(task_name) {
            return Ok(task.results.iter().take(amount).cloned().collect());
        }
        if let Some(done) = self.finished.get(task_name) {
            return Ok(done.results.iter().take(amount).cloned().collect());
        }
        Err(unknown_task(task_name))
    }

    /// Stops a task: marks it STOPPED and cancels undelivered assignments.
    /// Results already recorded stay retrievable. Idempotent on terminal
    /// tasks.
    pub fn stop(&mut self, task_name: &str, now_ms: i64) -> Result<bool> {
        if let Some(init) = &self.init_task {
            if init.spec.task_name == task_name {
                let init = self.init_task.take().expect("just matched");
                for d in self.devices.values_mut() {
                    d.record.open_tasks.remove(task_name);
                }
                let finished: BTreeSet<String> =
                    init.results.iter().map(|r| r.device_name.clone()).collect();
                self.finished.insert(
                    task_name.to_string(),
                    FinishedTask {
                        spec: init.spec,
                        state: TaskState::Stopped,
                        finished_devices: finished,
                        missing_devices: BTreeSet::new(),
                        results: init.results,
                        cancelled: BTreeSet::new(),
                        late_results: Vec::new(),
                    },
                );
                return Ok(true);
            }
        }
        if let Some(pos) = self.queue.iter().position(|s| s.task_name == task_name) {
            let spec = self.queue.remove(pos).expect("position valid");
            self.finished.insert(
                task_name.to_string(),
                FinishedTask {
                    spec,
                    state: TaskState::Stopped,
                    finished_devices: BTreeSet::new(),
                    missing_devices: BTreeSet::new(),
                    results: Vec::new(),
                    cancelled: BTreeSet::new(),
                    late_results: Vec::new(),
                },
            );
            return Ok(true);
        }
        if self.active.contains_key(task_name) {
            self.finalize(task_name, TaskState::Stopped, now_ms);
            return Ok(true);
        }
        if self.finished.contains_key(task_name) {
            return Ok(true);
        }
        Err(unknown_task(task_name))
    }

    /// Expires one task if its deadline has passed. Frozen with state
    /// COMPLETED when at least one result arrived, FAILED otherwise. No-op on
    /// terminal tasks.
    pub fn expire(&mut self, task_name: &str, now_ms: i64) -> Result<TaskStatus> {
        if let Some(task) = self.active.get(task_name) {
            if task.deadline_ms() <= now_ms {
                let state = if task.finished_devices.is_empty() {
                    TaskState::Failed
                } else {
                    TaskState::Completed
                };
                self.finalize(task_name, state, now_ms);
            }
            return self.status(task_name);
        }
        self.status(task_name)
    }

    /// Expires every active task whose deadline has passed. Returns the
    /// expired task names.
    pub fn expire_due(&mut self, now_ms: i64) -> Vec<String> {
        let due: Vec<String> = self
            .active
            .values()
            .filter(|t| t.deadline_ms() <= now_ms)
            .map(|t| t.spec.task_name.clone())
            .collect();
        for name in &due {
            let state = if self.active[name].finished_devices.is_empty() {
                TaskState::Failed
            } else {
                TaskState::Completed
            };
            self.finalize(name, state, now_ms);
        }
        due
    }

    /// Devices an expired/stopped task never heard from.
    pub fn missing_devices(&self, task_name: &str) -> Option<&BTreeSet<String>> {
        self.finished.get(task_name).map(|t| &t.missing_devices)
    }

    /// Results recorded after a task was frozen (audit trail).
    pub fn late_results(&self, task_name: &str) -> Option<&[TaskResult]> {
        self.finished.get(task_name).map(|t| t.late_results.as_slice())
    }

    pub fn has_task(&self, task_name: &str) -> bool {
        self.all_task_names.contains(task_name)
    }

    pub fn init_task_name(&self) -> Option<&str> {
        self.init_task.as_ref().map(|t| t.spec.task_name.as_str())
    }

    fn touch(&mut self, device_name: &str, now_ms: i64) {
        if let Some(d) = self.devices.get_mut(device_name) {
            d.record.last_seen = now_ms;
        }
    }

    /// Serialized snapshot of the whole state, used to compare recovered
    /// state against the original in tests.
    pub fn state_digest(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("state serializes")
    }
}

fn unknown_device(name: &str) -> Error {
    Error::api(ApiErrorCode::DeviceUnknown, format!("unknown device {name:?}"))
}

fn unknown_task(name: &str) -> Error {
    Error::api(ApiErrorCode::TaskUnknown, format!("unknown task {name:?}"))
}

fn task_not_open(task: &str, device: &str) -> Error {
    Error::api(
        ApiErrorCode::TaskUnknown,
        format!("task {task:?} is not open on device {device:?}"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::ParamMap;
    use serde_json::json;
    use std::collections::BTreeMap;

    fn register(core: &mut ServerCore, name: &str, now: i64) {
        core.register_device(
            &RegisterRequest {
                name: name.into(),
                ip_address: "127.0.0.1".into(),
                port: 0,
                hardware_config: None,
                poll_interval_seconds: 1.0,
            },
            now,
        )
        .unwrap();
    }

    fn default_spec(name: &str, devices: &[&str], max_wait: f64) -> TaskSpec {
        let mut per_device = BTreeMap::new();
        for d in devices {
            let mut p = ParamMap::new();
            p.insert("x".into(), json!(1));
            per_device.insert(d.to_string(), p);
        }
        TaskSpec {
            task_name: name.into(),
            execute_function: "learn".into(),
            per_device_params: per_device,
            task_kind: TaskKind::Default,
            max_wait_seconds: max_wait,
        }
    }

    fn init_spec(name: &str) -> TaskSpec {
        let mut per_device = BTreeMap::new();
        let mut p = ParamMap::new();
        p.insert("model_structure".into(), json!([2, 1]));
        per_device.insert(crate::core::BROADCAST_KEY.to_string(), p);
        TaskSpec {
            task_name: name.into(),
            execute_function: "init".into(),
            per_device_params: per_device,
            task_kind: TaskKind::Init,
            max_wait_seconds: 60.0,
        }
    }

    fn result_for(device: &str) -> TaskResult {
        let mut d = BTreeMap::new();
        d.insert("out".to_string(), json!(1));
        TaskResult::new(device, 0.1, d)
    }

    #[test]
    fn capacity_gates_promotion_fifo() {
        let mut core = ServerCore::new(1);
        register(&mut core, "c1", 0);
        core.add_task(default_spec("a", &["c1"], 60.0), 0).unwrap();
        core.add_task(default_spec("b", &["c1"], 60.0), 0).unwrap();
        assert_eq!(core.status("a").unwrap().state, TaskState::Running);
        assert_eq!(core.status("b").unwrap().state, TaskState::Queued);

        // Completing A promotes B.
        core.dispatch("c1", 1).unwrap().unwrap();
        core.record_result("c1", "a", result_for("c1"), 2).unwrap();
        assert_eq!(core.status("a").unwrap().state, TaskState::Completed);
        assert_eq!(core.status("b").unwrap().state, TaskState::Running);

        let mut core2 = ServerCore::new(2);
        register(&mut core2, "c1", 0);
        core2.add_task(default_spec("a", &["c1"], 60.0), 0).unwrap();
        core2.add_task(default_spec("b", &["c1"], 60.0), 0).unwrap();
        assert_eq!(core2.status("a").unwrap().state, TaskState::Running);
        assert_eq!(core2.status("b").unwrap().state, TaskState::Running);
    }

    #[test]
    fn add_task_rejects_unknown_device_and_duplicate_name() {
        let mut core = ServerCore::new(4);
        register(&mut core, "client1", 0);
        register(&mut core, "client2", 0);
        assert!(core
            .add_task(default_spec("t", &["client1", "client2"], 60.0), 0)
            .is_ok());

        let err = core
            .add_task(default_spec("g", &["ghost"], 60.0), 0)
            .unwrap_err();
        assert_eq!(err.api_code(), Some(ApiErrorCode::TaskRejected));

        let err = core
            .add_task(default_spec("t", &["client1"], 60.0), 0)
            .unwrap_err();
        assert_eq!(err.api_code(), Some(ApiErrorCode::TaskRejected));
    }

    #[test]
    fn init_assignment_precedes_default() {
        let mut core = ServerCore::new(4);
        core.add_task(init_spec("init"), 0).unwrap();
        register(&mut core, "c1", 0);
        core.add_task(default_spec("t", &["c1"], 60.0), 0).unwrap();

        let a = core.dispatch("c1", 1).unwrap().unwrap();
        assert_eq!(a.task_name, "init");
        assert_eq!(a.task_kind, TaskKind::Init);
        assert_eq!(a.params["model_structure"], json!([2, 1]));

        // Still gated until the init result lands.
        assert!(core.dispatch("c1", 2).unwrap().unwrap().task_name == "init");
        core.record_result("c1", "init", result_for("c1"), 3).unwrap();
        assert!(core.device("c1").unwrap().initialized);

        let a = core.dispatch("c1", 4).unwrap().unwrap();
        assert_eq!(a.task_name, "t");
        assert_eq!(a.task_kind, TaskKind::Default);
    }

    #[test]
    fn dispatch_is_fifo_per_device_and_marks_delivery() {
        let mut core = ServerCore::new(4);
        register(&mut core, "c1", 0);
        core.add_task(default_spec("old", &["c1"], 60.0), 0).unwrap();
        core.add_task(default_spec("new", &["c1"], 60.0), 1).unwrap();

        assert_eq!(core.dispatch("c1", 2).unwrap().unwrap().task_name, "old");
        assert_eq!(core.dispatch("c1", 3).unwrap().unwrap().task_name, "new");
        assert!(core.dispatch("c1", 4).unwrap().is_none());
        assert!(core.device("c1").unwrap().open_tasks.contains_key("old"));
        assert!(core.device("c1").unwrap().open_tasks.contains_key("new"));

        assert!(core.dispatch("ghost", 5).is_err());
    }

    #[test]
    fn record_result_transitions_partial_then_completed() {
        let mut core = ServerCore::new(4);
        for c in ["a", "b", "c"] {
            register(&mut core, c, 0);
        }
        core.add_task(default_spec("t", &["a", "b", "c"], 60.0), 0).unwrap();
        for c in ["a", "b", "c"] {
            core.dispatch(c, 1).unwrap().unwrap();
        }

        let st = core.record_result("a", "t", result_for("a"), 2).unwrap();
        assert_eq!(st.state, TaskState::Partial);
        core.record_result("b", "t", result_for("b"), 3).unwrap();
        let st = core.record_result("c", "t", result_for("c"), 4).unwrap();
        assert_eq!(st.state, TaskState::Completed);

        // Exactly-once.
        let err = core
            .record_result("a", "t", result_for("a"), 5)
            .unwrap_err();
        assert_eq!(err.api_code(), Some(ApiErrorCode::BadRequest));

        // Device-side caches: open moved to finished.
        let rec = core.device("a").unwrap();
        assert!(!rec.open_tasks.contains_key("t"));
        assert!(rec.finished_tasks.contains_key("t"));
    }

    #[test]
    fn submit_for_undelivered_task_is_unknown() {
        let mut core = ServerCore::new(4);
        register(&mut core, "a", 0);
        core.add_task(default_spec("t", &["a"], 60.0), 0).unwrap();
        let err = core
            .record_result("a", "t", result_for("a"), 1)
            .unwrap_err();
        assert_eq!(err.api_code(), Some(ApiErrorCode::TaskUnknown));
    }

    #[test]
    fn expire_freezes_partial_results_as_completed() {
        let mut core = ServerCore::new(4);
        for c in ["a", "b", "c"] {
            register(&mut core, c, 0);
        }
        core.add_task(default_spec("t", &["a", "b", "c"], 10.0), 0).unwrap();
        for c in ["a", "b", "c"] {
            core.dispatch(c, 1).unwrap().unwrap();
        }
        core.record_result("a", "t", result_for("a"), 2_000).unwrap();
        core.record_result("b", "t", result_for("b"), 3_000).unwrap();

        // Before the deadline nothing happens.
        assert!(core.expire_due(9_999).is_empty());
        assert_eq!(core.status("t").unwrap().state, TaskState::Partial);

        let expired = core.expire_due(10_000);
        assert_eq!(expired, vec!["t".to_string()]);
        let st = core.status("t").unwrap();
        assert_eq!(st.state, TaskState::Completed);
        assert_eq!(st.finished_devices.len(), 2);
        assert!(st.pending_devices.is_empty());
        assert_eq!(core.results("t", 10).unwrap().len(), 2);
        assert_eq!(
            core.missing_devices("t").unwrap(),
            &BTreeSet::from(["c".to_string()])
        );

        // Idempotent.
        let st = core.expire("t", 20_000).unwrap();
        assert_eq!(st.state, TaskState::Completed);
    }

    #[test]
    fn expire_with_zero_results_fails_task() {
        let mut core = ServerCore::new(4);
        register(&mut core, "a", 0);
        core.add_task(default_spec("t", &["a"], 5.0), 0).unwrap();
        core.dispatch("a", 1).unwrap().unwrap();
        core.expire_due(5_000);
        assert_eq!(core.status("t").unwrap().state, TaskState::Failed);
        assert!(core.results("t", 10).unwrap().is_empty());
    }

    #[test]
    fn late_submit_after_freeze_is_audited_not_counted() {
        let mut core = ServerCore::new(4);
        register(&mut core, "a", 0);
        register(&mut core, "b", 0);
        core.add_task(default_spec("t", &["a", "b"], 5.0), 0).unwrap();
        core.dispatch("a", 1).unwrap().unwrap();
        core.dispatch("b", 1).unwrap().unwrap();
        core.record_result("a", "t", result_for("a"), 2).unwrap();
        core.stop("t", 3).unwrap();
        assert_eq!(core.status("t").unwrap().state, TaskState::Stopped);

        // b's assignment was cancelled; its late submit is audit-only.
        core.record_result("b", "t", result_for("b"), 4).unwrap();
        assert_eq!(core.results("t", 10).unwrap().len(), 1);
        assert_eq!(core.late_results("t").unwrap().len(), 1);

        // A device that never held the assignment cannot submit.
        register(&mut core, "z", 5);
        let err = core.record_result("z", "t", result_for("z"), 6).unwrap_err();
        assert_eq!(err.api_code(), Some(ApiErrorCode::TaskUnknown));
    }

    #[test]
    fn stop_cancels_queued_task() {
        let mut core = ServerCore::new(1);
        register(&mut core, "a", 0);
        core.add_task(default_spec("x", &["a"], 60.0), 0).unwrap();
        core.add_task(default_spec("y", &["a"], 60.0), 0).unwrap();
        assert!(core.stop("y", 1).unwrap());
        assert_eq!(core.status("y").unwrap().state, TaskState::Stopped);
        // x unaffected.
        assert_eq!(core.status("x").unwrap().state, TaskState::Running);
        assert!(core.stop("missing", 2).is_err());
    }

    #[test]
    fn registration_is_idempotent() {
        let mut core = ServerCore::new(4);
        register(&mut core, "c1", 0);
        register(&mut core, "c1", 10);
        assert_eq!(core.list_devices(10).len(), 1);
        assert_eq!(core.device("c1").unwrap().last_seen, 10);
    }

    #[test]
    fn heartbeat_window_drives_connected_flag() {
        let mut core = ServerCore::new(4);
        register(&mut core, "c1", 0); // poll interval 1s -> window 3s
        let devs = core.list_devices(3_000);
        assert!(devs[0].connected);
        let devs = core.list_devices(3_001);
        assert!(!devs[0].connected);
        // Contact refreshes the heartbeat.
        core.dispatch("c1", 4_000).unwrap();
        assert!(core.list_devices(6_500)[0].connected);
    }

    #[test]
    fn results_truncate_to_amount() {
        let mut core = ServerCore::new(4);
        register(&mut core, "a", 0);
        register(&mut core, "b", 0);
        core.add_task(default_spec("t", &["a", "b"], 60.0), 0).unwrap();
        core.dispatch("a", 1).unwrap();
        core.dispatch("b", 1).unwrap();
        core.record_result("a", "t", result_for("a"), 2).unwrap();
        core.record_result("b", "t", result_for("b"), 3).unwrap();
        assert_eq!(core.results("t", 1).unwrap().len(), 1);
        assert_eq!(core.results("t", 10).unwrap().len(), 2);
        assert!(core.results("nope", 1).is_err());
    }

    #[test]
    fn second_init_task_is_rejected() {
        let mut core = ServerCore::new(4);
        core.add_task(init_spec("i1"), 0).unwrap();
        let err = core.add_task(init_spec("i2"), 0).unwrap_err();
        assert_eq!(err.api_code(), Some(ApiErrorCode::TaskRejected));
    }

    #[test]
    fn init_status_tracks_late_joiners() {
        let mut core = ServerCore::new(4);
        core.add_task(init_spec("init"), 0).unwrap();
        register(&mut core, "a", 0);
        core.dispatch("a", 1).unwrap();
        core.record_result("a", "init", result_for("a"), 2).unwrap();
        assert_eq!(core.status("init").unwrap().state, TaskState::Completed);

        // A late joiner reopens the initialization phase.
        register(&mut core, "b", 3);
        let st = core.status("init").unwrap();
        assert_eq!(st.state, TaskState::Partial);
        assert!(st.pending_devices.contains("b"));
    }
}
