//! Workflow backend: task acceptance, the ephemeral aggregator tree, and the
//! non-ephemeral device mirrors that cache finished results.
//!
//! The selector is the single writer of backend state. Its device mirror is
//! authoritative on read only: it is refreshed from the server and never
//! pushed back.

pub mod aggregator;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use crate::core::{DeviceSummary, ParamMap, TaskResult, TaskSpec, TaskStatus};
use crate::error::{Error, RejectionReason, Result};
use crate::transport::Transport;

pub use aggregator::{Aggregator, DeviceHolder, DEFAULT_FANOUT, DEFAULT_HOLDER_CAPACITY};

/// Mirror of one registered device, plus the cache of its finished task
/// results. The cache outlives the per-task aggregators.
#[derive(Debug, Clone)]
pub struct DeviceMirror {
    pub summary: DeviceSummary,
    pub finished_tasks: BTreeMap<String, TaskResult>,
}

/// Proof that a task passed acceptance; the only way to instantiate an
/// aggregator, so the creation order (accept, then aggregate) holds by
/// construction.
#[derive(Debug)]
pub struct AcceptedTask {
    spec: TaskSpec,
}

impl AcceptedTask {
    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }
}

pub struct Selector {
    transport: Arc<dyn Transport>,
    devices: BTreeMap<String, DeviceMirror>,
    aggregators: BTreeMap<String, Aggregator>,
    /// Final statuses of tasks whose aggregator has been retired.
    final_status: BTreeMap<String, TaskStatus>,
    /// Names this selector has submitted; duplicates are rejected locally.
    submitted: BTreeSet<String>,
    holder_capacity: usize,
    fanout: usize,
}

impl Selector {
    pub fn new(transport: Arc<dyn Transport>, holder_capacity: usize, fanout: usize) -> Self {
        Self {
            transport,
            devices: BTreeMap::new(),
            aggregators: BTreeMap::new(),
            final_status: BTreeMap::new(),
            submitted: BTreeSet::new(),
            holder_capacity: holder_capacity.max(1),
            fanout: fanout.max(1),
        }
    }

    pub fn transport(&self) -> &Arc<dyn Transport> {
        &self.transport
    }

    /// Pulls the registered devices from the server into the mirror.
    /// Existing result caches are kept.
    pub fn refresh_devices(&mut self) -> Result<()> {
        for summary in self.transport.list_devices()? {
            match self.devices.get_mut(&summary.name) {
                Some(mirror) => mirror.summary = summary,
                None => {
                    self.devices.insert(
                        summary.name.clone(),
                        DeviceMirror {
                            summary,
                            finished_tasks: BTreeMap::new(),
                        },
                    );
                }
            }
        }
        Ok(())
    }

    pub fn devices(&self) -> &BTreeMap<String, DeviceMirror> {
        &self.devices
    }

    /// Names of devices currently considered connected by the heartbeat.
    pub fn connected_device_names(&self) -> Vec<String> {
        self.devices
            .values()
            .filter(|d| d.summary.connected)
            .map(|d| d.summary.name.clone())
            .collect()
    }

    /// Accepts or rejects a task against the refreshed mirror: every named
    /// device must exist and be initialized (init tasks are exempt from the
    /// initialization check), and the optional hardware requirements must be
    /// met by every device (each required key present and equal).
    pub fn request_task_acceptance(
        &self,
        spec: TaskSpec,
        requirements: Option<&ParamMap>,
    ) -> Result<AcceptedTask> {
        spec.validate()
            .map_err(|m| Error::rejected(RejectionReason::BadRequest, m))?;
        if self.submitted.contains(&spec.task_name) {
            return Err(Error::rejected(
                RejectionReason::DuplicateName,
                format!("task {:?} was already submitted", spec.task_name),
            ));
        }
        if spec.task_kind == crate::core::TaskKind::Default {
            for name in spec.device_names() {
                let Some(mirror) = self.devices.get(name) else {
                    return Err(Error::rejected(
                        RejectionReason::UnknownDevice,
                        format!("device {name:?} is not registered"),
                    ));
                };
                if !mirror.summary.initialized {
                    return Err(Error::rejected(
                        RejectionReason::NotInitialized,
                        format!("device {name:?} has not finished initialization"),
                    ));
                }
                if let Some(required) = requirements {
                    if !hardware_matches(mirror.summary.hardware_config.as_ref(), required) {
                        return Err(Error::rejected(
                            RejectionReason::ConstraintUnmet,
                            format!("device {name:?} does not meet the hardware requirements"),
                        ));
                    }
                }
            }
        }
        Ok(AcceptedTask { spec })
    }

    /// Sends an accepted task to the server and builds its aggregator.
    pub fn submit(&mut self, accepted: AcceptedTask) -> Result<()> {
        let spec = accepted.spec;
        self.transport.add_task(&spec)?;
        self.submitted.insert(spec.task_name.clone());
        let devices: Vec<String> = spec.device_names().cloned().collect();
        let aggregator =
            Aggregator::build(&spec.task_name, &devices, self.holder_capacity, self.fanout);
        self.aggregators.insert(spec.task_name.clone(), aggregator);
        Ok(())
    }

    pub fn has_aggregator(&self, task_name: &str) -> bool {
        self.aggregators.contains_key(task_name)
    }

    /// Status of a task: from its live aggregator, or from the final status
    /// recorded when the aggregator was retired.
    pub fn task_status(&mut self, task_name: &str) -> Result<TaskStatus> {
        if let Some(aggregator) = self.aggregators.get(task_name) {
            let status = aggregator.is_task_finished(self.transport.as_ref())?;
            if status.is_terminal() {
                self.retire(task_name, status.clone())?;
            }
            return Ok(status);
        }
        if let Some(status) = self.final_status.get(task_name) {
            return Ok(status.clone());
        }
        Err(Error::api(
            crate::error::ApiErrorCode::TaskUnknown,
            format!("unknown task {task_name:?}"),
        ))
    }

    /// Currently available results for a task. While the aggregator lives,
    /// results are gathered per holder and cached into the device mirrors;
    /// afterwards they come from the caches only. The returned set never
    /// shrinks for successive calls.
    pub fn task_results(&mut self, task_name: &str) -> Result<Vec<TaskResult>> {
        if let Some(aggregator) = self.aggregators.get(task_name) {
            let results = aggregator.request_aggregation(self.transport.as_ref())?;
            self.cache_results(task_name, results);
        } else if !self.final_status.contains_key(task_name) {
            return Err(Error::api(
                crate::error::ApiErrorCode::TaskUnknown,
                format!("unknown task {task_name:?}"),
            ));
        }
        Ok(self.cached_results(task_name))
    }

    pub fn stop_task(&mut self, task_name: &str) -> Result<bool> {
        let known = self.aggregators.contains_key(task_name)
            || self.final_status.contains_key(task_name);
        if !known {
            return Err(Error::api(
                crate::error::ApiErrorCode::TaskUnknown,
                format!("unknown task {task_name:?}"),
            ));
        }
        let stopped = self.transport.stop_task(task_name)?;
        let status = self.transport.get_task_status(task_name)?;
        self.retire(task_name, status)?;
        Ok(stopped)
    }

    /// Drops the ephemeral aggregator after a final result fetch; the results
    /// stay retrievable from the device mirrors.
    fn retire(&mut self, task_name: &str, status: TaskStatus) -> Result<()> {
        if let Some(aggregator) = self.aggregators.remove(task_name) {
            if let Ok(results) = aggregator.request_aggregation(self.transport.as_ref()) {
                self.cache_results(task_name, results);
            }
        }
        self.final_status.insert(task_name.to_string(), status);
        Ok(())
    }

    fn cache_results(&mut self, task_name: &str, results: Vec<TaskResult>) {
        for result in results {
            let mirror = self
                .devices
                .entry(result.device_name.clone())
                .or_insert_with(|| DeviceMirror {
                    summary: DeviceSummary {
                        name: result.device_name.clone(),
                        ip_address: String::new(),
                        port: 0,
                        hardware_config: None,
                        initialized: true,
                        connected: true,
                        last_seen: 0,
                    },
                    finished_tasks: BTreeMap::new(),
                });
            mirror
                .finished_tasks
                .insert(task_name.to_string(), result);
        }
    }

    fn cached_results(&self, task_name: &str) -> Vec<TaskResult> {
        self.devices
            .values()
            .filter_map(|d| d.finished_tasks.get(task_name).cloned())
            .collect()
    }
}

/// A device satisfies the requirements iff every required key is present in
/// its hardware config with an equal value.
pub fn hardware_matches(config: Option<&ParamMap>, required: &ParamMap) -> bool {
    if required.is_empty() {
        return true;
    }
    let Some(config) = config else {
        return false;
    };
    required
        .iter()
        .all(|(key, value)| config.get(key) == Some(value))
}
