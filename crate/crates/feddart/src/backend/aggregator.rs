//! Ephemeral per-task structures: the aggregator tree and its device holders.
//!
//! Holders group devices so that requests are issued per group instead of per
//! device; when one task addresses more holders than the configured fanout,
//! extra tree levels of child aggregators keep every node's width bounded.
//! The tree exists only between task acceptance and completion; it performs
//! no mathematical aggregation itself.

use std::collections::BTreeSet;

use crate::core::{TaskResult, TaskState, TaskStatus};
use crate::error::Result;
use crate::transport::Transport;

pub const DEFAULT_HOLDER_CAPACITY: usize = 32;
pub const DEFAULT_FANOUT: usize = 8;

/// A group of at most `capacity` devices addressed together.
#[derive(Debug, Clone)]
pub struct DeviceHolder {
    devices: Vec<String>,
    capacity: usize,
}

impl DeviceHolder {
    pub fn devices(&self) -> &[String] {
        &self.devices
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// This holder's slice of a task-level status.
    pub fn project_status(&self, global: &TaskStatus) -> TaskStatus {
        let devices: BTreeSet<&String> = self.devices.iter().collect();
        TaskStatus {
            state: global.state,
            finished_devices: global
                .finished_devices
                .iter()
                .filter(|d| devices.contains(d))
                .cloned()
                .collect(),
            pending_devices: global
                .pending_devices
                .iter()
                .filter(|d| devices.contains(d))
                .cloned()
                .collect(),
        }
    }

    /// This holder's slice of the available results.
    pub fn collect<'a>(&self, results: &'a [TaskResult]) -> Vec<&'a TaskResult> {
        results
            .iter()
            .filter(|r| self.devices.iter().any(|d| d == &r.device_name))
            .collect()
    }
}

/// Per-task tree over device holders.
#[derive(Debug)]
pub struct Aggregator {
    task_name: String,
    device_holders: Vec<DeviceHolder>,
    child_aggregators: Vec<Aggregator>,
}

impl Aggregator {
    /// Packs `devices` into holders of at most `holder_capacity` and, when
    /// more than `fanout` holders result, adds tree levels of children until
    /// every node's width is within `fanout`.
    pub fn build(
        task_name: &str,
        devices: &[String],
        holder_capacity: usize,
        fanout: usize,
    ) -> Self {
        let holder_capacity = holder_capacity.max(1);
        let fanout = fanout.max(1);
        let holders: Vec<DeviceHolder> = devices
            .chunks(holder_capacity)
            .map(|chunk| DeviceHolder {
                devices: chunk.to_vec(),
                capacity: holder_capacity,
            })
            .collect();
        if holders.len() <= fanout {
            return Self {
                task_name: task_name.to_string(),
                device_holders: holders,
                child_aggregators: Vec::new(),
            };
        }
        let mut children: Vec<Aggregator> = holders
            .chunks(fanout)
            .map(|chunk| Aggregator {
                task_name: task_name.to_string(),
                device_holders: chunk.to_vec(),
                child_aggregators: Vec::new(),
            })
            .collect();
        while children.len() > fanout {
            let mut grouped = Vec::new();
            let mut iter = children.into_iter().peekable();
            while iter.peek().is_some() {
                let chunk: Vec<Aggregator> = iter.by_ref().take(fanout).collect();
                grouped.push(Aggregator {
                    task_name: task_name.to_string(),
                    device_holders: Vec::new(),
                    child_aggregators: chunk,
                });
            }
            children = grouped;
        }
        Self {
            task_name: task_name.to_string(),
            device_holders: Vec::new(),
            child_aggregators: children,
        }
    }

    pub fn task_name(&self) -> &str {
        &self.task_name
    }

    pub fn device_holders(&self) -> &[DeviceHolder] {
        &self.device_holders
    }

    pub fn child_aggregators(&self) -> &[Aggregator] {
        &self.child_aggregators
    }

    /// All holders in the subtree, left to right.
    pub fn all_holders(&self) -> Vec<&DeviceHolder> {
        let mut out: Vec<&DeviceHolder> = self.device_holders.iter().collect();
        for child in &self.child_aggregators {
            out.extend(child.all_holders());
        }
        out
    }

    /// Every device in the subtree, in holder order.
    pub fn all_devices(&self) -> Vec<String> {
        self.all_holders()
            .iter()
            .flat_map(|h| h.devices().iter().cloned())
            .collect()
    }

    pub fn holder_count(&self) -> usize {
        self.all_holders().len()
    }

    /// Levels from this node down to the holders; a holder-only node is 1.
    pub fn depth(&self) -> usize {
        if self.child_aggregators.is_empty() {
            1
        } else {
            1 + self
                .child_aggregators
                .iter()
                .map(Self::depth)
                .max()
                .unwrap_or(0)
        }
    }

    /// Task status as the meet of the holder-level statuses.
    pub fn is_task_finished(&self, transport: &dyn Transport) -> Result<TaskStatus> {
        let global = transport.get_task_status(&self.task_name)?;
        let holders = self.all_holders();
        let mut finished = BTreeSet::new();
        let mut pending = BTreeSet::new();
        let mut any_stopped = false;
        let mut any_failed = false;
        let mut any_queued = false;
        for holder in holders {
            let st = holder.project_status(&global);
            finished.extend(st.finished_devices);
            pending.extend(st.pending_devices);
            match st.state {
                TaskState::Stopped => any_stopped = true,
                TaskState::Failed => any_failed = true,
                TaskState::Queued => any_queued = true,
                _ => {}
            }
        }
        Ok(TaskStatus::classify(
            finished,
            pending,
            any_queued,
            any_stopped,
            any_failed,
        ))
    }

    /// Gathers currently available results, holder by holder.
    pub fn request_aggregation(&self, transport: &dyn Transport) -> Result<Vec<TaskResult>> {
        let holders = self.all_holders();
        let total: usize = holders.iter().map(|h| h.devices().len()).sum();
        let available = transport.get_job_results(&self.task_name, total)?;
        let mut out = Vec::new();
        for holder in holders {
            out.extend(holder.collect(&available).into_iter().cloned());
        }
        Ok(out)
    }
}
