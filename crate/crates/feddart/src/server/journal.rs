//! Append-only JSON-lines journal for crash recovery.
//!
//! Every applied mutating command is written as one line carrying its
//! timestamp; replaying the file against a fresh state machine reproduces the
//! state. Best-effort: writes are buffered through the OS, not fsynced.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::core::{TaskResult, TaskSpec};
use crate::error::{Error, Result};
use crate::protocol::RegisterRequest;
use crate::server::core::ServerCore;

/// One mutating command.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum JournalOp {
    Register { request: RegisterRequest },
    AddTask { spec: TaskSpec },
    Dispatch { device_name: String },
    RecordResult {
        device_name: String,
        task_name: String,
        result: TaskResult,
    },
    Stop { task_name: String },
    Expire { task_name: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JournalEntry {
    pub at_ms: i64,
    #[serde(flatten)]
    pub op: JournalOp,
}

/// Appends entries to a JSON-lines file.
pub struct Journal {
    file: File,
}

impl Journal {
    pub fn open(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { file })
    }

    pub fn append(&mut self, entry: &JournalEntry) -> Result<()> {
        let mut line = serde_json::to_string(entry)?;
        line.push('\n');
        self.file.write_all(line.as_bytes())?;
        Ok(())
    }
}

/// Replays a journal file into `core`. Entries that no longer apply are
/// skipped; a malformed line aborts with its line number.
pub fn replay(path: &Path, core: &mut ServerCore) -> Result<usize> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let mut applied = 0usize;
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: JournalEntry = serde_json::from_str(&line)
            .map_err(|e| Error::BadConfig(format!("journal line {}: {e}", idx + 1)))?;
        let ok = match entry.op {
            JournalOp::Register { request } => {
                core.register_device(&request, entry.at_ms).is_ok()
            }
            JournalOp::AddTask { spec } => core.add_task(spec, entry.at_ms).is_ok(),
            JournalOp::Dispatch { device_name } => {
                core.dispatch(&device_name, entry.at_ms).is_ok()
            }
            JournalOp::RecordResult {
                device_name,
                task_name,
                result,
            } => core
                .record_result(&device_name, &task_name, result, entry.at_ms)
                .is_ok(),
            JournalOp::Stop { task_name } => core.stop(&task_name, entry.at_ms).is_ok(),
            JournalOp::Expire { task_name } => {
                core.expire(&task_name, entry.at_ms).is_ok()
            }
        };
        if ok {
            applied += 1;
        }
    }
    Ok(applied)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::{TaskKind, TaskResult};
    use serde_json::json;
    use std::collections::BTreeMap;

    fn spec(name: &str, device: &str) -> TaskSpec {
        let mut per_device = BTreeMap::new();
        per_device.insert(device.to_string(), BTreeMap::new());
        TaskSpec {
            task_name: name.into(),
            execute_function: "f".into(),
            per_device_params: per_device,
            task_kind: TaskKind::Default,
            max_wait_seconds: 60.0,
        }
    }

    #[test]
    fn journal_round_trip_reproduces_state() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("journal.jsonl");

        let mut live = ServerCore::new(2);
        let mut journal = Journal::open(&path).unwrap();

        let ops = vec![
            JournalEntry {
                at_ms: 1,
                op: JournalOp::Register {
                    request: RegisterRequest {
                        name: "c1".into(),
                        ip_address: "10.0.0.1".into(),
                        port: 2883,
                        hardware_config: None,
                        poll_interval_seconds: 2.0,
                    },
                },
            },
            JournalEntry {
                at_ms: 2,
                op: JournalOp::AddTask { spec: spec("t", "c1") },
            },
            JournalEntry {
                at_ms: 3,
                op: JournalOp::Dispatch {
                    device_name: "c1".into(),
                },
            },
            JournalEntry {
                at_ms: 4,
                op: JournalOp::RecordResult {
                    device_name: "c1".into(),
                    task_name: "t".into(),
                    result: TaskResult::new("c1", 0.5, {
                        let mut d = BTreeMap::new();
                        d.insert("v".to_string(), json!(7));
                        d
                    }),
                },
            },
        ];

        for entry in &ops {
            journal.append(entry).unwrap();
            match entry.op.clone() {
                JournalOp::Register { request } => {
                    live.register_device(&request, entry.at_ms).unwrap();
                }
                JournalOp::AddTask { spec } => {
                    live.add_task(spec, entry.at_ms).unwrap();
                }
                JournalOp::Dispatch { device_name } => {
                    live.dispatch(&device_name, entry.at_ms).unwrap();
                }
                JournalOp::RecordResult {
                    device_name,
                    task_name,
                    result,
                } => {
                    live.record_result(&device_name, &task_name, result, entry.at_ms)
                        .unwrap();
                }
                _ => unreachable!(),
            }
        }
        drop(journal);

        let mut recovered = ServerCore::new(2);
        let applied = replay(&path, &mut recovered).unwrap();
        assert_eq!(applied, ops.len());
        assert_eq!(live.state_digest(), recovered.state_digest());
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(&path, "{\"at_ms\":1,\"op\":\"register\",\"request\":{\"name\":\"a\"}}\nnot json\n").unwrap();
        let mut core = ServerCore::new(1);
        let err = replay(&path, &mut core).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }
}
