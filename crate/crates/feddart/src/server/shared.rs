//! Thread-safe server front: one lock serializes every command, a condvar
//! wakes long-pollers, and expiry is applied lazily before each command (plus
//! via a periodic sweep while the HTTP server runs).
//!
//! Because all mutations funnel through the lock, any concurrent request
//! history is equivalent to the single-threaded execution of the commands in
//! lock order; [`Sequenced`] exposes that order so tests can verify the
//! equivalence against an independent sequential model. Every command gets a
//! sequence position, including ones that fail.

use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use crate::clock::Clock;
use crate::core::{DeviceSummary, Handle, TaskResult, TaskSpec, TaskStatus};
use crate::error::Result;
use crate::protocol::{Assignment, RegisterRequest};
use crate::server::core::ServerCore;
use crate::server::journal::{Journal, JournalEntry, JournalOp};

/// An outcome plus its position in the server's serialization order.
#[derive(Debug)]
pub struct Sequenced<T> {
    pub seq: u64,
    pub value: Result<T>,
}

impl<T> Sequenced<T> {
    /// Drops the ordering information.
    pub fn into_result(self) -> Result<T> {
        self.value
    }
}

struct Inner {
    core: ServerCore,
    /// Total commands applied, including reads and failed commands.
    seq: u64,
    journal: Option<Journal>,
}

pub struct SharedServer {
    inner: Mutex<Inner>,
    changed: Condvar,
    clock: Arc<dyn Clock>,
    closing: std::sync::atomic::AtomicBool,
}

impl SharedServer {
    pub fn new(capacity: usize, clock: Arc<dyn Clock>) -> Arc<Self> {
        Arc::new(Self {
            inner: Mutex::new(Inner {
                core: ServerCore::new(capacity),
                seq: 0,
                journal: None,
            }),
            changed: Condvar::new(),
            clock,
            closing: std::sync::atomic::AtomicBool::new(false),
        })
    }

    /// Makes in-flight long-polls return promptly (used at shutdown).
    pub fn close(&self) {
        self.closing
            .store(true, std::sync::atomic::Ordering::SeqCst);
        self.changed.notify_all();
    }

    /// Attaches a journal, replaying it first when the file already exists.
    pub fn with_journal(self: &Arc<Self>, path: &std::path::Path) -> Result<usize> {
        let mut inner = self.inner.lock().unwrap();
        let mut applied = 0;
        if path.exists() {
            applied = crate::server::journal::replay(path, &mut inner.core)?;
        }
        inner.journal = Some(Journal::open(path)?);
        Ok(applied)
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    /// Runs one command under the lock: lazy expiry, the command itself, a
    /// journal append on success, and a sequence number either way.
    fn run<T>(
        &self,
        journal_op: Option<JournalOp>,
        notify: bool,
        f: impl FnOnce(&mut ServerCore, i64) -> Result<T>,
    ) -> Sequenced<T> {
        let now = self.clock.now_ms();
        let mut inner = self.inner.lock().unwrap();
        self.apply_expiry(&mut inner, now);
        let value = f(&mut inner.core, now);
        inner.seq += 1;
        let seq = inner.seq;
        if value.is_ok() {
            if let Some(op) = journal_op {
                Self::journal(&mut inner, JournalEntry { at_ms: now, op });
            }
        }
        drop(inner);
        if notify && value.is_ok() {
            self.changed.notify_all();
        }
        Sequenced { seq, value }
    }

    fn apply_expiry(&self, inner: &mut Inner, now: i64) {
        let expired = inner.core.expire_due(now);
        for task_name in expired {
            Self::journal(
                inner,
                JournalEntry {
                    at_ms: now,
                    op: JournalOp::Expire { task_name },
                },
            );
        }
    }

    fn journal(inner: &mut Inner, entry: JournalEntry) {
        if let Some(journal) = &mut inner.journal {
            // Best-effort durability: a failed append must not fail requests.
            let _ = journal.append(&entry);
        }
    }

    pub fn register_device(&self, req: &RegisterRequest) -> Sequenced<bool> {
        self.run(
            Some(JournalOp::Register {
                request: req.clone(),
            }),
            true,
            |core, now| core.register_device(req, now),
        )
    }

    pub fn add_task(&self, spec: TaskSpec) -> Sequenced<Handle> {
        self.run(
            Some(JournalOp::AddTask { spec: spec.clone() }),
            true,
            move |core, now| core.add_task(spec, now),
        )
    }

    pub fn status(&self, task_name: &str) -> Sequenced<TaskStatus> {
        self.run(None, false, |core, _| core.status(task_name))
    }

    pub fn results(&self, task_name: &str, amount: usize) -> Sequenced<Vec<TaskResult>> {
        self.run(None, false, |core, _| core.results(task_name, amount))
    }

    pub fn stop(&self, task_name: &str) -> Sequenced<bool> {
        self.run(
            Some(JournalOp::Stop {
                task_name: task_name.to_string(),
            }),
            true,
            |core, now| core.stop(task_name, now),
        )
    }

    pub fn list_devices(&self) -> Sequenced<Vec<DeviceSummary>> {
        self.run(None, false, |core, now| Ok(core.list_devices(now)))
    }

    /// Non-blocking dispatch attempt. Only attempts that hand out an
    /// assignment are journaled.
    pub fn try_dispatch(&self, device_name: &str) -> Sequenced<Option<Assignment>> {
        let now = self.clock.now_ms();
        let mut inner = self.inner.lock().unwrap();
        self.apply_expiry(&mut inner, now);
        let value = inner.core.dispatch(device_name, now);
        inner.seq += 1;
        let seq = inner.seq;
        if matches!(value, Ok(Some(_))) {
            Self::journal(
                &mut inner,
                JournalEntry {
                    at_ms: now,
                    op: JournalOp::Dispatch {
                        device_name: device_name.to_string(),
                    },
                },
            );
        }
        Sequenced { seq, value }
    }

    /// Long-polls for an assignment, waiting up to `wait_seconds` of real
    /// time. Returns as soon as an assignment is available; at most one
    /// assignment per call.
    pub fn poll_assignment(
        &self,
        device_name: &str,
        wait_seconds: f64,
    ) -> Result<Option<Assignment>> {
        let deadline = Instant::now() + Duration::from_secs_f64(wait_seconds.clamp(0.0, 3600.0));
        loop {
            let got = self.try_dispatch(device_name).into_result()?;
            if got.is_some() {
                return Ok(got);
            }
            let now = Instant::now();
            if now >= deadline || self.closing.load(std::sync::atomic::Ordering::SeqCst) {
                return Ok(None);
            }
            // Wake on state changes; cap the nap so newly due expiries and
            // promotions are noticed even without traffic.
            let nap = (deadline - now).min(Duration::from_millis(50));
            let guard = self.inner.lock().unwrap();
            let _ = self.changed.wait_timeout(guard, nap).unwrap();
        }
    }

    pub fn record_result(
        &self,
        device_name: &str,
        task_name: &str,
        result: TaskResult,
    ) -> Sequenced<TaskStatus> {
        self.run(
            Some(JournalOp::RecordResult {
                device_name: device_name.to_string(),
                task_name: task_name.to_string(),
                result: result.clone(),
            }),
            true,
            move |core, now| core.record_result(device_name, task_name, result, now),
        )
    }

    /// Applies expiry for the current clock reading and wakes waiters.
    /// Called by the periodic sweeper and by simulated-clock tests after
    /// advancing time.
    pub fn sweep(&self) {
        let now = self.clock.now_ms();
        let mut inner = self.inner.lock().unwrap();
        self.apply_expiry(&mut inner, now);
        drop(inner);
        self.changed.notify_all();
    }

    /// Snapshot of the full server state (tests, debugging).
    pub fn state_digest(&self) -> serde_json::Value {
        self.inner.lock().unwrap().core.state_digest()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::{SimulatedClock, SystemClock};
    use crate::core::{TaskKind, TaskResult};
    use std::collections::BTreeMap;

    fn spec(name: &str, devices: &[&str], max_wait: f64) -> TaskSpec {
        let mut per_device = BTreeMap::new();
        for d in devices {
            per_device.insert(d.to_string(), BTreeMap::new());
        }
        TaskSpec {
            task_name: name.into(),
            execute_function: "f".into(),
            per_device_params: per_device,
            task_kind: TaskKind::Default,
            max_wait_seconds: max_wait,
        }
    }

    fn register(server: &SharedServer, name: &str) {
        server
            .register_device(&RegisterRequest {
                name: name.into(),
                ip_address: String::new(),
                port: 0,
                hardware_config: None,
                poll_interval_seconds: 1.0,
            })
            .into_result()
            .unwrap();
    }

    #[test]
    fn sequence_numbers_are_strictly_increasing_even_on_errors() {
        let server = SharedServer::new(4, Arc::new(SystemClock));
        register(&server, "a");
        let s1 = server.list_devices();
        let s2 = server.status("missing");
        assert!(s2.value.is_err());
        assert!(s2.seq > s1.seq);
    }

    #[test]
    fn poll_returns_quickly_when_work_arrives() {
        let server = SharedServer::new(4, Arc::new(SystemClock));
        register(&server, "a");
        let srv = Arc::clone(&server);
        let handle = std::thread::spawn(move || srv.poll_assignment("a", 5.0).unwrap());
        std::thread::sleep(Duration::from_millis(30));
        server.add_task(spec("t", &["a"], 60.0)).into_result().unwrap();
        let got = handle.join().unwrap();
        assert_eq!(got.unwrap().task_name, "t");
    }

    #[test]
    fn poll_respects_wait_bound_when_idle() {
        let server = SharedServer::new(4, Arc::new(SystemClock));
        register(&server, "a");
        let start = Instant::now();
        let got = server.poll_assignment("a", 0.1).unwrap();
        assert!(got.is_none());
        let elapsed = start.elapsed();
        assert!(elapsed >= Duration::from_millis(100));
        assert!(elapsed < Duration::from_secs(2));
    }

    #[test]
    fn simulated_clock_expiry_applies_on_next_command() {
        let clock = SimulatedClock::new(0);
        let server = SharedServer::new(4, clock.clone() as Arc<dyn Clock>);
        register(&server, "a");
        server.add_task(spec("t", &["a"], 10.0)).into_result().unwrap();
        server.try_dispatch("a").into_result().unwrap();

        clock.advance_ms(10_000);
        server.sweep();
        let st = server.status("t").into_result().unwrap();
        assert_eq!(st.state, crate::core::TaskState::Failed);
    }

    #[test]
    fn journal_recovers_state_after_restart() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("server.jsonl");
        let clock = SimulatedClock::new(0);

        let server = SharedServer::new(4, clock.clone() as Arc<dyn Clock>);
        server.with_journal(&path).unwrap();
        register(&server, "a");
        server.add_task(spec("t", &["a"], 60.0)).into_result().unwrap();
        server.try_dispatch("a").into_result().unwrap();
        server
            .record_result("a", "t", TaskResult::new("a", 0.1, BTreeMap::new()))
            .into_result()
            .unwrap();
        let digest = server.state_digest();
        drop(server);

        let recovered = SharedServer::new(4, clock as Arc<dyn Clock>);
        let applied = recovered.with_journal(&path).unwrap();
        assert_eq!(applied, 4);
        assert_eq!(recovered.state_digest(), digest);
    }
}
