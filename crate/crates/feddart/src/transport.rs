//! Transports between the workflow side (or a worker) and the server.
//!
//! [`HttpTransport`] speaks the wire protocol against a real server.
//! [`LocalTransport`] is the test mode: it drives the identical server state
//! machine in process and executes task functions sequentially, one device
//! after the other, so a workflow observes the same semantics as in a
//! distributed run.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use crate::clock::Clock;
use crate::config::{DeviceFile, DeviceFileEntry};
use crate::core::{DeviceSummary, Handle, TaskResult, TaskSpec, TaskStatus};
use crate::error::{Error, Result};
use crate::protocol::{
    AddTaskResponse, Assignment, Envelope, PollRequest, PollResponse, RegisterRequest,
    RegisterResponse, StopResponse, SubmitResultRequest, SubmitResultResponse, AUTH_HEADER,
};
use crate::server::shared::SharedServer;
use crate::worker::FunctionRegistry;

/// Operations the workflow backend needs from a server.
pub trait Transport: Send + Sync {
    fn add_task(&self, spec: &TaskSpec) -> Result<Handle>;
    fn get_task_status(&self, task_name: &str) -> Result<TaskStatus>;
    fn get_job_results(&self, task_name: &str, amount: usize) -> Result<Vec<TaskResult>>;
    fn stop_task(&self, task_name: &str) -> Result<bool>;
    fn list_devices(&self) -> Result<Vec<DeviceSummary>>;

    /// Cheap reachability check used when connecting.
    fn ping(&self) -> Result<()> {
        self.list_devices().map(|_| ())
    }
}

/// Operations a worker needs from a server.
pub trait WorkerTransport: Send + Sync {
    fn register_device(&self, request: &RegisterRequest) -> Result<bool>;
    fn poll_assignment(&self, device_name: &str, wait_seconds: f64)
        -> Result<Option<Assignment>>;
    fn submit_result(
        &self,
        device_name: &str,
        task_name: &str,
        result: &TaskResult,
    ) -> Result<bool>;
}

/// HTTP client for the wire protocol.
pub struct HttpTransport {
    base: String,
    key: String,
    agent: ureq::Agent,
}

impl HttpTransport {
    /// `url` comes from the server config. TLS termination is a deployment
    /// concern; an `https` scheme is downgraded to plain HTTP here.
    pub fn new(url: &str, key: &str) -> Self {
        let base = normalize_url(url);
        let agent = ureq::AgentBuilder::new()
            .timeout_connect(Duration::from_secs(5))
            .build();
        Self {
            base,
            key: key.to_string(),
            agent,
        }
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    fn get(&self, path: &str) -> Result<Envelope> {
        let response = self
            .agent
            .get(&self.url(path))
            .set(AUTH_HEADER, &self.key)
            .timeout(Duration::from_secs(30))
            .call();
        decode(response)
    }

    fn send(
        &self,
        method: &str,
        path: &str,
        body: Option<&impl serde::Serialize>,
        timeout: Duration,
    ) -> Result<Envelope> {
        let request = self
            .agent
            .request(method, &self.url(path))
            .set(AUTH_HEADER, &self.key)
            .timeout(timeout);
        let response = match body {
            Some(body) => request.send_string(&serde_json::to_string(body)?),
            None => request.call(),
        };
        decode(response)
    }
}

fn normalize_url(url: &str) -> String {
    let url = url.trim_end_matches('/');
    if let Some(rest) = url.strip_prefix("https://") {
        format!("http://{rest}")
    } else if url.starts_with("http://") {
        url.to_string()
    } else {
        format!("http://{url}")
    }
}

fn decode(response: std::result::Result<ureq::Response, ureq::Error>) -> Result<Envelope> {
    let body = match response {
        Ok(r) => r
            .into_string()
            .map_err(|e| Error::Transport(format!("read response: {e}")))?,
        // Non-2xx statuses still carry an envelope with the error code.
        Err(ureq::Error::Status(_, r)) => r
            .into_string()
            .map_err(|e| Error::Transport(format!("read response: {e}")))?,
        Err(e) => return Err(Error::Transport(e.to_string())),
    };
    serde_json::from_str(&body).map_err(|e| Error::Transport(format!("malformed envelope: {e}")))
}

impl Transport for HttpTransport {
    fn add_task(&self, spec: &TaskSpec) -> Result<Handle> {
        let env = self.send("POST", "/api/tasks", Some(spec), Duration::from_secs(30))?;
        let data: AddTaskResponse = env.into_data()?;
        Ok(data.handle)
    }

    fn get_task_status(&self, task_name: &str) -> Result<TaskStatus> {
        self.get(&format!("/api/tasks/{task_name}/status"))?.into_data()
    }

    fn get_job_results(&self, task_name: &str, amount: usize) -> Result<Vec<TaskResult>> {
        self.get(&format!("/api/tasks/{task_name}/results?amount={amount}"))?
            .into_data()
    }

    fn stop_task(&self, task_name: &str) -> Result<bool> {
        let env = self.send(
            "DELETE",
            &format!("/api/tasks/{task_name}"),
            None::<&()>,
            Duration::from_secs(30),
        )?;
        let data: StopResponse = env.into_data()?;
        Ok(data.stopped)
    }

    fn list_devices(&self) -> Result<Vec<DeviceSummary>> {
        self.get("/api/devices")?.into_data()
    }
}

impl WorkerTransport for HttpTransport {
    fn register_device(&self, request: &RegisterRequest) -> Result<bool> {
        let env = self.send(
            "POST",
            "/api/devices/register",
            Some(request),
            Duration::from_secs(30),
        )?;
        let data: RegisterResponse = env.into_data()?;
        Ok(data.registered)
    }

    fn poll_assignment(
        &self,
        device_name: &str,
        wait_seconds: f64,
    ) -> Result<Option<Assignment>> {
        let request = PollRequest {
            device_name: device_name.to_string(),
            wait_seconds,
        };
        let env = self.send(
            "POST",
            "/api/worker/poll",
            Some(&request),
            Duration::from_secs_f64(wait_seconds + 15.0),
        )?;
        let data: PollResponse = env.into_data()?;
        Ok(data.assignment)
    }

    fn submit_result(
        &self,
        device_name: &str,
        task_name: &str,
        result: &TaskResult,
    ) -> Result<bool> {
        let request = SubmitResultRequest {
            device_name: device_name.to_string(),
            task_name: task_name.to_string(),
            result: result.clone(),
        };
        let env = self.send(
            "POST",
            "/api/worker/result",
            Some(&request),
            Duration::from_secs(30),
        )?;
        let data: SubmitResultResponse = env.into_data()?;
        Ok(data.recorded)
    }
}

/// In-process transport against a [`SharedServer`]; used by tests that run
/// workers and the workflow in one process without sockets.
impl Transport for Arc<SharedServer> {
    fn add_task(&self, spec: &TaskSpec) -> Result<Handle> {
        self.as_ref().add_task(spec.clone()).into_result()
    }

    fn get_task_status(&self, task_name: &str) -> Result<TaskStatus> {
        self.as_ref().status(task_name).into_result()
    }

    fn get_job_results(&self, task_name: &str, amount: usize) -> Result<Vec<TaskResult>> {
        self.as_ref().results(task_name, amount).into_result()
    }

    fn stop_task(&self, task_name: &str) -> Result<bool> {
        self.as_ref().stop(task_name).into_result()
    }

    fn list_devices(&self) -> Result<Vec<DeviceSummary>> {
        self.as_ref().list_devices().into_result()
    }
}

impl WorkerTransport for Arc<SharedServer> {
    fn register_device(&self, request: &RegisterRequest) -> Result<bool> {
        self.as_ref().register_device(request).into_result()
    }

    fn poll_assignment(
        &self,
        device_name: &str,
        wait_seconds: f64,
    ) -> Result<Option<Assignment>> {
        self.as_ref().poll_assignment(device_name, wait_seconds)
    }

    fn submit_result(
        &self,
        device_name: &str,
        task_name: &str,
        result: &TaskResult,
    ) -> Result<bool> {
        self.as_ref()
            .record_result(device_name, task_name, result.clone())
            .into_result()
            .map(|_| true)
    }
}

/// Test mode: the simulated server plus simulated devices.
///
/// Devices come from the device config file; each one gets a function
/// registry. After every accepted task the transport runs all deliverable
/// assignments to completion, strictly sequentially in device-name order, so
/// one device's function returns before the next one starts.
pub struct LocalTransport {
    server: Arc<SharedServer>,
    workers: Mutex<BTreeMap<String, FunctionRegistry>>,
}

impl LocalTransport {
    pub fn new(capacity: usize, clock: Arc<dyn Clock>) -> Self {
        Self {
            server: SharedServer::new(capacity, clock),
            workers: Mutex::new(BTreeMap::new()),
        }
    }

    /// Registers the simulated devices listed in a device file, all sharing
    /// one registry factory.
    pub fn add_devices_from_file(
        &self,
        file: &DeviceFile,
        mut registry_for: impl FnMut(&str) -> FunctionRegistry,
    ) -> Result<()> {
        for (name, entry) in &file.0 {
            self.add_device(name, entry, registry_for(name))?;
        }
        Ok(())
    }

    pub fn add_device(
        &self,
        name: &str,
        entry: &DeviceFileEntry,
        registry: FunctionRegistry,
    ) -> Result<()> {
        self.server
            .as_ref()
            .register_device(&RegisterRequest {
                name: name.to_string(),
                ip_address: entry.ip_address.clone(),
                port: entry.port,
                hardware_config: entry.hardware_config.clone(),
                poll_interval_seconds: 1.0,
            })
            .into_result()?;
        self.workers.lock().unwrap().insert(name.to_string(), registry);
        // A late-added device may have an init task waiting.
        self.drain();
        Ok(())
    }

    pub fn server(&self) -> &Arc<SharedServer> {
        &self.server
    }

    /// Executes every deliverable assignment, one device at a time. Devices
    /// are visited in name order; each executes its assignments to completion
    /// before the next device runs.
    fn drain(&self) {
        let workers = self.workers.lock().unwrap();
        loop {
            let mut delivered_any = false;
            for (device, registry) in workers.iter() {
                loop {
                    let assignment = match self.server.try_dispatch(device).into_result() {
                        Ok(Some(a)) => a,
                        _ => break,
                    };
                    delivered_any = true;
                    let result = crate::worker::execute(
                        registry,
                        device,
                        &assignment.execute_function,
                        &assignment.params,
                    );
                    let _ = self
                        .server
                        .record_result(device, &assignment.task_name, result)
                        .into_result();
                }
            }
            if !delivered_any {
                break;
            }
        }
    }
}

impl Transport for LocalTransport {
    fn add_task(&self, spec: &TaskSpec) -> Result<Handle> {
        let handle = self.server.as_ref().add_task(spec.clone()).into_result()?;
        self.drain();
        Ok(handle)
    }

    fn get_task_status(&self, task_name: &str) -> Result<TaskStatus> {
        self.server.as_ref().status(task_name).into_result()
    }

    fn get_job_results(&self, task_name: &str, amount: usize) -> Result<Vec<TaskResult>> {
        self.server.as_ref().results(task_name, amount).into_result()
    }

    fn stop_task(&self, task_name: &str) -> Result<bool> {
        self.server.as_ref().stop(task_name).into_result()
    }

    fn list_devices(&self) -> Result<Vec<DeviceSummary>> {
        self.server.as_ref().list_devices().into_result()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::SystemClock;
    use crate::core::{ParamMap, TaskKind};
    use serde_json::json;

    fn local_with_devices(devices: &[&str]) -> LocalTransport {
        let local = LocalTransport::new(4, Arc::new(SystemClock));
        for name in devices {
            let mut registry = FunctionRegistry::new();
            registry.register("init", |_: &ParamMap| {
                let mut out = BTreeMap::new();
                out.insert("initialized".to_string(), json!(true));
                Ok(out)
            });
            let trace_name = name.to_string();
            registry.register("learn", move |params: &ParamMap| {
                let mut out = BTreeMap::new();
                out.insert("device".to_string(), json!(trace_name));
                out.insert("echo".to_string(), params.get("x").cloned().unwrap_or(json!(null)));
                Ok(out)
            });
            local
                .add_device(
                    name,
                    &DeviceFileEntry {
                        ip_address: "client".into(),
                        port: 2883,
                        hardware_config: None,
                    },
                    registry,
                )
                .unwrap();
        }
        local
    }

    fn default_spec(name: &str, devices: &[&str]) -> TaskSpec {
        let mut per_device = BTreeMap::new();
        for d in devices {
            let mut p = ParamMap::new();
            p.insert("x".into(), json!(d));
            per_device.insert(d.to_string(), p);
        }
        TaskSpec {
            task_name: name.into(),
            execute_function: "learn".into(),
            per_device_params: per_device,
            task_kind: TaskKind::Default,
            max_wait_seconds: 60.0,
        }
    }

    #[test]
    fn local_transport_runs_tasks_inline() {
        let local = local_with_devices(&["client1", "client2"]);
        local
            .add_task(&default_spec("t", &["client1", "client2"]))
            .unwrap();
        let st = local.get_task_status("t").unwrap();
        assert_eq!(st.state, crate::core::TaskState::Completed);
        let results = local.get_job_results("t", 10).unwrap();
        assert_eq!(results.len(), 2);
        // Sequential device order: client1 finished before client2 started.
        assert_eq!(results[0].device_name, "client1");
        assert_eq!(results[1].device_name, "client2");
    }

    #[test]
    fn local_transport_delivers_init_to_late_devices() {
        let local = local_with_devices(&["client1"]);
        let mut per_device = BTreeMap::new();
        let mut p = ParamMap::new();
        p.insert("model_structure".into(), json!([1]));
        per_device.insert(crate::core::BROADCAST_KEY.to_string(), p);
        local
            .add_task(&TaskSpec {
                task_name: "init".into(),
                execute_function: "init".into(),
                per_device_params: per_device,
                task_kind: TaskKind::Init,
                max_wait_seconds: 60.0,
            })
            .unwrap();
        assert!(local.list_devices().unwrap()[0].initialized);

        // A device added later is initialized on arrival.
        let mut registry = FunctionRegistry::new();
        registry.register("init", |_: &ParamMap| Ok(BTreeMap::new()));
        local
            .add_device(
                "client2",
                &DeviceFileEntry {
                    ip_address: "client".into(),
                    port: 2883,
                    hardware_config: None,
                },
                registry,
            )
            .unwrap();
        let devices = local.list_devices().unwrap();
        assert!(devices.iter().all(|d| d.initialized));
    }

    #[test]
    fn url_normalization_downgrades_https() {
        assert_eq!(normalize_url("https://dart-server:7777"), "http://dart-server:7777");
        assert_eq!(normalize_url("http://x:1/"), "http://x:1");
        assert_eq!(normalize_url("127.0.0.1:7777"), "http://127.0.0.1:7777");
    }
}
