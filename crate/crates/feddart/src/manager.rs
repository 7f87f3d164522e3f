//! The user-facing workflow API: create the init task, connect, start tasks,
//! query status and results without blocking, stop tasks.
//!
//! A manager is driven by one logical caller; methods are internally
//! synchronized so concurrent status/result queries (and task starts from
//! parallel cluster loops) are safe.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use crate::backend::{Selector, DEFAULT_FANOUT, DEFAULT_HOLDER_CAPACITY};
use crate::clock::{Clock, SystemClock};
use crate::config::{DeviceFile, ServerFileConfig};
use crate::core::{Handle, ParamMap, TaskKind, TaskResult, TaskSpec, TaskStatus};
use crate::error::{Error, Result};
use crate::logging::LogServer;
use crate::transport::{HttpTransport, LocalTransport, Transport};
use crate::worker::FunctionRegistry;

/// Default wait for the initialization phase, seconds.
pub const DEFAULT_INIT_WAIT_SECONDS: f64 = 120.0;

/// Builds the task-function set for one simulated device in test mode.
pub type RegistryFactory = Arc<dyn Fn(&str) -> FunctionRegistry + Send + Sync>;

/// Parameters of the init task.
#[derive(Debug, Clone)]
pub enum InitParams {
    /// One parameter map delivered to every device.
    Broadcast(ParamMap),
    /// Device-specific parameter maps; devices without an entry receive the
    /// broadcast entry if present.
    PerDevice(BTreeMap<String, ParamMap>),
}

impl InitParams {
    fn into_per_device(self) -> BTreeMap<String, ParamMap> {
        match self {
            InitParams::Broadcast(params) => {
                let mut map = BTreeMap::new();
                map.insert(crate::core::BROADCAST_KEY.to_string(), params);
                map
            }
            InitParams::PerDevice(map) => map,
        }
    }
}

/// A task start request.
#[derive(Debug, Clone)]
pub struct TaskRequest {
    /// Device name to function arguments.
    pub parameter_dict: BTreeMap<String, ParamMap>,
    pub execute_function: String,
    pub max_wait_seconds: f64,
    /// Explicit task name; generated when absent.
    pub task_name: Option<String>,
    /// Optional hardware requirements checked against every named device.
    pub hardware_requirements: Option<ParamMap>,
}

impl TaskRequest {
    pub fn new(
        parameter_dict: BTreeMap<String, ParamMap>,
        execute_function: impl Into<String>,
        max_wait_seconds: f64,
    ) -> Self {
        Self {
            parameter_dict,
            execute_function: execute_function.into(),
            max_wait_seconds,
            task_name: None,
            hardware_requirements: None,
        }
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.task_name = Some(name.into());
        self
    }

    pub fn requiring(mut self, requirements: ParamMap) -> Self {
        self.hardware_requirements = Some(requirements);
        self
    }
}

pub struct ManagerOptions {
    pub test_mode: bool,
    pub logger: Arc<LogServer>,
    pub clock: Arc<dyn Clock>,
    pub init_wait_timeout_seconds: f64,
    pub holder_capacity: usize,
    pub fanout: usize,
    /// Required in test mode: task functions for the simulated devices.
    pub registry_factory: Option<RegistryFactory>,
    /// Granularity of internal wait loops.
    pub poll_interval_ms: u64,
}

impl Default for ManagerOptions {
    fn default() -> Self {
        Self {
            test_mode: false,
            logger: Arc::new(LogServer::new(crate::logging::LogLevel::Info)),
            clock: Arc::new(SystemClock),
            init_wait_timeout_seconds: DEFAULT_INIT_WAIT_SECONDS,
            holder_capacity: DEFAULT_HOLDER_CAPACITY,
            fanout: DEFAULT_FANOUT,
            registry_factory: None,
            poll_interval_ms: 25,
        }
    }
}

impl ManagerOptions {
    pub fn test_mode(registry_factory: RegistryFactory) -> Self {
        Self {
            test_mode: true,
            registry_factory: Some(registry_factory),
            ..Self::default()
        }
    }
}

struct ManagerState {
    selector: Option<Selector>,
    init_task: Option<(BTreeMap<String, ParamMap>, String)>,
    init_submitted: bool,
    connected: bool,
    task_counter: u64,
    current_device_names: Vec<String>,
    roster: Vec<String>,
}

pub struct WorkflowManager {
    test_mode: bool,
    logger: Arc<LogServer>,
    clock: Arc<dyn Clock>,
    init_wait_timeout_seconds: f64,
    holder_capacity: usize,
    fanout: usize,
    registry_factory: Option<RegistryFactory>,
    poll_interval_ms: u64,
    state: Mutex<ManagerState>,
}

impl WorkflowManager {
    pub fn new(options: ManagerOptions) -> Self {
        Self {
            test_mode: options.test_mode,
            logger: options.logger,
            clock: options.clock,
            init_wait_timeout_seconds: options.init_wait_timeout_seconds,
            holder_capacity: options.holder_capacity,
            fanout: options.fanout,
            registry_factory: options.registry_factory,
            poll_interval_ms: options.poll_interval_ms.max(1),
            state: Mutex::new(ManagerState {
                selector: None,
                init_task: None,
                init_submitted: false,
                connected: false,
                task_counter: 0,
                current_device_names: Vec::new(),
                roster: Vec::new(),
            }),
        }
    }

    pub fn is_test_mode(&self) -> bool {
        self.test_mode
    }

    pub fn logger(&self) -> &Arc<LogServer> {
        &self.logger
    }

    /// Stores the init task delivered to every device before anything else.
    /// May be called again before connecting; the last call wins.
    pub fn create_init_task(
        &self,
        parameter_dict: InitParams,
        execute_function: &str,
    ) -> Result<()> {
        let mut state = self.state.lock().unwrap();
        if state.connected {
            return Err(Error::AlreadyConnected);
        }
        state.init_task = Some((
            parameter_dict.into_per_device(),
            execute_function.to_string(),
        ));
        Ok(())
    }

    /// Connects to the server (or builds the simulated one in test mode),
    /// schedules the init task and blocks until the initialization phase is
    /// finished or the timeout elapses.
    ///
    /// With a device file the wait covers the full roster; without one it
    /// covers whichever devices are registered at the time of the check.
    pub fn start_fed_dart(&self, server_file: &Path, device_file: Option<&Path>) -> Result<()> {
        let server_config = ServerFileConfig::load(server_file)?;
        let device_config = match device_file {
            Some(path) => Some(DeviceFile::load(path)?),
            None => None,
        };

        let mut state = self.state.lock().unwrap();
        if state.connected {
            return Err(Error::AlreadyConnected);
        }

        let transport: Arc<dyn Transport> = if self.test_mode {
            let devices = device_config
                .as_ref()
                .ok_or_else(|| Error::BadConfig("test mode requires a device file".into()))?;
            let factory = self
                .registry_factory
                .as_ref()
                .ok_or_else(|| {
                    Error::BadConfig("test mode requires a task function registry".into())
                })?
                .clone();
            let local = LocalTransport::new(server_config.capacity, Arc::clone(&self.clock));
            local.add_devices_from_file(devices, |name| factory(name))?;
            Arc::new(local)
        } else {
            let http = HttpTransport::new(&server_config.server, &server_config.client_key);
            http.ping()
                .map_err(|e| Error::ConnectFailed(e.to_string()))?;
            Arc::new(http)
        };

        let mut selector = Selector::new(transport, self.holder_capacity, self.fanout);
        state.roster = device_config
            .as_ref()
            .map(|f| f.names())
            .unwrap_or_default();

        if let Some((per_device_params, execute_function)) = state.init_task.clone() {
            let spec = TaskSpec {
                task_name: "init_task".to_string(),
                execute_function,
                per_device_params,
                task_kind: TaskKind::Init,
                max_wait_seconds: self.init_wait_timeout_seconds,
            };
            selector.transport().add_task(&spec)?;
            state.init_submitted = true;
            self.logger.info("manager", "init task scheduled");
        }

        self.wait_for_initialization(&mut selector, &state.roster, state.init_submitted)?;
        state.current_device_names = selector.connected_device_names();
        state.selector = Some(selector);
        state.connected = true;
        self.logger.info(
            "manager",
            &format!("connected; devices: {:?}", state.current_device_names),
        );
        Ok(())
    }

    fn wait_for_initialization(
        &self,
        selector: &mut Selector,
        roster: &[String],
        need_init: bool,
    ) -> Result<()> {
        let deadline =
            Instant::now() + Duration::from_secs_f64(self.init_wait_timeout_seconds.max(0.0));
        loop {
            selector.refresh_devices()?;
            let devices = selector.devices();
            let targets: Vec<&String> = if roster.is_empty() {
                devices.keys().collect()
            } else {
                roster.iter().collect()
            };
            let all_registered = targets.iter().all(|name| devices.contains_key(*name));
            let all_initialized = !need_init
                || targets.iter().all(|name| {
                    devices
                        .get(*name)
                        .map(|d| d.summary.initialized)
                        .unwrap_or(false)
                });
            if all_registered && all_initialized {
                return Ok(());
            }
            if Instant::now() >= deadline {
                return Err(Error::InitTimeout(self.init_wait_timeout_seconds));
            }
            std::thread::sleep(Duration::from_millis(self.poll_interval_ms));
        }
    }

    /// Names of the currently connected devices.
    pub fn get_all_device_names(&self) -> Result<Vec<String>> {
        let mut state = self.state.lock().unwrap();
        let selector = state.selector.as_mut().ok_or(Error::NotConnected)?;
        selector.refresh_devices()?;
        let names = selector.connected_device_names();
        state.current_device_names = names.clone();
        Ok(names)
    }

    /// Starts a task and returns its handle immediately; the caller polls
    /// status and fetches whatever results are available at their
    /// convenience.
    pub fn start_task(&self, request: TaskRequest) -> Result<Handle> {
        let mut state = self.state.lock().unwrap();
        if !state.connected {
            return Err(Error::NotConnected);
        }
        state.task_counter += 1;
        let task_name = request
            .task_name
            .unwrap_or_else(|| format!("task_{:04}", state.task_counter));
        let spec = TaskSpec {
            task_name: task_name.clone(),
            execute_function: request.execute_function,
            per_device_params: request.parameter_dict,
            task_kind: TaskKind::Default,
            max_wait_seconds: request.max_wait_seconds,
        };
        let selector = state.selector.as_mut().expect("connected");
        selector.refresh_devices()?;
        let accepted =
            selector.request_task_acceptance(spec, request.hardware_requirements.as_ref())?;
        selector.submit(accepted)?;
        self.logger
            .debug("manager", &format!("task {task_name} accepted"));
        Ok(Handle {
            task_name,
            issued_at: self.clock.now_ms(),
        })
    }

    pub fn get_task_status(&self, handle: &Handle) -> Result<TaskStatus> {
        let mut state = self.state.lock().unwrap();
        let selector = state.selector.as_mut().ok_or(Error::NotConnected)?;
        selector.task_status(&handle.task_name)
    }

    /// Currently available results; never blocks on unfinished devices and
    /// never shrinks between calls.
    pub fn get_task_result(&self, handle: &Handle) -> Result<Vec<TaskResult>> {
        let mut state = self.state.lock().unwrap();
        let selector = state.selector.as_mut().ok_or(Error::NotConnected)?;
        selector.task_results(&handle.task_name)
    }

    pub fn stop_task(&self, handle: &Handle) -> Result<bool> {
        let mut state = self.state.lock().unwrap();
        let selector = state.selector.as_mut().ok_or(Error::NotConnected)?;
        let stopped = selector.stop_task(&handle.task_name)?;
        self.logger
            .info("manager", &format!("task {} stopped", handle.task_name));
        Ok(stopped)
    }

    /// Polls the task status until it is terminal or `timeout_seconds` of
    /// real time passed; returns the last observed status either way.
    pub fn wait_for_task(&self, handle: &Handle, timeout_seconds: f64) -> Result<TaskStatus> {
        let deadline = Instant::now() + Duration::from_secs_f64(timeout_seconds.max(0.0));
        loop {
            let status = self.get_task_status(handle)?;
            if status.is_terminal() || Instant::now() >= deadline {
                return Ok(status);
            }
            std::thread::sleep(Duration::from_millis(self.poll_interval_ms));
        }
    }
}
