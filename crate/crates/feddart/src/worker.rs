//! The client worker: a daemon that registers with the server, polls for
//! assignments, executes registered task functions on local data and submits
//! the results.
//!
//! Task functions ship with the worker binary inside a [`FunctionRegistry`];
//! there is no dynamic code download. Execution is strictly sequential: the
//! worker never holds more than one assignment at a time.

use std::collections::BTreeMap;
use std::panic::AssertUnwindSafe;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::core::{ParamMap, TaskResult};
use crate::error::{Error, Result};
use crate::logging::LogServer;
use crate::protocol::{Assignment, RegisterRequest};
use crate::transport::WorkerTransport;

/// Worker configuration, loadable from JSON; CLI flags override fields.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorkerConfig {
    pub server_url: String,
    pub key: String,
    pub device_name: String,
    #[serde(default)]
    pub hardware_config: Option<BTreeMap<String, Value>>,
    pub output_dir: PathBuf,
    #[serde(default = "default_poll_interval")]
    pub poll_interval_seconds: f64,
    /// Identifier of the task-function set the worker loads.
    #[serde(default = "default_registry")]
    pub function_registry_ref: String,
    /// Accepted for wire compatibility with callers that still send a client
    /// script path; the compiled registry makes it meaningless.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file_path: Option<String>,
}

fn default_poll_interval() -> f64 {
    2.0
}

fn default_registry() -> String {
    "demo".into()
}

impl WorkerConfig {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::BadConfig(format!("{}: {e}", path.display())))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| Error::BadConfig(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.device_name.is_empty() {
            return Err(Error::BadConfig("device_name must be non-empty".into()));
        }
        if self.server_url.is_empty() {
            return Err(Error::BadConfig("server_url must be non-empty".into()));
        }
        if !(self.poll_interval_seconds > 0.0) {
            return Err(Error::BadConfig(
                "poll_interval_seconds must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// A function callable by tasks: parameter map in, result map out. Returning
/// an `Err` produces a failure result carrying the message under the reserved
/// `error` key.
pub type TaskFn =
    Arc<dyn Fn(&ParamMap) -> std::result::Result<BTreeMap<String, Value>, String> + Send + Sync>;

/// Named set of task functions, the compiled equivalent of annotating client
/// script functions.
#[derive(Default, Clone)]
pub struct FunctionRegistry {
    functions: BTreeMap<String, TaskFn>,
}

impl FunctionRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register<F>(&mut self, name: impl Into<String>, f: F)
    where
        F: Fn(&ParamMap) -> std::result::Result<BTreeMap<String, Value>, String>
            + Send
            + Sync
            + 'static,
    {
        self.functions.insert(name.into(), Arc::new(f));
    }

    pub fn get(&self, name: &str) -> Option<&TaskFn> {
        self.functions.get(name)
    }

    pub fn names(&self) -> Vec<&str> {
        self.functions.keys().map(|s| s.as_str()).collect()
    }
}

/// Executes one function call, measuring its duration. Exceptions (panics or
/// `Err` returns) become failure results; they never crash the loop.
pub fn execute(
    registry: &FunctionRegistry,
    device_name: &str,
    function_name: &str,
    params: &ParamMap,
) -> TaskResult {
    let start = Instant::now();
    let outcome = match registry.get(function_name) {
        Some(f) => {
            match std::panic::catch_unwind(AssertUnwindSafe(|| f(params))) {
                Ok(Ok(dict)) => Ok(dict),
                Ok(Err(message)) => Err(message),
                Err(panic) => Err(panic_message(panic)),
            }
        }
        None => Err(format!("unknown function {function_name:?}")),
    };
    let duration = start.elapsed().as_secs_f64();
    let dict = match outcome {
        Ok(dict) => dict,
        Err(message) => {
            let mut dict = BTreeMap::new();
            dict.insert("error".to_string(), Value::String(message));
            dict
        }
    };
    TaskResult::new(device_name, duration, dict)
}

fn panic_message(panic: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = panic.downcast_ref::<&str>() {
        format!("panic: {s}")
    } else if let Some(s) = panic.downcast_ref::<String>() {
        format!("panic: {s}")
    } else {
        "panic".to_string()
    }
}

/// Handle used to request a graceful stop: the worker finishes the task it is
/// executing, then exits.
#[derive(Clone, Default)]
pub struct ShutdownFlag(Arc<AtomicBool>);

impl ShutdownFlag {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn trigger(&self) {
        self.0.store(true, Ordering::SeqCst);
    }

    pub fn is_set(&self) -> bool {
        self.0.load(Ordering::SeqCst)
    }
}

/// Registers, then repeatedly polls, executes and submits until the shutdown
/// flag is set. Transport errors are retried with exponential backoff; only
/// an invalid configuration is fatal.
pub fn run_loop(
    config: &WorkerConfig,
    registry: &FunctionRegistry,
    transport: &dyn WorkerTransport,
    logger: &LogServer,
    shutdown: &ShutdownFlag,
) -> Result<()> {
    config.validate()?;
    std::fs::create_dir_all(&config.output_dir)?;

    let register_request = RegisterRequest {
        name: config.device_name.clone(),
        ip_address: String::new(),
        port: 0,
        hardware_config: config.hardware_config.clone(),
        poll_interval_seconds: config.poll_interval_seconds,
    };
    retry_with_backoff(shutdown, logger, "register", None, || {
        transport.register_device(&register_request)
    });
    if shutdown.is_set() {
        return Ok(());
    }
    logger.info("worker", &format!("{} registered", config.device_name));

    while !shutdown.is_set() {
        let assignment = match transport.poll_assignment(
            &config.device_name,
            config.poll_interval_seconds,
        ) {
            Ok(Some(a)) => a,
            Ok(None) => continue,
            Err(e) => {
                logger.warn("worker", &format!("poll failed: {e}"));
                sleep_interruptible(shutdown, Duration::from_secs_f64(1.0));
                continue;
            }
        };
        logger.info(
            "worker",
            &format!(
                "{} executing {} ({})",
                config.device_name, assignment.task_name, assignment.execute_function
            ),
        );
        let result = execute(
            registry,
            &config.device_name,
            &assignment.execute_function,
            &assignment.params,
        );
        log_task(config, &assignment, &result);

        // Every delivered assignment produces exactly one submit attempt,
        // retried a few times; the server's expiry covers a lost result.
        let submitted = retry_with_backoff(shutdown, logger, "submit", Some(3), || {
            transport.submit_result(&config.device_name, &assignment.task_name, &result)
        });
        if !submitted {
            logger.warn(
                "worker",
                &format!("dropping result for {}", assignment.task_name),
            );
        }
    }
    logger.info("worker", &format!("{} stopped", config.device_name));
    Ok(())
}

/// Retries `f` with exponential backoff. `attempts` of `None` retries until
/// success or shutdown; the shutdown flag is only honored between attempts,
/// so an in-flight result still gets its submit attempt during a graceful
/// stop. Returns whether `f` eventually succeeded.
fn retry_with_backoff<T>(
    shutdown: &ShutdownFlag,
    logger: &LogServer,
    what: &str,
    attempts: Option<u32>,
    mut f: impl FnMut() -> Result<T>,
) -> bool {
    let mut tried = 0u32;
    loop {
        match f() {
            Ok(_) => return true,
            Err(e) => {
                tried += 1;
                if let Some(max) = attempts {
                    if tried >= max {
                        logger.warn("worker", &format!("{what} failed {tried}x: {e}"));
                        return false;
                    }
                }
                if shutdown.is_set() {
                    return false;
                }
                let delay = backoff_delay(tried);
                logger.warn(
                    "worker",
                    &format!("{what} failed ({e}); retrying in {:.1}s", delay.as_secs_f64()),
                );
                sleep_interruptible(shutdown, delay);
            }
        }
    }
}

/// 0.5s doubling per attempt, capped at 30s.
pub fn backoff_delay(attempt: u32) -> Duration {
    let secs = 0.5 * 2f64.powi(attempt.saturating_sub(1).min(16) as i32);
    Duration::from_secs_f64(secs.min(30.0))
}

fn sleep_interruptible(shutdown: &ShutdownFlag, total: Duration) {
    let step = Duration::from_millis(50);
    let mut remaining = total;
    while remaining > Duration::ZERO && !shutdown.is_set() {
        let nap = remaining.min(step);
        std::thread::sleep(nap);
        remaining = remaining.saturating_sub(nap);
    }
}

fn log_task(config: &WorkerConfig, assignment: &Assignment, result: &TaskResult) {
    let path = config
        .output_dir
        .join(format!("{}.log", assignment.task_name));
    let line = serde_json::json!({
        "task_name": assignment.task_name,
        "execute_function": assignment.execute_function,
        "duration_seconds": result.duration_seconds,
        "failed": result.is_failure(),
    });
    let _ = std::fs::write(path, format!("{line}\n"));
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn demo_registry() -> FunctionRegistry {
        let mut registry = FunctionRegistry::new();
        registry.register("echo", |params: &ParamMap| {
            Ok(params
                .iter()
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect())
        });
        registry.register("fails", |_: &ParamMap| Err("intentional".to_string()));
        registry.register("panics", |_: &ParamMap| panic!("kaboom"));
        registry.register("slow", |_: &ParamMap| {
            std::thread::sleep(Duration::from_millis(200));
            Ok(BTreeMap::new())
        });
        registry
    }

    #[test]
    fn execute_measures_duration() {
        let registry = demo_registry();
        let result = execute(&registry, "c1", "slow", &ParamMap::new());
        assert!(result.duration_seconds >= 0.2);
        assert!(!result.is_failure());
    }

    #[test]
    fn execute_derives_result_list() {
        let registry = demo_registry();
        let mut params = ParamMap::new();
        params.insert("result_0".into(), json!(5));
        params.insert("result_1".into(), json!(2));
        let result = execute(&registry, "c1", "echo", &params);
        assert_eq!(result.result_list, vec![json!(5), json!(2)]);
        assert_eq!(result.device_name, "c1");
    }

    #[test]
    fn unknown_function_yields_failure_result() {
        let registry = demo_registry();
        let result = execute(&registry, "c1", "missing", &ParamMap::new());
        assert!(result.is_failure());
        assert!(result.result_dict["error"]
            .as_str()
            .unwrap()
            .contains("unknown function"));
    }

    #[test]
    fn function_error_and_panic_become_failure_results() {
        let registry = demo_registry();
        let r = execute(&registry, "c1", "fails", &ParamMap::new());
        assert_eq!(r.result_dict["error"], json!("intentional"));
        let r = execute(&registry, "c1", "panics", &ParamMap::new());
        assert!(r.result_dict["error"].as_str().unwrap().contains("kaboom"));
    }

    #[test]
    fn backoff_doubles_and_caps() {
        assert_eq!(backoff_delay(1), Duration::from_secs_f64(0.5));
        assert_eq!(backoff_delay(2), Duration::from_secs_f64(1.0));
        assert_eq!(backoff_delay(3), Duration::from_secs_f64(2.0));
        assert_eq!(backoff_delay(30), Duration::from_secs_f64(30.0));
    }

    #[test]
    fn config_validation() {
        let cfg = WorkerConfig {
            server_url: "http://127.0.0.1:7777".into(),
            key: "000".into(),
            device_name: String::new(),
            hardware_config: None,
            output_dir: PathBuf::from("/tmp/x"),
            poll_interval_seconds: 1.0,
            function_registry_ref: "demo".into(),
            file_path: None,
        };
        assert!(cfg.validate().is_err());
        let ok = WorkerConfig {
            device_name: "c1".into(),
            ..cfg
        };
        assert!(ok.validate().is_ok());
    }
}
