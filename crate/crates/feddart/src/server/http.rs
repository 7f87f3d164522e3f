//! HTTP front for the coordination server.
//!
//! A fixed pool of handler threads serves the wire protocol; the state
//! machine behind [`SharedServer`] does the rest. Only the worker poll
//! endpoint may hold a request, bounded by its `wait_seconds`.

use std::io::Read;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;
use tiny_http::{Header, Method, Request, Response};

use crate::clock::Clock;
use crate::config::DEFAULT_MAX_BODY_MIB;
use crate::error::{ApiErrorCode, Error, Result};
use crate::logging::LogServer;
use crate::protocol::{
    AddTaskResponse, Envelope, PollRequest, PollResponse, RegisterRequest, RegisterResponse,
    StopResponse, SubmitResultRequest, SubmitResultResponse, AUTH_HEADER,
};
use crate::server::shared::SharedServer;

/// Upper bound on a single long-poll so handler threads cannot be parked
/// indefinitely.
const MAX_POLL_WAIT_SECONDS: f64 = 60.0;

pub struct HttpServerOptions {
    pub bind: String,
    pub key: String,
    pub capacity: usize,
    pub max_body_bytes: u64,
    pub handler_threads: usize,
    pub journal: Option<std::path::PathBuf>,
}

impl Default for HttpServerOptions {
    fn default() -> Self {
        Self {
            bind: "0.0.0.0:7777".into(),
            key: "000".into(),
            capacity: crate::config::DEFAULT_CAPACITY,
            max_body_bytes: DEFAULT_MAX_BODY_MIB * 1024 * 1024,
            handler_threads: 16,
            journal: None,
        }
    }
}

/// A running server; dropping it shuts the listener down.
pub struct HttpServer {
    shared: Arc<SharedServer>,
    listener: Arc<tiny_http::Server>,
    shutdown: Arc<AtomicBool>,
    threads: Vec<JoinHandle<()>>,
    local_port: u16,
}

impl HttpServer {
    /// Binds and starts serving. `bind` may use port 0 to pick a free port.
    pub fn start(
        options: HttpServerOptions,
        clock: Arc<dyn Clock>,
        logger: Arc<LogServer>,
    ) -> Result<Self> {
        let shared = SharedServer::new(options.capacity, clock);
        if let Some(path) = &options.journal {
            let applied = shared.with_journal(path)?;
            if applied > 0 {
                logger.info(
                    "server",
                    &format!("recovered {applied} journal entries from {}", path.display()),
                );
            }
        }
        let listener = Arc::new(
            tiny_http::Server::http(&options.bind)
                .map_err(|e| Error::ConnectFailed(format!("bind {}: {e}", options.bind)))?,
        );
        let local_port = match listener.server_addr() {
            tiny_http::ListenAddr::IP(addr) => addr.port(),
            _ => 0,
        };
        logger.info("server", &format!("listening on {}", options.bind));

        let shutdown = Arc::new(AtomicBool::new(false));
        let key = Arc::new(options.key.clone());
        let mut threads = Vec::new();
        for _ in 0..options.handler_threads.max(1) {
            let listener = Arc::clone(&listener);
            let shared = Arc::clone(&shared);
            let shutdown = Arc::clone(&shutdown);
            let key = Arc::clone(&key);
            let logger = Arc::clone(&logger);
            let max_body = options.max_body_bytes;
            threads.push(std::thread::spawn(move || {
                while !shutdown.load(Ordering::SeqCst) {
                    match listener.recv() {
                        Ok(request) => handle(request, &shared, &key, max_body, &logger),
                        Err(_) => break,
                    }
                }
            }));
        }
        // Periodic expiry sweep so deadlines fire without traffic.
        {
            let shared = Arc::clone(&shared);
            let shutdown = Arc::clone(&shutdown);
            threads.push(std::thread::spawn(move || {
                while !shutdown.load(Ordering::SeqCst) {
                    shared.sweep();
                    std::thread::sleep(Duration::from_millis(50));
                }
            }));
        }

        Ok(Self {
            shared,
            listener,
            shutdown,
            threads,
            local_port,
        })
    }

    pub fn shared(&self) -> &Arc<SharedServer> {
        &self.shared
    }

    /// Port actually bound (useful with port 0).
    pub fn port(&self) -> u16 {
        self.local_port
    }

    pub fn shutdown(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        self.shared.close();
        // unblock() releases one blocked recv(); issue one per handler.
        for _ in 0..self.threads.len() + 1 {
            self.listener.unblock();
        }
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }

    /// Blocks until shutdown is requested externally (e.g. a signal handler
    /// flipping the flag).
    pub fn wait(&self, stop: &AtomicBool) {
        while !stop.load(Ordering::SeqCst) {
            std::thread::sleep(Duration::from_millis(100));
        }
    }
}

impl Drop for HttpServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn handle(
    mut request: Request,
    shared: &SharedServer,
    key: &str,
    max_body: u64,
    logger: &LogServer,
) {
    let method = request.method().clone();
    let url = request.url().to_string();
    let envelope = route(&mut request, shared, key, max_body);
    let status = match &envelope.error {
        None => 200,
        Some(err) => err.code.http_status(),
    };
    if status >= 500 || status == 400 {
        logger.warn("server", &format!("{method} {url} -> {status}"));
    } else {
        logger.debug("server", &format!("{method} {url} -> {status}"));
    }
    let body = serde_json::to_string(&envelope).unwrap_or_else(|_| "{\"ok\":false}".into());
    let response = Response::from_string(body)
        .with_status_code(status)
        .with_header(Header::from_bytes("Content-Type", "application/json").expect("valid header"));
    let _ = request.respond(response);
}

fn route(request: &mut Request, shared: &SharedServer, key: &str, max_body: u64) -> Envelope {
    if !authorized(request, key) {
        return Envelope::err(ApiErrorCode::Unauthorized, "missing or wrong key");
    }
    if let Some(len) = request.body_length() {
        if len as u64 > max_body {
            return Envelope::err(
                ApiErrorCode::PayloadTooLarge,
                format!("body of {len} bytes exceeds limit of {max_body}"),
            );
        }
    }

    let url = request.url().to_string();
    let (path, query) = url.split_once('?').unwrap_or((url.as_str(), ""));
    let segments: Vec<&str> = path.split('/').filter(|s| !s.is_empty()).collect();
    let method = request.method().clone();

    let outcome = match (&method, segments.as_slice()) {
        (Method::Post, ["api", "tasks"]) => with_body(request, max_body, |spec| {
            to_envelope(shared.add_task(spec).into_result().map(|handle| {
                AddTaskResponse {
                    accepted: true,
                    handle,
                }
            }))
        }),
        (Method::Get, ["api", "tasks", name, "status"]) => {
            to_envelope(shared.status(name).into_result())
        }
        (Method::Get, ["api", "tasks", name, "results"]) => {
            let amount = query_amount(query);
            to_envelope(shared.results(name, amount).into_result())
        }
        (Method::Delete, ["api", "tasks", name]) => to_envelope(
            shared
                .stop(name)
                .into_result()
                .map(|stopped| StopResponse { stopped }),
        ),
        (Method::Get, ["api", "devices"]) => to_envelope(shared.list_devices().into_result()),
        (Method::Post, ["api", "devices", "register"]) => {
            let remote_ip = request_remote_ip(request);
            with_body(request, max_body, |mut req: RegisterRequest| {
                if req.ip_address.is_empty() {
                    if let Some(addr) = remote_ip {
                        req.ip_address = addr;
                    }
                }
                to_envelope(
                    shared
                        .register_device(&req)
                        .into_result()
                        .map(|registered| RegisterResponse { registered }),
                )
            })
        }
        (Method::Post, ["api", "worker", "poll"]) => {
            with_body(request, max_body, |req: PollRequest| {
                let wait = req.wait_seconds.clamp(0.0, MAX_POLL_WAIT_SECONDS);
                to_envelope(
                    shared
                        .poll_assignment(&req.device_name, wait)
                        .map(|assignment| PollResponse { assignment }),
                )
            })
        }
        (Method::Post, ["api", "worker", "result"]) => {
            with_body(request, max_body, |req: SubmitResultRequest| {
                to_envelope(
                    shared
                        .record_result(&req.device_name, &req.task_name, req.result)
                        .into_result()
                        .map(|_| SubmitResultResponse { recorded: true }),
                )
            })
        }
        _ => Envelope::err(
            ApiErrorCode::BadRequest,
            format!("no route for {method} {path}"),
        ),
    };
    outcome
}

fn authorized(request: &Request, key: &str) -> bool {
    request
        .headers()
        .iter()
        .any(|h| h.field.as_str().as_str().eq_ignore_ascii_case(AUTH_HEADER) && h.value == key)
}

fn request_remote_ip(request: &Request) -> Option<String> {
    request.remote_addr().map(|a| a.ip().to_string())
}

fn query_amount(query: &str) -> usize {
    for pair in query.split('&') {
        if let Some(value) = pair.strip_prefix("amount=") {
            if let Ok(n) = value.parse::<usize>() {
                return n;
            }
        }
    }
    usize::MAX
}

fn with_body<T: DeserializeOwned>(
    request: &mut Request,
    max_body: u64,
    f: impl FnOnce(T) -> Envelope,
) -> Envelope {
    let mut body = String::new();
    let reader = request.as_reader();
    let mut limited = reader.take(max_body + 1);
    if let Err(e) = limited.read_to_string(&mut body) {
        return Envelope::err(ApiErrorCode::BadRequest, format!("unreadable body: {e}"));
    }
    if body.len() as u64 > max_body {
        return Envelope::err(ApiErrorCode::PayloadTooLarge, "body exceeds limit");
    }
    match serde_json::from_str::<T>(&body) {
        Ok(value) => f(value),
        Err(e) => Envelope::err(ApiErrorCode::BadRequest, format!("malformed body: {e}")),
    }
}

fn to_envelope<T: Serialize>(result: Result<T>) -> Envelope {
    match result {
        Ok(value) => Envelope::ok(value),
        Err(e) => match e.api_code() {
            Some(code) => Envelope::err(code, e.to_string()),
            None => Envelope::err(ApiErrorCode::BadRequest, e.to_string()),
        },
    }
}
