//! Endpoint contract tests over real HTTP.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde_json::json;

use feddart::clock::SystemClock;
use feddart::core::{ParamMap, TaskKind, TaskResult, TaskSpec, TaskState};
use feddart::error::ApiErrorCode;
use feddart::logging::LogServer;
use feddart::protocol::RegisterRequest;
use feddart::server::{HttpServer, HttpServerOptions};
use feddart::transport::{HttpTransport, Transport, WorkerTransport};

const KEY: &str = "000";

fn start_server() -> (HttpServer, HttpTransport) {
    let server = HttpServer::start(
        HttpServerOptions {
            bind: "127.0.0.1:0".into(),
            key: KEY.into(),
            capacity: 4,
            ..Default::default()
        },
        Arc::new(SystemClock),
        Arc::new(LogServer::disabled()),
    )
    .expect("server starts");
    let transport = HttpTransport::new(&format!("http://127.0.0.1:{}", server.port()), KEY);
    (server, transport)
}

fn register(transport: &HttpTransport, name: &str) {
    transport
        .register_device(&RegisterRequest {
            name: name.into(),
            ip_address: String::new(),
            port: 2883,
            hardware_config: None,
            poll_interval_seconds: 1.0,
        })
        .expect("registration succeeds");
}

fn spec(name: &str, devices: &[&str]) -> TaskSpec {
    let mut per_device = BTreeMap::new();
    for d in devices {
        let mut p = ParamMap::new();
        p.insert("weights".into(), json!([0.5, 1.5]));
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

fn result_for(device: &str) -> TaskResult {
    let mut d = BTreeMap::new();
    d.insert("result_0".to_string(), json!(5));
    d.insert("result_1".to_string(), json!(2));
    TaskResult::new(device, 0.25, d)
}

#[test]
fn add_task_and_duplicate_rejection() {
    let (_server, t) = start_server();
    register(&t, "client1");
    register(&t, "client2");

    let handle = t.add_task(&spec("round1", &["client1", "client2"])).unwrap();
    assert_eq!(handle.task_name, "round1");

    let err = t
        .add_task(&spec("ghostly", &["ghost"]))
        .unwrap_err();
    assert_eq!(err.api_code(), Some(ApiErrorCode::TaskRejected));

    let err = t
        .add_task(&spec("round1", &["client1"]))
        .unwrap_err();
    assert_eq!(err.api_code(), Some(ApiErrorCode::TaskRejected));
}

#[test]
fn results_are_available_without_waiting_for_all_devices() {
    let (_server, t) = start_server();
    for c in ["a", "b", "c"] {
        register(&t, c);
    }
    t.add_task(&spec("t", &["a", "b", "c"])).unwrap();

    for c in ["a", "b"] {
        let assignment = t.poll_assignment(c, 1.0).unwrap().unwrap();
        assert_eq!(assignment.task_name, "t");
        t.submit_result(c, "t", &result_for(c)).unwrap();
    }

    // Two of three finished; amount truncates; no blocking on c.
    let results = t.get_job_results("t", 10).unwrap();
    assert_eq!(results.len(), 2);
    assert_eq!(results[0].result_list, vec![json!(5), json!(2)]);
    let results = t.get_job_results("t", 1).unwrap();
    assert_eq!(results.len(), 1);

    let err = t.get_job_results("unknown", 5).unwrap_err();
    assert_eq!(err.api_code(), Some(ApiErrorCode::TaskUnknown));

    let status = t.get_task_status("t").unwrap();
    assert_eq!(status.state, TaskState::Partial);
}

#[test]
fn status_stop_and_device_listing() {
    let (_server, t) = start_server();
    register(&t, "client1");
    register(&t, "client2");
    assert_eq!(t.list_devices().unwrap().len(), 2);

    // Fill capacity so a later task stays queued.
    for i in 0..4 {
        t.add_task(&spec(&format!("filler{i}"), &["client1"])).unwrap();
    }
    t.add_task(&spec("queued_task", &["client1"])).unwrap();
    assert_eq!(
        t.get_task_status("queued_task").unwrap().state,
        TaskState::Queued
    );

    // Deliver and stop a running task.
    let a = t.poll_assignment("client1", 1.0).unwrap().unwrap();
    assert!(t.stop_task(&a.task_name).unwrap());
    assert_eq!(
        t.get_task_status(&a.task_name).unwrap().state,
        TaskState::Stopped
    );
}

#[test]
fn register_is_idempotent() {
    let (_server, t) = start_server();
    register(&t, "client1");
    register(&t, "client1");
    let devices = t.list_devices().unwrap();
    assert_eq!(devices.len(), 1);
    assert_eq!(devices[0].port, 2883);
    assert!(!devices[0].initialized);
}

#[test]
fn poll_with_empty_queue_returns_none_quickly() {
    let (_server, t) = start_server();
    register(&t, "client1");
    let start = Instant::now();
    let got = t.poll_assignment("client1", 0.1).unwrap();
    assert!(got.is_none());
    assert!(start.elapsed() < Duration::from_secs(5));
}

#[test]
fn submit_for_unopened_task_is_unknown() {
    let (_server, t) = start_server();
    register(&t, "client1");
    t.add_task(&spec("t", &["client1"])).unwrap();
    // Never polled, so the task was never delivered to the device.
    let err = t
        .submit_result("client1", "t", &result_for("client1"))
        .unwrap_err();
    assert_eq!(err.api_code(), Some(ApiErrorCode::TaskUnknown));

    // Duplicate submits are rejected.
    t.poll_assignment("client1", 1.0).unwrap().unwrap();
    t.submit_result("client1", "t", &result_for("client1")).unwrap();
    let err = t
        .submit_result("client1", "t", &result_for("client1"))
        .unwrap_err();
    assert_eq!(err.api_code(), Some(ApiErrorCode::BadRequest));
}

#[test]
fn wrong_key_is_unauthorized() {
    let (server, _t) = start_server();
    let bad = HttpTransport::new(&format!("http://127.0.0.1:{}", server.port()), "wrong");
    let err = bad.list_devices().unwrap_err();
    assert_eq!(err.api_code(), Some(ApiErrorCode::Unauthorized));
}

#[test]
fn oversized_payload_is_rejected() {
    let server = HttpServer::start(
        HttpServerOptions {
            bind: "127.0.0.1:0".into(),
            key: KEY.into(),
            capacity: 4,
            max_body_bytes: 1024,
            ..Default::default()
        },
        Arc::new(SystemClock),
        Arc::new(LogServer::disabled()),
    )
    .unwrap();
    let t = HttpTransport::new(&format!("http://127.0.0.1:{}", server.port()), KEY);
    register(&t, "client1");

    let mut big = spec("big", &["client1"]);
    big.per_device_params.get_mut("client1").unwrap().insert(
        "blob".into(),
        json!("x".repeat(4096)),
    );
    let err = t.add_task(&big).unwrap_err();
    assert_eq!(err.api_code(), Some(ApiErrorCode::PayloadTooLarge));
}

#[test]
fn long_poll_wakes_on_new_task() {
    let (_server, t) = start_server();
    register(&t, "client1");

    let port_transport = Arc::new(t);
    let poller = Arc::clone(&port_transport);
    let handle = std::thread::spawn(move || {
        let start = Instant::now();
        let got = poller.poll_assignment("client1", 10.0).unwrap();
        (got, start.elapsed())
    });
    std::thread::sleep(Duration::from_millis(150));
    port_transport.add_task(&spec("wake", &["client1"])).unwrap();
    let (got, elapsed) = handle.join().unwrap();
    assert_eq!(got.unwrap().task_name, "wake");
    assert!(elapsed < Duration::from_secs(8), "{elapsed:?}");
}

#[test]
fn init_task_gates_and_initializes_devices() {
    let (_server, t) = start_server();
    register(&t, "client1");

    let mut per_device = BTreeMap::new();
    let mut shared = ParamMap::new();
    shared.insert("model_structure".into(), json!({"layers": [4, 1]}));
    per_device.insert("*".to_string(), shared);
    t.add_task(&TaskSpec {
        task_name: "init".into(),
        execute_function: "init".into(),
        per_device_params: per_device,
        task_kind: TaskKind::Init,
        max_wait_seconds: 60.0,
    })
    .unwrap();
    t.add_task(&spec("learn1", &["client1"])).unwrap();

    // Init first, despite the queued default task.
    let a = t.poll_assignment("client1", 1.0).unwrap().unwrap();
    assert_eq!(a.task_kind, TaskKind::Init);
    t.submit_result("client1", "init", &result_for("client1")).unwrap();
    assert!(t.list_devices().unwrap()[0].initialized);

    let a = t.poll_assignment("client1", 1.0).unwrap().unwrap();
    assert_eq!(a.task_name, "learn1");
}
