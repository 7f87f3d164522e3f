//! Operator entry points: run the coordination server, run a client worker,
//! run an experiment (test mode or distributed) and summarize metrics.

mod experiment;
mod report;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use clap::{Parser, Subcommand};
use serde::Deserialize;
use serde_json::json;

use fact::ClientDataSpec;
use feddart::config::ServerFileConfig;
use feddart::core::ParamMap;
use feddart::logging::{LogLevel, LogServer};
use feddart::server::{HttpServer, HttpServerOptions};
use feddart::transport::HttpTransport;
use feddart::worker::{run_loop, FunctionRegistry, ShutdownFlag, WorkerConfig};

pub use experiment::ExperimentConfig;

/// Failure categories mapped to process exit codes.
#[derive(Debug, Clone, Copy)]
pub enum ExitCategory {
    BadConfig,
    ConnectFailed,
    Training,
}

impl ExitCategory {
    fn code(self) -> u8 {
        match self {
            ExitCategory::BadConfig => 2,
            ExitCategory::ConnectFailed => 3,
            ExitCategory::Training => 4,
        }
    }
}

#[derive(Parser)]
#[command(name = "feddart", about = "Federated learning runtime and toolkit")]
struct Cli {
    /// Log threshold: debug, info, warn or error.
    #[arg(long, global = true, default_value = "info")]
    log_level: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the coordination server.
    Server {
        /// Server configuration file ({"server": ..., "client_key": ...}).
        #[arg(long)]
        config: PathBuf,
        /// Bind address; defaults to 0.0.0.0 on the configured URL's port.
        #[arg(long)]
        bind: Option<String>,
        /// Append-only journal for crash recovery.
        #[arg(long)]
        journal: Option<PathBuf>,
        /// Log file (in addition to the console).
        #[arg(long, default_value = "feddart-server.log")]
        log_file: PathBuf,
    },
    /// Run a client worker daemon.
    Worker {
        /// Worker configuration file.
        #[arg(long)]
        config: PathBuf,
        /// Override the configured device name.
        #[arg(long)]
        device_name: Option<String>,
        /// Override the configured server URL.
        #[arg(long)]
        server_url: Option<String>,
        /// Override the configured output directory.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Run an experiment end to end and write metrics + the trained model.
    Run {
        /// Experiment configuration file.
        #[arg(long)]
        config: PathBuf,
        /// Override the config's test_mode flag.
        #[arg(long, num_args = 0..=1, default_missing_value = "true")]
        test_mode: Option<bool>,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Summarize a metrics.jsonl file as CSV.
    Report {
        /// Metrics file produced by `run`.
        #[arg(long)]
        metrics: PathBuf,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let Some(level) = LogLevel::parse(&cli.log_level) else {
        eprintln!("unknown log level {:?}", cli.log_level);
        return ExitCode::from(ExitCategory::BadConfig.code());
    };

    let outcome = match cli.command {
        Command::Server {
            config,
            bind,
            journal,
            log_file,
        } => cmd_server(&config, bind, journal, &log_file, level),
        Command::Worker {
            config,
            device_name,
            server_url,
            output_dir,
        } => cmd_worker(&config, device_name, server_url, output_dir, level),
        Command::Run {
            config,
            test_mode,
            seed,
        } => cmd_run(&config, test_mode, seed, level),
        Command::Report { metrics, csv } => cmd_report(&metrics, csv),
    };

    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err((category, message)) => {
            eprintln!("error: {message}");
            ExitCode::from(category.code())
        }
    }
}

type CmdResult = Result<(), (ExitCategory, String)>;

static SIGNALLED: AtomicBool = AtomicBool::new(false);

extern "C" fn on_signal(_: libc::c_int) {
    SIGNALLED.store(true, Ordering::SeqCst);
}

fn install_signal_handlers() {
    let handler = on_signal as *const () as libc::sighandler_t;
    unsafe {
        libc::signal(libc::SIGINT, handler);
        libc::signal(libc::SIGTERM, handler);
    }
}

fn cmd_server(
    config_path: &std::path::Path,
    bind: Option<String>,
    journal: Option<PathBuf>,
    log_file: &std::path::Path,
    level: LogLevel,
) -> CmdResult {
    let config = ServerFileConfig::load(config_path)
        .map_err(|e| (ExitCategory::BadConfig, e.to_string()))?;
    let logger = LogServer::new(level)
        .with_file(log_file)
        .map_err(|e| (ExitCategory::BadConfig, format!("log file: {e}")))?;
    let logger = Arc::new(logger);

    let options = HttpServerOptions {
        bind: bind.unwrap_or_else(|| format!("0.0.0.0:{}", config.port())),
        key: config.client_key.clone(),
        capacity: config.capacity,
        max_body_bytes: config.max_body_mib * 1024 * 1024,
        journal: journal.or(config.journal.clone()),
        ..Default::default()
    };
    let mut server = HttpServer::start(options, Arc::new(feddart::clock::SystemClock), logger)
        .map_err(|e| (ExitCategory::ConnectFailed, e.to_string()))?;

    install_signal_handlers();
    server.wait(&SIGNALLED);
    server.shutdown();
    Ok(())
}

/// Worker file: the runtime config plus an optional dataset description for
/// the built-in FL task functions.
#[derive(Deserialize)]
struct WorkerFileConfig {
    #[serde(flatten)]
    worker: WorkerConfig,
    #[serde(default)]
    data: Option<ClientDataSpec>,
}

fn cmd_worker(
    config_path: &std::path::Path,
    device_name: Option<String>,
    server_url: Option<String>,
    output_dir: Option<PathBuf>,
    level: LogLevel,
) -> CmdResult {
    let bad = |m: String| (ExitCategory::BadConfig, m);
    let text = std::fs::read_to_string(config_path)
        .map_err(|e| bad(format!("{}: {e}", config_path.display())))?;
    let mut file: WorkerFileConfig =
        serde_json::from_str(&text).map_err(|e| bad(format!("{}: {e}", config_path.display())))?;
    if let Some(name) = device_name {
        file.worker.device_name = name;
    }
    if let Some(url) = server_url {
        file.worker.server_url = url;
    }
    if let Some(dir) = output_dir {
        file.worker.output_dir = dir;
    }
    if let Ok(key) = std::env::var("FEDDART_KEY") {
        file.worker.key = key;
    }
    file.worker.validate().map_err(|e| bad(e.to_string()))?;

    let registry = match file.worker.function_registry_ref.as_str() {
        "demo" => demo_registry(),
        "fact" => {
            let data = file.data.as_ref().ok_or_else(|| {
                bad("function_registry_ref \"fact\" requires a data section".into())
            })?;
            fact::build_registry(
                &file.worker.device_name,
                data,
                file.worker.output_dir.clone(),
            )
            .map_err(|e| bad(e.to_string()))?
        }
        other => {
            return Err(bad(format!(
                "unknown function_registry_ref {other:?} (expected \"demo\" or \"fact\")"
            )))
        }
    };

    let logger = Arc::new(LogServer::new(level));
    let transport = HttpTransport::new(&file.worker.server_url, &file.worker.key);

    install_signal_handlers();
    let shutdown = ShutdownFlag::new();
    let bridge_flag = shutdown.clone();
    std::thread::spawn(move || {
        while !SIGNALLED.load(Ordering::SeqCst) {
            std::thread::sleep(std::time::Duration::from_millis(50));
        }
        bridge_flag.trigger();
    });

    run_loop(&file.worker, &registry, &transport, &logger, &shutdown)
        .map_err(|e| (ExitCategory::BadConfig, e.to_string()))
}

/// Task functions for exercising the runtime without an ML stack.
fn demo_registry() -> FunctionRegistry {
    let mut registry = FunctionRegistry::new();
    registry.register("init", |_: &ParamMap| {
        let mut out = BTreeMap::new();
        out.insert("ready".to_string(), json!(true));
        Ok(out)
    });
    registry.register("echo", |params: &ParamMap| {
        Ok(params.iter().map(|(k, v)| (k.clone(), v.clone())).collect())
    });
    registry.register("sleep_echo", |params: &ParamMap| {
        let seconds = params
            .get("sleep_seconds")
            .and_then(|v| v.as_f64())
            .unwrap_or(0.0)
            .clamp(0.0, 60.0);
        std::thread::sleep(std::time::Duration::from_secs_f64(seconds));
        let mut out = BTreeMap::new();
        out.insert(
            "payload".to_string(),
            params.get("payload").cloned().unwrap_or(json!(null)),
        );
        out.insert("slept".to_string(), json!(seconds));
        Ok(out)
    });
    registry
}

fn cmd_run(
    config_path: &std::path::Path,
    test_mode: Option<bool>,
    seed: Option<u64>,
    level: LogLevel,
) -> CmdResult {
    let mut config = ExperimentConfig::load(config_path)
        .map_err(|e| (ExitCategory::BadConfig, e))?;
    if let Some(flag) = test_mode {
        config.test_mode = flag;
    }
    if let Some(seed) = seed {
        config.seed = seed;
    }
    let logger = Arc::new(LogServer::new(level));
    let outcome = experiment::run(&config, logger)?;
    println!(
        "ok: {} round records -> {}",
        outcome.rounds,
        outcome.metrics_path.display()
    );
    println!("model -> {}", outcome.model_path.display());
    Ok(())
}

fn cmd_report(metrics_path: &std::path::Path, csv_path: Option<PathBuf>) -> CmdResult {
    let records = report::load_metrics(metrics_path)
        .map_err(|e| (ExitCategory::BadConfig, e))?;
    let report = report::build_report(&records);
    match csv_path {
        Some(path) => {
            std::fs::write(&path, &report.csv)
                .map_err(|e| (ExitCategory::BadConfig, format!("{}: {e}", path.display())))?;
            print!("{}", report.summary);
        }
        None => {
            print!("{}", report.csv);
            eprint!("{}", report.summary);
        }
    }
    Ok(())
}
