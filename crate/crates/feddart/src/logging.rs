//! Structured logging for the runtime.
//!
//! One logger instance is shared by the workflow side and the server; it
//! writes `level component message` lines to the console and optionally to a
//! file. Debugging distributed runs without these lines is painful, so every
//! subsystem logs through here.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::clock::Clock;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum LogLevel {
    Debug,
    Info,
    Warn,
    Error,
}

impl LogLevel {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "debug" => Some(LogLevel::Debug),
            "info" => Some(LogLevel::Info),
            "warn" | "warning" => Some(LogLevel::Warn),
            "error" => Some(LogLevel::Error),
            _ => None,
        }
    }

    fn tag(self) -> &'static str {
        match self {
            LogLevel::Debug => "DEBUG",
            LogLevel::Info => "INFO",
            LogLevel::Warn => "WARN",
            LogLevel::Error => "ERROR",
        }
    }
}

struct Handlers {
    file: Option<File>,
}

pub struct LogServer {
    level: LogLevel,
    console: bool,
    handlers: Mutex<Handlers>,
}

impl LogServer {
    pub fn new(level: LogLevel) -> Self {
        Self {
            level,
            console: true,
            handlers: Mutex::new(Handlers { file: None }),
        }
    }

    /// Logger that writes nowhere; for tests.
    pub fn disabled() -> Self {
        Self {
            level: LogLevel::Error,
            console: false,
            handlers: Mutex::new(Handlers { file: None }),
        }
    }

    pub fn with_file(self, path: &Path) -> std::io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        self.handlers.lock().unwrap().file = Some(file);
        Ok(self)
    }

    pub fn log(&self, level: LogLevel, component: &str, message: &str) {
        if level < self.level {
            return;
        }
        let ts = crate::clock::SystemClock.now_ms();
        let line = format!("{ts} [{}] {component}: {message}", level.tag());
        if self.console {
            eprintln!("{line}");
        }
        let mut handlers = self.handlers.lock().unwrap();
        if let Some(file) = &mut handlers.file {
            let _ = writeln!(file, "{line}");
        }
    }

    pub fn debug(&self, component: &str, message: &str) {
        self.log(LogLevel::Debug, component, message);
    }

    pub fn info(&self, component: &str, message: &str) {
        self.log(LogLevel::Info, component, message);
    }

    pub fn warn(&self, component: &str, message: &str) {
        self.log(LogLevel::Warn, component, message);
    }

    pub fn error(&self, component: &str, message: &str) {
        self.log(LogLevel::Error, component, message);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn levels_are_ordered() {
        assert!(LogLevel::Debug < LogLevel::Info);
        assert!(LogLevel::Info < LogLevel::Warn);
        assert!(LogLevel::Warn < LogLevel::Error);
        assert_eq!(LogLevel::parse("WARN"), Some(LogLevel::Warn));
        assert_eq!(LogLevel::parse("nope"), None);
    }

    #[test]
    fn file_handler_receives_lines_at_or_above_threshold() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.txt");
        let logger = LogServer::new(LogLevel::Info).with_file(&path).unwrap();
        logger.debug("t", "hidden");
        logger.info("t", "shown");
        logger.error("t", "also shown");
        drop(logger);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(!text.contains("hidden"));
        assert!(text.contains("shown"));
        assert!(text.contains("[ERROR]"));
    }
}
