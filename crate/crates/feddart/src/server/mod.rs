//! The coordination service: device registry, task queue, per-device
//! dispatch, result store and init-task gating.
//!
//! [`core::ServerCore`] is the pure state machine; every mutating call takes
//! the current time explicitly so tests and journal replay control it.
//! [`shared::SharedServer`] funnels all mutations through one lock and adds
//! long-polling, lazy expiry and journaling. [`http::HttpServer`] exposes the
//! wire protocol on top.

pub mod core;
pub mod http;
pub mod journal;
pub mod shared;

pub use self::core::ServerCore;
pub use self::http::{HttpServer, HttpServerOptions};
pub use self::shared::SharedServer;
