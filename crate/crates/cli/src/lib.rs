//! HTTP front end and command-line client for casbatch.

pub mod client;
pub mod output;
pub mod server;

use std::sync::Arc;

use casbatch_core::config::ServerConfig;
use casbatch_core::ferris::WheelRegistry;
use casbatch_core::service::Service;

pub use client::{Client, ClientError};
pub use server::{AppState, RunningServer};

/// Service state for a server configuration.
pub fn app_state(cfg: &ServerConfig, wheels: Option<Arc<WheelRegistry>>) -> AppState {
    let mut svc = Service::new(&cfg.scheduler.admin_db);
    if let Some(q) = cfg.scheduler.quota_bytes {
        svc = svc.with_quota(q);
    }
    AppState { svc, wheels }
}
