//! casbatch: a batch SQL job service with per-user scratch databases,
//! query rewriting, chunked result streaming and a shared-scan executor.

pub mod admin;
pub mod auth;
pub mod config;
pub mod datagen;
pub mod deploy;
pub mod engine;
pub mod error;
pub mod executor;
pub mod ferris;
pub mod metrics;
pub mod model;
pub mod mydb;
pub mod rewriter;
pub mod scheduler;
pub mod service;

pub use error::{Error, Result};
