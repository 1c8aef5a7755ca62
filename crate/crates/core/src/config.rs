//! Flat `key = value` configuration files.
//!
//! ```text
//! # casbatch.conf
//! admin_db_locator = /srv/casbatch/admin.db
//! output_dir = /srv/casbatch/exports
//! poll_interval_s = 5
//! retention_s = 604800
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scheduler::SchedulerConfig;

pub const DEFAULT_LISTEN: &str = "127.0.0.1:8080";

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub scheduler: SchedulerConfig,
    pub listen: String,
}

/// Parses `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Parse { location: format!("line {}", n + 1), message: "expected key = value".into() });
        };
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

impl ServerConfig {
    /// Defaults rooted at `data_dir`.
    pub fn for_data_dir(data_dir: &Path) -> Self {
        ServerConfig { scheduler: SchedulerConfig::for_data_dir(data_dir), listen: DEFAULT_LISTEN.into() }
    }

    /// Applies the keys in `text` on top of the defaults for `data_dir`.
    pub fn parse(text: &str, data_dir: &Path) -> Result<Self> {
        let mut cfg = Self::for_data_dir(data_dir);
        for (k, v) in parse_pairs(text)? {
            let bad = || Error::Invalid(format!("bad value for {k}: {v:?}"));
            let s = &mut cfg.scheduler;
            match k.as_str() {
                "poll_interval_s" => s.poll_interval_s = v.parse().map_err(|_| bad())?,
                "retention_s" => s.retention_s = v.parse().map_err(|_| bad())?,
                "output_dir" => s.output_dir = v.into(),
                "admin_db_locator" => s.admin_db = v.into(),
                "chunk_size" => s.chunk_size = v.parse().map_err(|_| bad())?,
                "quota_mb" => {
                    let mb: u64 = v.parse().map_err(|_| bad())?;
                    s.quota_bytes = Some(mb * 1024 * 1024);
                }
                "use_wheel" => s.use_wheel = v.parse().map_err(|_| bad())?,
                "wheel_buckets" => s.wheel_buckets = v.parse().map_err(|_| bad())?,
                "listen" => cfg.listen = v,
                _ => return Err(Error::Invalid(format!("unknown config key {k}"))),
            }
        }
        cfg.scheduler.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, data_dir: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?, data_dir)
    }
}
