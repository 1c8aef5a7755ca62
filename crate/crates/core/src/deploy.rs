//! Data-directory layout and first-time setup.
//!
//! ```text
//! <data>/admin.db
//! <data>/exports/
//! <data>/targets/<name>/      one directory per server target
//! ```

use std::path::{Path, PathBuf};

use crate::admin::AdminDb;
use crate::datagen::{self, CatalogSpec};
use crate::error::Result;
use crate::model::{ServerTarget, TargetId, WsId};

pub fn admin_path(data_dir: &Path) -> PathBuf {
    data_dir.join("admin.db")
}

pub fn target_dir(data_dir: &Path, name: &str) -> PathBuf {
    data_dir.join("targets").join(name)
}

/// Creates the data directory and an initialized admin database.
pub fn init(data_dir: &Path) -> Result<AdminDb> {
    std::fs::create_dir_all(data_dir.join("exports"))?;
    std::fs::create_dir_all(data_dir.join("targets"))?;
    let admin = AdminDb::open(&admin_path(data_dir))?;
    admin.init()?;
    Ok(admin)
}

/// Registers a target whose files live under the data directory.
pub fn add_target(
    admin: &mut AdminDb,
    data_dir: &Path,
    name: &str,
    contexts: &[&str],
    max_concurrent: u32,
    hosts_mydb: bool,
) -> Result<TargetId> {
    let dir = target_dir(data_dir, name);
    std::fs::create_dir_all(&dir)?;
    admin.register_target(&ServerTarget {
        target_id: TargetId(0),
        name: name.to_string(),
        locator: dir.to_string_lossy().into_owned(),
        context_names: contexts.iter().map(|c| c.to_string()).collect(),
        max_concurrent,
        queues: Vec::new(),
        hosts_mydb,
    })
}

/// A one-target installation with a generated catalog and one user; handy
/// for demos and tests.
pub fn quickstart(data_dir: &Path, rows: u64, seed: u64, password: &str) -> Result<(AdminDb, TargetId, WsId)> {
    let mut admin = init(data_dir)?;
    let t = add_target(&mut admin, data_dir, "t1", &[], 2, true)?;
    datagen::generate(&mut admin, "t1", datagen::DEFAULT_CONTEXT, CatalogSpec { n_rows: rows, seed })?;
    let ws = admin.create_user(password, None, false)?;
    Ok((admin, t, ws))
}
