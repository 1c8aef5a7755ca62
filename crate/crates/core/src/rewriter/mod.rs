//! Query rewriting: screening, `INTO MyDB.x` extraction, and translation of
//! the `MyDB.` / `GROUP.` prefixes into physical database names.

mod alias;
pub mod dialect;
mod into;
pub mod screen;
pub mod tokenizer;

use serde::{Deserialize, Serialize};

pub use alias::{quote_ident, resolve_aliases};
pub use dialect::top_to_limit;
pub use into::{extract_into, Extracted};
pub use screen::{default_rules, CompiledRules, ScreenRule, Verdict};

use crate::error::{Error, Result};
use crate::model::{GroupRecord, PublishedTable, UserRecord};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewriteResult {
    pub clean_sql: String,
    /// (MyDB physical name, table) when the query wrote `INTO MyDB.<table>`.
    pub dest_table: Option<(String, String)>,
    pub referenced_contexts: Vec<String>,
    pub screened: bool,
}

/// Everything the rewriter needs to know about the caller.
pub struct RewriteEnv<'a> {
    pub user: &'a UserRecord,
    pub memberships: &'a [GroupRecord],
    pub published: &'a [PublishedTable],
    pub known_contexts: &'a [String],
    pub rules: &'a [ScreenRule],
}

/// True when the query mentions `MyDB.` outside literals, or writes INTO
/// MyDB; the caller must provision the user's MyDB first.
pub fn needs_mydb(query: &str) -> bool {
    let tokens = tokenizer::tokenize(query);
    tokens.windows(2).any(|w| w[0].is_word("mydb") && w[1].is_punct('.'))
}

/// Screen, extract the destination, then resolve aliases.
pub fn rewrite(query: &str, env: &RewriteEnv<'_>) -> Result<RewriteResult> {
    screen::screen(query, env.rules).into_result()?;
    let Extracted { clean_sql, dest } = extract_into(query)?;
    let mut result =
        resolve_aliases(&clean_sql, env.user, env.memberships, env.published, env.known_contexts)?;
    if let Some(table) = dest {
        let mydb = env.user.mydb_name.clone().ok_or_else(|| {
            Error::Invalid(format!("MyDB for user {} is not provisioned", env.user.ws_id))
        })?;
        result.dest_table = Some((mydb, table));
    }
    result.screened = true;
    Ok(result)
}
