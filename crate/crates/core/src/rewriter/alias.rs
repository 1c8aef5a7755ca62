use super::tokenizer::{tokenize, Token, TokenKind};
use super::RewriteResult;
use crate::admin::is_plain_identifier;
use crate::error::{Error, Result};
use crate::model::{GroupRecord, PublishedTable, UserRecord};

/// Quotes `name` for SQL unless it is a plain identifier.
pub fn quote_ident(name: &str) -> String {
    if is_plain_identifier(name) {
        name.to_string()
    } else {
        format!("\"{}\"", name.replace('"', "\"\""))
    }
}

/// Translates `MyDB.<t>` and `GROUP.<g>.<t>` into physical database names.
///
/// Only bare words directly followed by `.` are rewritten, so literals,
/// comments and quoted identifiers pass through untouched. Every GROUP
/// reference must name a group the user belongs to and an alias published
/// there. `known_contexts` lets catalog qualifiers (`SDSS_DR3.galaxy`) be
/// reported in `referenced_contexts`.
pub fn resolve_aliases(
    clean_sql: &str,
    user: &UserRecord,
    memberships: &[GroupRecord],
    published: &[PublishedTable],
    known_contexts: &[String],
) -> Result<RewriteResult> {
    let tokens = tokenize(clean_sql);
    let mut out = String::with_capacity(clean_sql.len() + 16);
    let mut contexts: Vec<String> = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        let t = &tokens[i];
        let dotted = tokens.get(i + 1).is_some_and(|n| n.is_punct('.'));
        if t.kind == TokenKind::Word && dotted && t.text.eq_ignore_ascii_case("mydb") {
            let name = user.mydb_name.as_deref().ok_or_else(|| {
                Error::Invalid(format!("MyDB for user {} is not provisioned", user.ws_id))
            })?;
            out.push_str(name);
            i += 1;
            continue;
        }
        if t.kind == TokenKind::Word && dotted && t.text.eq_ignore_ascii_case("group") {
            let (replacement, consumed) =
                resolve_group(&tokens, i, user, memberships, published)?;
            out.push_str(&replacement);
            i += consumed;
            continue;
        }
        if t.kind == TokenKind::Word && dotted {
            if let Some(c) = known_contexts.iter().find(|c| c.eq_ignore_ascii_case(t.text)) {
                if !contexts.contains(c) {
                    contexts.push(c.clone());
                }
            }
        }
        out.push_str(t.text);
        i += 1;
    }
    Ok(RewriteResult {
        clean_sql: out,
        dest_table: None,
        referenced_contexts: contexts,
        screened: false,
    })
}

/// Resolves `GROUP . g . t` at `tokens[at]`; returns the replacement text and
/// the number of tokens it replaces.
fn resolve_group(
    tokens: &[Token<'_>],
    at: usize,
    user: &UserRecord,
    memberships: &[GroupRecord],
    published: &[PublishedTable],
) -> Result<(String, usize)> {
    let malformed = || Error::Invalid("GROUP references take the form GROUP.<group>.<table>".into());
    let group = tokens.get(at + 2).and_then(Token::ident).ok_or_else(malformed)?;
    if !tokens.get(at + 3).is_some_and(|t| t.is_punct('.')) {
        return Err(malformed());
    }
    let alias = tokens.get(at + 4).and_then(Token::ident).ok_or_else(malformed)?;

    let g = memberships
        .iter()
        .find(|g| g.group_id.eq_ignore_ascii_case(&group) && g.has_member(user.ws_id))
        .ok_or_else(|| Error::UnknownGroup(group.clone()))?;
    let p = published
        .iter()
        .find(|p| p.group_id.eq_ignore_ascii_case(&g.group_id) && p.alias.eq_ignore_ascii_case(&alias))
        .ok_or_else(|| Error::NotPublished(format!("GROUP.{group}.{alias}")))?;
    Ok((format!("{}.{}", p.mydb_name, quote_ident(&p.table)), 5))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{TargetId, Timestamp, WsId};

    fn user(id: i64) -> UserRecord {
        UserRecord {
            ws_id: WsId(id),
            password_hash: String::new(),
            email: None,
            notify: false,
            mydb_name: Some(crate::model::mydb_name_for(WsId(id))),
            mydb_target: Some(TargetId(1)),
        }
    }

    fn collab() -> (Vec<GroupRecord>, Vec<PublishedTable>) {
        let g = GroupRecord {
            group_id: "collab1".into(),
            name: "c".into(),
            owner: WsId(7),
            members: vec![WsId(7), WsId(42)],
        };
        let p = PublishedTable {
            group_id: "collab1".into(),
            publisher: WsId(7),
            alias: "candidates".into(),
            mydb_name: "mydb_000007".into(),
            table: "candidates".into(),
            published_at: Timestamp(0),
        };
        (vec![g], vec![p])
    }

    fn resolve(q: &str) -> Result<String> {
        let (g, p) = collab();
        resolve_aliases(q, &user(42), &g, &p, &["SDSS_DR3".into()]).map(|r| r.clean_sql)
    }

    #[test]
    fn mydb_prefix() {
        assert_eq!(resolve("SELECT * FROM MyDB.rgal").unwrap(), "SELECT * FROM mydb_000042.rgal");
    }

    #[test]
    fn group_prefix() {
        assert_eq!(
            resolve("SELECT * FROM GROUP.collab1.candidates").unwrap(),
            "SELECT * FROM mydb_000007.candidates"
        );
    }

    #[test]
    fn unpublished_alias() {
        assert!(matches!(
            resolve("SELECT * FROM GROUP.collab1.secret"),
            Err(Error::NotPublished(a)) if a == "GROUP.collab1.secret"
        ));
    }

    #[test]
    fn unknown_group() {
        assert!(matches!(resolve("SELECT * FROM GROUP.nope.t"), Err(Error::UnknownGroup(_))));
    }

    #[test]
    fn group_by_untouched() {
        let q = "SELECT r, COUNT(*) FROM galaxy GROUP BY r";
        assert_eq!(resolve(q).unwrap(), q);
    }

    #[test]
    fn literal_untouched() {
        let q = "SELECT 'MyDB.x', \"GROUP.y\" FROM t -- MyDB.z";
        assert_eq!(resolve(q).unwrap(), q);
    }

    #[test]
    fn contexts_reported() {
        let (g, p) = collab();
        let r = resolve_aliases(
            "SELECT * FROM sdss_dr3.galaxy g JOIN MyDB.t ON g.obj_id = t.id",
            &user(42),
            &g,
            &p,
            &["SDSS_DR3".into()],
        )
        .unwrap();
        assert_eq!(r.referenced_contexts, vec!["SDSS_DR3".to_string()]);
    }

    #[test]
    fn unprovisioned_mydb() {
        let mut u = user(1);
        u.mydb_name = None;
        assert!(resolve_aliases("SELECT * FROM MyDB.t", &u, &[], &[], &[]).is_err());
    }
}
