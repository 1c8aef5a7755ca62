use super::tokenizer::{next_significant, tokenize, Token, TokenKind};
use crate::error::{Error, Result};

/// Result of pulling the `INTO MyDB.<table>` clause out of a query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Extracted {
    pub clean_sql: String,
    pub dest: Option<String>,
}

/// Removes a `SELECT ... INTO MyDB.<table> FROM ...` destination clause.
///
/// The clause and the whitespace run after it are cut; every other byte is
/// kept. Destinations outside MyDB are refused.
pub fn extract_into(query: &str) -> Result<Extracted> {
    let tokens = tokenize(query);
    let Some(into_at) = find_select_into(&tokens) else {
        return Ok(Extracted { clean_sql: query.to_string(), dest: None });
    };

    let missing = || Error::MalformedInto("missing table name after INTO".into());
    let first = next_significant(&tokens, into_at + 1).ok_or_else(missing)?;
    let (parts, last) = qualified_name(&tokens, first).ok_or_else(missing)?;
    let target_text = &query[tokens[first].start..tokens[last].end()];
    if parts.len() != 2 || !parts[0].eq_ignore_ascii_case("mydb") {
        return Err(Error::MalformedInto(format!(
            "results must go to MyDB.<table>, not {target_text}"
        )));
    }

    let mut cut_start = tokens[into_at].start;
    let mut cut_end = tokens[last].end();
    match tokens.get(last + 1) {
        Some(t) if t.kind == TokenKind::Whitespace => cut_end = t.end(),
        _ => {
            if let Some(prev) = into_at.checked_sub(1).map(|p| &tokens[p]) {
                if prev.kind == TokenKind::Whitespace {
                    cut_start = prev.start;
                }
            }
        }
    }
    let mut clean_sql = String::with_capacity(query.len());
    clean_sql.push_str(&query[..cut_start]);
    clean_sql.push_str(&query[cut_end..]);
    Ok(Extracted { clean_sql, dest: Some(parts[1].clone()) })
}

/// Index of an INTO keyword that sits between a SELECT and its FROM at the
/// same nesting depth.
fn find_select_into(tokens: &[Token<'_>]) -> Option<usize> {
    let mut depth = 0i32;
    // depth at which a SELECT list is currently open
    let mut open_select: Vec<i32> = Vec::new();
    for (i, t) in tokens.iter().enumerate() {
        if t.is_punct('(') {
            depth += 1;
        } else if t.is_punct(')') {
            open_select.retain(|&d| d < depth);
            depth -= 1;
        } else if t.is_word("select") {
            open_select.push(depth);
        } else if t.is_word("from") {
            open_select.retain(|&d| d != depth);
        } else if t.is_word("into") && open_select.contains(&depth) {
            return Some(i);
        }
    }
    None
}

/// Parses `a.b.c` starting at the first significant token at or after
/// `from`. Returns the parts and the index of the last token consumed.
pub(crate) fn qualified_name(tokens: &[Token<'_>], from: usize) -> Option<(Vec<String>, usize)> {
    let mut i = next_significant(tokens, from)?;
    let mut parts = vec![tokens[i].ident()?];
    while tokens.get(i + 1).is_some_and(|t| t.is_punct('.')) {
        let name = tokens.get(i + 2)?.ident()?;
        parts.push(name);
        i += 2;
    }
    Some((parts, i))
}
