//! The single dialect boundary between submitted SQL and the embedded engine.
//!
//! Users write `SELECT TOP n ...`; the engine wants `... LIMIT n`. Each
//! `SELECT [DISTINCT|ALL] TOP n` loses its `TOP n` and gains a `LIMIT n` at
//! the end of its own scope (the closing parenthesis of a subquery, or the
//! end of the statement), unless that scope already has a LIMIT.

use super::tokenizer::{next_significant, tokenize, TokenKind};

struct OpenTop {
    depth: i32,
    limit: String,
    has_limit: bool,
}

pub fn top_to_limit(sql: &str) -> String {
    let tokens = tokenize(sql);
    // (byte offset, text to insert) and byte ranges to drop
    let mut inserts: Vec<(usize, String)> = Vec::new();
    let mut drops: Vec<(usize, usize)> = Vec::new();
    let mut open: Vec<OpenTop> = Vec::new();
    let mut depth = 0i32;
    let mut last_significant_end = 0usize;

    let mut i = 0;
    while i < tokens.len() {
        let t = tokens[i];
        if t.is_punct('(') {
            depth += 1;
        } else if t.is_punct(')') {
            close_scope(&mut open, depth, last_significant_end, &mut inserts);
            depth -= 1;
        } else if t.is_word("limit") {
            if let Some(o) = open.iter_mut().rev().find(|o| o.depth == depth) {
                o.has_limit = true;
            }
        } else if t.is_word("select") {
            let mut j = next_significant(&tokens, i + 1);
            if let Some(k) = j.filter(|&k| tokens[k].is_word("distinct") || tokens[k].is_word("all")) {
                j = next_significant(&tokens, k + 1);
            }
            if let Some(top_at) = j.filter(|&k| tokens[k].is_word("top")) {
                if let Some((limit, end_idx)) = top_count(&tokens, top_at) {
                    let mut drop_end = tokens[end_idx].end();
                    if let Some(ws) = tokens.get(end_idx + 1).filter(|w| w.kind == TokenKind::Whitespace) {
                        drop_end = ws.end();
                    }
                    drops.push((tokens[top_at].start, drop_end));
                    open.push(OpenTop { depth, limit, has_limit: false });
                    last_significant_end = tokens[end_idx].end();
                    i = end_idx + 1;
                    continue;
                }
            }
        }
        if !t.is_trivia() && !(depth == 0 && t.is_punct(';')) {
            last_significant_end = t.end();
        }
        i += 1;
    }
    close_scope(&mut open, 0, last_significant_end, &mut inserts);

    if drops.is_empty() {
        return sql.to_string();
    }
    let mut out = String::with_capacity(sql.len() + 16);
    let mut pos = 0;
    let mut edits: Vec<(usize, usize, String)> = drops
        .into_iter()
        .map(|(s, e)| (s, e, String::new()))
        .chain(inserts.into_iter().map(|(at, text)| (at, at, text)))
        .collect();
    edits.sort_by_key(|e| (e.0, e.1));
    for (s, e, text) in edits {
        if s < pos {
            continue;
        }
        out.push_str(&sql[pos..s]);
        out.push_str(&text);
        pos = e;
    }
    out.push_str(&sql[pos..]);
    out
}

fn close_scope(open: &mut Vec<OpenTop>, depth: i32, at: usize, inserts: &mut Vec<(usize, String)>) {
    while open.last().is_some_and(|o| o.depth >= depth) {
        let o = open.pop().unwrap();
        if !o.has_limit {
            inserts.push((at, format!(" LIMIT {}", o.limit)));
        }
    }
}

/// Reads `TOP n` or `TOP (n)`; returns the count text and last token index.
fn top_count(tokens: &[super::tokenizer::Token<'_>], top_at: usize) -> Option<(String, usize)> {
    let k = next_significant(tokens, top_at + 1)?;
    if tokens[k].kind == TokenKind::Number {
        return Some((tokens[k].text.to_string(), k));
    }
    if tokens[k].is_punct('(') {
        let n = next_significant(tokens, k + 1)?;
        let close = next_significant(tokens, n + 1)?;
        if tokens[n].kind == TokenKind::Number && tokens[close].is_punct(')') {
            return Some((tokens[n].text.to_string(), close));
        }
    }
    None
}
