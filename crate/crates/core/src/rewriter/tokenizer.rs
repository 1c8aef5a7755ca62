//! A lexical tokenizer for SQL text.
//!
//! It knows just enough to keep rewrites out of string literals, quoted
//! identifiers and comments. Concatenating every token's text reproduces the
//! input exactly.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Whitespace,
    LineComment,
    BlockComment,
    /// `'...'` string literal.
    Str,
    /// `"..."`, `[...]` or `` `...` `` identifier.
    QuotedIdent,
    Word,
    Number,
    Punct,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Token<'a> {
    pub kind: TokenKind,
    pub text: &'a str,
    /// Byte offset of `text` in the input.
    pub start: usize,
}

impl<'a> Token<'a> {
    pub fn end(&self) -> usize {
        self.start + self.text.len()
    }

    pub fn is_trivia(&self) -> bool {
        matches!(
            self.kind,
            TokenKind::Whitespace | TokenKind::LineComment | TokenKind::BlockComment
        )
    }

    pub fn is_word(&self, w: &str) -> bool {
        self.kind == TokenKind::Word && self.text.eq_ignore_ascii_case(w)
    }

    pub fn is_punct(&self, c: char) -> bool {
        self.kind == TokenKind::Punct && self.text.len() == c.len_utf8() && self.text.starts_with(c)
    }

    /// Identifier value: the word itself, or a quoted identifier with its
    /// delimiters stripped and doubled quotes collapsed.
    pub fn ident(&self) -> Option<String> {
        match self.kind {
            TokenKind::Word => Some(self.text.to_string()),
            TokenKind::QuotedIdent => {
                let inner = &self.text[1..self.text.len().saturating_sub(1).max(1)];
                Some(match self.text.as_bytes()[0] {
                    b'"' => inner.replace("\"\"", "\""),
                    b'`' => inner.replace("``", "`"),
                    _ => inner.replace("]]", "]"),
                })
            }
            _ => None,
        }
    }
}

fn is_word_start(c: char) -> bool {
    c.is_alphabetic() || c == '_' || c == '@' || c == '#'
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_' || c == '$' || c == '@' || c == '#'
}

pub fn tokenize(sql: &str) -> Vec<Token<'_>> {
    let bytes = sql.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < sql.len() {
        let rest = &sql[i..];
        let c = rest.chars().next().unwrap();
        let (kind, len) = if c.is_whitespace() {
            let n = rest.find(|ch: char| !ch.is_whitespace()).unwrap_or(rest.len());
            (TokenKind::Whitespace, n)
        } else if rest.starts_with("--") {
            (TokenKind::LineComment, rest.find('\n').unwrap_or(rest.len()))
        } else if rest.starts_with("/*") {
            (TokenKind::BlockComment, rest[2..].find("*/").map_or(rest.len(), |p| p + 4))
        } else if c == '\'' {
            (TokenKind::Str, quoted_len(bytes, i, b'\''))
        } else if c == '"' {
            (TokenKind::QuotedIdent, quoted_len(bytes, i, b'"'))
        } else if c == '`' {
            (TokenKind::QuotedIdent, quoted_len(bytes, i, b'`'))
        } else if c == '[' {
            (TokenKind::QuotedIdent, quoted_len(bytes, i, b']'))
        } else if c.is_ascii_digit()
            || (c == '.' && rest[1..].starts_with(|d: char| d.is_ascii_digit()))
        {
            (TokenKind::Number, number_len(rest))
        } else if is_word_start(c) {
            let n = rest
                .char_indices()
                .find(|&(_, ch)| !is_word_char(ch))
                .map_or(rest.len(), |(p, _)| p);
            (TokenKind::Word, n)
        } else {
            (TokenKind::Punct, c.len_utf8())
        };
        out.push(Token { kind, text: &sql[i..i + len], start: i });
        i += len;
    }
    out
}

/// Length of a delimited run starting at `start`, where a doubled closing
/// delimiter is an escape. Unterminated runs extend to the end.
fn quoted_len(bytes: &[u8], start: usize, close: u8) -> usize {
    let mut j = start + 1;
    while j < bytes.len() {
        if bytes[j] == close {
            if bytes.get(j + 1) == Some(&close) {
                j += 2;
                continue;
            }
            return j + 1 - start;
        }
        j += 1;
    }
    bytes.len() - start
}

fn number_len(s: &str) -> usize {
    let b = s.as_bytes();
    let mut j = 0;
    while j < b.len() && (b[j].is_ascii_digit() || b[j] == b'.') {
        j += 1;
    }
    if j < b.len() && (b[j] == b'e' || b[j] == b'E') {
        let mut k = j + 1;
        if k < b.len() && (b[k] == b'+' || b[k] == b'-') {
            k += 1;
        }
        if k < b.len() && b[k].is_ascii_digit() {
            while k < b.len() && b[k].is_ascii_digit() {
                k += 1;
            }
            j = k;
        }
    }
    j
}

/// Index of the next non-trivia token at or after `from`.
pub fn next_significant(tokens: &[Token<'_>], from: usize) -> Option<usize> {
    (from..tokens.len()).find(|&k| !tokens[k].is_trivia())
}
