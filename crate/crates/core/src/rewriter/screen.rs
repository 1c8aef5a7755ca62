//! Regex screening of submitted queries.
//!
//! Rules live in the admin database and are matched case-insensitively in
//! `rule_id` order; the first match rejects. Patterns use the `fancy-regex`
//! dialect (lookaround supported, backreferences never required).

use fancy_regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScreenRule {
    pub rule_id: i64,
    pub pattern: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    Reject { rule_id: i64, message: String },
}

impl Verdict {
    pub fn into_result(self) -> Result<()> {
        match self {
            Verdict::Pass => Ok(()),
            Verdict::Reject { rule_id, message } => Err(Error::Rejected { rule_id, message }),
        }
    }
}

pub fn default_rules() -> Vec<ScreenRule> {
    let rule = |rule_id, pattern: &str, message: &str| ScreenRule {
        rule_id,
        pattern: pattern.into(),
        message: message.into(),
    };
    vec![
        rule(1, r"\bexec\b.*\bsp_", "executing system stored procedures is not allowed"),
        rule(
            2,
            r"\bdrop\s+table\s+(?!(if\s+exists\s+)?mydb\.)",
            "dropping tables outside MyDB is not allowed",
        ),
        rule(3, r"\bshutdown\b", "shutdown is not allowed"),
        rule(4, r";\s*--", "suspicious comment after a statement terminator"),
    ]
}

pub fn compile(rule: &ScreenRule) -> Result<Regex> {
    Regex::new(&format!("(?i){}", rule.pattern))
        .map_err(|e| Error::Invalid(format!("rule {}: {e}", rule.rule_id)))
}

/// A rule set compiled once, for screening many queries.
pub struct CompiledRules {
    rules: Vec<(ScreenRule, Regex)>,
}

impl CompiledRules {
    pub fn new(rules: &[ScreenRule]) -> Result<Self> {
        let mut sorted = rules.to_vec();
        sorted.sort_by_key(|r| r.rule_id);
        let rules = sorted
            .into_iter()
            .map(|r| compile(&r).map(|re| (r, re)))
            .collect::<Result<_>>()?;
        Ok(CompiledRules { rules })
    }

    pub fn screen(&self, query: &str) -> Verdict {
        for (rule, re) in &self.rules {
            // a pattern that blows its backtracking budget counts as a match
            if re.is_match(query).unwrap_or(true) {
                return Verdict::Reject { rule_id: rule.rule_id, message: rule.message.clone() };
            }
        }
        Verdict::Pass
    }
}

/// Screens `query` against `rules`. Patterns that fail to compile are
/// skipped; the admin store refuses to save them in the first place.
pub fn screen(query: &str, rules: &[ScreenRule]) -> Verdict {
    let mut sorted: Vec<&ScreenRule> = rules.iter().collect();
    sorted.sort_by_key(|r| r.rule_id);
    for rule in sorted {
        match compile(rule) {
            Ok(re) if re.is_match(query).unwrap_or(true) => {
                return Verdict::Reject { rule_id: rule.rule_id, message: rule.message.clone() }
            }
            Ok(_) => {}
            Err(e) => tracing::warn!("skipping screening rule: {e}"),
        }
    }
    Verdict::Pass
}
