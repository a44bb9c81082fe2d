//! Structured extraction from free-form reasoner responses.
//!
//! Responses follow the shape of the prompt exemplars:
//!
//! ```text
//! Reasoning: "..."
//! Target Objects: ["person", "the person's shadow"]
//! ```
//!
//! Live models drift from that shape, so the default list grammar accepts
//! single or double (or curly) quotes, bare items, trailing commas and prose
//! around the list. [`ListGrammar::Strict`] demands a JSON string array.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const REASONING_MARKER: &str = "Reasoning:";
pub const TARGET_MARKER: &str = "Target Objects:";
pub const CORRECTION_MARKER: &str = "Objects to be removed:";
pub const TARGET_LINE_MARKER: &str = "Target:";
pub const ELEMENTS_MARKER: &str = "Elements:";
pub const KEEP_MARKER: &str = "Remove:";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("malformed response: {0}")]
    MalformedResponse(String),
}

fn malformed(msg: impl Into<String>) -> ParseError {
    ParseError::MalformedResponse(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ListGrammar {
    #[default]
    Tolerant,
    Strict,
}

/// Reasoning plus the consolidated list of targets and associated elements.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemovalPlan {
    pub reasoning: String,
    pub labels: Vec<String>,
}

impl RemovalPlan {
    pub fn new(reasoning: impl Into<String>, labels: Vec<String>) -> Self {
        Self {
            reasoning: reasoning.into(),
            labels,
        }
    }
}

/// Examiner output. An empty list means the edit matches the description.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrectionList {
    pub reasoning: String,
    pub labels: Vec<String>,
}

impl CorrectionList {
    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

pub fn parse_analyzer_response(text: &str) -> Result<RemovalPlan, ParseError> {
    parse_analyzer_response_with(text, ListGrammar::Tolerant)
}

pub fn parse_analyzer_response_with(
    text: &str,
    grammar: ListGrammar,
) -> Result<RemovalPlan, ParseError> {
    let target_at = rfind_ci(text, TARGET_MARKER)
        .ok_or_else(|| malformed(format!("missing `{TARGET_MARKER}` marker")))?;
    let reasoning_at = rfind_ci(&text[..target_at], REASONING_MARKER)
        .ok_or_else(|| malformed(format!("missing `{REASONING_MARKER}` marker")))?;
    let reasoning = strip_quotes(&text[reasoning_at + REASONING_MARKER.len()..target_at]);
    let labels = parse_list(&text[target_at + TARGET_MARKER.len()..], grammar)?;
    Ok(RemovalPlan {
        reasoning,
        labels: normalize_labels(&labels),
    })
}

pub fn parse_examiner_response(text: &str) -> Result<CorrectionList, ParseError> {
    parse_examiner_response_with(text, ListGrammar::Tolerant)
}

pub fn parse_examiner_response_with(
    text: &str,
    grammar: ListGrammar,
) -> Result<CorrectionList, ParseError> {
    let marker_at = rfind_ci(text, CORRECTION_MARKER)
        .ok_or_else(|| malformed(format!("missing `{CORRECTION_MARKER}` marker")))?;
    let reasoning = rfind_ci(&text[..marker_at], REASONING_MARKER)
        .map(|at| strip_quotes(&text[at + REASONING_MARKER.len()..marker_at]))
        .unwrap_or_default();
    let labels = parse_list(&text[marker_at + CORRECTION_MARKER.len()..], grammar)?;
    Ok(CorrectionList {
        reasoning,
        labels: normalize_labels(&labels),
    })
}

/// Parses the bracketed list following the last occurrence of `marker`.
pub fn parse_list_after(text: &str, marker: &str) -> Result<Vec<String>, ParseError> {
    let at =
        rfind_ci(text, marker).ok_or_else(|| malformed(format!("missing `{marker}` marker")))?;
    parse_list(&text[at + marker.len()..], ListGrammar::Tolerant)
}

/// Reads a `Target: <name>` line, as produced by the target-identification step.
pub fn parse_target_line(text: &str) -> Result<String, ParseError> {
    let line = text
        .lines()
        .rev()
        .map(str::trim)
        .find(|l| starts_with_ci(l, TARGET_LINE_MARKER))
        .ok_or_else(|| malformed(format!("missing `{TARGET_LINE_MARKER}` line")))?;
    let name = strip_quotes(&line[TARGET_LINE_MARKER.len()..]);
    let name = name.trim_end_matches(['.', ',', ';']).trim();
    if name.is_empty() {
        return Err(malformed("empty target name"));
    }
    Ok(collapse_ws(name))
}

/// Trims, collapses whitespace, drops empties and removes duplicates that
/// differ only in case or a leading article. First surface form wins.
pub fn normalize_labels(labels: &[String]) -> Vec<String> {
    let mut seen = std::collections::HashSet::new();
    labels
        .iter()
        .map(|l| collapse_ws(l))
        .filter(|l| !l.is_empty())
        .filter(|l| seen.insert(label_key(l)))
        .collect()
}

/// Comparison key used for label deduplication and name matching.
pub fn label_key(label: &str) -> String {
    let lower = collapse_ws(label).to_lowercase();
    for article in ["the ", "a ", "an "] {
        if let Some(rest) = lower.strip_prefix(article) {
            return rest.to_string();
        }
    }
    lower
}

/// `["a", "b"]`, with JSON string escaping.
pub fn format_label_list(labels: &[String]) -> String {
    serde_json::to_string(labels)
        .expect("string lists always serialize")
        .replace("\",\"", "\", \"")
}

pub fn format_analyzer_response(plan: &RemovalPlan) -> String {
    format!(
        "{REASONING_MARKER} \"{}\"\n{TARGET_MARKER} {}",
        plan.reasoning,
        format_label_list(&plan.labels)
    )
}

pub fn format_examiner_response(list: &CorrectionList) -> String {
    format!(
        "{REASONING_MARKER} \"{}\"\n{CORRECTION_MARKER} {}",
        list.reasoning,
        format_label_list(&list.labels)
    )
}

fn collapse_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn starts_with_ci(s: &str, prefix: &str) -> bool {
    s.len() >= prefix.len()
        && s.is_char_boundary(prefix.len())
        && s[..prefix.len()].eq_ignore_ascii_case(prefix)
}

/// Byte offset of the last case-insensitive occurrence of an ASCII needle.
fn rfind_ci(haystack: &str, needle: &str) -> Option<usize> {
    let h = haystack.as_bytes();
    let n = needle.as_bytes();
    if n.len() > h.len() {
        return None;
    }
    (0..=h.len() - n.len())
        .rev()
        .find(|&i| h[i..i + n.len()].eq_ignore_ascii_case(n))
}

fn strip_quotes(s: &str) -> String {
    let t = s.trim();
    const PAIRS: [(&str, &str); 5] = [
        ("\"", "\""),
        ("'", "'"),
        ("\u{201c}", "\u{201d}"),
        ("``", "''"),
        ("\u{2018}", "\u{2019}"),
    ];
    for (open, close) in PAIRS {
        if t.len() >= open.len() + close.len() && t.starts_with(open) && t.ends_with(close) {
            return t[open.len()..t.len() - close.len()].trim().to_string();
        }
    }
    t.to_string()
}

fn parse_list(after_marker: &str, grammar: ListGrammar) -> Result<Vec<String>, ParseError> {
    match grammar {
        ListGrammar::Strict => parse_list_strict(after_marker),
        ListGrammar::Tolerant => parse_list_tolerant(after_marker),
    }
}

fn parse_list_strict(after_marker: &str) -> Result<Vec<String>, ParseError> {
    let line = after_marker.lines().next().unwrap_or("").trim();
    serde_json::from_str::<Vec<String>>(line)
        .map_err(|e| malformed(format!("strict list grammar: {e}")))
}

fn closing_quote(open: char) -> Option<char> {
    match open {
        '"' => Some('"'),
        '\'' => Some('\''),
        '\u{201c}' => Some('\u{201d}'),
        '\u{2018}' => Some('\u{2019}'),
        _ => None,
    }
}

fn parse_list_tolerant(after_marker: &str) -> Result<Vec<String>, ParseError> {
    let open = after_marker
        .find('[')
        .ok_or_else(|| malformed("no bracketed list after marker"))?;
    let chars: Vec<char> = after_marker[open + 1..].chars().collect();
    let mut items = Vec::new();
    let mut i = 0;
    loop {
        while i < chars.len() && (chars[i].is_whitespace() || chars[i] == ',') {
            i += 1;
        }
        if i >= chars.len() {
            return Err(malformed("unterminated list"));
        }
        if chars[i] == ']' {
            return Ok(items);
        }
        if let Some(close) = closing_quote(chars[i]) {
            // A quote only closes the item when followed by `,` or `]`, so
            // apostrophes inside single-quoted names survive.
            let mut item = String::new();
            let mut j = i + 1;
            let mut done = false;
            while j < chars.len() {
                let c = chars[j];
                if c == '\\' && j + 1 < chars.len() {
                    item.push(chars[j + 1]);
                    j += 2;
                    continue;
                }
                if c == close {
                    let mut k = j + 1;
                    while k < chars.len() && chars[k].is_whitespace() {
                        k += 1;
                    }
                    if k >= chars.len() || chars[k] == ',' || chars[k] == ']' {
                        i = k;
                        done = true;
                        break;
                    }
                }
                item.push(c);
                j += 1;
            }
            if !done {
                return Err(malformed("unterminated quoted item"));
            }
            items.push(item);
        } else {
            let start = i;
            while i < chars.len() && chars[i] != ',' && chars[i] != ']' {
                i += 1;
            }
            let item: String = chars[start..i].iter().collect();
            items.push(item.trim().to_string());
        }
    }
}
