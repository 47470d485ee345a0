//! Parser for free-text dialogue listings returned by the chat backend.
//!
//! Accepted shape:
//!
//! * Items start with `N.` / `N)` or a `Conversation N:`-style header. Without
//!   any numbering, items are blank-line separated paragraphs and every `A:`
//!   tag inside a paragraph opens a new item.
//! * Speaker tags `A:`, `Person A:`, `B:`, `Person B:` (any case, optionally
//!   bold or bulleted).
//! * The background is introduced by `Background:` (optionally inside
//!   parentheses) or is the untagged text after B's line.
//!
//! Items missing a field are dropped with a warning. Requests containing a
//! question mark are kept with a warning. For the action route the reflected
//! action is always the seed action; a missing `B:` line is fine there since
//! the action prompt only asks for A's side.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompt::{PromptVariant, Route};
use crate::scenario::{clean_text, normalize_scenario, slug, Scenario};

static ITEM_MARKER: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"(?i)^\s*(?:[#>]+\s*)?(?:\*\*)?\s*(?:(?:conversation|example|dialogue|scenario)\s*#?\s*(\d{1,3})\s*(?:\*\*)?\s*[:.)\-]?|(\d{1,3})\s*[.)](?:\s|\*\*|$))(?:\*\*)?\s*",
    )
    .expect("item marker regex")
});

static BULLET: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\s*[-\u{2022}]\s+|^\s*\*\s+").expect("bullet regex"));

static TAG: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r#"(?i)(?:^|[\s(\[*"'])\**\s*(?P<tag>person\s*a|person\s*b|speaker\s*a|speaker\s*b|a|b|background(?:\s+(?:description|objects?|setting))?|(?:related\s+)?objects?\s+in\s+the\s+background)\s*\**\s*[:：]\s*\**"#,
    )
    .expect("speaker tag regex")
});

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Tag {
    A,
    B,
    Background,
}

fn classify(tag: &str) -> Tag {
    let t = tag.to_ascii_lowercase();
    let last = t.trim().chars().last().unwrap_or(' ');
    if t.contains("background") {
        Tag::Background
    } else if last == 'a' {
        Tag::A
    } else {
        Tag::B
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseWarning {
    /// 1-based line in the raw text where the offending item starts.
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseReport {
    pub scenarios: Vec<Scenario>,
    pub expected_count: usize,
    pub warnings: Vec<ParseWarning>,
}

#[derive(Debug, Error)]
pub enum ParseError {
    #[error("backend output is empty")]
    EmptyInput,
    #[error("expected_count must be at least 1")]
    InvalidExpectedCount,
    #[error("no scenario could be parsed ({} warning(s))", warnings.len())]
    NoScenarios { warnings: Vec<ParseWarning> },
}

/// Everything the parser needs besides the raw text.
#[derive(Debug, Clone)]
pub struct ParseRequest {
    pub route: Route,
    pub seed_value: String,
    pub variant: PromptVariant,
    pub expected_count: usize,
    /// Scenario ids become `<id_prefix>-NNN`.
    pub id_prefix: String,
}

impl ParseRequest {
    pub fn new(route: Route, seed_value: &str, expected_count: usize) -> Self {
        Self::with_variant(route, seed_value, PromptVariant::default(), expected_count)
    }

    pub fn with_variant(
        route: Route,
        seed_value: &str,
        variant: PromptVariant,
        expected_count: usize,
    ) -> Self {
        let mut id_prefix = format!("{}-{}", route, slug(seed_value));
        if route == Route::Place && variant != PromptVariant::default() {
            id_prefix.push('-');
            id_prefix.push_str(variant.as_str());
        }
        Self {
            route,
            seed_value: seed_value.trim().to_string(),
            variant,
            expected_count,
            id_prefix,
        }
    }

    pub fn id_prefix(mut self, prefix: impl Into<String>) -> Self {
        self.id_prefix = prefix.into();
        self
    }
}

/// Parses with default variant and id prefix.
pub fn parse_scenarios(
    raw: &str,
    route: Route,
    seed_value: &str,
    expected_count: usize,
) -> Result<ParseReport, ParseError> {
    parse_with(raw, &ParseRequest::new(route, seed_value, expected_count))
}

#[derive(Debug)]
struct RawItem {
    number: usize,
    line: usize,
    text: String,
}

#[derive(Debug, Default)]
struct Fields {
    request: Option<String>,
    action: Option<String>,
    background: Option<String>,
    tagged: bool,
}

fn strip_bullet(line: &str) -> &str {
    match BULLET.find(line) {
        Some(m) => &line[m.end()..],
        None => line,
    }
}

fn split_numbered(lines: &[&str]) -> Vec<RawItem> {
    let mut items: Vec<RawItem> = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        if let Some(caps) = ITEM_MARKER.captures(line) {
            let number = caps
                .get(1)
                .or_else(|| caps.get(2))
                .and_then(|m| m.as_str().parse().ok())
                .unwrap_or(items.len() + 1);
            let rest = &line[caps.get(0).map_or(0, |m| m.end())..];
            items.push(RawItem {
                number,
                line: i + 1,
                text: strip_bullet(rest).to_string(),
            });
        } else if let Some(item) = items.last_mut() {
            item.text.push('\n');
            item.text.push_str(strip_bullet(line));
        }
    }
    items
}

fn split_paragraphs(lines: &[&str]) -> Vec<RawItem> {
    // (first line number, text)
    let mut paragraphs: Vec<(usize, String)> = Vec::new();
    let mut current: Option<(usize, String)> = None;
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            if let Some(p) = current.take() {
                paragraphs.push(p);
            }
            continue;
        }
        let line = strip_bullet(line);
        match current.as_mut() {
            Some((_, text)) => {
                text.push('\n');
                text.push_str(line);
            }
            None => current = Some((i + 1, line.to_string())),
        }
    }
    if let Some(p) = current.take() {
        paragraphs.push(p);
    }

    let mut items = Vec::new();
    for (start_line, text) in paragraphs {
        let a_starts: Vec<usize> = TAG
            .captures_iter(&text)
            .filter(|c| classify(&c["tag"]) == Tag::A)
            .map(|c| c.get(0).expect("whole match").start())
            .collect();
        if a_starts.len() <= 1 {
            items.push(RawItem {
                number: 0,
                line: start_line,
                text,
            });
            continue;
        }
        let mut bounds = a_starts.clone();
        bounds[0] = 0;
        bounds.push(text.len());
        for w in bounds.windows(2) {
            let chunk = &text[w[0]..w[1]];
            if chunk.trim().is_empty() {
                continue;
            }
            items.push(RawItem {
                number: 0,
                line: start_line + text[..w[0]].matches('\n').count(),
                text: chunk.to_string(),
            });
        }
    }
    items
}

fn trim_segment(s: &str) -> &str {
    s.trim_end_matches(|c: char| c.is_whitespace() || matches!(c, '(' | '[' | '*'))
}

fn strip_unbalanced_close(s: &str) -> String {
    let mut t = s.trim().to_string();
    while (t.ends_with(')') && t.matches(')').count() > t.matches('(').count())
        || (t.ends_with(']') && t.matches(']').count() > t.matches('[').count())
    {
        t.pop();
        t = t.trim_end().to_string();
    }
    t
}

fn non_empty(s: &str) -> Option<String> {
    let c = clean_text(s);
    (!c.is_empty()).then_some(c)
}

fn extract(text: &str) -> Fields {
    let tags: Vec<(Tag, usize, usize)> = TAG
        .captures_iter(text)
        .map(|c| {
            let whole = c.get(0).expect("whole match");
            (classify(&c["tag"]), whole.start(), whole.end())
        })
        .collect();
    let mut fields = Fields {
        tagged: !tags.is_empty(),
        ..Fields::default()
    };
    let mut b_rest: Option<String> = None;
    for (i, (tag, _, end)) in tags.iter().enumerate() {
        let stop = tags.get(i + 1).map_or(text.len(), |t| t.1);
        let segment = trim_segment(&text[*end..stop]);
        match tag {
            Tag::A if fields.request.is_none() => fields.request = non_empty(segment),
            Tag::B if fields.action.is_none() => {
                let segment = segment.trim_start();
                let (first, rest) = segment.split_once('\n').unwrap_or((segment, ""));
                fields.action = non_empty(first);
                b_rest = non_empty(rest);
            }
            Tag::Background if fields.background.is_none() => {
                fields.background = non_empty(&strip_unbalanced_close(segment));
            }
            _ => {}
        }
    }
    if fields.background.is_none() {
        fields.background = b_rest;
    }
    fields
}

fn loosely_equal(a: &str, b: &str) -> bool {
    let norm = |s: &str| {
        clean_text(s)
            .trim_end_matches(|c: char| c.is_ascii_punctuation())
            .to_lowercase()
    };
    norm(a) == norm(b)
}

/// Parses one raw backend response into scenarios.
pub fn parse_with(raw: &str, req: &ParseRequest) -> Result<ParseReport, ParseError> {
    if raw.trim().is_empty() {
        return Err(ParseError::EmptyInput);
    }
    if req.expected_count == 0 {
        return Err(ParseError::InvalidExpectedCount);
    }
    let lines: Vec<&str> = raw.lines().collect();
    let numbered = lines.iter().any(|l| ITEM_MARKER.is_match(l));
    let items = if numbered {
        split_numbered(&lines)
    } else {
        split_paragraphs(&lines)
    };

    let mut warnings = Vec::new();
    let mut candidates: Vec<Candidate> = Vec::new();
    let mut pending_background: Option<usize> = None;

    for item in items {
        let fields = extract(&item.text);
        if !fields.tagged {
            if numbered {
                candidates.push(Candidate {
                    number: item.number,
                    line: item.line,
                    fields,
                });
            } else if let Some(idx) = pending_background.take() {
                // untagged paragraph right after a dialogue that lacks a background
                candidates[idx].fields.background = non_empty(&item.text);
            }
            continue;
        }
        let number = if numbered {
            item.number
        } else {
            candidates.len() + 1
        };
        pending_background = (!numbered && fields.background.is_none()).then_some(candidates.len());
        candidates.push(Candidate {
            number,
            line: item.line,
            fields,
        });
    }

    let found = candidates.len();
    let mut scenarios = Vec::new();
    for Candidate {
        number,
        line,
        fields,
    } in candidates
    {
        if !fields.tagged {
            warnings.push(ParseWarning {
                line,
                message: format!("item {number}: no speaker tags found, dropped"),
            });
            continue;
        }
        let action = match req.route {
            Route::Place => fields.action,
            Route::Action => {
                if let Some(parsed) = &fields.action {
                    if !loosely_equal(parsed, &req.seed_value) {
                        warnings.push(ParseWarning {
                            line,
                            message: format!(
                                "item {number}: reflected action \"{parsed}\" differs from the seed action, seed action used"
                            ),
                        });
                    }
                }
                non_empty(&req.seed_value)
            }
        };
        let mut missing = Vec::new();
        if fields.request.is_none() {
            missing.push("request");
        }
        if action.is_none() {
            missing.push("action");
        }
        if fields.background.is_none() {
            missing.push("background");
        }
        if !missing.is_empty() {
            warnings.push(ParseWarning {
                line,
                message: format!("item {number}: missing {}, dropped", missing.join(", ")),
            });
            continue;
        }
        let request = fields.request.expect("checked above");
        if request.contains('?') || request.contains('\u{FF1F}') {
            warnings.push(ParseWarning {
                line,
                message: format!("item {number}: request contains a question mark"),
            });
        }
        let scenario = Scenario {
            id: format!("{}-{:03}", req.id_prefix, scenarios.len() + 1),
            route: req.route,
            seed_value: req.seed_value.clone(),
            request,
            action: action.expect("checked above"),
            background: fields.background.expect("checked above"),
            variant: req.variant,
        };
        scenarios.push(normalize_scenario(&scenario));
    }

    if found != req.expected_count {
        warnings.push(ParseWarning {
            line: 1,
            message: if found < req.expected_count {
                format!("found {found} item(s), expected {}", req.expected_count)
            } else {
                format!(
                    "found {found} item(s), expected {}; extra items kept",
                    req.expected_count
                )
            },
        });
    }

    if scenarios.is_empty() {
        return Err(ParseError::NoScenarios { warnings });
    }
    Ok(ParseReport {
        scenarios,
        expected_count: req.expected_count,
        warnings,
    })
}

struct Candidate {
    number: usize,
    line: usize,
    fields: Fields,
}
