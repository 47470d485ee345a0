//! The parsed scenario record and its line-delimited file format.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompt::{PromptVariant, Route};

/// One generated dialogue: an ambiguous request, the robot's reflected
/// action and a description of the surroundings.
///
/// Field order matches the scenario file's key order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scenario {
    pub id: String,
    pub route: Route,
    /// Location name or action text the prompt was built from.
    pub seed_value: String,
    pub request: String,
    pub action: String,
    pub background: String,
    pub variant: PromptVariant,
}

#[derive(Debug, Error)]
pub enum ScenarioFileError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {source}")]
    Parse {
        path: String,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

const QUOTES: &[char] = &[
    '"', '\'', '`', '\u{201C}', '\u{201D}', '\u{2018}', '\u{2019}', '\u{00AB}', '\u{00BB}',
];

/// Collapses runs of whitespace and strips quote characters (and
/// whitespace) from both ends until neither end changes.
pub fn clean_text(s: &str) -> String {
    let mut t = s;
    loop {
        let next = t.trim().trim_matches(QUOTES);
        if next.len() == t.len() {
            break;
        }
        t = next;
    }
    t.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Returns `s` with its text fields cleaned; `id`, `route`, `variant` and
/// `seed_value` are left alone.
pub fn normalize_scenario(s: &Scenario) -> Scenario {
    Scenario {
        id: s.id.clone(),
        route: s.route,
        seed_value: s.seed_value.clone(),
        request: clean_text(&s.request),
        action: clean_text(&s.action),
        background: clean_text(&s.background),
        variant: s.variant,
    }
}

/// Lower-case ASCII slug: runs of non-alphanumerics become one `-`.
pub fn slug(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut dash = false;
    for c in s.chars() {
        if c.is_ascii_alphanumeric() {
            if dash && !out.is_empty() {
                out.push('-');
            }
            dash = false;
            out.push(c.to_ascii_lowercase());
        } else {
            dash = true;
        }
    }
    if out.is_empty() {
        out.push('x');
    }
    out
}

pub fn write_scenarios(path: impl AsRef<Path>, scenarios: &[Scenario]) -> Result<(), ScenarioFileError> {
    let path = path.as_ref();
    let io = |source| ScenarioFileError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    for s in scenarios {
        let line = serde_json::to_string(s).expect("scenario serializes");
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_scenarios(path: impl AsRef<Path>) -> Result<Vec<Scenario>, ScenarioFileError> {
    let path = path.as_ref();
    let name = path.display().to_string();
    let file = File::open(path).map_err(|source| ScenarioFileError::Io {
        path: name.clone(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| ScenarioFileError::Io {
            path: name.clone(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|source| ScenarioFileError::Parse {
                path: name.clone(),
                line: i + 1,
                source,
            })?,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Scenario {
        Scenario {
            id: "place-kitchen-001".into(),
            route: Route::Place,
            seed_value: "kitchen".into(),
            request: "  \"The plants look thirsty.\"  ".into(),
            action: "I will water the plants.".into(),
            background: "a wilting  fern\tsits on the windowsill".into(),
            variant: PromptVariant::IndirectNoQuestion,
        }
    }

    #[test]
    fn normalization_contract() {
        let n = normalize_scenario(&sample());
        assert_eq!(n.request, "The plants look thirsty.");
        assert_eq!(n.background, "a wilting fern sits on the windowsill");
        assert_eq!(n.id, "place-kitchen-001");
        assert_eq!(normalize_scenario(&n), n);
    }

    #[test]
    fn curly_and_nested_quotes() {
        assert_eq!(clean_text("\u{201C} 'It is cold in here.' \u{201D}"), "It is cold in here.");
        assert_eq!(clean_text("It's   fine"), "It's fine");
    }

    #[test]
    fn slugs() {
        assert_eq!(slug("dining room"), "dining-room");
        assert_eq!(slug("children's room"), "children-s-room");
        assert_eq!(slug("  Kitchen "), "kitchen");
        assert_eq!(slug("???"), "x");
    }

    #[test]
    fn file_format_keys_in_order() {
        let s = normalize_scenario(&sample());
        let line = serde_json::to_string(&s).unwrap();
        let keys = ["id", "route", "seed_value", "request", "action", "background", "variant"];
        let mut last = 0;
        for k in keys {
            let pos = line.find(&format!("\"{k}\":")).unwrap();
            assert!(pos >= last);
            last = pos;
        }
        assert!(line.contains("\"route\":\"place\""));
        assert!(line.contains("\"variant\":\"indirect_no_question\""));
    }

    proptest! {
        #[test]
        fn clean_text_is_idempotent(s in "\\PC{0,60}") {
            let once = clean_text(&s);
            prop_assert_eq!(clean_text(&once), once);
        }

        #[test]
        fn scenario_file_round_trip(req in "[^\n]{1,40}", bg in "[^\n]{1,40}", n in 1usize..5) {
            let scenarios: Vec<Scenario> = (0..n)
                .map(|i| Scenario {
                    id: format!("action-001-{i:03}"),
                    route: Route::Action,
                    seed_value: "I will open the door".into(),
                    request: req.clone(),
                    action: "I will open the door".into(),
                    background: bg.clone(),
                    variant: PromptVariant::Plain,
                })
                .collect();
            let f = tempfile::NamedTempFile::new().unwrap();
            write_scenarios(f.path(), &scenarios).unwrap();
            prop_assert_eq!(read_scenarios(f.path()).unwrap(), scenarios);
        }
    }
}
