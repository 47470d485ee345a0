//! Fixed vocabularies: the robot's action set and the everyday locations.
//!
//! Both live in plain line-oriented files (one entry per line, `#` comments
//! and blank lines ignored). Entries are compared byte-for-byte after
//! trimming surrounding whitespace.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::sha256_parts;

/// Bundled default action list (43 entries).
pub const DEFAULT_ACTIONS: &str = include_str!("../data/actions.txt");
/// Bundled default location list (10 entries).
pub const DEFAULT_LOCATIONS: &str = include_str!("../data/locations.txt");

const MIN_ACTIONS: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DuplicateEntry {
    pub text: String,
    pub first_line: usize,
    pub line: usize,
}

impl fmt::Display for DuplicateEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "\"{}\" on line {} duplicates line {}",
            self.text, self.line, self.first_line
        )
    }
}

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("cannot read catalog {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("catalog {path} has no entries")]
    Empty { path: PathBuf },
    #[error("action catalog {path} has {len} entr{}; at least {MIN_ACTIONS} are required", if *len == 1 { "y" } else { "ies" })]
    TooSmall { path: PathBuf, len: usize },
    #[error("catalog {path} has duplicate entries: {}", join_duplicates(duplicates))]
    Duplicates {
        path: PathBuf,
        duplicates: Vec<DuplicateEntry>,
    },
}

fn join_duplicates(d: &[DuplicateEntry]) -> String {
    d.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

/// One robot action. `index` is the label id used everywhere else.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ActionLabel {
    pub index: usize,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActionCatalog {
    actions: Vec<ActionLabel>,
    source_path: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LocationCatalog {
    locations: Vec<String>,
    source_path: String,
}

/// Splits catalog text into `(line_number, entry)` pairs, checking for
/// duplicates.
fn parse_entries(text: &str, path: &Path) -> Result<Vec<(usize, String)>, CatalogError> {
    let mut entries: Vec<(usize, String)> = Vec::new();
    let mut duplicates = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some((first, _)) = entries.iter().find(|(_, t)| t == line) {
            duplicates.push(DuplicateEntry {
                text: line.to_string(),
                first_line: *first,
                line: i + 1,
            });
            continue;
        }
        entries.push((i + 1, line.to_string()));
    }
    if !duplicates.is_empty() {
        return Err(CatalogError::Duplicates {
            path: path.to_path_buf(),
            duplicates,
        });
    }
    if entries.is_empty() {
        return Err(CatalogError::Empty {
            path: path.to_path_buf(),
        });
    }
    Ok(entries)
}

fn read(path: &Path) -> Result<String, CatalogError> {
    fs::read_to_string(path).map_err(|source| CatalogError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_lines<'a>(path: &Path, lines: impl Iterator<Item = &'a str>) -> std::io::Result<()> {
    let mut out = String::new();
    for line in lines {
        out.push_str(line);
        out.push('\n');
    }
    fs::write(path, out)
}

/// Reads an action catalog from a line-oriented file.
pub fn load_action_catalog(path: impl AsRef<Path>) -> Result<ActionCatalog, CatalogError> {
    let path = path.as_ref();
    ActionCatalog::parse(&read(path)?, path)
}

/// Reads a location catalog from a line-oriented file.
pub fn load_location_catalog(path: impl AsRef<Path>) -> Result<LocationCatalog, CatalogError> {
    let path = path.as_ref();
    LocationCatalog::parse(&read(path)?, path)
}

impl ActionCatalog {
    pub fn parse(text: &str, source: &Path) -> Result<Self, CatalogError> {
        let entries = parse_entries(text, source)?;
        if entries.len() < MIN_ACTIONS {
            return Err(CatalogError::TooSmall {
                path: source.to_path_buf(),
                len: entries.len(),
            });
        }
        let actions = entries
            .into_iter()
            .enumerate()
            .map(|(index, (_, text))| ActionLabel { index, text })
            .collect();
        Ok(Self {
            actions,
            source_path: source.display().to_string(),
        })
    }

    /// Builds a catalog from in-memory texts, applying the same validation
    /// as a file load.
    pub fn from_texts<S: AsRef<str>>(texts: &[S]) -> Result<Self, CatalogError> {
        let joined = texts
            .iter()
            .map(|t| t.as_ref().trim())
            .collect::<Vec<_>>()
            .join("\n");
        Self::parse(&joined, Path::new("<memory>"))
    }

    pub fn bundled() -> Self {
        Self::parse(DEFAULT_ACTIONS, Path::new("<bundled>/actions.txt"))
            .expect("bundled action catalog is valid")
    }

    pub fn actions(&self) -> &[ActionLabel] {
        &self.actions
    }

    pub fn get(&self, index: usize) -> Option<&ActionLabel> {
        self.actions.get(index)
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn source_path(&self) -> &str {
        &self.source_path
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.actions.iter().map(|a| a.text.as_str())
    }

    /// Looks up a label by exact (trimmed) text.
    pub fn find(&self, text: &str) -> Option<&ActionLabel> {
        let text = text.trim();
        self.actions.iter().find(|a| a.text == text)
    }

    /// Content digest of the ordered action texts; used as a cache key.
    pub fn digest(&self) -> String {
        hex::encode(sha256_parts(self.texts()))
    }

    pub fn write_to(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        write_lines(path.as_ref(), self.texts())
    }
}

impl LocationCatalog {
    pub fn parse(text: &str, source: &Path) -> Result<Self, CatalogError> {
        let locations = parse_entries(text, source)?
            .into_iter()
            .map(|(_, t)| t)
            .collect();
        Ok(Self {
            locations,
            source_path: source.display().to_string(),
        })
    }

    pub fn from_texts<S: AsRef<str>>(texts: &[S]) -> Result<Self, CatalogError> {
        let joined = texts
            .iter()
            .map(|t| t.as_ref().trim())
            .collect::<Vec<_>>()
            .join("\n");
        Self::parse(&joined, Path::new("<memory>"))
    }

    pub fn bundled() -> Self {
        Self::parse(DEFAULT_LOCATIONS, Path::new("<bundled>/locations.txt"))
            .expect("bundled location catalog is valid")
    }

    pub fn locations(&self) -> &[String] {
        &self.locations
    }

    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    pub fn source_path(&self) -> &str {
        &self.source_path
    }

    pub fn write_to(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        write_lines(path.as_ref(), self.locations.iter().map(String::as_str))
    }
}
