use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;

use super::{EvalError, EvalReport, EvalSample, PredictionRecord};

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>, EvalError> {
    let text = fs::read_to_string(path).map_err(|e| EvalError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(line).map_err(|e| EvalError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push((i + 1, value));
    }
    Ok(out)
}

/// Reads `{id, utterance, description?, gold_action_index}` lines.
pub fn read_samples(path: impl AsRef<Path>) -> Result<Vec<EvalSample>, EvalError> {
    let path = path.as_ref();
    let rows: Vec<(usize, EvalSample)> = read_jsonl(path)?;
    let mut seen = std::collections::HashMap::new();
    for (line, s) in &rows {
        if let Some(first) = seen.insert(s.id.clone(), *line) {
            return Err(EvalError::Parse {
                path: path.to_path_buf(),
                line: *line,
                message: format!("sample id '{}' already used on line {first}", s.id),
            });
        }
    }
    Ok(rows.into_iter().map(|(_, s)| s).collect())
}

/// Reads `{sample_id, setting, response_text, system?, group?}` lines.
/// `default_system` fills in records without a system.
pub fn read_predictions(path: impl AsRef<Path>, default_system: Option<&str>) -> Result<Vec<PredictionRecord>, EvalError> {
    let rows: Vec<(usize, PredictionRecord)> = read_jsonl(path.as_ref())?;
    Ok(rows
        .into_iter()
        .map(|(line, mut p)| {
            p.line = line;
            if p.system.is_none() {
                p.system = default_system.map(str::to_string);
            }
            p
        })
        .collect())
}

/// Writes reports as a pretty JSON array.
pub fn write_reports(path: impl AsRef<Path>, reports: &[EvalReport]) -> Result<(), EvalError> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| EvalError::io(dir, e))?;
    }
    let mut bytes = serde_json::to_vec_pretty(reports).expect("reports serialize");
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| EvalError::io(path, e))
}
