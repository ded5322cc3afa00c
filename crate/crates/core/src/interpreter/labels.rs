//! `class_id<TAB>label` files. Lines starting with `#` are comments.

use std::fs;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabelsError {
    #[error("cannot read labels file {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("labels line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("labels line {line}: duplicate class id {class_id}")]
    Duplicate { line: usize, class_id: u32 },
    #[error("class ids are not contiguous from 0: {missing} is missing")]
    NotContiguous { missing: u32 },
    #[error("labels file has no entries")]
    Empty,
}

/// Parses labels into a vector indexed by class id.
pub fn parse_labels(text: &str) -> Result<Vec<String>, LabelsError> {
    let mut entries: Vec<(u32, String, usize)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let raw = raw.strip_suffix('\r').unwrap_or(raw);
        if raw.trim().is_empty() || raw.starts_with('#') {
            continue;
        }
        let (id, label) = raw.split_once('\t').ok_or_else(|| LabelsError::Parse {
            line,
            message: "expected class_id<TAB>label".into(),
        })?;
        let class_id: u32 = id.trim().parse().map_err(|_| LabelsError::Parse {
            line,
            message: format!("class id {id:?} is not an unsigned integer"),
        })?;
        if label.trim().is_empty() {
            return Err(LabelsError::Parse {
                line,
                message: "empty label".into(),
            });
        }
        if entries.iter().any(|(c, _, _)| *c == class_id) {
            return Err(LabelsError::Duplicate { line, class_id });
        }
        entries.push((class_id, label.to_owned(), line));
    }
    if entries.is_empty() {
        return Err(LabelsError::Empty);
    }
    entries.sort_by_key(|(c, _, _)| *c);
    for (expected, (c, _, _)) in entries.iter().enumerate() {
        if *c != expected as u32 {
            return Err(LabelsError::NotContiguous {
                missing: expected as u32,
            });
        }
    }
    Ok(entries.into_iter().map(|(_, l, _)| l).collect())
}

pub fn read_labels(path: &Path) -> Result<Vec<String>, LabelsError> {
    let text = fs::read_to_string(path).map_err(|source| LabelsError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_labels(&text)
}

pub fn format_labels(labels: &[String]) -> String {
    labels
        .iter()
        .enumerate()
        .map(|(i, l)| format!("{i}\t{l}\n"))
        .collect()
}
