//! Tab-separated column files: `word[\tclass]\tlabel` per line, blank line
//! between sentences, `-` in the class column for "no class".

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const NO_CLASS: &str = "-";

/// One sentence as raw strings.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawSentence {
    pub words: Vec<String>,
    /// Present iff the file has a class column; `None` entries were `-`.
    pub classes: Option<Vec<Option<String>>>,
    pub labels: Vec<String>,
}

impl RawSentence {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

pub fn load_column_file(path: impl AsRef<Path>) -> Result<Vec<RawSentence>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    parse_columns(&text).map_err(|(line, msg)| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    })
}

/// Parses column text; errors carry a 1-based line number.
pub fn parse_columns(text: &str) -> Result<Vec<RawSentence>, (usize, String)> {
    let mut sentences = Vec::new();
    let mut current: Vec<Vec<&str>> = Vec::new();
    let mut width: Option<usize> = None;

    let flush = |rows: &mut Vec<Vec<&str>>, out: &mut Vec<RawSentence>| {
        if rows.is_empty() {
            return;
        }
        let with_class = rows[0].len() == 3;
        let words = rows.iter().map(|r| r[0].to_string()).collect();
        let labels = rows.iter().map(|r| r[r.len() - 1].to_string()).collect();
        let classes = with_class.then(|| {
            rows.iter()
                .map(|r| (r[1] != NO_CLASS).then(|| r[1].to_string()))
                .collect()
        });
        out.push(RawSentence {
            words,
            classes,
            labels,
        });
        rows.clear();
    };

    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            flush(&mut current, &mut sentences);
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 && fields.len() != 3 {
            return Err((i + 1, format!("expected 2 or 3 tab-separated fields, found {}", fields.len())));
        }
        if fields.iter().any(|f| f.is_empty()) {
            return Err((i + 1, "empty field".to_string()));
        }
        match width {
            None => width = Some(fields.len()),
            Some(w) if w != fields.len() => {
                return Err((i + 1, format!("inconsistent column count: {} then {}", w, fields.len())))
            }
            _ => {}
        }
        current.push(fields);
    }
    flush(&mut current, &mut sentences);
    Ok(sentences)
}

pub fn format_columns(sentences: &[RawSentence]) -> String {
    let mut out = String::new();
    for (k, s) in sentences.iter().enumerate() {
        if k > 0 {
            out.push('\n');
        }
        for i in 0..s.len() {
            out.push_str(&s.words[i]);
            if let Some(classes) = &s.classes {
                out.push('\t');
                out.push_str(classes[i].as_deref().unwrap_or(NO_CLASS));
            }
            let _ = writeln!(out, "\t{}", s.labels[i]);
        }
    }
    out
}

pub fn write_column_file(path: impl AsRef<Path>, sentences: &[RawSentence]) -> Result<()> {
    fs::write(path, format_columns(sentences))?;
    Ok(())
}
