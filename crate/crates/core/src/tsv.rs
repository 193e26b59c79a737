//! Minimal tab-separated reader with header validation and line-numbered
//! errors.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ParseError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Line {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

impl ParseError {
    pub fn at(path: &Path, line: usize, message: impl Into<String>) -> Self {
        ParseError::Line {
            path: path.to_path_buf(),
            line,
            message: message.into(),
        }
    }

    pub fn line(&self) -> Option<usize> {
        match self {
            ParseError::Line { line, .. } => Some(*line),
            ParseError::Io { .. } => None,
        }
    }
}

/// One data row: 1-based line number plus its fields.
#[derive(Debug, Clone)]
pub struct Row {
    pub line: usize,
    pub fields: Vec<String>,
}

impl Row {
    pub fn get(&self, i: usize) -> &str {
        self.fields.get(i).map(String::as_str).unwrap_or("")
    }
}

/// A parsed table. Blank lines and lines starting with `#` are skipped.
#[derive(Debug, Clone)]
pub struct Table {
    pub path: PathBuf,
    pub header: Vec<String>,
    pub rows: Vec<Row>,
}

impl Table {
    pub fn read(path: &Path) -> Result<Self, ParseError> {
        let text = fs::read_to_string(path).map_err(|source| ParseError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(path, &text)
    }

    pub fn parse(path: &Path, text: &str) -> Result<Self, ParseError> {
        let mut header = None;
        let mut rows = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let raw = raw.strip_suffix('\r').unwrap_or(raw);
            if raw.trim().is_empty() || raw.starts_with('#') {
                continue;
            }
            let fields: Vec<String> = raw.split('\t').map(|f| f.trim().to_string()).collect();
            if header.is_none() {
                header = Some(fields);
                continue;
            }
            let width = header.as_ref().map_or(0, Vec::len);
            if fields.len() > width {
                return Err(ParseError::at(
                    path,
                    line,
                    format!("expected {width} fields, found {}", fields.len()),
                ));
            }
            rows.push(Row { line, fields });
        }
        let header = header.ok_or_else(|| ParseError::at(path, 1, "missing header"))?;
        Ok(Self {
            path: path.to_path_buf(),
            header,
            rows,
        })
    }

    /// Requires the header to start with exactly `expected`.
    pub fn expect_header(&self, expected: &[&str]) -> Result<(), ParseError> {
        let ok = self.header.len() >= expected.len()
            && self.header.iter().zip(expected).all(|(h, e)| h == e);
        if ok {
            Ok(())
        } else {
            Err(ParseError::at(
                &self.path,
                self.header_line(),
                format!("expected header `{}`", expected.join("\t")),
            ))
        }
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    fn header_line(&self) -> usize {
        self.rows.first().map_or(1, |r| r.line.saturating_sub(1).max(1))
    }

    pub fn error(&self, row: &Row, message: impl Into<String>) -> ParseError {
        ParseError::at(&self.path, row.line, message)
    }
}

/// Parses a comma-separated list of floats.
pub fn parse_floats(s: &str) -> Result<Vec<f64>, String> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|e| format!("bad number `{}`: {e}", v.trim()))
        })
        .collect()
}

/// Splits a comma-separated list, dropping empty items.
pub fn parse_list(s: &str) -> Vec<String> {
    s.split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(str::to_string)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn skips_comments_and_reports_lines() {
        let t = Table::parse(Path::new("x.tsv"), "# note\na\tb\n\n1\t2\n3\n").unwrap();
        assert_eq!(t.header, vec!["a", "b"]);
        assert_eq!(t.rows.len(), 2);
        assert_eq!(t.rows[0].line, 4);
        assert_eq!(t.rows[1].get(1), "");
    }

    #[test]
    fn too_many_fields_is_an_error() {
        let err = Table::parse(Path::new("x.tsv"), "a\n1\t2\n").unwrap_err();
        assert_eq!(err.line(), Some(2));
    }

    #[test]
    fn float_lists() {
        assert_eq!(parse_floats("1, 2.5,-3e-1").unwrap(), vec![1.0, 2.5, -0.3]);
        assert!(parse_floats("1,x").is_err());
        assert!(parse_floats("").unwrap().is_empty());
    }
}
