//! Line-oriented text records shared by the adapter and checkpoint formats.
//!
//! Each record line is `<tag> <space separated fields>`. Floats are written in
//! Rust's shortest round-trip form, so parse(write(x)) is bit-exact.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::numkit::Matrix;

pub(crate) fn push_line(out: &mut String, tag: &str, fields: impl IntoIterator<Item = String>) {
    out.push_str(tag);
    for f in fields {
        out.push(' ');
        out.push_str(&f);
    }
    out.push('\n');
}

pub(crate) fn push_floats(out: &mut String, tag: &str, values: &[f64]) {
    out.push_str(tag);
    for v in values {
        // Debug formatting of f64 is the shortest string that parses back exactly.
        let _ = write!(out, " {v:?}");
    }
    out.push('\n');
}

pub(crate) struct LineReader<'a> {
    lines: std::iter::Peekable<std::iter::Enumerate<std::str::Lines<'a>>>,
    path: PathBuf,
    line: usize,
}

impl<'a> LineReader<'a> {
    pub(crate) fn new(text: &'a str, path: &Path) -> Self {
        Self {
            lines: text.lines().enumerate().peekable(),
            path: path.to_path_buf(),
            line: 0,
        }
    }

    pub(crate) fn error(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.clone(),
            line: self.line,
            msg: msg.into(),
        }
    }

    pub(crate) fn at_end(&mut self) -> bool {
        while let Some((_, l)) = self.lines.peek() {
            if l.trim().is_empty() {
                self.lines.next();
            } else {
                return false;
            }
        }
        true
    }

    /// Next non-blank line, which must start with `tag`; returns the remaining fields.
    pub(crate) fn expect(&mut self, tag: &str) -> Result<Vec<&'a str>> {
        loop {
            let Some((idx, raw)) = self.lines.next() else {
                return Err(self.error(format!("unexpected end of input, expected `{tag}`")));
            };
            self.line = idx + 1;
            if raw.trim().is_empty() {
                continue;
            }
            let mut parts = raw.split_whitespace();
            let head = parts.next().unwrap_or_default();
            if head != tag {
                return Err(self.error(format!("expected `{tag}`, found `{head}`")));
            }
            return Ok(parts.collect());
        }
    }

    pub(crate) fn expect_usizes(&mut self, tag: &str, n: usize) -> Result<Vec<usize>> {
        let fields = self.expect(tag)?;
        if fields.len() != n {
            return Err(self.error(format!(
                "`{tag}` needs {n} integer fields, found {}",
                fields.len()
            )));
        }
        fields
            .iter()
            .map(|f| {
                f.parse::<usize>()
                    .map_err(|_| self.error(format!("`{f}` is not a non-negative integer")))
            })
            .collect()
    }

    pub(crate) fn expect_floats(&mut self, tag: &str, n: usize) -> Result<Vec<f64>> {
        let fields = self.expect(tag)?;
        if fields.len() != n {
            return Err(self.error(format!(
                "`{tag}` needs {n} values, found {}",
                fields.len()
            )));
        }
        let mut out = Vec::with_capacity(n);
        for f in fields {
            let v: f64 = f
                .parse()
                .map_err(|_| self.error(format!("`{f}` is not a number")))?;
            if !v.is_finite() {
                return Err(self.error(format!("`{f}` is not finite")));
            }
            out.push(v);
        }
        Ok(out)
    }

    pub(crate) fn expect_matrix(&mut self, tag: &str, rows: usize, cols: usize) -> Result<Matrix> {
        let data = self.expect_floats(tag, rows * cols)?;
        Matrix::from_vec(rows, cols, data).map_err(|e| self.error(e.to_string()))
    }
}
