// Copyright 2026 fluxqa Contributors
// SPDX-License-Identifier: Apache-2.0

//! Plain-text matrix format shared by scans and decay traces.
//!
//! ```text
//! # fluxqa-matrix v1
//! # key: value
//! # ...
//! v00 v01 v02 ...
//! v10 v11 v12 ...
//! ```
//!
//! Header lines keep their order. Numbers are written with Rust's shortest
//! round-trip formatting, so identical inputs give identical bytes and
//! parsing recovers every value exactly.

use std::fmt::Write as _;

use crate::error::{Error, Result};

pub const MAGIC: &str = "# fluxqa-matrix v1";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TextMatrix {
    pub header: Vec<(String, String)>,
    pub rows: Vec<Vec<f64>>,
}

impl TextMatrix {
    pub fn push_header(&mut self, key: &str, value: impl ToString) {
        self.header.push((key.to_string(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.header.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key).ok_or_else(|| Error::Parse(format!("missing header `{key}`")))
    }

    pub fn require_f64(&self, key: &str) -> Result<f64> {
        let v = self.require(key)?;
        v.parse().map_err(|e| Error::Parse(format!("header `{key}` = `{v}`: {e}")))
    }

    pub fn require_usize(&self, key: &str) -> Result<usize> {
        let v = self.require(key)?;
        v.parse().map_err(|e| Error::Parse(format!("header `{key}` = `{v}`: {e}")))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(MAGIC);
        out.push('\n');
        for (k, v) in &self.header {
            let _ = writeln!(out, "# {k}: {v}");
        }
        for row in &self.rows {
            let mut first = true;
            for x in row {
                if !first {
                    out.push(' ');
                }
                first = false;
                let _ = write!(out, "{x}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(l) if l.trim_end() == MAGIC => {}
            _ => return Err(Error::Parse("not a fluxqa matrix file".into())),
        }
        let mut m = TextMatrix::default();
        for line in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(h) = line.strip_prefix('#') {
                let (k, v) = h
                    .split_once(':')
                    .ok_or_else(|| Error::Parse(format!("malformed header line `{line}`")))?;
                m.push_header(k.trim(), v.trim());
                continue;
            }
            let row = line
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|e| Error::Parse(format!("`{t}`: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            m.rows.push(row);
        }
        Ok(m)
    }
}
