//! Line-oriented text formats: tab-separated `key=value` records and flat
//! `key = value` config files.

use crate::error::{Error, Result};
use std::str::FromStr;

/// One `key=value<TAB>key=value…` line. Field order is preserved.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KvRecord {
    fields: Vec<(String, String)>,
    line: usize,
}

fn valid_key(k: &str) -> bool {
    !k.is_empty()
        && k
            .bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_')
}

impl KvRecord {
    pub fn push(&mut self, key: &str, value: impl Into<String>) {
        self.fields.push((key.to_owned(), value.into()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.fields
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::parse(self.line, format!("missing key `{key}`")))
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.require(key)?;
        v.parse()
            .map_err(|_| Error::parse(self.line, format!("bad value `{v}` for `{key}`")))
    }

    pub fn fields(&self) -> &[(String, String)] {
        &self.fields
    }

    pub fn to_line(&self) -> Result<String> {
        let mut out = String::new();
        for (i, (k, v)) in self.fields.iter().enumerate() {
            if !valid_key(k) {
                return Err(Error::invalid("kv_record", format!("bad key `{k}`")));
            }
            if v.contains(['\t', '\n', '\r']) {
                return Err(Error::invalid(
                    "kv_record",
                    format!("value for `{k}` contains a tab or newline"),
                ));
            }
            if i > 0 {
                out.push('\t');
            }
            out.push_str(k);
            out.push('=');
            out.push_str(v);
        }
        Ok(out)
    }

    pub fn parse_line(line: &str, line_no: usize) -> Result<Self> {
        let line = line.strip_suffix('\r').unwrap_or(line);
        let mut fields: Vec<(String, String)> = Vec::new();
        for field in line.split('\t') {
            let (k, v) = field
                .split_once('=')
                .ok_or_else(|| Error::parse(line_no, format!("field `{field}` lacks `=`")))?;
            if !valid_key(k) {
                return Err(Error::parse(line_no, format!("bad key `{k}`")));
            }
            if fields.iter().any(|(fk, _)| fk == k) {
                return Err(Error::parse(line_no, format!("duplicate key `{k}`")));
            }
            fields.push((k.to_owned(), v.to_owned()));
        }
        Ok(Self {
            fields,
            line: line_no,
        })
    }

    /// Parses every non-empty line.
    pub fn parse_all(text: &str) -> Result<Vec<Self>> {
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| Self::parse_line(l, i + 1))
            .collect()
    }
}

/// Flat `key = value` text; `#` starts a comment.
pub fn parse_flat_config(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(i + 1, format!("expected key = value, got `{line}`")))?;
        let (k, v) = (k.trim(), v.trim());
        if !valid_key(k) {
            return Err(Error::parse(i + 1, format!("bad key `{k}`")));
        }
        if out.iter().any(|(ok, _)| ok == k) {
            return Err(Error::parse(i + 1, format!("duplicate key `{k}`")));
        }
        out.push((k.to_owned(), v.to_owned()));
    }
    Ok(out)
}
