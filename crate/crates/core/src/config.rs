//! Line-oriented `key = value` configuration files.
//!
//! ```text
//! # comment
//! include = energy_22nm.energy     # resolved relative to this file
//! device.vdd = 0.8
//! layer = conv2 63 63 32 64 3 0.2
//! ```
//!
//! Keys may repeat; lookups by [`KvConfig::get`] return the last value,
//! [`KvConfig::get_all`] returns every value in file order. `include`
//! splices the referenced file in place.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

const MAX_INCLUDE_DEPTH: usize = 16;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvConfig {
    entries: Vec<(String, String)>,
    origin: PathBuf,
}

impl KvConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut cfg = KvConfig {
            entries: Vec::new(),
            origin: path.to_path_buf(),
        };
        cfg.load_into(path, 0)?;
        Ok(cfg)
    }

    /// Parses text without include support.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = KvConfig::default();
        for (line_no, line) in text.lines().enumerate() {
            if let Some((k, v)) = split_line(line, line_no + 1, Path::new("<string>"))? {
                if k == "include" {
                    return Err(Error::Config {
                        path: PathBuf::from("<string>"),
                        msg: "include is only supported for files".into(),
                    });
                }
                cfg.entries.push((k, v));
            }
        }
        Ok(cfg)
    }

    fn load_into(&mut self, path: &Path, depth: usize) -> Result<()> {
        if depth > MAX_INCLUDE_DEPTH {
            return Err(self.err(path, "include nesting too deep"));
        }
        let text = fs::read_to_string(path).map_err(|e| self.err(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for (line_no, line) in text.lines().enumerate() {
            if let Some((k, v)) = split_line(line, line_no + 1, path)? {
                if k == "include" {
                    self.load_into(&base.join(&v), depth + 1)?;
                } else if k.ends_with("_file") || k == "weights" || k.ends_with(".weights") {
                    // file references resolve against the declaring file
                    let resolved = if v == "random" || Path::new(&v).is_absolute() {
                        v
                    } else {
                        base.join(&v).to_string_lossy().into_owned()
                    };
                    self.entries.push((k, resolved));
                } else {
                    self.entries.push((k, v));
                }
            }
        }
        Ok(())
    }

    fn err(&self, path: &Path, msg: impl Display) -> Error {
        Error::Config {
            path: path.to_path_buf(),
            msg: msg.to_string(),
        }
    }

    pub fn origin(&self) -> &Path {
        &self.origin
    }

    pub fn insert(&mut self, key: impl Into<String>, value: impl Display) {
        self.entries.push((key.into(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .rev()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn get_all<'a>(&'a self, key: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.entries
            .iter()
            .filter(move |(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| self.err(&self.origin, format!("missing key `{key}`")))
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse::<T>()
                .map(Some)
                .map_err(|e| self.err(&self.origin, format!("key `{key}` = `{raw}`: {e}"))),
        }
    }

    pub fn parse_or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        Ok(self.parse(key)?.unwrap_or(default))
    }

    /// Renders entries back to text in insertion order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }
}

fn split_line(line: &str, line_no: usize, path: &Path) -> Result<Option<(String, String)>> {
    let body = match line.find('#') {
        Some(i) => &line[..i],
        None => line,
    }
    .trim();
    if body.is_empty() {
        return Ok(None);
    }
    let Some((k, v)) = body.split_once('=') else {
        return Err(Error::Config {
            path: path.to_path_buf(),
            msg: format!("line {line_no}: expected `key = value`"),
        });
    };
    let (k, v) = (k.trim(), v.trim());
    if k.is_empty() {
        return Err(Error::Config {
            path: path.to_path_buf(),
            msg: format!("line {line_no}: empty key"),
        });
    }
    Ok(Some((k.to_string(), v.to_string())))
}
