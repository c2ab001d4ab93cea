//! Flat sectioned key-value text format.
//!
//! ```text
//! # comment
//! [section]
//! key = value
//! ```
//!
//! Sections may repeat (each `[stage]` is its own section). Keys are unique
//! within a section. Every entry must belong to a section.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Section {
    pub name: String,
    pub line: usize,
    pub entries: Vec<Entry>,
}

impl Section {
    pub fn new(name: impl Into<String>) -> Self {
        Section {
            name: name.into(),
            line: 0,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, key: impl Into<String>, value: impl ToString) {
        self.entries.push(Entry {
            key: key.into(),
            value: value.to_string(),
            line: 0,
        });
    }

    pub fn reader(&self) -> SectionReader<'_> {
        SectionReader {
            section: self,
            used: BTreeSet::new(),
        }
    }
}

/// Typed access to a section that remembers which keys were read, so
/// leftovers can be rejected.
pub struct SectionReader<'a> {
    section: &'a Section,
    used: BTreeSet<&'a str>,
}

impl<'a> SectionReader<'a> {
    fn entry(&mut self, key: &str) -> Option<&'a Entry> {
        let e = self.section.entries.iter().find(|e| e.key == key)?;
        self.used.insert(e.key.as_str());
        Some(e)
    }

    pub fn optional<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.entry(key) {
            None => Ok(None),
            Some(e) => e.value.parse::<T>().map(Some).map_err(|err| Error::Config {
                line: e.line,
                msg: format!("[{}] {key} = {:?}: {err}", self.section.name, e.value),
            }),
        }
    }

    pub fn get_or<T: FromStr>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.optional(key)?.unwrap_or(default))
    }

    pub fn required<T: FromStr>(&mut self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let line = self.section.line;
        let name = self.section.name.clone();
        self.optional(key)?.ok_or_else(|| Error::Config {
            line,
            msg: format!("[{name}] is missing required key {key:?}"),
        })
    }

    /// Errors on the first key that was never read.
    pub fn finish(self) -> Result<()> {
        match self.section.entries.iter().find(|e| !self.used.contains(e.key.as_str())) {
            Some(e) => Err(Error::Config {
                line: e.line,
                msg: format!("unknown key {:?} in [{}]", e.key, self.section.name),
            }),
            None => Ok(()),
        }
    }

    /// Config error attributed to `key`'s line (or the section header).
    pub fn error(&self, key: &str, msg: impl Into<String>) -> Error {
        let line = self
            .section
            .entries
            .iter()
            .find(|e| e.key == key)
            .map_or(self.section.line, |e| e.line);
        Error::Config { line, msg: msg.into() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConfigDoc {
    pub sections: Vec<Section>,
}

impl ConfigDoc {
    pub fn parse(text: &str) -> Result<Self> {
        let mut sections: Vec<Section> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let s = raw.trim();
            if s.is_empty() || s.starts_with('#') {
                continue;
            }
            if let Some(rest) = s.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| Error::Config {
                    line,
                    msg: format!("unterminated section header {s:?}"),
                })?;
                let name = name.trim();
                if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                    return Err(Error::Config {
                        line,
                        msg: format!("bad section name {name:?}"),
                    });
                }
                sections.push(Section {
                    name: name.to_string(),
                    line,
                    entries: Vec::new(),
                });
                continue;
            }
            let (key, value) = s.split_once('=').ok_or_else(|| Error::Config {
                line,
                msg: format!("expected `key = value`, got {s:?}"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() {
                return Err(Error::Config {
                    line,
                    msg: "empty key".into(),
                });
            }
            let section = sections.last_mut().ok_or_else(|| Error::Config {
                line,
                msg: format!("key {key:?} appears before any [section]"),
            })?;
            if section.entries.iter().any(|e| e.key == key) {
                return Err(Error::Config {
                    line,
                    msg: format!("duplicate key {key:?} in [{}]", section.name),
                });
            }
            section.entries.push(Entry {
                key: key.to_string(),
                value: value.to_string(),
                line,
            });
        }
        Ok(ConfigDoc { sections })
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (i, s) in self.sections.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            let _ = writeln!(out, "[{}]", s.name);
            for e in &s.entries {
                let _ = writeln!(out, "{} = {}", e.key, e.value);
            }
        }
        out
    }

    pub fn sections_named<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a Section> + 'a {
        self.sections.iter().filter(move |s| s.name == name)
    }

    /// The unique section called `name`, if present.
    pub fn single(&self, name: &str) -> Result<Option<&Section>> {
        let mut it = self.sections.iter().filter(|s| s.name == name);
        let first = it.next();
        if let Some(dup) = it.next() {
            return Err(Error::Config {
                line: dup.line,
                msg: format!("section [{name}] may appear only once"),
            });
        }
        Ok(first)
    }

    /// Rejects any section whose name is not in `known`.
    pub fn check_sections(&self, known: &[&str]) -> Result<()> {
        match self.sections.iter().find(|s| !known.contains(&s.name.as_str())) {
            Some(s) => Err(Error::Config {
                line: s.line,
                msg: format!("unknown section [{}]", s.name),
            }),
            None => Ok(()),
        }
    }
}
