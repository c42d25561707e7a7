//! Line-oriented `key = value` documents.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are unique;
//! values are trimmed but otherwise opaque. Rendering is canonical: one
//! `key = value` line per entry in insertion order, so parse → render is
//! stable after the first round.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum KvError {
    #[error("line {line}: expected `key = value`")]
    MissingSeparator { line: usize },

    #[error("line {line}: empty key")]
    EmptyKey { line: usize },

    #[error("line {line}: key `{key}` contains whitespace")]
    BadKey { line: usize, key: String },

    #[error("line {line}: duplicate key `{key}`")]
    Duplicate { line: usize, key: String },

    #[error("value for `{key}` spans lines")]
    MultilineValue { key: String },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Document {
    entries: Vec<(String, String)>,
}

impl Document {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self, KvError> {
        let mut doc = Document::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (key, value) = trimmed
                .split_once('=')
                .ok_or(KvError::MissingSeparator { line })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(KvError::EmptyKey { line });
            }
            if key.contains(char::is_whitespace) {
                return Err(KvError::BadKey {
                    line,
                    key: key.to_string(),
                });
            }
            if doc.get(key).is_some() {
                return Err(KvError::Duplicate {
                    line,
                    key: key.to_string(),
                });
            }
            doc.entries.push((key.to_string(), value.trim().to_string()));
        }
        Ok(doc)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    /// Inserts or replaces, keeping the original position of an existing key.
    pub fn set(&mut self, key: impl Into<String>, value: impl fmt::Display) -> Result<(), KvError> {
        let key = key.into();
        let value = value.to_string();
        if value.contains('\n') {
            return Err(KvError::MultilineValue { key });
        }
        match self.entries.iter_mut().find(|(k, _)| *k == key) {
            Some(slot) => slot.1 = value,
            None => self.entries.push((key, value)),
        }
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl fmt::Display for Document {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.entries {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comments_and_blanks_are_skipped() {
        let doc = Document::parse("# header\n\n a = 1 \nb=two words\n").unwrap();
        assert_eq!(doc.get("a"), Some("1"));
        assert_eq!(doc.get("b"), Some("two words"));
        assert_eq!(doc.len(), 2);
    }

    #[test]
    fn errors_carry_line_numbers() {
        assert_eq!(
            Document::parse("a = 1\nnope\n"),
            Err(KvError::MissingSeparator { line: 2 })
        );
        assert_eq!(Document::parse(" = 3"), Err(KvError::EmptyKey { line: 1 }));
        assert!(matches!(
            Document::parse("a = 1\na = 2"),
            Err(KvError::Duplicate { line: 2, .. })
        ));
    }

    #[test]
    fn render_round_trips() {
        let mut doc = Document::new();
        doc.set("seed", 7).unwrap();
        doc.set("conv", "32:9:1, 64:9:1").unwrap();
        doc.set("seed", 8).unwrap();
        let text = doc.to_string();
        assert_eq!(text, "seed = 8\nconv = 32:9:1, 64:9:1\n");
        assert_eq!(Document::parse(&text).unwrap(), doc);
    }
}
