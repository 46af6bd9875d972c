//! Flat `key = value` configuration files.
//!
//! Grammar: one `key = value` pair per line; `#` starts a comment outside
//! quotes; blank lines are ignored; keys match `[A-Za-z0-9_.-]+`; values are
//! bare tokens or double-quoted strings (no escapes). Booleans are `true` or
//! `false`, numbers plain decimal. Duplicate keys are errors.
//!
//! The same grammar serves both directions: commands read their settings
//! from it and every run writes its fully resolved settings back out as
//! `manifest.cfg` (keys sorted), so a manifest is itself a runnable config.
//!
//! Readers record every key they ask for; [`ConfigReader::finish`] turns any
//! leftover key into an error naming the full valid-key list, which is how
//! typos surface before any work starts.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("config line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("config line {line}: duplicate key `{key}`")]
    Duplicate { key: String, line: usize },
    #[error("config key `{key}`: {msg}")]
    BadValue { key: String, msg: String },
    #[error("config: missing required key `{key}`")]
    Missing { key: String },
    #[error("config: unknown key `{key}` (valid keys: {valid})")]
    UnknownKey { key: String, valid: String },
}

fn valid_key(key: &str) -> bool {
    !key.is_empty()
        && key
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '-'))
}

/// Strips an unquoted `#` comment from a line.
fn strip_comment(line: &str) -> &str {
    let mut in_quotes = false;
    for (i, c) in line.char_indices() {
        match c {
            '"' => in_quotes = !in_quotes,
            '#' if !in_quotes => return &line[..i],
            _ => {}
        }
    }
    line
}

fn parse_value(raw: &str, line: usize) -> Result<String, ConfigError> {
    let raw = raw.trim();
    if raw.starts_with('"') {
        if raw.len() < 2 || !raw.ends_with('"') {
            return Err(ConfigError::Syntax {
                line,
                msg: "unterminated quoted value".into(),
            });
        }
        let inner = &raw[1..raw.len() - 1];
        if inner.contains('"') {
            return Err(ConfigError::Syntax {
                line,
                msg: "quoted value may not contain quotes".into(),
            });
        }
        Ok(inner.to_string())
    } else if raw.contains('"') {
        Err(ConfigError::Syntax {
            line,
            msg: "quotes must enclose the whole value".into(),
        })
    } else {
        Ok(raw.to_string())
    }
}

/// Parsed pairs plus the record of which keys were consumed.
pub struct ConfigReader {
    pairs: BTreeMap<String, String>,
    requested: BTreeSet<String>,
}

impl ConfigReader {
    pub fn parse(text: &str) -> Result<ConfigReader, ConfigError> {
        let mut pairs = BTreeMap::new();
        for (i, raw_line) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = strip_comment(raw_line.trim_end_matches('\r')).trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: line_no,
                msg: format!("expected `key = value`, got `{}`", line),
            })?;
            let key = key.trim();
            if !valid_key(key) {
                return Err(ConfigError::Syntax {
                    line: line_no,
                    msg: format!("bad key `{}`", key),
                });
            }
            let value = parse_value(value, line_no)?;
            if pairs.insert(key.to_string(), value).is_some() {
                return Err(ConfigError::Duplicate {
                    key: key.to_string(),
                    line: line_no,
                });
            }
        }
        Ok(ConfigReader {
            pairs,
            requested: BTreeSet::new(),
        })
    }

    /// An empty reader: every lookup misses, so commands run on defaults.
    pub fn empty() -> ConfigReader {
        ConfigReader {
            pairs: BTreeMap::new(),
            requested: BTreeSet::new(),
        }
    }

    pub fn from_file(path: &Path) -> Result<ConfigReader, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        ConfigReader::parse(&text)
    }

    /// Raw string lookup; records `key` as valid.
    pub fn str_opt(&mut self, key: &str) -> Option<String> {
        self.requested.insert(key.to_string());
        self.pairs.get(key).cloned()
    }

    pub fn str_or(&mut self, key: &str, default: &str) -> String {
        self.str_opt(key).unwrap_or_else(|| default.to_string())
    }

    pub fn require(&mut self, key: &str) -> Result<String, ConfigError> {
        self.str_opt(key).ok_or(ConfigError::Missing {
            key: key.to_string(),
        })
    }

    pub fn path_opt(&mut self, key: &str) -> Option<PathBuf> {
        self.str_opt(key).map(PathBuf::from)
    }

    fn parse_with<T: std::str::FromStr>(
        key: &str,
        raw: &str,
        what: &str,
    ) -> Result<T, ConfigError> {
        raw.parse().map_err(|_| ConfigError::BadValue {
            key: key.to_string(),
            msg: format!("`{}` is not {}", raw, what),
        })
    }

    pub fn f64_or(&mut self, key: &str, default: f64) -> Result<f64, ConfigError> {
        match self.str_opt(key) {
            None => Ok(default),
            Some(raw) => ConfigReader::parse_with(key, &raw, "a number"),
        }
    }

    pub fn usize_or(&mut self, key: &str, default: usize) -> Result<usize, ConfigError> {
        match self.str_opt(key) {
            None => Ok(default),
            Some(raw) => ConfigReader::parse_with(key, &raw, "a non-negative integer"),
        }
    }

    pub fn u64_opt(&mut self, key: &str) -> Result<Option<u64>, ConfigError> {
        match self.str_opt(key) {
            None => Ok(None),
            Some(raw) => ConfigReader::parse_with(key, &raw, "a non-negative integer").map(Some),
        }
    }

    pub fn bool_or(&mut self, key: &str, default: bool) -> Result<bool, ConfigError> {
        match self.str_opt(key) {
            None => Ok(default),
            Some(raw) => match raw.as_str() {
                "true" => Ok(true),
                "false" => Ok(false),
                other => Err(ConfigError::BadValue {
                    key: key.to_string(),
                    msg: format!("`{}` is not a boolean (true or false)", other),
                }),
            },
        }
    }

    /// Comma-separated list of values, e.g. `r_values = 0, 0.5, 1`.
    pub fn list_or<T: std::str::FromStr + Clone>(
        &mut self,
        key: &str,
        default: &[T],
        what: &str,
    ) -> Result<Vec<T>, ConfigError> {
        match self.str_opt(key) {
            None => Ok(default.to_vec()),
            Some(raw) => raw
                .split(',')
                .map(|tok| ConfigReader::parse_with(key, tok.trim(), what))
                .collect(),
        }
    }

    /// Errors on the first key that was present but never requested, naming
    /// the complete set of keys this command understands.
    pub fn finish(self) -> Result<(), ConfigError> {
        for key in self.pairs.keys() {
            if !self.requested.contains(key) {
                return Err(ConfigError::UnknownKey {
                    key: key.clone(),
                    valid: self
                        .requested
                        .iter()
                        .cloned()
                        .collect::<Vec<_>>()
                        .join(", "),
                });
            }
        }
        Ok(())
    }
}

fn needs_quotes(value: &str) -> bool {
    value.is_empty()
        || value.starts_with(' ')
        || value.ends_with(' ')
        || value.contains('#')
        || value.contains('"')
}

/// Renders pairs as a config document: sorted keys, `key = value` lines, LF.
/// Values that would not survive the parser bare get quoted.
pub fn format_config<'a>(pairs: impl IntoIterator<Item = (&'a str, String)>) -> String {
    let sorted: BTreeMap<&str, String> = pairs.into_iter().collect();
    let mut out = String::new();
    for (key, value) in sorted {
        assert!(valid_key(key), "format_config: bad key `{}`", key);
        assert!(!value.contains('"'), "format_config: value with quotes");
        if needs_quotes(&value) {
            let _ = writeln!(out, "{} = \"{}\"", key, value);
        } else {
            let _ = writeln!(out, "{} = {}", key, value);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_basic_pairs_comments_and_blanks() {
        let mut r = ConfigReader::parse(
            "# leading comment\n\nepochs = 10\nr = 0.5  # trailing\nname = \"a # b\"\nflag = true\n",
        )
        .unwrap();
        assert_eq!(r.usize_or("epochs", 0).unwrap(), 10);
        assert_eq!(r.f64_or("r", 0.0).unwrap(), 0.5);
        assert_eq!(r.str_opt("name").unwrap(), "a # b");
        assert!(r.bool_or("flag", false).unwrap());
        r.finish().unwrap();
    }

    #[test]
    fn missing_keys_fall_back_to_defaults() {
        let mut r = ConfigReader::parse("").unwrap();
        assert_eq!(r.usize_or("epochs", 7).unwrap(), 7);
        assert_eq!(r.f64_or("lr", 0.001).unwrap(), 0.001);
        assert!(!r.bool_or("binarize", false).unwrap());
        assert_eq!(r.u64_opt("seed").unwrap(), None);
        assert!(matches!(
            r.require("data"),
            Err(ConfigError::Missing { .. })
        ));
        r.finish().unwrap();
    }

    #[test]
    fn syntax_errors_carry_line_numbers() {
        match ConfigReader::parse("a = 1\nnot a pair\n") {
            Err(ConfigError::Syntax { line: 2, .. }) => {}
            other => panic!("{:?}", other.err()),
        }
        match ConfigReader::parse("bad key! = 1\n") {
            Err(ConfigError::Syntax { line: 1, .. }) => {}
            other => panic!("{:?}", other.err()),
        }
        match ConfigReader::parse("s = \"open\n") {
            Err(ConfigError::Syntax { line: 1, .. }) => {}
            other => panic!("{:?}", other.err()),
        }
    }

    #[test]
    fn duplicates_are_rejected() {
        assert!(matches!(
            ConfigReader::parse("a = 1\na = 2\n"),
            Err(ConfigError::Duplicate { line: 2, .. })
        ));
    }

    #[test]
    fn unknown_key_lists_the_valid_set() {
        let mut r = ConfigReader::parse("epochs = 3\nepohcs = 4\n").unwrap();
        let _ = r.usize_or("epochs", 0);
        let _ = r.f64_or("lr", 0.0);
        match r.finish() {
            Err(ConfigError::UnknownKey { key, valid }) => {
                assert_eq!(key, "epohcs");
                assert_eq!(valid, "epochs, lr");
            }
            other => panic!("{:?}", other.err()),
        }
    }

    #[test]
    fn bad_values_name_the_key() {
        let mut r = ConfigReader::parse("epochs = soon\n").unwrap();
        match r.usize_or("epochs", 0) {
            Err(ConfigError::BadValue { key, .. }) => assert_eq!(key, "epochs"),
            other => panic!("{:?}", other.err()),
        }
    }

    #[test]
    fn lists_parse_and_default() {
        let mut r = ConfigReader::parse("r_values = 0, 0.5 ,1\n").unwrap();
        assert_eq!(
            r.list_or("r_values", &[9.0], "a number").unwrap(),
            vec![0.0, 0.5, 1.0]
        );
        assert_eq!(
            r.list_or("d_values", &[2usize, 4], "an integer").unwrap(),
            vec![2, 4]
        );
    }

    #[test]
    fn format_parse_round_trip() {
        let text = format_config([
            ("zeta", "last".to_string()),
            ("alpha", "0.5".to_string()),
            ("name", "has space".to_string()),
            ("commentish", "a # b".to_string()),
        ]);
        // Sorted keys, LF only.
        assert!(text.starts_with("alpha = 0.5\n"));
        assert!(!text.contains('\r'));
        let mut r = ConfigReader::parse(&text).unwrap();
        assert_eq!(r.str_opt("name").unwrap(), "has space");
        assert_eq!(r.str_opt("commentish").unwrap(), "a # b");
        assert_eq!(r.str_opt("alpha").unwrap(), "0.5");
        assert_eq!(r.str_opt("zeta").unwrap(), "last");
        r.finish().unwrap();
    }

    #[test]
    fn crlf_input_is_tolerated() {
        let mut r = ConfigReader::parse("a = 1\r\nb = 2\r\n").unwrap();
        assert_eq!(r.usize_or("a", 0).unwrap(), 1);
        assert_eq!(r.usize_or("b", 0).unwrap(), 2);
        r.finish().unwrap();
    }
}
