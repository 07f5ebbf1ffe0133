//! `key = value` experiment files. Flags always win over file values, which
//! win over built-in defaults.

use std::collections::HashMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{usage, CliError};

#[derive(Debug, Default, Clone)]
pub struct FileConfig {
    values: HashMap<String, String>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut values = HashMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| usage(format!("config line {}: expected key = value", i + 1)))?;
            values.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(Self { values })
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError> {
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse::<T>()
                .map(Some)
                .map_err(|_| usage(format!("config key {key}: cannot parse {v:?}"))),
        }
    }

    /// Comma-separated integer list, e.g. `stage_widths = 16,32,64,128`.
    pub fn get_usize_list(&self, key: &str) -> Result<Option<Vec<usize>>, CliError> {
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => v
                .split(',')
                .map(|p| p.trim().parse::<usize>())
                .collect::<Result<Vec<_>, _>>()
                .map(Some)
                .map_err(|_| usage(format!("config key {key}: cannot parse {v:?}"))),
        }
    }
}

/// flag > file > default.
pub fn resolve<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_blanks() {
        let cfg = FileConfig::parse("# comment\n\nseed = 42\n widths = 4, 8 ,16\n").unwrap();
        assert_eq!(cfg.get::<u64>("seed").unwrap(), Some(42));
        assert_eq!(cfg.get_usize_list("widths").unwrap(), Some(vec![4, 8, 16]));
        assert_eq!(cfg.get::<u64>("missing").unwrap(), None);
    }

    #[test]
    fn rejects_bad_lines_and_values() {
        assert!(FileConfig::parse("not a kv line\n").is_err());
        let cfg = FileConfig::parse("seed = abc\n").unwrap();
        assert!(cfg.get::<u64>("seed").is_err());
    }

    #[test]
    fn flags_win() {
        assert_eq!(resolve(Some(1), Some(2), 3), 1);
        assert_eq!(resolve(None, Some(2), 3), 2);
        assert_eq!(resolve::<u32>(None, None, 3), 3);
    }
}
