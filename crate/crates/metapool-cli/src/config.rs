//! Flat `key=value` defaults file behind `--config`.
//!
//! One pair per line; blank lines and lines starting with `#` are skipped.
//! Keys are the long flag names (dashes and underscores interchangeable) and
//! values use the same spellings the flags accept. Explicit flags always win;
//! the file only fills in what the command line left out.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use clap::ValueEnum;
use metapool::{Error, Result};

/// Union of the keys every subcommand understands, so one file can back
/// several subcommands while misspellings still fail loudly.
const KNOWN_KEYS: [&str; 21] = [
    "burn_in",
    "chain",
    "continuity",
    "dataset",
    "draws",
    "formats",
    "grid_max",
    "grid_min",
    "grid_points",
    "input",
    "iterations",
    "keep_mass",
    "level",
    "m",
    "out",
    "partition_prior",
    "prior",
    "replicates",
    "scale",
    "seed",
    "threads",
];

#[derive(Debug)]
pub struct FileConfig {
    map: BTreeMap<String, String>,
}

impl FileConfig {
    pub fn empty() -> Self {
        FileConfig {
            map: BTreeMap::new(),
        }
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::empty());
        };
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Validation(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Parse {
                    line: idx + 1,
                    message: format!("expected `key = value`, found {line:?}"),
                });
            };
            let key = key.trim().to_ascii_lowercase().replace('-', "_");
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(Error::Parse {
                    line: idx + 1,
                    message: format!(
                        "unknown config key {key:?}; known keys: {}",
                        KNOWN_KEYS.join(", ")
                    ),
                });
            }
            if map.insert(key.clone(), value.trim().to_string()).is_some() {
                return Err(Error::Parse {
                    line: idx + 1,
                    message: format!("config key {key:?} given twice"),
                });
            }
        }
        Ok(FileConfig { map })
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.map.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse().map(Some).map_err(|e| {
                Error::Validation(format!("config key {key}: invalid value {raw:?}: {e}"))
            }),
        }
    }

    pub fn get_enum<T: ValueEnum>(&self, key: &str) -> Result<Option<T>> {
        match self.map.get(key) {
            None => Ok(None),
            Some(raw) => T::from_str(raw, true).map(Some).map_err(|_| {
                Error::Validation(format!(
                    "config key {key}: invalid value {raw:?}; possible values: {}",
                    possible_values::<T>().join(", ")
                ))
            }),
        }
    }

    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: Display,
    {
        let Some(raw) = self.map.get(key) else {
            return Ok(None);
        };
        raw.split(',')
            .map(|item| {
                item.trim().parse().map_err(|e| {
                    Error::Validation(format!(
                        "config key {key}: invalid list item {:?}: {e}",
                        item.trim()
                    ))
                })
            })
            .collect::<Result<Vec<T>>>()
            .map(Some)
    }

    pub fn get_enum_list<T: ValueEnum>(&self, key: &str) -> Result<Option<Vec<T>>> {
        let Some(raw) = self.map.get(key) else {
            return Ok(None);
        };
        raw.split(',')
            .map(|item| {
                T::from_str(item.trim(), true).map_err(|_| {
                    Error::Validation(format!(
                        "config key {key}: invalid list item {:?}; possible values: {}",
                        item.trim(),
                        possible_values::<T>().join(", ")
                    ))
                })
            })
            .collect::<Result<Vec<T>>>()
            .map(Some)
    }
}

fn possible_values<T: ValueEnum>() -> Vec<String> {
    T::value_variants()
        .iter()
        .filter_map(|v| v.to_possible_value())
        .map(|p| p.get_name().to_string())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::args::{FormatArg, ScaleArg};

    #[test]
    fn parses_pairs_comments_and_blank_lines() {
        let cfg = FileConfig::parse(
            "# defaults for the five-study runs\n\ndataset = he2020_five\ndraws=10000\nscale = logit\nformats = json, csv\n",
        )
        .unwrap();
        assert_eq!(
            cfg.get::<String>("dataset").unwrap().as_deref(),
            Some("he2020_five")
        );
        assert_eq!(cfg.get::<usize>("draws").unwrap(), Some(10_000));
        assert_eq!(cfg.get_enum::<ScaleArg>("scale").unwrap(), Some(ScaleArg::Logit));
        assert_eq!(
            cfg.get_enum_list::<FormatArg>("formats").unwrap(),
            Some(vec![FormatArg::Json, FormatArg::Csv])
        );
        assert_eq!(cfg.get::<u64>("seed").unwrap(), None);
    }

    #[test]
    fn dashes_match_underscores() {
        let cfg = FileConfig::parse("grid-points = 51\n").unwrap();
        assert_eq!(cfg.get::<usize>("grid_points").unwrap(), Some(51));
    }

    #[test]
    fn rejects_unknown_keys_bad_values_and_duplicates() {
        let err = FileConfig::parse("draw = 10\n").unwrap_err();
        assert!(err.to_string().contains("unknown config key"));

        let err = FileConfig::parse("no equals sign\n").unwrap_err();
        assert!(err.to_string().contains("key = value"));

        let cfg = FileConfig::parse("draws = soon\n").unwrap();
        assert!(cfg.get::<usize>("draws").is_err());

        let err = FileConfig::parse("seed = 1\nseed = 2\n").unwrap_err();
        assert!(err.to_string().contains("given twice"));
    }

    #[test]
    fn lists_split_and_trim() {
        let cfg = FileConfig::parse("m = 0.2, 5\n").unwrap();
        assert_eq!(cfg.get_list::<f64>("m").unwrap(), Some(vec![0.2, 5.0]));
    }
}
