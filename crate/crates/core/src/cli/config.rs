//! Flat `key = value` config files and flag/file/default resolution.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use super::CliError;

pub const SEED_ENV: &str = "RECURLENS_SEED";

/// Parsed `key = value` lines; `#` starts a comment, dashes and underscores in keys are equivalent.
#[derive(Debug, Clone, Default)]
pub struct KvFile {
    entries: BTreeMap<String, String>,
}

fn canonical(key: &str) -> String {
    key.trim().replace('-', "_")
}

impl KvFile {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("config line {}: expected key = value", i + 1)))?;
            let key = canonical(k);
            if key.is_empty() {
                return Err(CliError::Usage(format!("config line {}: empty key", i + 1)));
            }
            if entries.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(CliError::Usage(format!("config key {key} given twice")));
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Data(format!("reading config {}: {e}", p.display())))?;
                Self::parse(&text)
            }
        }
    }
}

/// Resolves each setting as flag, then config file, then default, and
/// rejects config keys the command does not know.
pub struct Resolver {
    file: KvFile,
    known: BTreeSet<String>,
}

impl Resolver {
    pub fn new(file: KvFile) -> Self {
        Self { file, known: BTreeSet::new() }
    }

    pub fn get<T>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>, CliError>
    where
        T: FromStr,
        T::Err: Display,
    {
        let key = canonical(key);
        self.known.insert(key.clone());
        if flag.is_some() {
            return Ok(flag);
        }
        match self.file.entries.get(&key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| CliError::Usage(format!("config {key} = {v:?}: {e}"))),
        }
    }

    pub fn or<T>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T, CliError>
    where
        T: FromStr,
        T::Err: Display,
    {
        Ok(self.get(key, flag)?.unwrap_or(default))
    }

    /// Seed: flag, config file, `RECURLENS_SEED`, then 0.
    pub fn seed(&mut self, flag: Option<u64>) -> Result<u64, CliError> {
        if let Some(s) = self.get("seed", flag)? {
            return Ok(s);
        }
        match std::env::var(SEED_ENV) {
            Ok(v) => v.trim().parse().map_err(|e| CliError::Usage(format!("{SEED_ENV}={v:?}: {e}"))),
            Err(_) => Ok(0),
        }
    }

    pub fn finish(self) -> Result<(), CliError> {
        let unknown: Vec<&String> = self.file.entries.keys().filter(|k| !self.known.contains(*k)).collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(CliError::Usage(format!("unknown config keys: {unknown:?}")))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_dashes() {
        let f = KvFile::parse("# header\nsteps = 10\nweight-decay=0.5 # inline\n\n").unwrap();
        let mut r = Resolver::new(f);
        assert_eq!(r.get::<usize>("steps", None).unwrap(), Some(10));
        assert_eq!(r.get::<f64>("weight_decay", None).unwrap(), Some(0.5));
        assert_eq!(r.get::<usize>("steps", Some(3)).unwrap(), Some(3));
        r.finish().unwrap();
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        assert!(KvFile::parse("novalue").is_err());
        assert!(KvFile::parse("a = 1\na = 2").is_err());
        let mut r = Resolver::new(KvFile::parse("steps = x\nbogus = 1").unwrap());
        assert!(r.get::<usize>("steps", None).is_err());
        assert!(r.finish().is_err());
    }
}
