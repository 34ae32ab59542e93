//! Flat `key = value` config files with `[section]` headers. Keys before the
//! first header (or under `[global]`) are global. Values are resolved as
//! defaults < file < command-line flags.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

/// A configuration problem; maps to exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

pub type ConfigResult<T> = std::result::Result<T, ConfigError>;

fn err<T>(msg: impl Into<String>) -> ConfigResult<T> {
    Err(ConfigError(msg.into()))
}

pub const GLOBAL: &str = "global";
pub const GLOBAL_KEYS: &[&str] = &["seed", "out", "threads"];

/// A parsed config file: section → key → (value, line).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConfigFile {
    sections: BTreeMap<String, BTreeMap<String, (String, usize)>>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> ConfigResult<Self> {
        let mut file = ConfigFile::default();
        let mut section = GLOBAL.to_string();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = match raw.find('#') {
                Some(p) => &raw[..p],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| ConfigError(format!("line {line_no}: unterminated section header")))?
                    .trim();
                if name.is_empty() {
                    return err(format!("line {line_no}: empty section name"));
                }
                section = name.to_string();
                file.sections.entry(section.clone()).or_default();
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return err(format!("line {line_no}: expected `key = value`, got `{line}`"));
            };
            let key = key.trim().replace('-', "_");
            if key.is_empty() {
                return err(format!("line {line_no}: missing key"));
            }
            let entries = file.sections.entry(section.clone()).or_default();
            if let Some((_, first)) = entries.get(&key) {
                return err(format!(
                    "line {line_no}: `{key}` already set in [{section}] on line {first}"
                ));
            }
            entries.insert(key, (value.trim().to_string(), line_no));
        }
        Ok(file)
    }

    pub fn load(path: &Path) -> ConfigResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| ConfigError(format!("{}: {}", path.display(), e.0)))
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections
            .get(section)
            .and_then(|s| s.get(key))
            .map(|(v, _)| v.as_str())
    }

    /// Every key that no section schema knows, as `[section] key` strings.
    /// Unknown sections report all their keys.
    pub fn unknown_keys(&self, schemas: &[(&str, &[&str])]) -> Vec<String> {
        let mut out = Vec::new();
        for (section, entries) in &self.sections {
            let known: &[&str] = schemas
                .iter()
                .find(|(name, _)| name == section)
                .map(|(_, keys)| *keys)
                .unwrap_or(&[]);
            for key in entries.keys() {
                if !known.contains(&key.as_str()) {
                    out.push(format!("[{section}] {key}"));
                }
            }
        }
        out
    }
}

/// Resolved values for one command.
#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub section: &'static str,
    values: BTreeMap<&'static str, String>,
}

impl Settings {
    pub fn resolve(
        section: &'static str,
        defaults: &[(&'static str, &'static str)],
        file: Option<&ConfigFile>,
        overrides: &[(&'static str, String)],
    ) -> Self {
        let mut values = BTreeMap::new();
        for &(key, default) in defaults {
            let v = file
                .and_then(|f| f.get(section, key))
                .unwrap_or(default)
                .to_string();
            values.insert(key, v);
        }
        for (key, v) in overrides {
            values.insert(*key, v.clone());
        }
        Settings { section, values }
    }

    /// Canonical `section.key=value` lines, sorted.
    pub fn canonical(&self) -> String {
        self.values
            .iter()
            .map(|(k, v)| format!("{}.{k}={v}\n", self.section))
            .collect()
    }

    fn raw(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("`{key}` is not a key of [{}]", self.section))
    }

    fn bad<T>(&self, key: &str, what: &str) -> ConfigResult<T> {
        err(format!(
            "[{}] {key} = `{}`: expected {what}",
            self.section,
            self.raw(key)
        ))
    }

    pub fn string(&self, key: &str) -> String {
        self.raw(key).to_string()
    }

    pub fn usize(&self, key: &str) -> ConfigResult<usize> {
        self.raw(key)
            .parse()
            .or_else(|_| self.bad(key, "a non-negative integer"))
    }

    pub fn f64(&self, key: &str) -> ConfigResult<f64> {
        match self.raw(key).parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => self.bad(key, "a finite number"),
        }
    }

    pub fn bool(&self, key: &str) -> ConfigResult<bool> {
        match self.raw(key) {
            "true" | "yes" | "1" | "on" => Ok(true),
            "false" | "no" | "0" | "off" => Ok(false),
            _ => self.bad(key, "true or false"),
        }
    }

    /// Comma-separated numbers; the empty string is the empty list.
    pub fn f64_list(&self, key: &str) -> ConfigResult<Vec<f64>> {
        let raw = self.raw(key);
        if raw.is_empty() {
            return Ok(Vec::new());
        }
        raw.split(',')
            .map(|p| p.trim().parse::<f64>().ok().filter(|v| v.is_finite()))
            .collect::<Option<Vec<_>>>()
            .map_or_else(|| self.bad(key, "comma-separated numbers"), Ok)
    }

    pub fn usize_list(&self, key: &str) -> ConfigResult<Vec<usize>> {
        let raw = self.raw(key);
        if raw.is_empty() {
            return Ok(Vec::new());
        }
        raw.split(',')
            .map(|p| p.trim().parse::<usize>().ok())
            .collect::<Option<Vec<_>>>()
            .map_or_else(|| self.bad(key, "comma-separated integers"), Ok)
    }

    /// Empty means "not set".
    pub fn path(&self, key: &str) -> Option<PathBuf> {
        let raw = self.raw(key);
        (!raw.is_empty()).then(|| PathBuf::from(raw))
    }

    /// A path that must name an existing file.
    pub fn existing_file(&self, key: &str) -> ConfigResult<PathBuf> {
        let Some(p) = self.path(key) else {
            return err(format!("[{}] {key} must be set", self.section));
        };
        if !p.is_file() {
            return err(format!("[{}] {key}: no such file {}", self.section, p.display()));
        }
        Ok(p)
    }
}

/// 64-bit FNV-1a, hex encoded.
pub fn fnv1a_hex(text: &str) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

#[cfg(test)]
mod tests {
    use super::*;

    const DEFAULTS: &[(&str, &str)] = &[("k", "2"), ("pi", "0.3,0.2"), ("flag", "false")];

    #[test]
    fn parses_sections_comments_and_globals() {
        let f = ConfigFile::parse("seed = 5 # root\n\n[generate]\nk=3\npi = 0.1, 0.2,0.3\n[train]\nepochs=4\n").unwrap();
        assert_eq!(f.get(GLOBAL, "seed"), Some("5"));
        assert_eq!(f.get("generate", "pi"), Some("0.1, 0.2,0.3"));
        assert_eq!(f.get("train", "epochs"), Some("4"));
        assert_eq!(f.get("train", "k"), None);
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(ConfigFile::parse("[generate\nk=1").is_err());
        assert!(ConfigFile::parse("just words").is_err());
        assert!(ConfigFile::parse("[a]\nk=1\nk=2").is_err());
    }

    #[test]
    fn lists_unknown_keys_across_sections() {
        let f = ConfigFile::parse("bogus=1\n[generate]\nk=1\nkk=2\n[nosuch]\nx=1\n").unwrap();
        let unknown = f.unknown_keys(&[(GLOBAL, GLOBAL_KEYS), ("generate", &["k"])]);
        assert_eq!(unknown, vec!["[generate] kk", "[global] bogus", "[nosuch] x"]);
    }

    #[test]
    fn precedence_is_default_file_flag() {
        let f = ConfigFile::parse("[generate]\nk=3\npi=0.5,0.5,0.5\n").unwrap();
        let s = Settings::resolve("generate", DEFAULTS, Some(&f), &[("k", "4".into())]);
        assert_eq!(s.usize("k").unwrap(), 4);
        assert_eq!(s.f64_list("pi").unwrap(), vec![0.5; 3]);
        assert!(!s.bool("flag").unwrap());
    }

    #[test]
    fn typed_getters_report_key_and_value() {
        let s = Settings::resolve("generate", DEFAULTS, None, &[("k", "two".into())]);
        let e = s.usize("k").unwrap_err();
        assert!(e.0.contains("[generate] k = `two`"), "{e}");
        let s = Settings::resolve("generate", DEFAULTS, None, &[("pi", "0.3,x".into())]);
        assert!(s.f64_list("pi").is_err());
    }

    #[test]
    fn canonical_form_is_order_independent() {
        let a = Settings::resolve("generate", DEFAULTS, None, &[("k", "3".into()), ("pi", "1".into())]);
        let b = Settings::resolve("generate", DEFAULTS, None, &[("pi", "1".into()), ("k", "3".into())]);
        assert_eq!(fnv1a_hex(&a.canonical()), fnv1a_hex(&b.canonical()));
        assert_ne!(a.canonical(), Settings::resolve("generate", DEFAULTS, None, &[]).canonical());
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a_hex(""), "cbf29ce484222325");
        assert_eq!(fnv1a_hex("a"), "af63dc4c8601ec8c");
    }
}
