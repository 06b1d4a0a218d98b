//! Flat `key = value` configuration shared by every subcommand.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use pcam_core::{Error, Result};

/// Key/value settings. Each command takes the keys it understands; any key
/// left over afterwards is reported as an error.
#[derive(Debug, Clone, Default)]
pub struct Settings {
    values: BTreeMap<String, String>,
    used: BTreeMap<String, String>,
}

impl Settings {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Contract(format!("config line {}: expected `key = value`, got `{raw}`", i + 1)));
            };
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::Contract(format!("config line {}: empty key", i + 1)));
            }
            values.insert(k.to_string(), unquote(v.trim()).to_string());
        }
        Ok(Self { values, used: BTreeMap::new() })
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut s = match path {
            Some(p) => Self::parse(&std::fs::read_to_string(p)?)?,
            None => Self::default(),
        };
        for o in overrides {
            let extra = Self::parse(o)?;
            s.values.extend(extra.values);
        }
        Ok(s)
    }

    /// Takes `key`, falling back to `default` when absent.
    pub fn get<T>(&mut self, key: &str, default: T) -> Result<T>
    where
        T: FromStr + ToString,
    {
        let value = match self.values.remove(key) {
            Some(raw) => raw
                .parse()
                .map_err(|_| Error::Contract(format!("config key `{key}`: cannot parse `{raw}`")))?,
            None => default,
        };
        self.used.insert(key.to_string(), value.to_string());
        Ok(value)
    }

    /// Comma-separated list.
    pub fn get_list<T>(&mut self, key: &str, default: &[T]) -> Result<Vec<T>>
    where
        T: FromStr + ToString + Clone,
    {
        let value: Vec<T> = match self.values.remove(key) {
            Some(raw) => raw
                .split(',')
                .map(|p| p.trim().parse().map_err(|_| Error::Contract(format!("config key `{key}`: bad item `{p}`"))))
                .collect::<Result<_>>()?,
            None => default.to_vec(),
        };
        self.used.insert(key.to_string(), value.iter().map(T::to_string).collect::<Vec<_>>().join(","));
        Ok(value)
    }

    /// Errors on keys that no consumer took.
    pub fn check_consumed(&self) -> Result<()> {
        match self.values.keys().next() {
            Some(k) => Err(Error::Contract(format!("unknown config key `{k}`"))),
            None => Ok(()),
        }
    }

    /// The effective settings, after [`Settings::check_consumed`].
    pub fn finish(self) -> Result<BTreeMap<String, String>> {
        self.check_consumed()?;
        Ok(self.used)
    }
}

fn unquote(v: &str) -> &str {
    v.strip_prefix('"').and_then(|s| s.strip_suffix('"')).unwrap_or(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_defaults_overrides_and_rejects_leftovers() {
        let mut s = Settings::parse("# comment\nepochs = 3\nlr=0.01 # trailing\nname = \"x\"\n").unwrap();
        assert_eq!(s.get("epochs", 30usize).unwrap(), 3);
        assert_eq!(s.get("batch", 16usize).unwrap(), 16);
        assert_eq!(s.get("lr", 1.0f64).unwrap(), 0.01);
        assert!(s.clone().finish().is_err());
        assert_eq!(s.get("name", String::new()).unwrap(), "x");
        let used = s.finish().unwrap();
        assert_eq!(used["batch"], "16");
    }

    #[test]
    fn bad_lines_and_values_are_contract_errors() {
        assert!(Settings::parse("novalue").is_err());
        let mut s = Settings::parse("epochs = many").unwrap();
        assert!(matches!(s.get("epochs", 1usize), Err(Error::Contract(_))));
        let mut s = Settings::load(None, &["widths = 4, 8".into()]).unwrap();
        assert_eq!(s.get_list("widths", &[1usize]).unwrap(), vec![4, 8]);
    }
}
