//! Flat `key = value` run configuration merged with command-line flags.
//!
//! Precedence, lowest first: built-in defaults, config file, `ABBNN_SEED`,
//! flags. Keys are shared by all commands; a key a command does not use is
//! ignored, a key nobody knows is an error.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use abbnn::{Error, Result};

pub const KEYS: &[&str] = &[
    "agc_exclude_head",
    "agc_lambda",
    "alpha_exp",
    "activation",
    "batch_size",
    "checkpoint",
    "classes",
    "counters_out",
    "data",
    "data_seed",
    "epochs",
    "format",
    "frac_bits",
    "hw",
    "init_checkpoint",
    "input",
    "loss",
    "lr",
    "metrics_log",
    "model",
    "out",
    "phase",
    "probes",
    "report_out",
    "seed",
    "separation",
    "shape",
    "spec",
    "step1_checkpoint",
    "strict",
    "teacher",
    "test",
    "top_k",
    "train",
    "variant",
    "weight_decay",
];

pub const SEED_ENV: &str = "ABBNN_SEED";

#[derive(Debug, Default)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

fn normalize(key: &str) -> String {
    key.trim().replace('-', "_")
}

impl Settings {
    pub fn parse_file_text(text: &str, origin: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{origin}:{}: expected `key = value`, got `{line}`", i + 1)))?;
            let k = normalize(k);
            if !KEYS.contains(&k.as_str()) {
                return Err(Error::Config(format!("{origin}:{}: unknown key `{k}`", i + 1)));
            }
            values.insert(k, v.trim().to_string());
        }
        Ok(Self { values })
    }

    /// Merge the optional config file, the seed variable and `flags`.
    pub fn load(config: Option<&Path>, flags: Vec<(&'static str, Option<String>)>) -> Result<Self> {
        let mut s = match config {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
                Self::parse_file_text(&text, &p.display().to_string())?
            }
            None => Self::default(),
        };
        if let Ok(v) = std::env::var(SEED_ENV) {
            s.values.insert("seed".into(), v);
        }
        for (k, v) in flags {
            debug_assert!(KEYS.contains(&k), "flag key {k} not registered");
            if let Some(v) = v {
                s.values.insert(k.into(), v);
            }
        }
        Ok(s)
    }

    pub fn str(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.str(key)
            .ok_or_else(|| Error::Config(format!("missing `--{}` (or `{key} =` in the config file)", key.replace('_', "-"))))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        self.str(key)
            .map(|v| v.parse().map_err(|e| Error::Config(format!("bad value `{v}` for `{key}`: {e}"))))
            .transpose()
    }

    pub fn or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn flag(&self, key: &str) -> Result<bool> {
        match self.str(key) {
            None => Ok(false),
            Some("true" | "1" | "yes" | "on") => Ok(true),
            Some("false" | "0" | "no" | "off") => Ok(false),
            Some(v) => Err(Error::Config(format!("bad boolean `{v}` for `{key}`"))),
        }
    }
}

/// `true` as a flag value when the switch was given.
pub fn switch(on: bool) -> Option<String> {
    on.then(|| "true".to_string())
}

pub fn opt<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(ToString::to_string)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_values_and_comments() {
        let s = Settings::parse_file_text("# run\nepochs = 3\nbatch-size=8 # inline\n\n", "f").unwrap();
        assert_eq!(s.get::<usize>("epochs").unwrap(), Some(3));
        assert_eq!(s.get::<usize>("batch_size").unwrap(), Some(8));
        assert_eq!(s.or("lr", 0.5).unwrap(), 0.5);
    }

    #[test]
    fn unknown_key_is_an_error() {
        let e = Settings::parse_file_text("epochs = 3\nepoch = 4\n", "f").unwrap_err();
        assert!(e.to_string().contains("f:2: unknown key `epoch`"), "{e}");
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn malformed_line_is_an_error() {
        assert!(Settings::parse_file_text("epochs 3", "f").is_err());
    }

    #[test]
    fn bad_values_name_the_key() {
        let s = Settings::parse_file_text("lr = fast\nstrict = maybe", "f").unwrap();
        assert!(s.get::<f64>("lr").unwrap_err().to_string().contains("`lr`"));
        assert!(s.flag("strict").is_err());
        assert!(s.require("spec").unwrap_err().to_string().contains("--spec"));
    }
}
