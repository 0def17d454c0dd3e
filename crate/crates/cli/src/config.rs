use anyhow::{bail, Context, Result};
use sgareg_core::network::{kv_lines, NetworkConfig};
use std::fmt::Write;
use std::path::{Path, PathBuf};

pub const CONFIG_FILE: &str = "config.txt";

/// Network settings plus run-level keys, read from a `key=value` file and
/// overridden by command-line flags.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub seed: u64,
    pub epochs: usize,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { network: NetworkConfig::default(), seed: 0, epochs: 200, data: None, out: None }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let parse_err = || format!("invalid value {value:?} for key {key}");
        match key {
            "seed" => self.seed = value.parse().with_context(parse_err)?,
            "epochs" => self.epochs = value.parse().with_context(parse_err)?,
            "data" => self.data = Some(PathBuf::from(value)),
            "out" => self.out = Some(PathBuf::from(value)),
            _ => {
                if !self.network.set(key, value)? {
                    bail!("unknown config key {key:?}");
                }
            }
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in kv_lines(text)? {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_text(&text).with_context(|| format!("in config file {}", path.display()))
    }

    /// Optional file, then `key=value` overrides in order.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = match file {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        for o in overrides {
            let Some((k, v)) = o.split_once('=') else { bail!("override {o:?} is not key=value") };
            cfg.set(k.trim(), v.trim()).with_context(|| format!("in override {o:?}"))?;
        }
        cfg.network.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "seed={}", self.seed).unwrap();
        writeln!(s, "epochs={}", self.epochs).unwrap();
        if let Some(d) = &self.data {
            writeln!(s, "data={}", d.display()).unwrap();
        }
        if let Some(o) = &self.out {
            writeln!(s, "out={}", o.display()).unwrap();
        }
        s.push_str(&self.network.to_kv());
        s
    }
}

/// Prints the effective configuration and stores it in `dir`.
pub fn echo_and_store(text: &str, dir: &Path) -> Result<()> {
    println!("# effective config");
    for line in text.lines() {
        println!("# {line}");
    }
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(CONFIG_FILE);
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}
