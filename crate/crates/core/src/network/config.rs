use crate::error::{config_err, Result};
use crate::losses::{check_window, SimilarityKind, DEFAULT_LNCC_WINDOW};
use crate::optim::DEFAULT_LR;
use crate::sga::DEFAULT_FFN_EXPANSION;
use std::fmt::Write;

/// Architecture and training hyperparameters of a [`super::RegistrationModel`].
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    /// Number of encoder (and decoder) resolution levels.
    pub stages: usize,
    /// Encoder feature width per stage.
    pub channels: Vec<usize>,
    /// Graph stride K per encoder stage.
    pub stride_k: Vec<usize>,
    /// Token embedding width of the bottleneck.
    pub bottleneck_d: usize,
    pub ffn_expansion: usize,
    pub similarity: SimilarityKind,
    pub lncc_window: usize,
    pub lambda_reg: f64,
    pub lr: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            stages: 4,
            channels: vec![8, 16, 16, 32],
            stride_k: vec![2, 2, 1, 1],
            bottleneck_d: 32,
            ffn_expansion: DEFAULT_FFN_EXPANSION,
            similarity: SimilarityKind::Lncc,
            lncc_window: DEFAULT_LNCC_WINDOW,
            lambda_reg: 1.0,
            lr: DEFAULT_LR,
        }
    }
}

pub const CONFIG_KEYS: [&str; 9] = [
    "stages",
    "channels",
    "stride_k",
    "bottleneck_d",
    "ffn_expansion",
    "similarity",
    "lncc_window",
    "lambda_reg",
    "lr",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().or_else(|_| config_err(format!("invalid value {value:?} for key {key}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse(key, v)).collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl NetworkConfig {
    /// The default architecture with a single graph stride at every stage.
    pub fn with_uniform_stride(mut self, k: usize) -> Self {
        self.stride_k = vec![k; self.stages];
        self
    }

    /// Checks internal consistency (not input dimensions).
    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 {
            return config_err("stages must be at least 1");
        }
        if self.channels.len() != self.stages {
            return config_err(format!("channels has {} entries for {} stages", self.channels.len(), self.stages));
        }
        if self.stride_k.len() != self.stages {
            return config_err(format!("stride_k has {} entries for {} stages", self.stride_k.len(), self.stages));
        }
        if self.channels.contains(&0) || self.bottleneck_d == 0 || self.ffn_expansion == 0 {
            return config_err("channel widths, bottleneck_d and ffn_expansion must be positive");
        }
        if self.stride_k.contains(&0) {
            return config_err("graph stride K must be at least 1");
        }
        if self.lncc_window % 2 == 0 {
            return config_err(format!("lncc_window must be odd, got {}", self.lncc_window));
        }
        if !(self.lambda_reg.is_finite() && self.lambda_reg >= 0.0) {
            return config_err(format!("lambda_reg must be finite and non-negative, got {}", self.lambda_reg));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return config_err(format!("lr must be finite and non-negative, got {}", self.lr));
        }
        Ok(())
    }

    /// Checks that `dims` fit this architecture.
    pub fn validate_dims(&self, dims: [usize; 3]) -> Result<()> {
        let f = 1usize << self.stages;
        if dims.iter().any(|&d| d % f != 0) {
            return config_err(format!("input dims {dims:?} are not divisible by 2^{} = {f}", self.stages));
        }
        if dims.iter().map(|&d| d / f).product::<usize>() < 2 {
            return config_err(format!("input dims {dims:?} leave a single bottleneck voxel"));
        }
        Ok(())
    }

    /// [`Self::validate_dims`] plus the similarity window fitting the volume.
    pub fn validate_training_dims(&self, dims: [usize; 3]) -> Result<()> {
        self.validate_dims(dims)?;
        if self.similarity == SimilarityKind::Lncc {
            check_window(self.lncc_window, dims)?;
        }
        Ok(())
    }

    /// Applies one `key=value` setting. Returns `Ok(false)` for keys that
    /// are not network settings.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "stages" => self.stages = parse(key, value)?,
            "channels" => self.channels = parse_list(key, value)?,
            "stride_k" => self.stride_k = parse_list(key, value)?,
            "bottleneck_d" => self.bottleneck_d = parse(key, value)?,
            "ffn_expansion" => self.ffn_expansion = parse(key, value)?,
            "similarity" => self.similarity = value.trim().parse()?,
            "lncc_window" => self.lncc_window = parse(key, value)?,
            "lambda_reg" => self.lambda_reg = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// `key=value` lines, one per setting.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        writeln!(s, "stages={}", self.stages).unwrap();
        writeln!(s, "channels={}", join(&self.channels)).unwrap();
        writeln!(s, "stride_k={}", join(&self.stride_k)).unwrap();
        writeln!(s, "bottleneck_d={}", self.bottleneck_d).unwrap();
        writeln!(s, "ffn_expansion={}", self.ffn_expansion).unwrap();
        writeln!(s, "similarity={}", self.similarity.name()).unwrap();
        writeln!(s, "lncc_window={}", self.lncc_window).unwrap();
        writeln!(s, "lambda_reg={:?}", self.lambda_reg).unwrap();
        writeln!(s, "lr={:?}", self.lr).unwrap();
        s
    }

    /// Parses [`Self::to_kv`] output. Blank lines and `#` comments are
    /// skipped; unknown keys are errors.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (key, value) in kv_lines(text)? {
            if !cfg.set(key, value)? {
                return config_err(format!("unknown config key {key:?}"));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Splits `key=value` lines, skipping blanks and `#` comments.
pub fn kv_lines(text: &str) -> Result<Vec<(&str, &str)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        match line.split_once('=') {
            Some((k, v)) => out.push((k.trim(), v.trim())),
            None => return config_err(format!("line {}: expected key=value, got {line:?}", n + 1)),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_round_trip() {
        let mut c = NetworkConfig::default();
        c.lambda_reg = 0.1 + 0.2;
        c.lr = 3e-7;
        c.similarity = SimilarityKind::Mse;
        assert_eq!(NetworkConfig::from_kv(&c.to_kv()).unwrap(), c);
    }

    #[test]
    fn unknown_and_malformed_keys_fail() {
        assert!(NetworkConfig::from_kv("stagse=4\n").is_err());
        assert!(NetworkConfig::from_kv("stages\n").is_err());
        assert!(NetworkConfig::from_kv("lr=fast\n").is_err());
        assert!(NetworkConfig::from_kv("# comment\n\nlr=0.001\n").is_ok());
    }

    #[test]
    fn validation() {
        let mut c = NetworkConfig::default();
        assert!(c.validate().is_ok());
        c.lncc_window = 8;
        assert!(c.validate().is_err());
        let c = NetworkConfig { stages: 3, ..NetworkConfig::default() };
        assert!(c.validate().is_err());
        let c = NetworkConfig::default();
        assert!(c.validate_dims([32, 32, 32]).is_ok());
        assert!(c.validate_dims([32, 32, 24]).is_err());
        assert!(c.validate_dims([16, 16, 16]).is_err());
    }
}
