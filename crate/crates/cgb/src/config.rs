//! Flat `key = value` run configuration.
//!
//! Every tunable of a training run lives here; the CLI hashes the canonical
//! serialization into its manifest, so parsing is strict: unknown keys,
//! duplicates and malformed values are all rejected.

use std::fmt;
use std::io;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: expected `key = value`, got {text:?}")]
    BadLine { line: usize, text: String },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: duplicate key {key:?}")]
    DuplicateKey { line: usize, key: String },
    #[error("line {line}: bad value for {key}: {value:?}")]
    BadValue { line: usize, key: String, value: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SigmaMode {
    Adaptive,
    Fixed,
    Random,
}

impl SigmaMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "adaptive" => Some(SigmaMode::Adaptive),
            "fixed" => Some(SigmaMode::Fixed),
            "random" => Some(SigmaMode::Random),
            _ => None,
        }
    }
}

impl fmt::Display for SigmaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SigmaMode::Adaptive => "adaptive",
            SigmaMode::Fixed => "fixed",
            SigmaMode::Random => "random",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub k: usize,
    pub kappa: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub sigma_mode: SigmaMode,
    pub ps_update: usize,
    pub seed: u64,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            epochs: 40,
            lr: 1e-4,
            batch: 16,
            k: 10,
            kappa: 20,
            sigma_min: 0.2,
            sigma_max: 5.0,
            sigma_mode: SigmaMode::Adaptive,
            ps_update: 5,
            seed: 0,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("out"),
        }
    }
}

const KEYS: [&str; 12] = [
    "epochs", "lr", "batch", "K", "kappa", "sigma_min", "sigma_max", "sigma_mode",
    "ps_update", "seed", "data_dir", "out_dir",
];

impl Config {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Config::default();
        let mut seen: Vec<&str> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (key, value) = trimmed
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| ConfigError::BadLine { line, text: raw.to_string() })?;
            let canon = KEYS
                .iter()
                .find(|&&k| k == key)
                .ok_or_else(|| ConfigError::UnknownKey { line, key: key.to_string() })?;
            if seen.contains(canon) {
                return Err(ConfigError::DuplicateKey { line, key: key.to_string() });
            }
            seen.push(canon);
            let bad = || ConfigError::BadValue {
                line,
                key: key.to_string(),
                value: value.to_string(),
            };
            match *canon {
                "epochs" => cfg.epochs = value.parse().map_err(|_| bad())?,
                "lr" => cfg.lr = value.parse().map_err(|_| bad())?,
                "batch" => cfg.batch = value.parse().map_err(|_| bad())?,
                "K" => cfg.k = value.parse().map_err(|_| bad())?,
                "kappa" => cfg.kappa = value.parse().map_err(|_| bad())?,
                "sigma_min" => cfg.sigma_min = value.parse().map_err(|_| bad())?,
                "sigma_max" => cfg.sigma_max = value.parse().map_err(|_| bad())?,
                "sigma_mode" => cfg.sigma_mode = SigmaMode::parse(value).ok_or_else(bad)?,
                "ps_update" => cfg.ps_update = value.parse().map_err(|_| bad())?,
                "seed" => cfg.seed = value.parse().map_err(|_| bad())?,
                "data_dir" => cfg.data_dir = PathBuf::from(value),
                "out_dir" => cfg.out_dir = PathBuf::from(value),
                _ => unreachable!(),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |m: String| Err(ConfigError::Invalid(m));
        if self.batch == 0 {
            return fail("batch must be >= 1".into());
        }
        if self.k == 0 {
            return fail("K must be >= 1".into());
        }
        if self.kappa == 0 {
            return fail("kappa must be >= 1".into());
        }
        if self.ps_update == 0 {
            return fail("ps_update must be >= 1".into());
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return fail(format!("lr must be finite and >= 0, got {}", self.lr));
        }
        if !(self.sigma_min > 0.0 && self.sigma_max >= self.sigma_min) {
            return fail(format!(
                "need 0 < sigma_min <= sigma_max, got [{}, {}]",
                self.sigma_min, self.sigma_max
            ));
        }
        Ok(())
    }

    /// Canonical serialization (fixed key order); parse of the result is the
    /// identity, which the run manifests rely on.
    pub fn canonical(&self) -> String {
        format!(
            "epochs = {}\nlr = {}\nbatch = {}\nK = {}\nkappa = {}\nsigma_min = {}\n\
             sigma_max = {}\nsigma_mode = {}\nps_update = {}\nseed = {}\ndata_dir = {}\n\
             out_dir = {}\n",
            self.epochs,
            self.lr,
            self.batch,
            self.k,
            self.kappa,
            self.sigma_min,
            self.sigma_max,
            self.sigma_mode,
            self.ps_update,
            self.seed,
            self.data_dir.display(),
            self.out_dir.display(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        let cfg = Config::parse("").unwrap();
        assert_eq!(cfg, Config::default());
        assert_eq!(cfg.epochs, 40);
        assert_eq!(cfg.kappa, 20);
        assert_eq!(cfg.sigma_mode, SigmaMode::Adaptive);
    }

    #[test]
    fn parses_overrides_comments_and_blanks() {
        let text = "# run config\n\nepochs = 8\nlr = 0.001\nsigma_mode = random\nK = 6\n";
        let cfg = Config::parse(text).unwrap();
        assert_eq!(cfg.epochs, 8);
        assert_eq!(cfg.lr, 0.001);
        assert_eq!(cfg.sigma_mode, SigmaMode::Random);
        assert_eq!(cfg.k, 6);
        assert_eq!(cfg.batch, 16); // untouched default
    }

    #[test]
    fn rejects_unknown_key() {
        let err = Config::parse("momentum = 0.9\n").unwrap_err();
        assert!(matches!(err, ConfigError::UnknownKey { key, .. } if key == "momentum"));
    }

    #[test]
    fn rejects_duplicate_and_malformed_lines() {
        assert!(matches!(
            Config::parse("epochs = 1\nepochs = 2\n"),
            Err(ConfigError::DuplicateKey { .. })
        ));
        assert!(matches!(Config::parse("epochs 5\n"), Err(ConfigError::BadLine { .. })));
        assert!(matches!(
            Config::parse("epochs = five\n"),
            Err(ConfigError::BadValue { .. })
        ));
    }

    #[test]
    fn rejects_invalid_combinations() {
        assert!(Config::parse("sigma_min = 3.0\nsigma_max = 1.0\n").is_err());
        assert!(Config::parse("sigma_min = 0\n").is_err());
        assert!(Config::parse("batch = 0\n").is_err());
        assert!(Config::parse("lr = nan\n").is_err());
    }

    #[test]
    fn canonical_roundtrips() {
        let text = "epochs = 3\nlr = 0.0005\nbatch = 4\nK = 7\nkappa = 40\nsigma_mode = fixed\nseed = 99\ndata_dir = /tmp/d\nout_dir = /tmp/o\n";
        let cfg = Config::parse(text).unwrap();
        let again = Config::parse(&cfg.canonical()).unwrap();
        assert_eq!(cfg, again);
    }
}
