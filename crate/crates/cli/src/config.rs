//! Flat `key=value` run configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use underpass_core::cyclegan::GanShape;
use underpass_core::training::{HyperParams, TrainConfig};
use underpass_core::{Error, Result};

pub const KEYS: [&str; 12] = [
    "seed",
    "resolution",
    "batch_size",
    "max_epochs",
    "patience",
    "learning_rate",
    "dropout_rate",
    "l2_rate",
    "lambda_cycle",
    "lambda_identity",
    "data_root",
    "out_dir",
];

pub const RESOLVED_NAME: &str = "resolved.cfg";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub resolution: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub learning_rate: f64,
    pub dropout_rate: f64,
    pub l2_rate: f64,
    pub lambda_cycle: f64,
    pub lambda_identity: f64,
    pub data_root: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let hp = HyperParams::default();
        let cfg = TrainConfig::default();
        let gan = GanShape::default();
        Self {
            seed: cfg.seed,
            resolution: cfg.resolution,
            batch_size: cfg.batch_size,
            max_epochs: cfg.max_epochs,
            patience: cfg.patience,
            learning_rate: hp.learning_rate,
            dropout_rate: hp.dropout_rate,
            l2_rate: hp.l2_rate,
            lambda_cycle: gan.lambda_cycle,
            lambda_identity: gan.lambda_identity,
            data_root: PathBuf::from("data"),
            out_dir: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    /// Sets one key from its text value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
        where
            T::Err: std::fmt::Display,
        {
            value
                .parse()
                .map_err(|e| Error::Config(format!("{key}: cannot parse `{value}`: {e}")))
        }
        match key {
            "seed" => self.seed = num(key, value)?,
            "resolution" => self.resolution = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "max_epochs" => self.max_epochs = num(key, value)?,
            "patience" => self.patience = num(key, value)?,
            "learning_rate" => self.learning_rate = num(key, value)?,
            "dropout_rate" => self.dropout_rate = num(key, value)?,
            "l2_rate" => self.l2_rate = num(key, value)?,
            "lambda_cycle" => self.lambda_cycle = num(key, value)?,
            "lambda_identity" => self.lambda_identity = num(key, value)?,
            "data_root" => self.data_root = PathBuf::from(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            _ => {
                return Err(Error::Config(format!(
                    "unknown key `{key}` (known: {})",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Applies a config file on top of `self`. Blank lines and `#` comments
    /// are skipped; unknown or repeated keys are errors.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got `{line}`", n + 1)))?;
            let key = key.trim();
            if seen.contains(&key) {
                return Err(Error::Config(format!("line {}: `{key}` given twice", n + 1)));
            }
            seen.push(key);
            self.set(key, value.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", n + 1, strip(&e))))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// Every key in a fixed order; parsing the text gives back `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "resolution={}", self.resolution);
        let _ = writeln!(s, "batch_size={}", self.batch_size);
        let _ = writeln!(s, "max_epochs={}", self.max_epochs);
        let _ = writeln!(s, "patience={}", self.patience);
        let _ = writeln!(s, "learning_rate={:?}", self.learning_rate);
        let _ = writeln!(s, "dropout_rate={:?}", self.dropout_rate);
        let _ = writeln!(s, "l2_rate={:?}", self.l2_rate);
        let _ = writeln!(s, "lambda_cycle={:?}", self.lambda_cycle);
        let _ = writeln!(s, "lambda_identity={:?}", self.lambda_identity);
        let _ = writeln!(s, "data_root={}", self.data_root.display());
        let _ = writeln!(s, "out_dir={}", self.out_dir.display());
        s
    }

    pub fn hyper_params(&self) -> HyperParams {
        HyperParams {
            learning_rate: self.learning_rate,
            dropout_rate: self.dropout_rate,
            l2_rate: self.l2_rate,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            seed: self.seed,
            resolution: self.resolution,
        }
    }
}

fn strip(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("seed = 9\nlearning_rate=0.0005\n# note\n\nout_dir=/tmp/x y\n")
            .unwrap();
        assert_eq!((cfg.seed, cfg.learning_rate), (9, 0.0005));
        assert_eq!(cfg.out_dir, PathBuf::from("/tmp/x y"));
        let mut back = RunConfig::default();
        back.apply_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.to_text().lines().count(), KEYS.len());
    }

    #[test]
    fn rejects_bad_input() {
        for text in ["epochs=3", "seed", "seed=1\nseed=2", "patience=-1", "dropout_rate=half"] {
            let err = RunConfig::default().apply_text(text).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{text}: {err}");
        }
    }
}
