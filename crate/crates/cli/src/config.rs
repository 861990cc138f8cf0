//! Flat `key = value` run configuration.
//!
//! Values come from, in increasing priority: built-in defaults, the
//! `METAPP_SEED` environment variable (seed only), the config file, and
//! command-line flags. The resolved values are written back in the same
//! format so a run can be repeated with `--config config.resolved`.

use std::fmt::Write as _;
use std::str::FromStr;

use metatpp_core::train::TrainConfig;
use metatpp_core::Variant;

use crate::CliError;

pub const SEED_ENV: &str = "METAPP_SEED";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub variant: Variant,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub train_samples: usize,
    pub val_samples: usize,
    pub eval_samples: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub survival: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            variant: Variant::AttentiveVi,
            lr: t.lr,
            weight_decay: t.weight_decay,
            batch_size: t.batch_size,
            train_samples: t.train_samples,
            val_samples: t.val_samples,
            eval_samples: metatpp_core::eval::DEFAULT_SAMPLES,
            max_epochs: t.max_epochs,
            patience: t.patience,
            seed: t.seed,
            survival: t.survival,
        }
    }
}

/// Overrides collected from command-line flags.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub variant: Option<Variant>,
    pub lr: Option<f64>,
    pub weight_decay: Option<f64>,
    pub batch_size: Option<usize>,
    pub train_samples: Option<usize>,
    pub val_samples: Option<usize>,
    pub eval_samples: Option<usize>,
    pub max_epochs: Option<usize>,
    pub patience: Option<usize>,
    pub seed: Option<u64>,
    pub survival: Option<bool>,
}

fn parse_value<T: FromStr>(key: &str, value: &str, line: usize) -> Result<T, CliError> {
    value.parse().map_err(|_| {
        CliError::Usage(format!(
            "config line {line}: invalid value '{value}' for {key}"
        ))
    })
}

impl RunConfig {
    pub const KEYS: [&'static str; 11] = [
        "variant",
        "lr",
        "weight_decay",
        "batch_size",
        "train_samples",
        "val_samples",
        "eval_samples",
        "max_epochs",
        "patience",
        "seed",
        "survival",
    ];

    /// Applies the lines of a config file on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        let mut seen = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let l = raw.trim();
            if l.is_empty() || l.starts_with('#') {
                continue;
            }
            let (key, value) = l.split_once('=').ok_or_else(|| {
                CliError::Usage(format!("config line {line}: expected key=value"))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if seen.contains(&key.to_string()) {
                return Err(CliError::Usage(format!(
                    "config line {line}: duplicate key {key}"
                )));
            }
            seen.push(key.to_string());
            match key {
                "variant" => {
                    self.variant = value.parse().map_err(|e: metatpp_core::Error| {
                        CliError::Usage(format!("config line {line}: {e}"))
                    })?
                }
                "lr" => self.lr = parse_value(key, value, line)?,
                "weight_decay" => self.weight_decay = parse_value(key, value, line)?,
                "batch_size" => self.batch_size = parse_value(key, value, line)?,
                "train_samples" => self.train_samples = parse_value(key, value, line)?,
                "val_samples" => self.val_samples = parse_value(key, value, line)?,
                "eval_samples" => self.eval_samples = parse_value(key, value, line)?,
                "max_epochs" => self.max_epochs = parse_value(key, value, line)?,
                "patience" => self.patience = parse_value(key, value, line)?,
                "seed" => self.seed = parse_value(key, value, line)?,
                "survival" => self.survival = parse_value(key, value, line)?,
                _ => {
                    return Err(CliError::Usage(format!(
                        "config line {line}: unknown key '{key}', expected one of: {}",
                        Self::KEYS.join(", ")
                    )))
                }
            }
        }
        Ok(())
    }

    pub fn apply_overrides(&mut self, o: &Overrides) {
        macro_rules! set {
            ($($f:ident),*) => {$(if let Some(v) = o.$f { self.$f = v; })*};
        }
        set!(
            variant,
            lr,
            weight_decay,
            batch_size,
            train_samples,
            val_samples,
            eval_samples,
            max_epochs,
            patience,
            seed,
            survival
        );
    }

    /// Defaults, then the seed environment variable, then the config file
    /// text, then flags.
    pub fn resolve(
        env_seed: Option<&str>,
        file: Option<&str>,
        o: &Overrides,
    ) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        if let Some(s) = env_seed {
            cfg.seed = s
                .trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("{SEED_ENV}: invalid seed '{s}'")))?;
        }
        if let Some(text) = file {
            cfg.apply_text(text)?;
        }
        cfg.apply_overrides(o);
        Ok(cfg)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            train_samples: self.train_samples,
            val_samples: self.val_samples,
            max_epochs: self.max_epochs,
            patience: self.patience,
            seed: self.seed,
            survival: self.survival,
        }
    }

    /// Serializes every key, preceded by `#` comment lines.
    pub fn to_text(&self, comments: &[String]) -> String {
        let mut s = String::new();
        for c in comments {
            let _ = writeln!(s, "# {c}");
        }
        let _ = writeln!(s, "variant = {}", self.variant);
        let _ = writeln!(s, "lr = {:?}", self.lr);
        let _ = writeln!(s, "weight_decay = {:?}", self.weight_decay);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "train_samples = {}", self.train_samples);
        let _ = writeln!(s, "val_samples = {}", self.val_samples);
        let _ = writeln!(s, "eval_samples = {}", self.eval_samples);
        let _ = writeln!(s, "max_epochs = {}", self.max_epochs);
        let _ = writeln!(s, "patience = {}", self.patience);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "survival = {}", self.survival);
        s
    }
}
