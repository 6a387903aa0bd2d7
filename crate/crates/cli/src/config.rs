use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use anyhow::{bail, Context};
use dspt_core::analytics::{DEFAULT_INTERVAL_TOKENS, DEFAULT_MIN_SUPPORT};
use dspt_core::beta::DEFAULT_BINS;
use dspt_core::provenance::DEFAULT_ALPHA;
use dspt_core::scoring::BackendConfig;
use dspt_core::{default_beta_grid, default_special_tokens, ModelRole, ThresholdConfig};
use serde::{Deserialize, Deserializer};

/// A fixed beta or a request to search for one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BetaSetting {
    Auto,
    Fixed(f64),
}

impl FromStr for BetaSetting {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(BetaSetting::Auto);
        }
        s.parse::<f64>()
            .map(BetaSetting::Fixed)
            .map_err(|_| format!("expected a number or \"auto\", got {s:?}"))
    }
}

impl fmt::Display for BetaSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BetaSetting::Auto => f.write_str("auto"),
            BetaSetting::Fixed(b) => write!(f, "{b}"),
        }
    }
}

impl<'de> Deserialize<'de> for BetaSetting {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(b) => Ok(BetaSetting::Fixed(b)),
            Repr::Text(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// The `--config` file. Every key is optional.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub alpha: Option<f64>,
    pub beta: Option<BetaSetting>,
    pub beta_grid: Option<Vec<f64>>,
    pub bins: Option<usize>,
    pub min_support: Option<usize>,
    pub interval_tokens: Option<usize>,
    pub special_tokens: Option<Vec<String>>,
    #[serde(default)]
    pub backends: BTreeMap<ModelRole, BackendConfig>,
    pub seed: Option<u64>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

/// Settings after applying defaults, then the config file, then flags.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub alpha: f64,
    pub beta: BetaSetting,
    pub beta_grid: Vec<f64>,
    pub bins: usize,
    pub min_support: usize,
    pub interval_tokens: usize,
    pub special_tokens: Vec<String>,
    pub backends: BTreeMap<ModelRole, BackendConfig>,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            beta: BetaSetting::Auto,
            beta_grid: default_beta_grid(),
            bins: DEFAULT_BINS,
            min_support: DEFAULT_MIN_SUPPORT,
            interval_tokens: DEFAULT_INTERVAL_TOKENS,
            special_tokens: default_special_tokens(),
            backends: BTreeMap::new(),
            seed: 0,
        }
    }
}

/// Values given on the command line; `None` leaves the lower layer in place.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub alpha: Option<f64>,
    pub beta: Option<BetaSetting>,
    pub bins: Option<usize>,
    pub min_support: Option<usize>,
    pub interval_tokens: Option<usize>,
    pub special_tokens: Option<Vec<String>>,
    pub seed: Option<u64>,
}

impl RunConfig {
    pub fn resolve(file: Option<ConfigFile>, flags: &Overrides) -> anyhow::Result<Self> {
        let file = file.unwrap_or_default();
        let d = RunConfig::default();
        let cfg = RunConfig {
            alpha: flags.alpha.or(file.alpha).unwrap_or(d.alpha),
            beta: flags.beta.or(file.beta).unwrap_or(d.beta),
            beta_grid: file.beta_grid.unwrap_or(d.beta_grid),
            bins: flags.bins.or(file.bins).unwrap_or(d.bins),
            min_support: flags.min_support.or(file.min_support).unwrap_or(d.min_support),
            interval_tokens: flags
                .interval_tokens
                .or(file.interval_tokens)
                .unwrap_or(d.interval_tokens),
            special_tokens: flags
                .special_tokens
                .clone()
                .or(file.special_tokens)
                .unwrap_or(d.special_tokens),
            backends: file.backends,
            seed: flags.seed.or(file.seed).unwrap_or(d.seed),
        };
        if cfg.bins == 0 {
            bail!("bins must be at least 1");
        }
        if cfg.interval_tokens == 0 {
            bail!("interval_tokens must be at least 1");
        }
        cfg.thresholds()?;
        Ok(cfg)
    }

    /// Thresholds with the fixed beta, or the default beta as a placeholder
    /// when beta is to be searched.
    pub fn thresholds(&self) -> anyhow::Result<ThresholdConfig> {
        let beta = match self.beta {
            BetaSetting::Fixed(b) => b,
            BetaSetting::Auto => dspt_core::provenance::DEFAULT_BETA,
        };
        let cfg = ThresholdConfig {
            alpha: self.alpha,
            beta,
            beta_grid: self.beta_grid.clone(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
