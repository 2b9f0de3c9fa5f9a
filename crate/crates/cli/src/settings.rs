use std::fmt::Write as _;

use cmc_core::cmc::CmcConfig;
use cmc_core::eval::SyntheticTaskSpec;
use cmc_core::pipeline::PipelineSettings;
use cmc_core::training::TrainingConfig;
use cmc_core::{Error, Result, DEFAULT_SEED};

/// Effective settings of one subcommand, built from `key = value` pairs.
pub trait Settings {
    fn set(&mut self, key: &str, value: &str) -> Result<()>;
    fn to_text(&self) -> String;
}

impl Settings for SyntheticTaskSpec {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        SyntheticTaskSpec::set(self, key, value)
    }

    fn to_text(&self) -> String {
        SyntheticTaskSpec::to_text(self)
    }
}

impl Settings for PipelineSettings {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        PipelineSettings::set(self, key, value)
    }

    fn to_text(&self) -> String {
        PipelineSettings::to_text(self)
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("{key}: cannot parse {value:?}")))
}

/// Comma-separated list of positive, strictly increasing integers.
pub fn parse_ks(key: &str, value: &str) -> Result<Vec<usize>> {
    let ks: Vec<usize> = value
        .split(',')
        .map(|v| parse(key, v.trim()))
        .collect::<Result<_>>()?;
    if ks.is_empty() || ks[0] == 0 || ks.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidConfig(format!(
            "{key}: need positive, strictly increasing values, got {value:?}"
        )));
    }
    Ok(ks)
}

fn join(ks: &[usize]) -> String {
    ks.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

/// `build-index` has nothing to tune beyond the common keys.
#[derive(Debug, Clone)]
pub struct IndexSettings {
    pub seed: u64,
}

impl Settings for IndexSettings {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            other => return Err(Error::InvalidConfig(format!("unknown build-index key {other:?}"))),
        }
        Ok(())
    }

    fn to_text(&self) -> String {
        format!("seed = {}\n", self.seed)
    }
}

/// Training hyperparameters plus the shape of a freshly initialized model.
#[derive(Debug, Clone)]
pub struct TrainSettings {
    pub training: TrainingConfig,
    pub heads: usize,
    /// Feed-forward width; `None` means four times the model dim.
    pub ffn_dim: Option<usize>,
    pub layers: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let model = CmcConfig::default();
        TrainSettings {
            training: TrainingConfig::default(),
            heads: model.heads,
            ffn_dim: None,
            layers: model.layers,
        }
    }
}

impl TrainSettings {
    pub fn model_config(&self, model_dim: usize) -> CmcConfig {
        CmcConfig {
            model_dim,
            heads: self.heads,
            ffn_dim: self.ffn_dim.unwrap_or(4 * model_dim),
            layers: self.layers,
            ..CmcConfig::default()
        }
    }
}

impl Settings for TrainSettings {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "heads" => self.heads = parse(key, value)?,
            "ffn_dim" => self.ffn_dim = Some(parse(key, value)?),
            "layers" => self.layers = parse(key, value)?,
            _ => self.training.set(key, value)?,
        }
        Ok(())
    }

    fn to_text(&self) -> String {
        let mut out = self.training.to_text();
        let ffn = self.ffn_dim.map_or_else(|| "auto".to_string(), |f| f.to_string());
        let _ = write!(out, "heads = {}\nffn_dim = {ffn}\nlayers = {}\n", self.heads, self.layers);
        out
    }
}

#[derive(Debug, Clone)]
pub struct EvalSettings {
    pub ks: Vec<usize>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings { ks: vec![1, 4, 8, 16] }
    }
}

impl Settings for EvalSettings {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "ks" | "k" => self.ks = parse_ks(key, value)?,
            // Accepted so a shared config file can carry it.
            "seed" => {
                parse::<u64>(key, value)?;
            }
            other => return Err(Error::InvalidConfig(format!("unknown evaluate key {other:?}"))),
        }
        Ok(())
    }

    fn to_text(&self) -> String {
        format!("ks = {}\n", join(&self.ks))
    }
}

#[derive(Debug, Clone)]
pub struct BenchSettings {
    pub ks: Vec<usize>,
    /// Model dim; `None` means the checkpoint's, or 64 without one.
    pub dim: Option<usize>,
    pub heads: usize,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for BenchSettings {
    fn default() -> Self {
        BenchSettings {
            ks: vec![128, 256, 512, 1024, 2048, 4096, 8192, 16384],
            dim: None,
            heads: 4,
            repeats: 5,
            seed: DEFAULT_SEED,
        }
    }
}

impl Settings for BenchSettings {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "ks" | "k" => self.ks = parse_ks(key, value)?,
            "dim" | "model_dim" => self.dim = Some(parse(key, value)?),
            "heads" => self.heads = parse(key, value)?,
            "repeats" => self.repeats = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            other => return Err(Error::InvalidConfig(format!("unknown bench key {other:?}"))),
        }
        Ok(())
    }

    fn to_text(&self) -> String {
        format!(
            "ks = {}\ndim = {}\nheads = {}\nrepeats = {}\nseed = {}\n",
            join(&self.ks),
            self.dim.map_or_else(|| "auto".to_string(), |d| d.to_string()),
            self.heads,
            self.repeats,
            self.seed
        )
    }
}
