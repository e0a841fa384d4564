use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::embed::MultivariateSeries;
use crate::error::{Error, Result};
use crate::lorenz::{generate, LorenzConfig};
use crate::model::ModelConfig;
use crate::pipeline::TrainConfig;

use super::csv::load_csv;

/// The `model` section: [`ModelConfig`] with the channel count optional,
/// since it usually follows from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_channels: Option<usize>,
    pub w_in: usize,
    pub horizon: usize,
    pub embed_dim: usize,
    pub p1: usize,
    pub p2: usize,
    pub d_model: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default)]
    pub seed: u64,
}

impl ModelSection {
    /// Resolves the section against a series with `n_channels` channels.
    pub fn resolve(&self, n_channels: usize) -> Result<ModelConfig> {
        if let Some(n) = self.n_channels {
            if n != n_channels {
                return Err(Error::Config(format!(
                    "model.n_channels = {n} but the data has {n_channels} channels"
                )));
            }
        }
        let cfg = ModelConfig {
            n_channels,
            w_in: self.w_in,
            horizon: self.horizon,
            embed_dim: self.embed_dim,
            p1: self.p1,
            p2: self.p2,
            d_model: self.d_model,
            n_blocks: self.n_blocks,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            dropout: self.dropout,
            seed: self.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// The `data` section: exactly one of a CSV path or Lorenz generator
/// settings, plus an optional channel subset (names or 0-based indices).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lorenz: Option<LorenzConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channels: Option<Vec<String>>,
}

impl DataSection {
    /// Loads or generates the series. Relative CSV paths resolve against
    /// `base_dir`.
    pub fn load(&self, base_dir: &Path) -> Result<MultivariateSeries> {
        let series = match (&self.csv, &self.lorenz) {
            (Some(path), None) => load_csv(&base_dir.join(path))?,
            (None, Some(lorenz)) => generate(lorenz)?,
            _ => return Err(Error::Config("data needs exactly one of \"csv\" or \"lorenz\"".into())),
        };
        match &self.channels {
            Some(sel) => select_channels(&series, sel),
            None => Ok(series),
        }
    }
}

/// Picks channels by name, falling back to a 0-based index for entries
/// that are not channel names.
pub fn select_channels(series: &MultivariateSeries, selection: &[String]) -> Result<MultivariateSeries> {
    let indices = selection
        .iter()
        .map(|s| {
            series
                .channel_index(s)
                .or_else(|| s.parse::<usize>().ok().filter(|&i| i < series.n_channels()))
                .ok_or_else(|| Error::Config(format!("unknown channel {s:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    series.select_channels(&indices)
}

fn default_output() -> PathBuf {
    PathBuf::from("run")
}

/// A complete training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    pub data: DataSection,
    /// Directory receiving the checkpoint, history and metrics.
    #[serde(default = "default_output")]
    pub output: PathBuf,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
