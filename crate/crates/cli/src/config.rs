//! Run configuration: a TOML file merged with command-line overrides and
//! written next to every output.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::ValueEnum;
use serde::{Deserialize, Serialize};
use slicefield::geometry::FlowConstants;
use slicefield::model::ModelConfig;
use slicefield::physattn::Mode;
use slicefield::train::TrainConfig;

use crate::BadInput;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Original,
    Fast,
    Tiled,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Original => Mode::Original,
            ModeArg::Fast => Mode::Fast,
            ModeArg::Tiled => Mode::Tiled,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    pub train: Vec<PathBuf>,
    pub val: Vec<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,
    pub parallel: bool,
    /// Points per chunk for cache construction and streamed decoding.
    pub chunk_size: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataPaths,
    pub flow: FlowConstants,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            precision: Precision::F64,
            parallel: false,
            chunk_size: 4096,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataPaths::default(),
            flow: FlowConstants::default(),
        }
    }
}

/// Flags shared by every subcommand.
#[derive(Clone, Debug, Default, clap::Args)]
pub struct Overrides {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long, global = true)]
    pub tile_size: Option<usize>,
    #[arg(long, global = true)]
    pub chunk_size: Option<usize>,
    #[arg(long, global = true, value_enum)]
    pub precision: Option<Precision>,
    /// Use the parallel tile and decode paths.
    #[arg(long, global = true)]
    pub parallel: bool,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).map_err(|e| BadInput(format!("config {}: {e}", path.display())).into())
    }

    /// File settings (or defaults) with flag overrides applied.
    pub fn resolve(o: &Overrides) -> Result<Self> {
        let mut cfg = match &o.config {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        cfg.apply(o);
        Ok(cfg)
    }

    /// Applies flags; also used after the model config is replaced by one
    /// read from a checkpoint.
    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        self.train.seed = self.seed;
        if let Some(m) = o.mode {
            self.model.mode = m.into();
        }
        if let Some(t) = o.tile_size {
            self.model.tile_size = t;
        }
        if let Some(c) = o.chunk_size {
            self.chunk_size = c;
        }
        if let Some(p) = o.precision {
            self.precision = p;
        }
        self.parallel |= o.parallel;
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Writes `run_config.toml` into `dir`.
    pub fn write_into(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("run_config.toml"), self.to_toml()?)?;
        Ok(())
    }

    /// Writes `run_config.toml` beside the file `out`.
    pub fn write_beside(&self, out: &Path) -> Result<()> {
        let dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        self.write_into(dir)
    }

    pub fn require_f64(&self, command: &str) -> Result<()> {
        if self.precision == Precision::F32 {
            return Err(BadInput(format!("{command} runs in f64 only; f32 is available for bench")).into());
        }
        Ok(())
    }
}
