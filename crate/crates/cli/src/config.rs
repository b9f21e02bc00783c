//! Run configs: defaults, JSON config files, flag overrides and the frozen
//! copy written next to every run's outputs.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use scanid::forge::ForgeConfig;
use scanid::relmap::DEFAULT_STRIDES;
use scanid::synthscan::SynthConfig;
use scanid::trainer::TrainConfig;

/// Overrides the output directory of every command (flags still win).
pub const OUT_DIR_ENV: &str = "SCANID_OUT_DIR";

#[derive(Debug)]
pub struct CliError {
    pub kind: String,
    pub message: String,
    usage: bool,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            kind: "usage".into(),
            message: message.into(),
            usage: true,
        }
    }

    pub fn exit_code(&self) -> u8 {
        if self.usage {
            2
        } else {
            1
        }
    }
}

impl From<scanid::Error> for CliError {
    fn from(e: scanid::Error) -> Self {
        CliError {
            kind: e.kind().into(),
            message: e.to_string(),
            usage: false,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Defaults, overlaid by the JSON file when one is given.
pub fn load<T: DeserializeOwned + Default>(file: Option<&Path>) -> CliResult<T> {
    let Some(path) = file else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))
}

pub fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

/// Output directory: flag, then environment, then config file.
pub fn resolve_out(flag: Option<PathBuf>, from_file: &Option<PathBuf>) -> CliResult<PathBuf> {
    flag.or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .or_else(|| from_file.clone())
        .ok_or_else(|| CliError::usage(format!("--out is required (or set {OUT_DIR_ENV})")))
}

pub fn require<'a>(value: &'a Option<PathBuf>, flag: &str) -> CliResult<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| CliError::usage(format!("--{flag} is required")))
}

/// Writes `<out>/<command>_config.json`.
pub fn freeze<T: Serialize>(out: &Path, command: &str, cfg: &T) -> CliResult<()> {
    let json = serde_json::to_string_pretty(cfg).map_err(|e| scanid::Error::Encode(e.to_string()))?;
    scanid::dataio::write_file(&out.join(format!("{command}_config.json")), json.as_bytes())?;
    Ok(())
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthRun {
    pub out: Option<PathBuf>,
    pub synth: SynthConfig,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForgeRun {
    pub image: Option<PathBuf>,
    pub donor: Option<PathBuf>,
    pub image_label: Option<usize>,
    pub donor_label: Option<usize>,
    pub out: Option<PathBuf>,
    pub seed: u64,
    pub jpeg_quality: Option<u8>,
    pub forge: ForgeConfig,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRun {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalRun {
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub split: String,
    pub tile: usize,
    pub seed: u64,
}

impl Default for EvalRun {
    fn default() -> Self {
        EvalRun {
            data: None,
            checkpoint: None,
            out: None,
            split: "test".into(),
            tile: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MapRun {
    pub image: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub strides: Vec<usize>,
    pub tau: f64,
    pub truth: Option<PathBuf>,
}

impl Default for MapRun {
    fn default() -> Self {
        MapRun {
            image: None,
            checkpoint: None,
            out: None,
            strides: DEFAULT_STRIDES.to_vec(),
            tau: 0.5,
            truth: None,
        }
    }
}
