use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vizecg_core::data::{SplitPlan, SynthConfig};
use vizecg_core::model::ModelConfig;
use vizecg_core::raster::LayoutSpec;
use vizecg_core::train::TrainConfig;

use crate::error::{CliError, Result};

/// Everything a run can be configured with. Unset keys fall back to library defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub synth: SynthConfig,
    pub split: SplitPlan,
    pub layout: LayoutSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Config {
    /// Reads a TOML config, or the resolved config stored in a run manifest (`.json`).
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Data(format!("cannot read config {}: {e}", path.display())))?;
        let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        if is_json {
            #[derive(Deserialize)]
            struct Wrapped {
                config: Config,
            }
            let w: Wrapped = serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            return Ok(w.config);
        }
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }
}

/// Parses `WxH`, e.g. `512x512`.
pub fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected WIDTHxHEIGHT, got {s:?}"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("bad dimension {v:?} in {s:?}"));
    let (w, h) = (parse(w)?, parse(h)?);
    if w == 0 || h == 0 {
        return Err(format!("dimensions must be positive, got {s:?}"));
    }
    Ok((w, h))
}

/// Parses `CLASS=P`, e.g. `af=1.0`.
pub fn parse_prevalence(s: &str) -> std::result::Result<(usize, f64), String> {
    let (name, p) = s.split_once('=').ok_or_else(|| format!("expected CLASS=P, got {s:?}"))?;
    let class = vizecg_core::data::Class::from_name(name.trim())
        .ok_or_else(|| format!("unknown class {name:?}; expected one of 1dAVb, RBBB, LBBB, SB, AF, ST"))?;
    let p: f64 = p.trim().parse().map_err(|_| format!("bad probability {p:?}"))?;
    Ok((class.index(), p))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Toggle {
    On,
    Off,
}

impl Toggle {
    pub fn on(self) -> bool {
        self == Toggle::On
    }
}

/// Manifest path for a file output (`out.ext.manifest.json`) or a directory output.
pub fn manifest_path(out: &Path) -> PathBuf {
    if out.is_dir() {
        out.join("manifest.json")
    } else {
        let mut name = out.file_name().unwrap_or_default().to_os_string();
        name.push(".manifest.json");
        out.with_file_name(name)
    }
}
