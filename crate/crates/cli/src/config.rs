//! The TOML run configuration and the resolved-config snapshot.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};

use mstf_core::dataset::{InterpolationConfig, SynthSpec, TileSpec};
use mstf_core::detector::{DecodeConfig, DetectorConfig, TrainConfig};
use mstf_core::evaluation::EvalConfig;
use mstf_core::experiment::BenchConfig;

use crate::Failure;

/// Every section a config file may carry. Sections a subcommand does not
/// use are ignored by it; unknown keys anywhere are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FileConfig {
    /// Generator seed for `synth`.
    pub seed: u64,
    /// Worker threads; 0 uses every core.
    pub threads: usize,
    pub strict: bool,
    pub synth: Option<SynthSpec>,
    pub detector: DetectorConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub eval: EvalConfig,
    pub tile: TileSpec,
    pub interpolate: InterpolationConfig,
    pub bench: Option<BenchConfig>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))
            .map_err(Failure::Usage)?;
        toml::from_str(&text)
            .with_context(|| format!("config {}", path.display()))
            .map_err(Failure::Usage)
    }
}

/// What one invocation actually ran with.
#[derive(Debug, Serialize)]
pub struct Snapshot<'a, A: Serialize> {
    pub version: &'static str,
    pub subcommand: &'a str,
    pub args: &'a A,
    pub config: &'a FileConfig,
}

/// Where the snapshot of a run writing `output` goes: inside it when it is
/// a directory, next to it otherwise.
pub fn snapshot_path(output: &Path, is_dir: bool) -> PathBuf {
    if is_dir {
        output.join("resolved_config.toml")
    } else {
        let stem = output.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        output.with_file_name(format!("{stem}.config.toml"))
    }
}

pub fn write_snapshot<A: Serialize>(
    path: &Path,
    subcommand: &str,
    args: &A,
    config: &FileConfig,
) -> anyhow::Result<()> {
    let snap = Snapshot {
        version: mstf_core::VERSION,
        subcommand,
        args,
        config,
    };
    let text = toml::to_string(&snap).context("serialising the resolved config")?;
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<FileConfig>("sede = 3").is_err());
        assert!(toml::from_str::<FileConfig>("[detector]\ninput_sise = 64").is_err());
        assert!(toml::from_str::<FileConfig>("[detector.mstf.lookup]\nradii = [1, 1, 1]\nsplit_ratio = \"1:0\"").is_ok());
    }

    #[test]
    fn default_round_trips_through_toml() {
        let c = FileConfig::default();
        let text = toml::to_string(&c).unwrap();
        assert_eq!(toml::from_str::<FileConfig>(&text).unwrap(), c);
    }

    #[test]
    fn snapshot_locations() {
        assert_eq!(snapshot_path(Path::new("run"), true), Path::new("run/resolved_config.toml"));
        assert_eq!(snapshot_path(Path::new("out/preds.json"), false), Path::new("out/preds.config.toml"));
    }
}
