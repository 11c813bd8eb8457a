//! Experiment configuration file and output layout.

use std::fs;
use std::path::{Path, PathBuf};

use prognosis::backbone::BackboneConfig;
use prognosis::fusion::FusionConfig;
use prognosis::pipeline::{AblationConfig, PipelineConfig};
use prognosis::pretrain::Stage1Config;
use prognosis::synthdata::SynthConfig;
use prognosis::Exec;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const CONFIG_VERSION: u32 = 1;
pub const OUT_ROOT_ENV: &str = "PROGNOSIS_OUT_ROOT";
pub const RESOLVED_NAME: &str = "config.resolved.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Device {
    /// single-threaded
    None,
    /// all CPU cores through the thread pool
    #[default]
    Cpu,
}

impl Device {
    pub fn exec(self) -> Exec {
        match self {
            Device::None => Exec::Sequential,
            Device::Cpu => Exec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CvSection {
    pub k: usize,
    pub val_fraction: f64,
    /// Horizon (years) of the time-dependent AUC.
    pub horizon: f64,
}

impl Default for CvSection {
    fn default() -> Self {
        let p = PipelineConfig::default();
        CvSection { k: p.k, val_fraction: p.val_fraction, horizon: p.horizon }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    /// Overrides every section seed when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Manifest to use instead of `<out_dir>/data/manifest.csv`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    #[serde(default)]
    pub device: Device,
    #[serde(default)]
    pub synth: SynthConfig,
    #[serde(default)]
    pub backbone: BackboneConfig,
    #[serde(default = "Stage1Config::desk")]
    pub stage1: Stage1Config,
    #[serde(default = "FusionConfig::desk")]
    pub fusion: FusionConfig,
    #[serde(default)]
    pub cv: CvSection,
    #[serde(default)]
    pub ablation: AblationConfig,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("run")
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            version: CONFIG_VERSION,
            seed: None,
            out_dir: default_out_dir(),
            dataset: None,
            device: Device::default(),
            synth: SynthConfig::default(),
            backbone: BackboneConfig::default(),
            stage1: Stage1Config::desk(),
            fusion: FusionConfig::desk(),
            cv: CvSection::default(),
            ablation: AblationConfig::default(),
        }
    }
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub device: Option<Device>,
}

impl ExperimentConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self, CliError> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| CliError::Validation(format!("{}: {}", origin.display(), e.message())))?;
        if cfg.version != CONFIG_VERSION {
            return Err(CliError::Validation(format!(
                "{}: config version {} is not supported (expected {CONFIG_VERSION})",
                origin.display(),
                cfg.version
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, path)
    }

    /// Applies overrides, propagates the seed, resolves the output root and
    /// validates every section.
    pub fn resolve(mut self, o: &Overrides) -> Result<Self, CliError> {
        if let Some(s) = o.seed {
            self.seed = Some(s);
        }
        if let Some(s) = self.seed {
            self.synth.seed = s;
            self.stage1.seed = s;
            self.fusion.seed = s;
        }
        if let Some(d) = o.device {
            self.device = d;
        }
        self.out_dir = match &o.out {
            Some(p) => p.clone(),
            None => match std::env::var_os(OUT_ROOT_ENV) {
                Some(root) if self.out_dir.is_relative() => PathBuf::from(root).join(&self.out_dir),
                _ => self.out_dir.clone(),
            },
        };
        self.synth.validate()?;
        self.pipeline().validate()?;
        Ok(self)
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            backbone: self.backbone.clone(),
            stage1: self.stage1.clone(),
            fusion: self.fusion.clone(),
            val_fraction: self.cv.val_fraction,
            k: self.cv.k,
            horizon: self.cv.horizon,
            seed: self.seed.unwrap_or(self.stage1.seed),
        }
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.dataset.clone().unwrap_or_else(|| self.out_dir.join("data").join("manifest.csv"))
    }

    pub fn to_toml(&self) -> String {
        let body = toml::to_string_pretty(self).expect("config serializes");
        format!("# resolved prognosis experiment config, schema version {CONFIG_VERSION}\n{body}")
    }

    /// Creates `dir` and writes the resolved snapshot into it.
    pub fn snapshot(&self, dir: &Path) -> Result<(), CliError> {
        create_dir(dir)?;
        write(&dir.join(RESOLVED_NAME), &self.to_toml())
    }
}

pub fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| prognosis::Error::io(dir, e).into())
}

pub fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| prognosis::Error::io(path, e).into())
}
