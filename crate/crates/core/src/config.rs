//! Run configuration file.
//!
//! One flat TOML document holds every knob of a run. Unknown keys are
//! rejected. The `[defaults]` table echoes the published full-scale settings
//! for reference and does not affect the run.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::model::{EmMode, GdcSettings, Role, UgdcConfig};
use crate::optim::AdamWConfig;
use crate::pipeline::TrainConfig;

pub const RESOLVED_NAME: &str = "resolved_config.toml";

/// Enhancer variant, or no enhancer at all.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmChoice {
    Direct,
    Residual,
    None,
}

impl EmChoice {
    pub fn role(&self) -> Option<Role> {
        match self {
            EmChoice::Direct => Some(Role::Enhancer(EmMode::Direct)),
            EmChoice::Residual => Some(Role::Enhancer(EmMode::Residual)),
            EmChoice::None => None,
        }
    }
}

impl FromStr for EmChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(EmChoice::Direct),
            "residual" => Ok(EmChoice::Residual),
            "none" => Ok(EmChoice::None),
            other => Err(Error::Config(format!("em_mode must be direct, residual or none, got {other:?}"))),
        }
    }
}

impl fmt::Display for EmChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EmChoice::Direct => "direct",
            EmChoice::Residual => "residual",
            EmChoice::None => "none",
        })
    }
}

/// The published full-scale settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PublishedDefaults {
    pub lr: f64,
    pub batch_size: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub epochs_tm: usize,
    pub epochs_pm: usize,
    pub epochs_em: usize,
    pub tm_pairs: usize,
    pub optimizer: String,
    pub loss: String,
}

impl Default for PublishedDefaults {
    fn default() -> Self {
        let p = TrainConfig::published();
        Self {
            lr: p.optimizer.lr,
            batch_size: p.batch_size,
            image_height: 400,
            image_width: 640,
            epochs_tm: p.epochs_tm,
            epochs_pm: p.epochs_pm,
            epochs_em: p.epochs_em,
            tm_pairs: 200,
            optimizer: "adamw".into(),
            loss: "smooth-l1".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Side of the square training images.
    pub image_size: usize,
    pub batch_size: usize,
    pub epochs_tm: usize,
    pub epochs_pm: usize,
    pub epochs_em: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub em_mode: EmChoice,
    pub tm_gdc: bool,
    pub pm_gdc: bool,
    pub em_gdc: bool,
    pub depth: usize,
    pub base_channels: usize,
    /// Stages that hold a GDC block in models whose toggle is on.
    pub gdc_stages: Vec<String>,
    pub gdc_grid: [usize; 2],
    pub gdc_embed: usize,
    pub gdc_key_kernel: usize,
    pub gdc_query_kernel: usize,
    pub gdc_out_kernel: usize,
    pub tm_data: DatasetSpec,
    pub normal_data: DatasetSpec,
    pub test_data: DatasetSpec,
    pub defaults: PublishedDefaults,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let model = UgdcConfig::default();
        let o = train.optimizer;
        let synthetic = |count, seed| DatasetSpec::Synthetic { count, width: 64, height: 64, seed };
        Self {
            seed: train.seed,
            image_size: 64,
            batch_size: train.batch_size,
            epochs_tm: train.epochs_tm,
            epochs_pm: train.epochs_pm,
            epochs_em: train.epochs_em,
            lr: o.lr,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            weight_decay: o.weight_decay,
            em_mode: EmChoice::Residual,
            tm_gdc: true,
            pm_gdc: true,
            em_gdc: true,
            depth: model.depth,
            base_channels: model.base_channels,
            gdc_stages: model.gdc_stages,
            gdc_grid: [model.gdc.grid.0, model.gdc.grid.1],
            gdc_embed: model.gdc.embed,
            gdc_key_kernel: model.gdc.key_kernel,
            gdc_query_kernel: model.gdc.query_kernel,
            gdc_out_kernel: model.gdc.out_kernel,
            tm_data: synthetic(50, 1),
            normal_data: synthetic(200, 2),
            test_data: synthetic(10, 3),
            defaults: PublishedDefaults::default(),
        }
    }
}

/// Which network a model config is for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    Tm,
    Pm,
    Em,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Writes the fully resolved config into `dir` and returns its path.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let path = dir.join(RESOLVED_NAME);
        fs::write(&path, self.to_toml())?;
        Ok(path)
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || !self.image_size.is_multiple_of(1 << self.depth) {
            return Err(Error::Config(format!(
                "image_size {} must be a positive multiple of 2^depth = {}",
                self.image_size,
                1 << self.depth
            )));
        }
        if self.epochs_tm == 0 || self.epochs_pm == 0 || (self.epochs_em == 0 && self.em_mode != EmChoice::None) {
            return Err(Error::Config("epoch counts must be positive".into()));
        }
        self.train_config().validate()?;
        for slot in [Slot::Tm, Slot::Pm, Slot::Em] {
            self.model_config(slot).validate()?;
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            epochs_tm: self.epochs_tm,
            epochs_pm: self.epochs_pm,
            epochs_em: self.epochs_em,
            seed: self.seed,
            optimizer: AdamWConfig {
                lr: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.eps,
                weight_decay: self.weight_decay,
            },
        }
    }

    pub fn gdc_enabled(&self, slot: Slot) -> bool {
        match slot {
            Slot::Tm => self.tm_gdc,
            Slot::Pm => self.pm_gdc,
            Slot::Em => self.em_gdc,
        }
    }

    pub fn model_config(&self, slot: Slot) -> UgdcConfig {
        UgdcConfig {
            depth: self.depth,
            base_channels: self.base_channels,
            in_channels: 3,
            out_channels: 3,
            gdc_stages: if self.gdc_enabled(slot) { self.gdc_stages.clone() } else { Vec::new() },
            gdc: GdcSettings {
                grid: (self.gdc_grid[0], self.gdc_grid[1]),
                embed: self.gdc_embed,
                key_kernel: self.gdc_key_kernel,
                query_kernel: self.gdc_query_kernel,
                out_kernel: self.gdc_out_kernel,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.defaults.batch_size, 8);
        assert_eq!((back.defaults.image_height, back.defaults.image_width), (400, 640));
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = RunConfig::from_toml("seed = 9\nem_mode = \"direct\"\npm_gdc = false\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.em_mode.role(), Some(Role::Enhancer(EmMode::Direct)));
        assert!(cfg.model_config(Slot::Pm).gdc_stages.is_empty());
        assert_eq!(cfg.model_config(Slot::Tm).gdc_stages, vec!["bottleneck".to_string()]);
        assert_eq!(cfg.batch_size, 4);
    }

    #[test]
    fn unknown_and_invalid_keys_rejected() {
        assert!(matches!(RunConfig::from_toml("learning_rate = 1.0"), Err(Error::Config(_))));
        assert!(RunConfig::from_toml("[defaults]\nbogus = 1").is_err());
        assert!(RunConfig::from_toml("image_size = 60").is_err());
        assert!(RunConfig::from_toml("batch_size = 0").is_err());
        assert!(RunConfig::from_toml("gdc_stages = [\"enc9\"]").is_err());
        assert!(RunConfig::from_toml("em_mode = \"sideways\"").is_err());
    }

    #[test]
    fn dataset_tables() {
        let cfg = RunConfig::from_toml("[normal_data]\nmode = \"normal-dir\"\nnormal = \"/data/n\"\n").unwrap();
        assert_eq!(cfg.normal_data, DatasetSpec::NormalDir { normal: "/data/n".into() });
    }
}
