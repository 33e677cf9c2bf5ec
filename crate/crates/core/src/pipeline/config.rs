use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffusion::DiffusionConfig;
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::probe::BlockSelection;

/// Ablation variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Cross-modal attention output fused with the visual features.
    Full,
    /// Visual features only; no text path is built.
    Zeta1,
    /// Mean-pooled text broadcast and concatenated, no attention.
    Zeta2,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::Zeta1, Variant::Zeta2];

    pub fn uses_text(self) -> bool {
        self != Variant::Zeta1
    }

    pub fn uses_attention(self) -> bool {
        self == Variant::Full
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Full => "full",
            Variant::Zeta1 => "zeta1",
            Variant::Zeta2 => "zeta2",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "full" => Ok(Variant::Full),
            "zeta1" => Ok(Variant::Zeta1),
            "zeta2" => Ok(Variant::Zeta2),
            other => Err(Error::UnknownVariant(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionSection {
    pub blocks: Vec<usize>,
    pub steps: Vec<usize>,
}

impl Default for SelectionSection {
    fn default() -> Self {
        Self {
            blocks: vec![6, 8, 12, 16],
            steps: vec![50, 150, 250],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub variant: Variant,
    pub seed: u64,
    pub hidden: usize,
    /// Draw fresh noise and re-extract features every epoch.
    pub resample_features: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 1,
            epochs: 30,
            variant: Variant::Full,
            seed: 0,
            hidden: 128,
            resample_features: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub root: PathBuf,
    pub split_seed: u64,
    pub train_n: usize,
    /// Sample count for generated data.
    pub n: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data"),
            split_seed: 0,
            train_n: 40,
            n: 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextSection {
    pub d_text: usize,
    pub seed: u64,
}

impl Default for TextSection {
    fn default() -> Self {
        Self { d_text: 64, seed: 0 }
    }
}

/// Everything an experiment needs, as read from a TOML file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub diffusion: DiffusionConfig,
    pub selection: SelectionSection,
    pub train: TrainSection,
    pub data: DataSection,
    pub text: TextSection,
    pub fusion: FusionConfig,
}

impl ExperimentConfig {
    pub fn from_toml(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    /// Sets every seed from one value.
    pub fn set_seed(&mut self, seed: u64) {
        self.diffusion.seed = seed;
        self.train.seed = seed;
        self.data.split_seed = seed;
        self.text.seed = seed;
    }

    pub fn selection(&self) -> Result<BlockSelection> {
        BlockSelection::new(self.selection.blocks.clone(), self.selection.steps.clone())
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            lr: self.train.lr,
            batch_size: self.train.batch_size,
            epochs: self.train.epochs,
            variant: self.train.variant,
            selection: self.selection()?,
            seed: self.train.seed,
            hidden: self.train.hidden,
            resample_features: self.train.resample_features,
            fusion: self.fusion.clone(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.diffusion.validate()?;
        self.train_config()?;
        if self.text.d_text == 0 {
            return Err(Error::InvalidConfig("text.d_text must be positive".into()));
        }
        if self.data.train_n == 0 {
            return Err(Error::InvalidConfig("data.train_n must be positive".into()));
        }
        Ok(())
    }
}

/// Segmentation training settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub variant: Variant,
    pub selection: BlockSelection,
    pub seed: u64,
    pub hidden: usize,
    pub resample_features: bool,
    pub fusion: FusionConfig,
}

impl TrainConfig {
    pub fn new(variant: Variant, selection: BlockSelection) -> Self {
        let t = TrainSection::default();
        Self {
            lr: t.lr,
            batch_size: t.batch_size,
            epochs: t.epochs,
            variant,
            selection,
            seed: t.seed,
            hidden: t.hidden,
            resample_features: t.resample_features,
            fusion: FusionConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad("train.lr must be positive");
        }
        if self.epochs == 0 {
            return bad("train.epochs must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("train.batch_size must be >= 1");
        }
        if self.hidden == 0 {
            return bad("train.hidden must be >= 1");
        }
        if self.fusion.d == 0 || self.fusion.d_v == 0 {
            return bad("fusion.d and fusion.d_v must be positive");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_keys_parse() {
        let cfg = ExperimentConfig::from_toml(
            r#"
            [diffusion]
            T = 500
            beta_start = 0.0001
            beta_end = 0.02
            image_size = [32, 32]
            seed = 3
            [selection]
            blocks = [4, 6]
            steps = [50]
            [train]
            lr = 0.001
            batch_size = 2
            epochs = 5
            variant = "zeta2"
            [data]
            root = "somewhere"
            split_seed = 9
            [text]
            d_text = 32
            [fusion]
            d = 16
            d_v = 8
            "#,
        )
        .unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.diffusion.steps, 500);
        assert_eq!(cfg.train.variant, Variant::Zeta2);
        assert_eq!(cfg.fusion.d_v, 8);
        assert_eq!(cfg.data.root, PathBuf::from("somewhere"));
        let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        assert!(ExperimentConfig::from_toml("[train]\nlearning_rate = 1.0").is_err());
        let cfg = ExperimentConfig::from_toml("[train]\nepochs = 0").unwrap();
        assert!(cfg.validate().is_err());
        let cfg = ExperimentConfig::from_toml("[selection]\nblocks = [8, 6]").unwrap();
        assert!(cfg.validate().is_err());
        assert!(ExperimentConfig::from_toml("[train]\nvariant = \"zeta3\"").is_err());
        assert!(matches!("zeta3".parse::<Variant>(), Err(Error::UnknownVariant(_))));
    }
}
