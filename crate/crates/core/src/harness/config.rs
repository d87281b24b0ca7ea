use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::AttackConfig;
use crate::data::{DatasetSource, Seed, Shape};
use crate::error::{Error, Result};
use crate::surrogate::{surrogate_loss_weights, CommonSurrogateSpec, FinetuneBudget};
use crate::wmnet::{ArchConfig, LossWeights, TechniqueProfile, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Whitebox,
    BlackboxPerTarget,
    BlackboxCommon,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    FinetuneEpochs,
    FinetunePairs,
    Epsilon,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "finetune-epochs" => Ok(Self::FinetuneEpochs),
            "finetune-pairs" => Ok(Self::FinetunePairs),
            "epsilon" => Ok(Self::Epsilon),
            _ => Err(Error::Config(format!("unknown sweep axis `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
}

/// Image counts per split, before scaling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DatasetSource,
    /// Training images for targets and, separately drawn, for surrogates.
    pub train_count: usize,
    pub test_count: usize,
    /// Covers available to the attacker for harvesting pairs.
    pub harvest_count: usize,
    pub attack_count: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DatasetSource::Synthetic,
            train_count: 2000,
            test_count: 200,
            harvest_count: 500,
            attack_count: 100,
        }
    }
}

/// Training settings without a seed; each stage derives its own.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub loss_weights: LossWeights,
    pub eval_limit: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            epochs: 30,
            batch_size: d.batch_size,
            learning_rate: d.learning_rate,
            loss_weights: d.loss_weights,
            eval_limit: d.eval_limit,
        }
    }
}

impl TrainSection {
    pub fn with_seed(&self, seed: Seed) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            loss_weights: self.loss_weights,
            seed,
            eval_limit: self.eval_limit,
        }
    }
}

fn default_surrogate_train() -> TrainSection {
    TrainSection {
        loss_weights: surrogate_loss_weights(),
        ..TrainSection::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSection {
    pub epochs: usize,
    pub num_pairs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub holdout_fraction: f64,
    pub input_noise: f64,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        let b = FinetuneBudget::new(100, 200);
        Self {
            epochs: b.epochs,
            num_pairs: b.num_pairs,
            learning_rate: b.learning_rate,
            batch_size: b.batch_size,
            holdout_fraction: b.holdout_fraction,
            input_noise: b.input_noise,
        }
    }
}

impl FinetuneSection {
    pub fn with_seed(&self, seed: Seed) -> FinetuneBudget {
        FinetuneBudget {
            epochs: self.epochs,
            num_pairs: self.num_pairs,
            learning_rate: self.learning_rate,
            seed,
            batch_size: self.batch_size,
            holdout_fraction: self.holdout_fraction,
            input_noise: self.input_noise,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CommonSection {
    pub io_shape: Shape,
    pub wm_bits: usize,
    /// Pairs harvested from each member and pooled.
    pub pairs_per_member: usize,
}

impl Default for CommonSection {
    fn default() -> Self {
        Self {
            io_shape: (64, 64, 3),
            wm_bits: 10,
            pairs_per_member: 200,
        }
    }
}

/// One experiment, as read from a TOML file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    /// Profile names: entries of `profiles` first, then built-in presets.
    pub targets: Vec<String>,
    #[serde(default)]
    pub seed: u64,
    /// Multiplies image sizes, dataset counts, epochs and pair counts.
    #[serde(default = "one")]
    pub scale: f64,
    /// Output directory; the `--out` flag takes precedence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub profiles: Vec<TechniqueProfile>,
    #[serde(default)]
    pub arch: ArchConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub target_train: TrainSection,
    #[serde(default = "default_surrogate_train")]
    pub surrogate_train: TrainSection,
    #[serde(default)]
    pub finetune: FinetuneSection,
    #[serde(default)]
    pub attack: AttackConfig,
    #[serde(default)]
    pub common: CommonSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
    /// Also write attacked and residual PNGs next to the results.
    #[serde(default)]
    pub write_images: bool,
}

fn one() -> f64 {
    1.0
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| Error::Unreadable {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Resolve a profile name against inline profiles, then presets.
    pub fn profile(&self, name: &str) -> Result<TechniqueProfile> {
        self.profiles
            .iter()
            .find(|p| p.name == name)
            .cloned()
            .or_else(|| TechniqueProfile::preset(name))
            .ok_or_else(|| Error::Config(format!("unknown profile `{name}`")))
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |e: Error| Error::Config(e.to_string());
        if self.targets.is_empty() {
            return Err(Error::Config("at least one target is required".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for t in &self.targets {
            if !seen.insert(t) {
                return Err(Error::Config(format!("target `{t}` listed twice")));
            }
            self.profile(t)?.validate().map_err(cfg)?;
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::Config("scale must be positive".into()));
        }
        let d = &self.data;
        if d.train_count == 0 || d.test_count == 0 || d.attack_count == 0 {
            return Err(Error::Config("dataset counts must be at least 1".into()));
        }
        self.target_train
            .with_seed(Seed(0))
            .validate()
            .map_err(cfg)?;
        self.attack.validate().map_err(cfg)?;
        match self.mode {
            Mode::Whitebox => {}
            Mode::BlackboxPerTarget => {
                self.surrogate_train
                    .with_seed(Seed(0))
                    .validate()
                    .map_err(cfg)?;
                self.finetune.with_seed(Seed(0)).validate().map_err(cfg)?;
                if self.finetune.num_pairs > d.harvest_count {
                    return Err(Error::Config(format!(
                        "finetune.num_pairs {} exceeds data.harvest_count {}",
                        self.finetune.num_pairs, d.harvest_count
                    )));
                }
            }
            Mode::BlackboxCommon => {
                self.surrogate_train
                    .with_seed(Seed(0))
                    .validate()
                    .map_err(cfg)?;
                self.finetune.with_seed(Seed(0)).validate().map_err(cfg)?;
                let members = self
                    .targets
                    .iter()
                    .map(|t| self.profile(t))
                    .collect::<Result<Vec<_>>>()?;
                let spec = CommonSurrogateSpec {
                    io_shape: self.common.io_shape,
                    wm_bits: self.common.wm_bits,
                    member_targets: members,
                };
                spec.validate().map_err(cfg)?;
                let c = &self.common;
                if c.pairs_per_member == 0 || c.pairs_per_member > d.harvest_count {
                    return Err(Error::Config(format!(
                        "common.pairs_per_member must lie in 1..={}",
                        d.harvest_count
                    )));
                }
            }
        }
        if let Some(s) = &self.sweep {
            if s.values.is_empty() {
                return Err(Error::Config("sweep.values is empty".into()));
            }
            if self.mode == Mode::Whitebox && s.axis != SweepAxis::Epsilon {
                return Err(Error::Config(
                    "white-box runs can only sweep epsilon".into(),
                ));
            }
            for &v in &s.values {
                let ok = match s.axis {
                    SweepAxis::Epsilon => v > 0.0 && v.is_finite(),
                    _ => v >= 1.0 && v.fract() == 0.0,
                };
                if !ok {
                    return Err(Error::Config(format!(
                        "invalid {:?} sweep value {v}",
                        s.axis
                    )));
                }
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, excluding the output directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = None;
        let v = serde_json::to_value(&c).expect("config serializes");
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }

    /// Copy with `scale` applied to sizes, counts and epochs, and reset to 1.
    pub fn scaled(&self) -> Self {
        let s = self.scale;
        if s == 1.0 {
            return self.clone();
        }
        let n = |v: usize| ((v as f64 * s).round() as usize).max(1);
        let mut c = self.clone();
        c.scale = 1.0;
        c.profiles = self
            .targets
            .iter()
            .map(|t| self.profile(t).expect("validated").scaled(s))
            .collect();
        c.data.train_count = n(c.data.train_count);
        c.data.test_count = n(c.data.test_count);
        c.data.harvest_count = n(c.data.harvest_count);
        c.data.attack_count = n(c.data.attack_count);
        c.target_train.epochs = n(c.target_train.epochs);
        c.surrogate_train.epochs = n(c.surrogate_train.epochs);
        c.finetune.epochs = n(c.finetune.epochs);
        c.finetune.num_pairs = n(c.finetune.num_pairs).min(c.data.harvest_count);
        c.common.pairs_per_member = n(c.common.pairs_per_member).min(c.data.harvest_count);
        let side = |v: usize| (((v as f64 * s) / 8.0).round() as usize).max(1) * 8;
        c.common.io_shape = (
            side(c.common.io_shape.0),
            side(c.common.io_shape.1),
            c.common.io_shape.2,
        );
        c
    }
}
