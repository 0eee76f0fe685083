//! Experiment configuration: TOML with sections, every key overridable as
//! `section.key=value`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attributes::{ChannelSelection, EraseFill, MiningSchedule};
use crate::attrnet::{AttrNetConfig, ScoreMode, StageSpec};
use crate::engine::SgdConfig;
use crate::error::{Error, Result};
use crate::mixer::{Decay, MixConfig, TransferMode};
use crate::transfer::Threshold;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Baseline,
    Mixup,
    Cutmix,
    AttributeMix,
    AttributeMixPlus,
    /// Labeled plus pseudo-labeled samples, no mixing.
    PseudoLabel,
}

impl Mode {
    pub fn mixes(&self) -> bool {
        !matches!(self, Mode::Baseline | Mode::PseudoLabel)
    }

    pub fn uses_pseudo(&self) -> bool {
        matches!(self, Mode::AttributeMixPlus | Mode::PseudoLabel)
    }

    pub fn needs_masks(&self) -> bool {
        matches!(self, Mode::AttributeMix | Mode::AttributeMixPlus)
    }

    pub fn name(&self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Mixup => "mixup",
            Mode::Cutmix => "cutmix",
            Mode::AttributeMix => "attribute_mix",
            Mode::AttributeMixPlus => "attribute_mix_plus",
            Mode::PseudoLabel => "pseudo_label",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// JSON-lines manifest with `train` and `test` splits.
    pub manifest: PathBuf,
    /// Mask store directory (`index.json` plus PNGs).
    pub masks: Option<PathBuf>,
    /// Manifest holding the `unlabeled` pool; defaults to `manifest`.
    pub pool_manifest: Option<PathBuf>,
    /// Precomputed pseudo labels (JSON lines from `pseudo-label`).
    pub pseudo_labels: Option<PathBuf>,
    /// Inferred from the manifest when absent.
    pub num_classes: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub attributes_per_class: usize,
    pub input_side: usize,
    pub channels: Vec<usize>,
    /// Leading stages followed by a 2×2 max pool.
    pub pooled_stages: usize,
    pub score_mode: ScoreMode,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            attributes_per_class: 3,
            input_side: 64,
            channels: vec![8, 16, 32, 32],
            pooled_stages: 2,
            score_mode: ScoreMode::Logits,
        }
    }
}

impl ModelSection {
    pub fn to_config(&self, num_classes: usize) -> AttrNetConfig {
        AttrNetConfig {
            num_classes,
            attributes_per_class: self.attributes_per_class,
            input_side: self.input_side,
            stages: self
                .channels
                .iter()
                .enumerate()
                .map(|(i, &c)| StageSpec {
                    out_channels: c,
                    kernel: 3,
                    pool: i < self.pooled_stages,
                })
                .collect(),
            score_mode: self.score_mode,
            ..AttrNetConfig::desk(num_classes, self.attributes_per_class)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    /// Epochs of a baseline run.
    pub epochs: usize,
    /// Mixing modes train for `epochs × mix_epoch_multiplier`.
    pub mix_epoch_multiplier: f64,
    /// Stretch the step-decay interval by the same multiplier.
    pub scale_lr_schedule: bool,
    pub batch_size: usize,
    /// Lower bound of the random-crop area fraction.
    pub crop_min_scale: f64,
    pub flip: bool,
    /// Side fraction of the evaluation centre crop.
    pub eval_crop: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: 40,
            mix_epoch_multiplier: 3.0,
            scale_lr_schedule: true,
            batch_size: 16,
            crop_min_scale: 0.15,
            flip: true,
            eval_crop: 0.875,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixSection {
    pub alpha: f64,
    pub decay: Decay,
    pub shared_attribute: bool,
    pub transfer: TransferMode,
    /// Use this λ instead of sampling.
    pub force_lambda: Option<f64>,
}

impl Default for MixSection {
    fn default() -> Self {
        MixSection {
            alpha: 1.0,
            decay: Decay::Cosine,
            shared_attribute: true,
            transfer: TransferMode::TranslateContent,
            force_lambda: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MiningSection {
    /// Mine into `<run>/masks` when `data.masks` is absent.
    pub auto: bool,
    pub first_round_epochs: usize,
    pub round_epochs: usize,
    pub batch_size: usize,
    pub threshold: f64,
    pub learning_rate: f64,
    pub channel_selection: ChannelSelection,
    pub fill: EraseFill,
}

impl Default for MiningSection {
    fn default() -> Self {
        MiningSection {
            auto: false,
            first_round_epochs: 20,
            round_epochs: 10,
            batch_size: 16,
            threshold: 0.5,
            learning_rate: 0.05,
            channel_selection: ChannelSelection::Sequential,
            fill: EraseFill::DatasetMean,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelLevel {
    #[default]
    Attribute,
    Image,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferSection {
    pub temperature: f64,
    pub tau: Threshold,
    /// Pseudo samples per labeled sample in each epoch.
    pub pseudo_ratio: f64,
    pub level: LabelLevel,
    /// Model used to pseudo-label the pool when `data.pseudo_labels` is absent.
    pub teacher: Option<PathBuf>,
}

impl Default for TransferSection {
    fn default() -> Self {
        TransferSection {
            temperature: 1.0,
            tau: Threshold::default(),
            pseudo_ratio: 1.0,
            level: LabelLevel::Attribute,
            teacher: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub seed: u64,
    pub data: DataSection,
    pub model: ModelSection,
    pub sgd: SgdConfig,
    pub train: TrainSection,
    pub mix: MixSection,
    pub mining: MiningSection,
    pub transfer: TransferSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            mode: Mode::Baseline,
            seed: 0,
            data: DataSection::default(),
            model: ModelSection::default(),
            sgd: SgdConfig {
                learning_rate: 0.05,
                ..SgdConfig::default()
            },
            train: TrainSection::default(),
            mix: MixSection::default(),
            mining: MiningSection::default(),
            transfer: TransferSection::default(),
        }
    }
}

/// Parses a command-line value as a TOML literal, falling back to a bare
/// string (`mode=cutmix`).
fn parse_literal(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or(toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Sets `a.b.c = value` inside `table`, creating sections as needed.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{p}` in `{key}` is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_literal(raw.trim()));
    Ok(())
}

impl ExperimentConfig {
    /// Reads `path` (if any), applies `overrides` in order and validates.
    /// Relative data paths in a file are resolved against its directory.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut config: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        if let Some(base) = path.and_then(Path::parent) {
            config.resolve_paths(base);
        }
        config.validate()?;
        Ok(config)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() && !p.as_os_str().is_empty() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.data.manifest);
        for p in [
            &mut self.data.masks,
            &mut self.data.pool_manifest,
            &mut self.data.pseudo_labels,
            &mut self.transfer.teacher,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.manifest.as_os_str().is_empty() {
            return Err(Error::Config("data.manifest is required".into()));
        }
        self.sgd.validate()?;
        self.mix_config().validate()?;
        self.transfer.tau.validate()?;
        if self.model.attributes_per_class == 0 || self.model.channels.is_empty() {
            return Err(Error::Config("model needs k ≥ 1 and at least one stage".into()));
        }
        if self.train.batch_size == 0 || self.train.epochs == 0 {
            return Err(Error::Config("train.epochs and train.batch_size must be positive".into()));
        }
        if !(self.train.crop_min_scale > 0.0 && self.train.crop_min_scale <= 1.0) {
            return Err(Error::Config("train.crop_min_scale must lie in (0,1]".into()));
        }
        if !(self.train.eval_crop > 0.0 && self.train.eval_crop <= 1.0) {
            return Err(Error::Config("train.eval_crop must lie in (0,1]".into()));
        }
        if !(self.train.mix_epoch_multiplier > 0.0) {
            return Err(Error::Config("train.mix_epoch_multiplier must be positive".into()));
        }
        if let Some(l) = self.mix.force_lambda {
            if !(0.0..=1.0).contains(&l) {
                return Err(Error::Config(format!("mix.force_lambda must lie in [0,1], got {l}")));
            }
        }
        if !(self.transfer.temperature > 0.0) {
            return Err(Error::Config("transfer.temperature must be positive".into()));
        }
        if self.mode.needs_masks() && self.data.masks.is_none() && !self.mining.auto {
            return Err(Error::Config(format!(
                "mode {} needs data.masks (or mining.auto = true)",
                self.mode.name()
            )));
        }
        if self.mode.uses_pseudo() && self.data.pseudo_labels.is_none() && self.transfer.teacher.is_none() {
            return Err(Error::Config(format!(
                "mode {} needs data.pseudo_labels or transfer.teacher",
                self.mode.name()
            )));
        }
        Ok(())
    }

    /// Total epochs for this mode.
    pub fn total_epochs(&self) -> usize {
        if self.mode.mixes() {
            ((self.train.epochs as f64 * self.train.mix_epoch_multiplier).round() as usize).max(1)
        } else {
            self.train.epochs
        }
    }

    pub fn sgd_config(&self) -> SgdConfig {
        let mut sgd = self.sgd.clone();
        if self.mode.mixes() && self.train.scale_lr_schedule {
            sgd.step_decay_interval =
                ((sgd.step_decay_interval as f64 * self.train.mix_epoch_multiplier).round() as usize).max(1);
        }
        sgd
    }

    pub fn mix_config(&self) -> MixConfig {
        MixConfig {
            alpha: self.mix.alpha,
            decay: self.mix.decay,
            total_epochs: self.total_epochs(),
            seed: self.seed,
            shared_attribute: self.mix.shared_attribute,
            transfer: self.mix.transfer,
        }
    }

    pub fn mining_schedule(&self) -> MiningSchedule {
        let mut s = MiningSchedule {
            first_round_epochs: self.mining.first_round_epochs,
            round_epochs: self.mining.round_epochs,
            batch_size: self.mining.batch_size,
            threshold_fraction: self.mining.threshold,
            fill: self.mining.fill.clone(),
            channel_selection: self.mining.channel_selection,
            seed: crate::rng::derive_seed(self.seed, "mining", 0),
            ..MiningSchedule::default()
        };
        s.sgd.learning_rate = self.mining.learning_rate;
        s
    }

    /// The effective configuration as TOML.
    pub fn echo(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}
