//! Training configuration and its `key = value` text form.
//!
//! ```text
//! # stage-2 desk run
//! stage = 2
//! epochs = 10
//! cda = dconv1,dconv2,dconv3
//! cutmix = on
//! ```

use crate::augment::AugmentConfig;
use crate::backbone::{Attention, BackboneConfig, BranchMode, Fusion, ModelSpec, ENCODER_STRIDE};
use crate::error::{Error, Result};
use crate::optim::AdamConfig;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// Building segmentation.
    One,
    /// Damage classification.
    Two,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    pub learning_rate: f64,
    pub epochs: usize,
    pub crop: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub mff: bool,
    /// dconv1, dconv2, dconv3.
    pub cda_levels: [bool; 3],
    pub cutmix: bool,
    pub cutmix_probability: f64,
    pub difficult_classes: Vec<u8>,
    pub area_ratio_range: (f64, f64),
    /// Flips and quarter turns during training.
    pub augment: bool,
    /// Share of the training manifest held out for the per-epoch validation loss.
    pub val_fraction: f64,
    pub backbone: BackboneConfig,
}

impl TrainConfig {
    /// Full-scale learning rates, stage 1 then stage 2.
    pub const FULL_SCALE_LEARNING_RATES: [f64; 2] = [1.5e-4, 2e-4];

    /// Desk runs take a few hundred Adam steps, so they use the full-scale
    /// rates multiplied by this factor.
    pub const DESK_LR_SCALE: f64 = 5.0;

    /// CPU-scale defaults: 20 epochs for stage 1, 10 for stage 2, 64-pixel
    /// crops, batches of 4.
    pub fn desk(stage: Stage) -> Self {
        let (epochs, mff, cda) = match stage {
            Stage::One => (20, false, [false; 3]),
            Stage::Two => (10, true, [true; 3]),
        };
        let learning_rate =
            Self::FULL_SCALE_LEARNING_RATES[stage.number() as usize - 1] * Self::DESK_LR_SCALE;
        Self {
            stage,
            learning_rate,
            epochs,
            crop: 64,
            batch_size: 4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            mff,
            cda_levels: cda,
            cutmix: stage == Stage::Two,
            cutmix_probability: 0.5,
            difficult_classes: vec![2, 3],
            area_ratio_range: (0.1, 0.4),
            augment: true,
            val_fraction: 0.1,
            backbone: BackboneConfig::desk(),
        }
    }

    /// Full-scale settings: 120 / 25 epochs, 512-pixel crops, ResNet-50 widths.
    pub fn full_scale(stage: Stage) -> Self {
        Self {
            epochs: match stage {
                Stage::One => 120,
                Stage::Two => 25,
            },
            learning_rate: Self::FULL_SCALE_LEARNING_RATES[stage.number() as usize - 1],
            crop: 512,
            backbone: BackboneConfig::full_scale(),
            ..Self::desk(stage)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.crop == 0 || self.crop % ENCODER_STRIDE != 0 {
            return bad(format!(
                "crop {} is not a positive multiple of {ENCODER_STRIDE}",
                self.crop
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning rate {} must be positive",
                self.learning_rate
            ));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.eps > 0.0)
        {
            return bad("adam betas must lie in [0, 1) and eps must be positive".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction {} outside [0, 1)", self.val_fraction));
        }
        if self.stage == Stage::One && self.cda_levels.iter().any(|&l| l) {
            return bad("cross-directional attention needs stage 2".into());
        }
        self.augment_config().validate()?;
        self.backbone.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn augment_config(&self) -> AugmentConfig {
        AugmentConfig {
            difficult_classes: self.difficult_classes.clone(),
            cutmix_probability: self.cutmix_probability,
            area_ratio_range: self.area_ratio_range,
            seed: self.seed,
        }
    }

    pub fn fusion(&self) -> Fusion {
        Fusion {
            mff: self.mff,
            attention: self
                .cda_levels
                .map(|on| if on { Attention::Cda } else { Attention::Off }),
        }
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            backbone: self.backbone.clone(),
            mode: match self.stage {
                Stage::One => BranchMode::Single,
                Stage::Two => BranchMode::DualShared,
            },
            fusion: self.fusion(),
        }
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "stage" => {
                self.stage = match v {
                    "1" => Stage::One,
                    "2" => Stage::Two,
                    _ => return Err(Error::Config(format!("stage must be 1 or 2, got {v:?}"))),
                }
            }
            "learning_rate" | "lr" => self.learning_rate = num(key, v)?,
            "epochs" => self.epochs = num(key, v)?,
            "crop" => self.crop = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "beta1" => self.beta1 = num(key, v)?,
            "beta2" => self.beta2 = num(key, v)?,
            "eps" => self.eps = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "mff" => self.mff = parse_switch(v)?,
            "cda" => self.cda_levels = parse_cda_levels(v)?,
            "cutmix" => self.cutmix = parse_switch(v)?,
            "cutmix_probability" => self.cutmix_probability = num(key, v)?,
            "difficult_classes" => self.difficult_classes = parse_classes(v)?,
            "area_ratio_min" => self.area_ratio_range.0 = num(key, v)?,
            "area_ratio_max" => self.area_ratio_range.1 = num(key, v)?,
            "augment" => self.augment = parse_switch(v)?,
            "val_fraction" => self.val_fraction = num(key, v)?,
            "encoder_channels" => self.backbone.encoder_channels = parse_list(key, v)?,
            "decoder_channels" => self.backbone.decoder_channels = parse_list(key, v)?,
            other => return Err(Error::Config(format!("unknown setting {other:?}"))),
        }
        Ok(())
    }

    /// Applies every non-comment line of a settings file.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    /// Canonical settings text; [`TrainConfig::apply_text`] reads it back.
    pub fn to_text(&self) -> String {
        let list = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let classes = self
            .difficult_classes
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let onoff = |b: bool| if b { "on" } else { "off" };
        [
            format!("stage = {}", self.stage.number()),
            format!("learning_rate = {:?}", self.learning_rate),
            format!("epochs = {}", self.epochs),
            format!("crop = {}", self.crop),
            format!("batch_size = {}", self.batch_size),
            format!("beta1 = {:?}", self.beta1),
            format!("beta2 = {:?}", self.beta2),
            format!("eps = {:?}", self.eps),
            format!("seed = {}", self.seed),
            format!("mff = {}", onoff(self.mff)),
            format!("cda = {}", format_cda_levels(self.cda_levels)),
            format!("cutmix = {}", onoff(self.cutmix)),
            format!("cutmix_probability = {:?}", self.cutmix_probability),
            format!("difficult_classes = {classes}"),
            format!("area_ratio_min = {:?}", self.area_ratio_range.0),
            format!("area_ratio_max = {:?}", self.area_ratio_range.1),
            format!("augment = {}", onoff(self.augment)),
            format!("val_fraction = {:?}", self.val_fraction),
            format!(
                "encoder_channels = {}",
                list(&self.backbone.encoder_channels)
            ),
            format!(
                "decoder_channels = {}",
                list(&self.backbone.decoder_channels)
            ),
        ]
        .join("\n")
            + "\n"
    }

    /// Short digest of the canonical settings.
    pub fn hash(&self) -> String {
        rng::digest_hex(&self.to_text())
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|s| num(key, s.trim())).collect()
}

pub fn parse_switch(v: &str) -> Result<bool> {
    match v.trim() {
        "on" | "true" | "1" | "yes" => Ok(true),
        "off" | "false" | "0" | "no" => Ok(false),
        other => Err(Error::Config(format!("expected on or off, got {other:?}"))),
    }
}

/// `dconv1,dconv3` → `[true, false, true]`; `none` or empty → all off.
pub fn parse_cda_levels(v: &str) -> Result<[bool; 3]> {
    let mut out = [false; 3];
    let v = v.trim();
    if v.is_empty() || v == "none" || v == "off" {
        return Ok(out);
    }
    for part in v.split(',') {
        let level = match part.trim() {
            "dconv1" => 0,
            "dconv2" => 1,
            "dconv3" => 2,
            other => return Err(Error::Config(format!("unknown attention level {other:?}"))),
        };
        out[level] = true;
    }
    Ok(out)
}

pub fn format_cda_levels(levels: [bool; 3]) -> String {
    let on: Vec<String> = levels
        .iter()
        .enumerate()
        .filter(|(_, &l)| l)
        .map(|(i, _)| format!("dconv{}", i + 1))
        .collect();
    if on.is_empty() {
        "none".into()
    } else {
        on.join(",")
    }
}

pub fn parse_classes(v: &str) -> Result<Vec<u8>> {
    v.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| num::<u8>("difficult_classes", s.trim()))
        .collect()
}
