use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::{LossWeights, OrthVariant};
use crate::model::{DiscriminatorConfig, Fusion, GeneratorConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Single-image input.
    #[default]
    Si,
    /// Multi-image input.
    Mi,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Si => "si",
            Mode::Mi => "mi",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "si" => Ok(Mode::Si),
            "mi" => Ok(Mode::Mi),
            _ => Err(Error::InvalidArgument(format!(
                "unknown mode `{}` (si or mi)",
                s
            ))),
        }
    }
}

/// Ablation switches; each removes one component of the full model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    /// Drop the side-view SR branch (baseline 1).
    pub no_sr_module: bool,
    /// Keep the SR branch but drop its pixel supervision (baseline 2).
    pub no_sr_supervision: bool,
    pub no_l1: bool,
    pub no_ssim: bool,
    pub no_id: bool,
    pub no_adv: bool,
}

pub const ABLATION_NAMES: [&str; 6] = [
    "no_sr_module",
    "no_sr_supervision",
    "no_l1",
    "no_ssim",
    "no_id",
    "no_adv",
];

impl Ablation {
    pub fn set(&mut self, name: &str) -> Result<()> {
        match name {
            "no_sr_module" | "baseline_1" => self.no_sr_module = true,
            "no_sr_supervision" | "baseline_2" => self.no_sr_supervision = true,
            "no_l1" => self.no_l1 = true,
            "no_ssim" => self.no_ssim = true,
            "no_id" => self.no_id = true,
            "no_adv" => self.no_adv = true,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown ablation `{}` (one of {})",
                    other,
                    ABLATION_NAMES.join(", ")
                )))
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// 0-based epoch indices at which the rate is multiplied by `decay_factor`.
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub d_steps_per_g: usize,
    pub seed: u64,
    /// Views per training example in multi-image mode.
    pub n_inputs: usize,
    pub weights: LossWeights,
    pub orth_variant: OrthVariant,
    pub ablation: Ablation,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    /// Held-out probes scored after every epoch.
    pub eval_slice: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Si,
            epochs: 20,
            batch: 8,
            lr: 1e-4,
            decay_epochs: vec![10, 15],
            decay_factor: 0.5,
            d_steps_per_g: 1,
            seed: 0,
            n_inputs: 1,
            weights: LossWeights::default(),
            orth_variant: OrthVariant::default(),
            ablation: Ablation::default(),
            generator: GeneratorConfig::desk(),
            discriminator: DiscriminatorConfig::default(),
            eval_slice: 16,
        }
    }
}

/// Decay epochs of the published schedule for each mode.
pub fn default_decay_epochs(mode: Mode) -> Vec<usize> {
    match mode {
        Mode::Si => vec![10, 15],
        Mode::Mi => vec![5, 10],
    }
}

impl TrainConfig {
    /// Multi-image defaults: decays at epochs 5 and 10.
    pub fn mi(fusion: Fusion, n_inputs: usize) -> Self {
        let mut c = TrainConfig {
            mode: Mode::Mi,
            n_inputs,
            decay_epochs: default_decay_epochs(Mode::Mi),
            ..Self::default()
        };
        c.generator.fusion = fusion;
        c.generator.n_inputs = n_inputs;
        c
    }

    /// A few minutes on one core: narrow generator and discriminators, a
    /// higher rate and no decay inside the five epochs.
    pub fn smoke() -> Self {
        TrainConfig {
            epochs: 5,
            batch: 8,
            lr: 2e-3,
            decay_epochs: Vec::new(),
            generator: GeneratorConfig {
                base_channels: 8,
                n_rdb: 1,
                rdb_layers: 2,
                growth: 8,
                up_channels: 8,
                ..GeneratorConfig::default()
            },
            discriminator: DiscriminatorConfig {
                channels: 4,
                ..DiscriminatorConfig::default()
            },
            eval_slice: 16,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        self.generator.validate()?;
        self.weights.validate()?;
        if self.epochs == 0 || self.batch == 0 || self.d_steps_per_g == 0 {
            return bad("epochs, batch and d_steps_per_g must be >= 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite())
            || !(self.decay_factor > 0.0 && self.decay_factor <= 1.0)
        {
            return bad(format!(
                "lr {} / decay_factor {} out of range",
                self.lr, self.decay_factor
            ));
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!(
                "decay epochs {:?} must be strictly increasing",
                self.decay_epochs
            ));
        }
        if self.decay_epochs.last().is_some_and(|&e| e >= self.epochs) {
            return bad(format!(
                "decay epochs {:?} must be < epochs {}",
                self.decay_epochs, self.epochs
            ));
        }
        if self.n_inputs == 0 || self.n_inputs != self.generator.n_inputs {
            return bad(format!(
                "n_inputs {} must be >= 1 and match the generator ({})",
                self.n_inputs, self.generator.n_inputs
            ));
        }
        match self.mode {
            Mode::Si if self.generator.fusion != Fusion::Single || self.n_inputs != 1 => {
                bad(format!(
                    "single-image mode needs fusion `single` and 1 input, got `{}`",
                    self.generator.fusion
                ))
            }
            Mode::Mi if self.generator.fusion == Fusion::Single => {
                bad("multi-image mode needs a fusion scheme other than `single`".into())
            }
            _ => Ok(()),
        }?;
        if self.ablation.no_sr_module == self.generator.sr_module {
            return bad("ablation no_sr_module disagrees with generator.sr_module".into());
        }
        if self.discriminator.hr_size != self.generator.hr_size
            || self.discriminator.image_channels != self.generator.image_channels
        {
            return bad("discriminator and generator image geometry differ".into());
        }
        Ok(())
    }

    /// Sets the ablation switches and the generator fields they imply.
    pub fn apply_ablation(&mut self, ablation: Ablation) {
        self.ablation = ablation;
        self.generator.sr_module = !ablation.no_sr_module;
    }

    /// Loss weights with ablated or inapplicable terms set to zero.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.weights;
        let a = &self.ablation;
        if a.no_l1 {
            w.pixel = 0.0;
        }
        if a.no_ssim {
            w.patch = 0.0;
        }
        if a.no_id {
            w.identity = 0.0;
        }
        if a.no_adv {
            w.adversarial = 0.0;
        }
        if self.generator.fusion != Fusion::FeatureFuseOrth {
            w.orthogonal = 0.0;
        }
        w
    }

    /// Short hash of the model-defining fields; evaluation requests must match it.
    pub fn fingerprint(&self) -> String {
        let key = serde_json::json!({
            "mode": self.mode,
            "generator": self.generator,
            "n_inputs": self.n_inputs,
        });
        let digest = Sha256::digest(key.to_string().as_bytes());
        crate::model::params::hex(&digest[..8])
    }

    /// Sets image geometry on both networks.
    pub fn set_geometry(&mut self, hr_size: usize, channels: usize) {
        self.generator.hr_size = hr_size;
        self.generator.lr_size = hr_size / 4;
        self.generator.image_channels = channels;
        self.discriminator.hr_size = hr_size;
        self.discriminator.image_channels = channels;
    }
}

/// `lr * decay_factor^(number of decay epochs <= epoch)`.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> f64 {
    config
        .decay_epochs
        .iter()
        .filter(|&&d| d <= epoch)
        .fold(config.lr, |lr, _| lr * config.decay_factor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_matches_closed_form() {
        let si = TrainConfig::default();
        assert_eq!(lr_at(0, &si), 1e-4);
        assert_eq!(lr_at(9, &si), 1e-4);
        assert_eq!(lr_at(10, &si), 5e-5);
        assert_eq!(lr_at(12, &si), 5e-5);
        assert_eq!(lr_at(15, &si), 2.5e-5);
        assert_eq!(lr_at(19, &si), 2.5e-5);
        let mi = TrainConfig::mi(Fusion::FeatureFuse, 2);
        assert_eq!(lr_at(4, &mi), 1e-4);
        assert_eq!(lr_at(5, &mi), 5e-5);
        assert_eq!(lr_at(11, &mi), 2.5e-5);
    }

    #[test]
    fn validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig::smoke().validate().is_ok());
        assert!(TrainConfig::mi(Fusion::ImageConcat, 2).validate().is_ok());
        let mut c = TrainConfig::default();
        c.decay_epochs = vec![15, 10];
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.decay_epochs = vec![10, 20];
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.generator.fusion = Fusion::FeatureFuse;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.ablation.no_sr_module = true;
        assert!(c.validate().is_err());
        c.apply_ablation(c.ablation);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn ablations_zero_their_weights() {
        let mut c = TrainConfig::default();
        let mut a = Ablation::default();
        a.set("no_ssim").unwrap();
        c.apply_ablation(a);
        let w = c.effective_weights();
        assert_eq!(w.patch, 0.0);
        assert_eq!(w.pixel, 20.0);
        assert_eq!(w.orthogonal, 0.0);
        assert!(a.set("no_everything").is_err());
        let o = TrainConfig::mi(Fusion::FeatureFuseOrth, 2);
        assert_eq!(o.effective_weights().orthogonal, 0.1);
    }
}
