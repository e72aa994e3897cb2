//! The merged run configuration: built-in defaults, then the `--config`
//! file, then command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use superfront::evaluate::Protocol;
use superfront::model::{DiscriminatorConfig, Fusion, GeneratorConfig};
use superfront::synthdata::DatasetConfig;
use superfront::trainer::{default_decay_epochs, EmbedderTrainConfig, Mode, TrainConfig};

pub const RUN_CONFIG_FILE: &str = "run_config.toml";

/// Files a command reads.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Inputs {
    pub dataset: Option<PathBuf>,
    pub embedder: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub resume: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub protocol: Protocol,
    /// Expected model kind; taken from the checkpoint when absent.
    pub mode: Option<Mode>,
    pub fusion: Option<Fusion>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Drives every seeded component.
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
    pub inputs: Inputs,
    pub dataset: DatasetConfig,
    pub embedder: EmbedderTrainConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
}

/// Base model and schedule for `train`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    /// Sixteen residual dense blocks at full width.
    Full,
    /// Four residual dense blocks; the default.
    #[default]
    Desk,
    /// Narrow networks, five epochs, no decay.
    Smoke,
}

impl Preset {
    pub fn train_config(self) -> TrainConfig {
        match self {
            Preset::Full => TrainConfig {
                generator: GeneratorConfig::default(),
                discriminator: DiscriminatorConfig::default(),
                ..TrainConfig::default()
            },
            Preset::Desk => TrainConfig::default(),
            Preset::Smoke => TrainConfig::smoke(),
        }
    }

    pub fn decay_epochs(self, mode: Mode) -> Vec<usize> {
        match self {
            Preset::Smoke => Vec::new(),
            _ => default_decay_epochs(mode),
        }
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// The merged configuration and whether the file fixed the decay schedule.
pub struct Loaded {
    pub config: RunConfig,
    pub file_sets_decay: bool,
}

/// Overlays the file at `path` (if any) on `base`.
pub fn load(base: RunConfig, path: Option<&Path>) -> Result<Loaded> {
    let Some(path) = path else {
        return Ok(Loaded {
            config: base,
            file_sets_decay: false,
        });
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let file: toml::Value =
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let file_sets_decay = file
        .get("train")
        .and_then(|t| t.get("decay_epochs"))
        .is_some();
    let mut merged = toml::Value::try_from(&base).context("serializing defaults")?;
    merge(&mut merged, file);
    let config = merged
        .try_into()
        .with_context(|| format!("invalid configuration in {}", path.display()))?;
    Ok(Loaded {
        config,
        file_sets_decay,
    })
}

impl RunConfig {
    /// Copies the top-level seed into every component.
    pub fn propagate_seed(&mut self) {
        self.dataset.seed = self.seed;
        self.embedder.seed = self.seed;
        self.train.seed = self.seed;
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(RUN_CONFIG_FILE);
        let text = toml::to_string(self).context("serializing run configuration")?;
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_toml() {
        let mut c = RunConfig {
            seed: 7,
            inputs: Inputs {
                dataset: Some("data".into()),
                ..Inputs::default()
            },
            ..RunConfig::default()
        };
        c.train.lr = 3.3e-4;
        c.train.weights.tv = 1e-4;
        c.dataset.yaws = vec![-30, 0, 30];
        let text = toml::to_string(&c).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn file_values_override_defaults_key_by_key() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        fs::write(
            &p,
            "seed = 3\n[train]\nepochs = 7\ndecay_epochs = [2]\n[train.weights]\npixel = 1.5\n",
        )
        .unwrap();
        let l = load(RunConfig::default(), Some(&p)).unwrap();
        assert!(l.file_sets_decay);
        assert_eq!(l.config.seed, 3);
        assert_eq!(l.config.train.epochs, 7);
        assert_eq!(l.config.train.weights.pixel, 1.5);
        assert_eq!(l.config.train.weights.patch, 5.0);
        assert_eq!(l.config.train.batch, 8);
        fs::write(&p, "[train]\nepoch = 7\n").unwrap();
        assert!(load(RunConfig::default(), Some(&p)).is_err());
    }
}
