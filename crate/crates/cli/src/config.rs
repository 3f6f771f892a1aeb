//! Run configuration read from TOML. Every section mirrors a library config
//! type; unknown keys anywhere are rejected with their full key path.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use ssmecg::augment::AugmentConfig;
use ssmecg::eval::SynthConfig;
use ssmecg::preprocess::PreprocessConfig;
use ssmecg::signal_io::SplitMode;
use ssmecg::ssm::NetworkConfig;
use ssmecg::train::FinetuneConfig;

use crate::error::{CliError, CliResult};

pub const SEED_ENV: &str = "SSMECG_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub subjects: usize,
    pub windows_per_subject: usize,
    pub generator: SynthConfig,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection {
            subjects: 10,
            windows_per_subject: 4,
            generator: SynthConfig::default(),
        }
    }
}

/// Session quality gate applied before preprocessing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GateSection {
    pub enabled: bool,
    pub threshold: f64,
}

impl Default for GateSection {
    fn default() -> Self {
        GateSection {
            enabled: true,
            threshold: 0.9,
        }
    }
}

/// Optimizer and schedule of pretraining. Network and augmentation come
/// from their own sections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub shuffle_targets: bool,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let d = ssmecg::train::PretrainConfig::default();
        PretrainSection {
            epochs: d.epochs,
            batch_size: d.batch_size,
            learning_rate: d.learning_rate,
            weight_decay: d.weight_decay,
            shuffle_targets: d.shuffle_targets,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub mode: SplitMode,
    pub folds: usize,
}

impl Default for SplitSection {
    fn default() -> Self {
        SplitSection {
            mode: SplitMode::SubjectAgnostic,
            folds: 5,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub synth: SynthSection,
    pub gate: GateSection,
    pub preprocess: PreprocessConfig,
    pub augment: AugmentConfig,
    pub model: NetworkConfig,
    pub pretrain: PretrainSection,
    pub finetune: FinetuneConfig,
    pub split: SplitSection,
}

impl RunConfig {
    pub fn from_toml(text: &str, origin: &Path) -> CliResult<RunConfig> {
        let de = toml::Deserializer::new(text);
        serde_path_to_error::deserialize(de).map_err(|e| CliError::Config {
            key: e.path().to_string(),
            message: format!("{}: {}", origin.display(), e.inner().message()),
        })
    }

    pub fn load(path: Option<&Path>) -> CliResult<RunConfig> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                RunConfig::from_toml(&text, p)
            }
        }
    }

    /// Seed precedence: command-line flag, then config file, then the
    /// environment variable, then zero.
    pub fn resolve_seed(&mut self, flag: Option<u64>) -> CliResult<u64> {
        let env = match std::env::var(SEED_ENV) {
            Ok(v) => Some(v.trim().parse::<u64>().map_err(|_| CliError::Config {
                key: SEED_ENV.into(),
                message: format!("not an unsigned integer: {v:?}"),
            })?),
            Err(_) => None,
        };
        let seed = flag.or(self.seed).or(env).unwrap_or(0);
        self.seed = Some(seed);
        self.finetune.seed = seed;
        Ok(seed)
    }

    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string_pretty(self).map_err(|e| CliError::Config {
            key: String::new(),
            message: format!("cannot serialize resolved config: {e}"),
        })
    }

    /// Checks the sections every command shares.
    pub fn validate(&self) -> CliResult<()> {
        let wrap = |key: &str, e: ssmecg::Error| CliError::Config {
            key: key.into(),
            message: e.to_string(),
        };
        self.preprocess.validate().map_err(|e| wrap("preprocess", e))?;
        self.augment.validate().map_err(|e| wrap("augment", e))?;
        if self.augment.rate_hz != self.preprocess.target_rate_hz {
            return Err(CliError::Config {
                key: "augment.rate_hz".into(),
                message: format!(
                    "{} differs from preprocess.target_rate_hz {}",
                    self.augment.rate_hz, self.preprocess.target_rate_hz
                ),
            });
        }
        if !(self.gate.threshold > 0.0 && self.gate.threshold <= 1.0) {
            return Err(CliError::Config {
                key: "gate.threshold".into(),
                message: format!("must be in (0, 1], got {}", self.gate.threshold),
            });
        }
        if self.split.folds < 2 {
            return Err(CliError::Config {
                key: "split.folds".into(),
                message: format!("must be >= 2, got {}", self.split.folds),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_reports_its_path() {
        let err = RunConfig::from_toml("[pretrain]\nepochz = 3\n", Path::new("c.toml")).unwrap_err();
        match err {
            CliError::Config { key, .. } => assert_eq!(key, "pretrain.epochz"),
            other => panic!("unexpected {other:?}"),
        }
        let err = RunConfig::from_toml("[model]\nd_model = \"wide\"\n", Path::new("c.toml")).unwrap_err();
        assert!(matches!(err, CliError::Config { ref key, .. } if key == "model.d_model"));
    }

    #[test]
    fn resolved_config_round_trips() {
        let mut cfg = RunConfig::from_toml("seed = 4\n[pretrain]\nepochs = 2\n", Path::new("c.toml")).unwrap();
        cfg.resolve_seed(None).unwrap();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text, Path::new("r.toml")).unwrap(), cfg);
    }

    #[test]
    fn flag_seed_wins_over_file() {
        let mut cfg = RunConfig::from_toml("seed = 4\n", Path::new("c.toml")).unwrap();
        assert_eq!(cfg.resolve_seed(Some(9)).unwrap(), 9);
        assert_eq!(cfg.finetune.seed, 9);
    }
}
