//! Run configuration (TOML) and the toy preset.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusParams, GMSD_SCORER, SSIM_SCORER};
use crate::error::{Error, Result};
use crate::flowtroi::{FlowParams, TroiParams};
use crate::rng::{hash_str, mix};
use crate::score::{DEFAULT_BETA, DEFAULT_EPS};
use crate::train::TrainerConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub frames: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub scores: Option<PathBuf>,
    pub checkpoints: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub scorers: [String; 2],
    /// Minimum lower-is-better gap per scorer.
    pub tau: [f64; 2],
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            scorers: [SSIM_SCORER.to_string(), GMSD_SCORER.to_string()],
            tau: [0.005, 0.005],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreConfig {
    pub beta: f64,
    pub eps: f64,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            beta: DEFAULT_BETA,
            eps: DEFAULT_EPS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub window: usize,
    /// Held-out triplets need `level(neg) − level(pos)` at least this large.
    pub min_level_gap: i32,
    /// Fraction of each scene's frames (the tail) reserved for evaluation.
    pub holdout_fraction: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            window: 10,
            min_level_gap: 2,
            holdout_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub min_raters: usize,
    pub theta: f64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            min_raters: 5,
            theta: 0.8,
        }
    }
}

/// Synthetic scenes for the toy pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub scenes: usize,
    pub width: usize,
    pub height: usize,
    pub frames: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            scenes: 3,
            width: 112,
            height: 112,
            frames: 70,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads for data-parallel stages; 0 uses all cores.
    pub jobs: usize,
    pub paths: Paths,
    pub corpus: CorpusParams,
    pub flow: FlowParams,
    pub troi: TroiParams,
    pub filter: FilterConfig,
    pub train: TrainerConfig,
    pub score: ScoreConfig,
    pub eval: EvalConfig,
    pub study: StudyConfig,
    pub synth: SynthConfig,
}

impl RunConfig {
    /// Defaults with the toy training preset.
    pub fn toy() -> Self {
        Self {
            train: TrainerConfig::toy(),
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("config: {e}")))
    }

    /// Writes the resolved configuration next to a run's outputs.
    pub fn write_snapshot(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let path = dir.as_ref().join("resolved_config.toml");
        std::fs::write(&path, self.to_toml()?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.seed > i64::MAX as u64 {
            return Err(Error::Config("seed must fit in a signed 64-bit integer".into()));
        }
        if !(0.0..1.0).contains(&self.eval.holdout_fraction) {
            return Err(Error::Config("holdout_fraction must be in [0, 1)".into()));
        }
        if !(self.score.beta >= 1.0) {
            return Err(Error::Config("beta must be ≥ 1".into()));
        }
        if !(0.0..=1.0).contains(&self.study.theta) {
            return Err(Error::Config("theta must be in [0, 1]".into()));
        }
        Ok(())
    }

    /// Trainer settings with the seed derived from the run seed.
    pub fn trainer(&self) -> TrainerConfig {
        TrainerConfig {
            seed: mix(&[self.seed, hash_str("train")]),
            ..self.train
        }
    }

    pub fn stage_seed(&self, stage: &str) -> u64 {
        mix(&[self.seed, hash_str(stage)])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_hyperparameters() {
        let c = RunConfig::default();
        assert_eq!((c.train.margin1, c.train.margin2), (0.3, 0.1));
        assert_eq!((c.train.lambda1, c.train.lambda2, c.train.lambda_kl), (1.0, 1.0, 0.05));
        assert_eq!((c.train.t_start, c.train.t_end), (0.01, 1.0));
        assert_eq!((c.train.learning_rate, c.train.batch_size, c.train.epochs), (1e-5, 16, 80));
        assert_eq!(c.corpus.k_max, 15);
        assert_eq!((c.corpus.coverage_min, c.corpus.coverage_max), (0.30, 0.85));
        assert_eq!((c.eval.window, c.study.theta, c.score.beta), (10, 0.8, 1.5));
    }

    #[test]
    fn toml_round_trip_and_partial_files() {
        let c = RunConfig::toy();
        assert_eq!(RunConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
        let p = RunConfig::from_toml("seed = 9\n[train]\nepochs = 3\n").unwrap();
        assert_eq!(p.seed, 9);
        assert_eq!(p.train.epochs, 3);
        assert_eq!(p.train.margin1, 0.3);
        assert!(RunConfig::from_toml("sede = 9\n").is_err());
        assert!(RunConfig::from_toml("[train]\nepochs = 0\n").is_err());
    }
}
