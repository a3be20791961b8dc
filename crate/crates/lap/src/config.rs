//! Run configuration: a flat TOML key-value file whose keys are mirrored
//! one-to-one by CLI flags. Flags beat file values; the `LAP_SEED`
//! environment variable backs the seed when neither source sets it.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{LapError, Result};
use crate::losses::{LapLossConfig, LossWeights, MilConfig, MplConfig, PalConfig, ThresholdMode};
use crate::model::{FusionMode, SmootherConfig};
use crate::optim::{AdamConfig, TrainConfig};

pub const SEED_ENV: &str = "LAP_SEED";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train_manifest: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
    pub dictionary: Option<PathBuf>,
    pub dictionary_embeddings: Option<PathBuf>,
    pub ground_truth: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,

    pub fusion: FusionMode,
    /// Top-k size for the MIL predictions.
    pub k: usize,
    /// Triplet margin.
    pub alpha: f64,
    /// Weight of the multi-prompt triplet term.
    pub beta: f64,
    /// Weight of the pseudo-anomaly term.
    pub gamma: f64,
    /// Dynamic-threshold width.
    pub tau: f64,
    /// Rows per anchor/positive/negative mean; defaults to the dictionary
    /// capacity P when unset.
    pub set_size: Option<usize>,
    /// Videos per bag half.
    pub b: usize,
    /// Snippets per video after resampling.
    pub l: usize,
    pub epochs: usize,
    pub seed: Option<u64>,
    pub eval_cadence: usize,
    pub smoother: bool,
    pub smoother_window: usize,
    pub threshold_mode: ThresholdMode,
    /// Ablation baseline: zero the semantic features everywhere.
    pub visual_only: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train_manifest: None,
            test_manifest: None,
            dictionary: None,
            dictionary_embeddings: None,
            ground_truth: None,
            out_dir: None,
            fusion: FusionMode::Concat,
            k: 3,
            alpha: 1.0,
            beta: 0.1,
            gamma: 0.001,
            tau: 1.0,
            set_size: None,
            b: 8,
            l: 64,
            epochs: 50,
            seed: None,
            eval_cadence: 1,
            smoother: false,
            smoother_window: 5,
            threshold_mode: ThresholdMode::Dynamic,
            visual_only: false,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| LapError::io(path, e))?;
        toml::from_str(&text).map_err(|e| LapError::malformed(path, format!("invalid config: {e}")))
    }

    /// Flag > config file > `LAP_SEED` > 0.
    pub fn resolve_seed(&self) -> u64 {
        if let Some(seed) = self.seed {
            return seed;
        }
        seed_from_env().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(LapError::invalid("k must be positive"));
        }
        if self.b == 0 || self.l == 0 || self.epochs == 0 {
            return Err(LapError::invalid("b, l, and epochs must be positive"));
        }
        if self.k > self.l {
            return Err(LapError::invalid(format!(
                "k = {} must not exceed l = {}",
                self.k, self.l
            )));
        }
        if self.eval_cadence == 0 {
            return Err(LapError::invalid("eval_cadence must be positive"));
        }
        if self.alpha < 0.0 || self.beta < 0.0 || self.gamma < 0.0 {
            return Err(LapError::invalid("alpha, beta, and gamma must be nonnegative"));
        }
        if !self.tau.is_finite() {
            return Err(LapError::invalid("tau must be finite"));
        }
        if self.smoother_window == 0 || self.smoother_window % 2 == 0 {
            return Err(LapError::invalid("smoother_window must be odd and positive"));
        }
        if self.set_size == Some(0) {
            return Err(LapError::invalid("set_size must be positive"));
        }
        Ok(())
    }

    /// Materialize the training configuration; `p` is the dictionary
    /// capacity backing the default `set_size`.
    pub fn train_config(&self, p: usize) -> TrainConfig {
        TrainConfig {
            b: self.b,
            l: self.l,
            epochs: self.epochs,
            seed: self.resolve_seed(),
            fusion_mode: self.fusion,
            loss: LapLossConfig {
                mil: MilConfig { k: self.k },
                mpl: MplConfig::new(self.alpha, self.set_size.unwrap_or(p)),
                pal: PalConfig {
                    tau: self.tau,
                    mode: self.threshold_mode,
                },
                weights: LossWeights {
                    beta: self.beta,
                    gamma: self.gamma,
                },
            },
            adam: AdamConfig::default(),
            eval_cadence: self.eval_cadence,
            smoother: SmootherConfig {
                enabled: self.smoother,
                window: self.smoother_window,
            },
            visual_only: self.visual_only,
        }
    }

    /// The effective configuration, seed resolved, as the TOML echoed into
    /// output directories.
    pub fn effective_toml(&self) -> Result<String> {
        let mut echo = self.clone();
        echo.seed = Some(echo.resolve_seed());
        toml::to_string(&echo).map_err(|e| LapError::invalid(format!("serializing config: {e}")))
    }
}

pub fn seed_from_env() -> Option<u64> {
    std::env::var(SEED_ENV).ok().and_then(|s| s.parse().ok())
}
