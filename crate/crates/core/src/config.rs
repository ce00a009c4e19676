//! Run configuration, loaded from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::geometry::{BevConfig, GenParams};
use crate::losses::LossWeights;
use crate::matcher::{DiagMode, MatcherConfig, ScoreMode};

pub const CONFIG_VERSION: u32 = 1;

/// Where vertex heatmaps and distance maps come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorMode {
    /// The learned heads on rendered BEV features.
    Trained,
    /// Heads synthesized from ground truth with controlled corruption.
    Oracle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub channels: usize,
    pub noise: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            channels: 8,
            noise: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub flip_prob: f64,
    pub dt_noise: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            flip_prob: 0.0,
            dt_noise: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub detector: DetectorMode,
    pub detector_hidden: usize,
    /// Vertex capacity `N`.
    pub capacity: usize,
    pub confidence_threshold: f64,
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub bands: usize,
    pub sinkhorn_iters: usize,
    pub diag_mode: DiagMode,
    pub score_mode: ScoreMode,
    pub dustbin_init: f64,
    pub use_pe: bool,
    pub use_dt: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let m = MatcherConfig::default();
        ModelConfig {
            detector: DetectorMode::Trained,
            detector_hidden: 128,
            capacity: 64,
            confidence_threshold: 0.01,
            dim: m.dim,
            heads: m.heads,
            layers: m.layers,
            bands: 10,
            sinkhorn_iters: m.sinkhorn_iters,
            diag_mode: m.diag_mode,
            score_mode: m.score_mode,
            dustbin_init: m.dustbin_init,
            use_pe: true,
            use_dt: true,
        }
    }
}

impl ModelConfig {
    pub fn matcher(&self) -> MatcherConfig {
        MatcherConfig {
            dim: self.dim,
            heads: self.heads,
            layers: self.layers,
            sinkhorn_iters: self.sinkhorn_iters,
            diag_mode: self.diag_mode,
            score_mode: self.score_mode,
            dustbin_init: self.dustbin_init,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub weights: LossWeights,
    /// Pairing distance threshold, pixels.
    pub match_threshold: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            weights: LossWeights::default(),
            match_threshold: 4.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning rate reached at the last step under cosine decay; equal to
    /// `lr` for a constant rate.
    pub lr_final: f64,
    /// Rescale the global gradient to at most this norm; 0 disables.
    pub grad_clip: f64,
    /// Validation cadence in steps; 0 disables periodic validation.
    pub eval_every: usize,
    /// Redraw feature noise on every visit to a training scene.
    pub resample_noise: bool,
    /// Mirror training scenes along random grid axes on each visit.
    pub flip_augment: bool,
    pub dataset: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 3000,
            batch_size: 1,
            lr: 1e-3,
            lr_final: 1e-5,
            grad_clip: 0.0,
            eval_every: 0,
            resample_noise: true,
            flip_augment: false,
            dataset: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub adjacency_threshold: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            adjacency_threshold: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub seed: u64,
    pub bev: BevConfig,
    pub generator: GenParams,
    pub features: FeatureConfig,
    pub oracle: OracleConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            version: CONFIG_VERSION,
            seed: 0,
            bev: BevConfig::desk_scale(),
            generator: GenParams::desk_scale(),
            features: FeatureConfig::default(),
            oracle: OracleConfig::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            decode: DecodeConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Named switches accepted on the command line.
pub const ABLATIONS: [&str; 6] = ["no-pe", "no-dt", "diag-zero", "cosine", "oracle", "no-graph-loss"];

impl RunConfig {
    /// The 200×400 grid with 400 vertex slots.
    pub fn full_scale() -> Self {
        let mut cfg = RunConfig {
            bev: BevConfig::full_scale(),
            generator: GenParams::default(),
            ..RunConfig::default()
        };
        cfg.model.capacity = 400;
        cfg
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_owned()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn apply_ablation(&mut self, name: &str) -> Result<()> {
        match name {
            "no-pe" => self.model.use_pe = false,
            "no-dt" => self.model.use_dt = false,
            "diag-zero" => self.model.diag_mode = DiagMode::Zero,
            "cosine" => self.model.score_mode = ScoreMode::Cosine,
            "oracle" => self.model.detector = DetectorMode::Oracle,
            "no-graph-loss" => {
                self.loss.weights.adjacency = 0.0;
                self.loss.weights.class = 0.0;
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown ablation `{other}` (expected one of {})",
                    ABLATIONS.join(", ")
                )))
            }
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.version != CONFIG_VERSION {
            return bad(format!("unsupported config version {} (expected {CONFIG_VERSION})", self.version));
        }
        self.bev.validate()?;
        self.generator.validate(&self.bev)?;
        self.model.matcher().validate()?;
        self.loss.weights.validate()?;
        let m = &self.model;
        if m.capacity == 0 || m.bands == 0 || m.detector_hidden == 0 {
            return bad("capacity, bands and detector_hidden must be positive".into());
        }
        if !m.use_pe && !m.use_dt {
            return bad("at least one of use_pe and use_dt must stay enabled".into());
        }
        if !(0.0..1.0).contains(&m.confidence_threshold) {
            return bad(format!("confidence_threshold {} outside [0, 1)", m.confidence_threshold));
        }
        if self.features.channels < 3 || !(self.features.noise >= 0.0) {
            return bad("features need at least 3 channels and non-negative noise".into());
        }
        if !(0.0..=1.0).contains(&self.oracle.flip_prob) || !(self.oracle.dt_noise >= 0.0) {
            return bad("oracle flip_prob must be in [0, 1] and dt_noise non-negative".into());
        }
        if !(self.loss.match_threshold > 0.0) {
            return bad("loss.match_threshold must be positive".into());
        }
        let t = &self.train;
        if t.batch_size == 0 || !(t.lr > 0.0 && t.lr.is_finite()) {
            return bad("train.batch_size and train.lr must be positive".into());
        }
        if !(t.grad_clip >= 0.0) {
            return bad("train.grad_clip must be non-negative".into());
        }
        if !(t.lr_final > 0.0 && t.lr_final <= t.lr) {
            return bad("train.lr_final must be positive and at most train.lr".into());
        }
        let tau = self.decode.adjacency_threshold;
        if !(tau > 0.0 && tau < 1.0) {
            return bad(format!("decode.adjacency_threshold {tau} outside (0, 1)"));
        }
        if self.eval.thresholds.is_empty() || self.eval.thresholds.iter().any(|t| !(*t > 0.0)) || !(self.eval.spacing > 0.0) {
            return bad("eval thresholds and spacing must be positive".into());
        }
        Ok(())
    }
}
