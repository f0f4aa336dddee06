//! Run configuration, read from TOML. Every key has a default, so an empty
//! file is a valid configuration.

use std::path::{Path, PathBuf};

use cascadet_core::cascade::{AcceptanceScore, ScaleSet, Stage2Config};
use cascadet_core::grpo::TrainSchedule;
use cascadet_core::quality::{AdverseSource, QualityWeights, ThresholdController, ThresholdMode, ThresholdPolicy};
use cascadet_core::rewards::{FnPenalty, RewardWeights};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{read_to_string, Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Replay,
    Http,
    /// Answers from ground truth; for evaluating the threshold stage alone.
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSection {
    pub kind: BackendKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detector_fixture: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub verifier_fixture: Option<PathBuf>,
    pub endpoint: String,
    /// Name of the environment variable holding the bearer token.
    pub token_env: String,
    pub timeout_ms: u64,
    pub max_attempts: u32,
    pub backoff_ms: u64,
    pub backoff_factor: f64,
    pub max_in_flight: usize,
}

impl Default for BackendSection {
    fn default() -> Self {
        Self {
            kind: BackendKind::Replay,
            detector_fixture: None,
            verifier_fixture: None,
            endpoint: "http://127.0.0.1:8080".into(),
            token_env: "CASCADET_API_TOKEN".into(),
            timeout_ms: 5000,
            max_attempts: 3,
            backoff_ms: 100,
            backoff_factor: 2.0,
            max_in_flight: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThresholdSection {
    pub tau_low: f64,
    pub tau_high: f64,
    pub q_min: f64,
    pub q_max: f64,
    pub mode: ThresholdMode,
    pub quality_weights: [f64; 3],
    pub adverse_source: AdverseSource,
}

impl Default for ThresholdSection {
    fn default() -> Self {
        let p = ThresholdPolicy::default();
        Self {
            tau_low: p.tau_low(),
            tau_high: p.tau_high(),
            q_min: p.q_min(),
            q_max: p.q_max(),
            mode: p.mode(),
            quality_weights: QualityWeights::default().as_array(),
            adverse_source: AdverseSource::default(),
        }
    }
}

impl ThresholdSection {
    pub fn controller(&self) -> Result<ThresholdController> {
        let [a1, a2, a3] = self.quality_weights;
        if let AdverseSource::QualityBelow { cutoff } = self.adverse_source {
            if !(0.0..=1.0).contains(&cutoff) {
                return Err(Error::Config(format!("adverse_source cutoff {cutoff} outside [0, 1]")));
            }
        }
        Ok(ThresholdController {
            policy: ThresholdPolicy::new(self.tau_low, self.tau_high, self.q_min, self.q_max, self.mode)?,
            weights: QualityWeights::new(a1, a2, a3)?,
            adverse_source: self.adverse_source,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySection {
    pub tau_conf: f64,
    pub rho: f64,
    pub scales: Vec<f64>,
    pub scale_weights: Vec<f64>,
    pub acceptance: AcceptanceScore,
}

impl Default for VerifySection {
    fn default() -> Self {
        let d = Stage2Config::default();
        Self {
            tau_conf: d.tau_conf,
            rho: d.rho,
            scales: d.scales.scales().to_vec(),
            scale_weights: d.scales.weights().to_vec(),
            acceptance: d.acceptance,
        }
    }
}

impl VerifySection {
    pub fn stage2(&self) -> Result<Stage2Config> {
        let cfg = Stage2Config {
            tau_conf: self.tau_conf,
            rho: self.rho,
            scales: ScaleSet::new(self.scales.clone(), self.scale_weights.clone())?,
            acceptance: self.acceptance,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardSection {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda_fn: f64,
    pub tau_match: f64,
    pub fn_penalty: FnPenalty,
}

impl Default for RewardSection {
    fn default() -> Self {
        let w = RewardWeights::default();
        Self {
            alpha: w.alpha(),
            beta: w.beta(),
            gamma: w.gamma(),
            lambda_fn: w.lambda_fn(),
            tau_match: w.tau_match(),
            fn_penalty: w.fn_penalty(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub group_size: usize,
    pub clip_norm: f64,
    pub weight_decay: f64,
    pub dropout_p_max: f64,
    pub dropout_decay: f64,
    pub curriculum_eta: f64,
    pub curriculum_tau_progress: f64,
    pub initial_difficulty: f64,
    pub steps: u64,
    /// Size of the generated training task.
    pub inputs: usize,
    /// Size of the held-out task used for the final evaluation.
    pub heldout: usize,
    /// Seed of the generated tasks; the run seed drives sampling.
    pub task_seed: u64,
    pub warm_start_epochs: usize,
    pub warm_start_lr: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let s = TrainSchedule::default();
        Self {
            learning_rate: s.learning_rate,
            group_size: s.group_size,
            clip_norm: s.clip_norm,
            weight_decay: s.weight_decay,
            dropout_p_max: s.dropout_p_max,
            dropout_decay: s.dropout_decay,
            curriculum_eta: s.curriculum_eta,
            curriculum_tau_progress: s.curriculum_tau_progress,
            initial_difficulty: s.initial_difficulty,
            steps: s.steps,
            inputs: 64,
            heldout: 32,
            task_seed: 11,
            warm_start_epochs: 0,
            warm_start_lr: 0.5,
        }
    }
}

impl TrainSection {
    pub fn schedule(&self) -> Result<TrainSchedule> {
        let s = TrainSchedule {
            learning_rate: self.learning_rate,
            group_size: self.group_size,
            clip_norm: self.clip_norm,
            weight_decay: self.weight_decay,
            dropout_p_max: self.dropout_p_max,
            dropout_decay: self.dropout_decay,
            curriculum_eta: self.curriculum_eta,
            curriculum_tau_progress: self.curriculum_tau_progress,
            initial_difficulty: self.initial_difficulty,
            steps: self.steps,
        };
        s.validate()?;
        if self.inputs == 0 || self.heldout == 0 {
            return Err(Error::Config("train.inputs and train.heldout must be positive".into()));
        }
        if !(self.warm_start_lr > 0.0 && self.warm_start_lr.is_finite()) {
            return Err(Error::Config("train.warm_start_lr must be positive".into()));
        }
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub workers: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Object class named in the prompts.
    pub class_name: String,
    /// Overlap needed for a final detection to count as a true positive.
    pub tau_iou: f64,
    pub backend: BackendSection,
    pub threshold: ThresholdSection,
    pub verify: VerifySection,
    pub rewards: RewardSection,
    pub train: TrainSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: 1,
            dataset: None,
            out: None,
            class_name: "polyp".into(),
            tau_iou: 0.3,
            backend: BackendSection::default(),
            threshold: ThresholdSection::default(),
            verify: VerifySection::default(),
            rewards: RewardSection::default(),
            train: TrainSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file and resolves relative paths inside it against
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_toml(&read_to_string(path)?).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut Option<PathBuf>| {
            if let Some(p) = p {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        };
        resolve(&mut cfg.dataset);
        resolve(&mut cfg.out);
        resolve(&mut cfg.backend.detector_fixture);
        resolve(&mut cfg.backend.verifier_fixture);
        Ok(cfg)
    }

    pub fn controller(&self) -> Result<ThresholdController> {
        self.threshold.controller()
    }

    pub fn stage2(&self) -> Result<Stage2Config> {
        self.verify.stage2()
    }

    pub fn reward_weights(&self) -> Result<RewardWeights> {
        let r = &self.rewards;
        Ok(RewardWeights::new(
            r.alpha,
            r.beta,
            r.gamma,
            r.lambda_fn,
            r.tau_match,
            self.tau_iou,
            r.fn_penalty,
        )?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        if self.seed > i64::MAX as u64 {
            return Err(Error::Config("seed must fit in a signed 64-bit integer".into()));
        }
        if !(self.tau_iou > 0.0 && self.tau_iou <= 1.0) {
            return Err(Error::Config(format!("tau_iou {} outside (0, 1]", self.tau_iou)));
        }
        if self.class_name.trim().is_empty() {
            return Err(Error::Config("class_name is empty".into()));
        }
        let b = &self.backend;
        if b.max_in_flight == 0 {
            return Err(Error::Config("backend.max_in_flight must be at least 1".into()));
        }
        if b.max_attempts == 0 {
            return Err(Error::Config("backend.max_attempts must be at least 1".into()));
        }
        if b.timeout_ms == 0 {
            return Err(Error::Config("backend.timeout_ms must be positive".into()));
        }
        if !(b.backoff_factor >= 1.0 && b.backoff_factor.is_finite()) {
            return Err(Error::Config("backend.backoff_factor must be >= 1".into()));
        }
        self.controller()?;
        self.stage2()?;
        self.reward_weights()?;
        self.train.schedule()?;
        Ok(())
    }

    /// SHA-256 over the canonical TOML form with everything that must not
    /// affect results cleared: worker count and file locations. Input file
    /// contents are hashed separately in the provenance record.
    pub fn config_hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.workers = 1;
        c.dataset = None;
        c.out = None;
        c.backend.detector_fixture = None;
        c.backend.verifier_fixture = None;
        Ok(sha256_hex(c.to_toml()?.as_bytes()))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
