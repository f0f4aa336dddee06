//! Image quality scoring and confidence threshold selection.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const WEIGHT_TOLERANCE: f64 = 1e-9;

fn unit_interval(name: &'static str, value: f64) -> Result<f64> {
    if !value.is_finite() || !(0.0..=1.0).contains(&value) {
        return Err(Error::OutOfRange {
            name,
            value,
            expected: "[0, 1]",
        });
    }
    Ok(value)
}

/// Per-frame quality factor scores, each in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "FactorsRepr", into = "FactorsRepr")]
pub struct QualityFactors {
    illumination: f64,
    clarity: f64,
    artifacts: f64,
}

#[derive(Serialize, Deserialize)]
struct FactorsRepr {
    illumination: f64,
    clarity: f64,
    artifacts: f64,
}

impl TryFrom<FactorsRepr> for QualityFactors {
    type Error = Error;

    fn try_from(r: FactorsRepr) -> Result<Self> {
        QualityFactors::new(r.illumination, r.clarity, r.artifacts)
    }
}

impl From<QualityFactors> for FactorsRepr {
    fn from(q: QualityFactors) -> Self {
        Self {
            illumination: q.illumination,
            clarity: q.clarity,
            artifacts: q.artifacts,
        }
    }
}

impl QualityFactors {
    /// `artifacts` is 1 for an artifact-free frame.
    pub fn new(illumination: f64, clarity: f64, artifacts: f64) -> Result<Self> {
        Ok(Self {
            illumination: unit_interval("illumination", illumination)?,
            clarity: unit_interval("clarity", clarity)?,
            artifacts: unit_interval("artifacts", artifacts)?,
        })
    }

    pub fn illumination(&self) -> f64 {
        self.illumination
    }

    pub fn clarity(&self) -> f64 {
        self.clarity
    }

    pub fn artifacts(&self) -> f64 {
        self.artifacts
    }
}

/// Convex weights over the three quality factors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 3]", into = "[f64; 3]")]
pub struct QualityWeights([f64; 3]);

impl TryFrom<[f64; 3]> for QualityWeights {
    type Error = Error;

    fn try_from(w: [f64; 3]) -> Result<Self> {
        QualityWeights::new(w[0], w[1], w[2])
    }
}

impl From<QualityWeights> for [f64; 3] {
    fn from(w: QualityWeights) -> Self {
        w.0
    }
}

impl Default for QualityWeights {
    fn default() -> Self {
        Self([1.0 / 3.0; 3])
    }
}

impl QualityWeights {
    pub fn new(alpha1: f64, alpha2: f64, alpha3: f64) -> Result<Self> {
        for (name, a) in [("alpha1", alpha1), ("alpha2", alpha2), ("alpha3", alpha3)] {
            if !a.is_finite() || a < 0.0 {
                return Err(Error::OutOfRange {
                    name,
                    value: a,
                    expected: "a nonnegative weight",
                });
            }
        }
        let sum = alpha1 + alpha2 + alpha3;
        if (sum - 1.0).abs() > WEIGHT_TOLERANCE {
            return Err(Error::WeightsNotNormalized {
                name: "quality weights",
                sum,
            });
        }
        Ok(Self([alpha1, alpha2, alpha3]))
    }

    pub fn as_array(&self) -> [f64; 3] {
        self.0
    }
}

/// Weighted quality score `Q` in `[0, 1]`.
pub fn quality_score(f: &QualityFactors, w: &QualityWeights) -> f64 {
    let [a1, a2, a3] = w.0;
    (a1 * f.illumination + a2 * f.clarity + a3 * f.artifacts).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    /// Pick `tau_low` or `tau_high` from an adverse/clean decision.
    #[default]
    Binary,
    /// Linear in the quality score between `q_min` and `q_max`.
    Interpolated,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PolicyRepr", into = "PolicyRepr")]
pub struct ThresholdPolicy {
    tau_low: f64,
    tau_high: f64,
    q_min: f64,
    q_max: f64,
    mode: ThresholdMode,
}

#[derive(Serialize, Deserialize)]
struct PolicyRepr {
    tau_low: f64,
    tau_high: f64,
    q_min: f64,
    q_max: f64,
    mode: ThresholdMode,
}

impl TryFrom<PolicyRepr> for ThresholdPolicy {
    type Error = Error;

    fn try_from(r: PolicyRepr) -> Result<Self> {
        ThresholdPolicy::new(r.tau_low, r.tau_high, r.q_min, r.q_max, r.mode)
    }
}

impl From<ThresholdPolicy> for PolicyRepr {
    fn from(p: ThresholdPolicy) -> Self {
        Self {
            tau_low: p.tau_low,
            tau_high: p.tau_high,
            q_min: p.q_min,
            q_max: p.q_max,
            mode: p.mode,
        }
    }
}

impl Default for ThresholdPolicy {
    fn default() -> Self {
        Self {
            tau_low: 0.2,
            tau_high: 0.5,
            q_min: 0.0,
            q_max: 1.0,
            mode: ThresholdMode::Binary,
        }
    }
}

impl ThresholdPolicy {
    pub fn new(tau_low: f64, tau_high: f64, q_min: f64, q_max: f64, mode: ThresholdMode) -> Result<Self> {
        if !(tau_low.is_finite() && tau_high.is_finite()) || !(0.0 < tau_low && tau_low < tau_high && tau_high <= 1.0) {
            return Err(Error::InvalidConfig(alloc::format!(
                "thresholds must satisfy 0 < tau_low < tau_high <= 1, got {tau_low} and {tau_high}"
            )));
        }
        if !(q_min.is_finite() && q_max.is_finite()) || q_min >= q_max {
            return Err(Error::InvalidConfig(alloc::format!(
                "quality bounds must satisfy q_min < q_max, got {q_min} and {q_max}"
            )));
        }
        Ok(Self {
            tau_low,
            tau_high,
            q_min,
            q_max,
            mode,
        })
    }

    pub fn tau_low(&self) -> f64 {
        self.tau_low
    }

    pub fn tau_high(&self) -> f64 {
        self.tau_high
    }

    pub fn q_min(&self) -> f64 {
        self.q_min
    }

    pub fn q_max(&self) -> f64 {
        self.q_max
    }

    pub fn mode(&self) -> ThresholdMode {
        self.mode
    }

    pub fn with_mode(mut self, mode: ThresholdMode) -> Self {
        self.mode = mode;
        self
    }
}

pub fn select_threshold_binary(adverse: bool, p: &ThresholdPolicy) -> f64 {
    if adverse {
        p.tau_low
    } else {
        p.tau_high
    }
}

/// Threshold for quality `q`; `q` is clamped to `[q_min, q_max]` first.
pub fn select_threshold_interpolated(q: f64, p: &ThresholdPolicy) -> f64 {
    let q = if q.is_nan() { p.q_min } else { q.clamp(p.q_min, p.q_max) };
    if q >= p.q_max {
        return p.tau_high;
    }
    let tau = p.tau_low + (q - p.q_min) * (p.tau_high - p.tau_low) / (p.q_max - p.q_min);
    tau.clamp(p.tau_low, p.tau_high)
}

/// Where the adverse/clean decision comes from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AdverseSource {
    /// Boolean returned by the verifier's global assessment.
    Backend,
    /// The condition label stored with the frame.
    Metadata,
    /// Adverse iff the quality score falls below `cutoff`.
    QualityBelow { cutoff: f64 },
}

impl Default for AdverseSource {
    fn default() -> Self {
        AdverseSource::QualityBelow { cutoff: 0.5 }
    }
}

/// Inputs available when choosing a frame's threshold.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct QualitySignals {
    pub backend_adverse: Option<bool>,
    pub metadata_adverse: Option<bool>,
    pub quality: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ThresholdController {
    pub policy: ThresholdPolicy,
    pub weights: QualityWeights,
    pub adverse_source: AdverseSource,
}

impl ThresholdController {
    /// Resolves the adverse flag, falling back through the other sources
    /// when the configured one is absent. With no signal at all the frame
    /// is treated as clean.
    pub fn is_adverse(&self, s: &QualitySignals) -> bool {
        let from_quality = |cutoff: f64| s.quality.map(|q| q < cutoff);
        let preferred = match self.adverse_source {
            AdverseSource::Backend => s.backend_adverse,
            AdverseSource::Metadata => s.metadata_adverse,
            AdverseSource::QualityBelow { cutoff } => from_quality(cutoff),
        };
        preferred
            .or(s.backend_adverse)
            .or(s.metadata_adverse)
            .or_else(|| from_quality(0.5))
            .unwrap_or(false)
    }

    /// Threshold for a frame. Interpolated mode needs a quality score and
    /// falls back to the binary rule without one.
    pub fn threshold(&self, s: &QualitySignals) -> f64 {
        match (self.policy.mode, s.quality) {
            (ThresholdMode::Interpolated, Some(q)) => select_threshold_interpolated(q, &self.policy),
            _ => select_threshold_binary(self.is_adverse(s), &self.policy),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn score_examples() {
        let w = QualityWeights::default();
        assert_abs_diff_eq!(quality_score(&QualityFactors::new(1.0, 1.0, 1.0).unwrap(), &w), 1.0, epsilon = 1e-12);
        assert_eq!(quality_score(&QualityFactors::new(0.0, 0.0, 0.0).unwrap(), &w), 0.0);
        let w = QualityWeights::new(0.5, 0.3, 0.2).unwrap();
        let q = quality_score(&QualityFactors::new(0.5, 0.8, 0.2).unwrap(), &w);
        assert_abs_diff_eq!(q, 0.25 + 0.24 + 0.04, epsilon = 1e-12);
        assert_abs_diff_eq!(q, 0.53, epsilon = 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(QualityWeights::new(0.5, 0.5, 0.1), Err(Error::WeightsNotNormalized { .. })));
        assert!(QualityWeights::new(1.2, -0.2, 0.0).is_err());
        assert!(QualityFactors::new(1.1, 0.0, 0.0).is_err());
        assert!(ThresholdPolicy::new(0.4, 0.4, 0.0, 1.0, ThresholdMode::Binary).is_err());
        assert!(ThresholdPolicy::new(0.0, 0.4, 0.0, 1.0, ThresholdMode::Binary).is_err());
        assert!(ThresholdPolicy::new(0.2, 0.5, 1.0, 1.0, ThresholdMode::Binary).is_err());
        let bad: core::result::Result<QualityWeights, _> = serde_json::from_str("[0.5, 0.5, 0.5]");
        assert!(bad.is_err());
    }

    #[test]
    fn threshold_examples() {
        let p = ThresholdPolicy::default();
        assert_eq!(select_threshold_binary(true, &p), 0.2);
        assert_eq!(select_threshold_binary(false, &p), 0.5);
        assert_eq!(select_threshold_interpolated(0.0, &p), 0.2);
        assert_eq!(select_threshold_interpolated(1.0, &p), 0.5);
        assert_abs_diff_eq!(select_threshold_interpolated(0.5, &p), 0.35, epsilon = 1e-12);
        assert_eq!(select_threshold_interpolated(-3.0, &p), 0.2);
        assert_eq!(select_threshold_interpolated(7.0, &p), 0.5);
    }

    #[test]
    fn controller_sources() {
        let mut c = ThresholdController::default();
        let s = QualitySignals {
            backend_adverse: Some(false),
            metadata_adverse: Some(true),
            quality: Some(0.3),
        };
        assert!(c.is_adverse(&s));
        c.adverse_source = AdverseSource::Backend;
        assert!(!c.is_adverse(&s));
        c.adverse_source = AdverseSource::Metadata;
        assert_eq!(c.threshold(&s), 0.2);
        c.policy = c.policy.with_mode(ThresholdMode::Interpolated);
        assert_abs_diff_eq!(c.threshold(&s), 0.29, epsilon = 1e-12);
        assert!(!c.is_adverse(&QualitySignals::default()));
    }

    proptest! {
        #[test]
        fn interpolation_monotone_and_bounded(a in -1.0f64..2.0, b in -1.0f64..2.0, lo in 0.01f64..0.5, gap in 0.01f64..0.49) {
            let p = ThresholdPolicy::new(lo, lo + gap, 0.0, 1.0, ThresholdMode::Interpolated).unwrap();
            let (a, b) = (a.min(b), a.max(b));
            let (ta, tb) = (select_threshold_interpolated(a, &p), select_threshold_interpolated(b, &p));
            prop_assert!(ta <= tb);
            prop_assert!(p.tau_low() <= ta && tb <= p.tau_high());
            if a <= p.q_min() {
                prop_assert_eq!(ta, select_threshold_binary(true, &p));
            }
        }

        #[test]
        fn score_in_unit_interval(f in proptest::array::uniform3(0.0f64..=1.0), w in proptest::array::uniform3(0.0f64..1.0)) {
            let s: f64 = w.iter().sum();
            prop_assume!(s > 1e-6);
            let w = QualityWeights::new(w[0] / s, w[1] / s, 1.0 - w[0] / s - w[1] / s);
            prop_assume!(w.is_ok());
            let q = quality_score(&QualityFactors::new(f[0], f[1], f[2]).unwrap(), &w.unwrap());
            prop_assert!((0.0..=1.0).contains(&q));
        }
    }
}
