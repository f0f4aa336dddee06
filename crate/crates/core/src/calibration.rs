//! Confidence calibration: temperature scaling, epistemic spread over
//! stochastic passes, and expected calibration error.

use alloc::collections::BTreeSet;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{exp, ln, log_sum_exp};

/// Probability vectors from repeated stochastic forward passes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct StochasticScores {
    passes: Vec<Vec<f64>>,
}

impl TryFrom<Vec<Vec<f64>>> for StochasticScores {
    type Error = Error;

    fn try_from(passes: Vec<Vec<f64>>) -> Result<Self> {
        StochasticScores::new(passes)
    }
}

impl From<StochasticScores> for Vec<Vec<f64>> {
    fn from(s: StochasticScores) -> Self {
        s.passes
    }
}

impl StochasticScores {
    /// Every pass must be a probability vector over the same classes.
    pub fn new(passes: Vec<Vec<f64>>) -> Result<Self> {
        if passes.is_empty() {
            return Err(Error::InsufficientData("at least one pass is required".into()));
        }
        let k = passes[0].len();
        for p in &passes {
            if p.len() != k || k == 0 {
                return Err(Error::InvalidConfig("passes must share a non-empty class set".into()));
            }
            if p.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::OutOfRange {
                    name: "probability",
                    value: p.iter().copied().find(|v| !(0.0..=1.0).contains(v)).unwrap_or(f64::NAN),
                    expected: "[0, 1]",
                });
            }
            let sum: f64 = p.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::WeightsNotNormalized {
                    name: "pass probabilities",
                    sum,
                });
            }
        }
        Ok(Self { passes })
    }

    pub fn passes(&self) -> &[Vec<f64>] {
        &self.passes
    }
}

/// Mean over classes of the population variance across passes. A single
/// pass gives 0.
pub fn epistemic(scores: &StochasticScores) -> f64 {
    let t = scores.passes.len() as f64;
    let k = scores.passes[0].len();
    let mut total = 0.0;
    for class in 0..k {
        let mean = scores.passes.iter().map(|p| p[class]).sum::<f64>() / t;
        total += scores.passes.iter().map(|p| (p[class] - mean) * (p[class] - mean)).sum::<f64>() / t;
    }
    total / k as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct CalibrationModel {
    temperature: f64,
}

impl TryFrom<f64> for CalibrationModel {
    type Error = Error;

    fn try_from(t: f64) -> Result<Self> {
        CalibrationModel::new(t)
    }
}

impl From<CalibrationModel> for f64 {
    fn from(m: CalibrationModel) -> f64 {
        m.temperature
    }
}

impl Default for CalibrationModel {
    fn default() -> Self {
        Self { temperature: 1.0 }
    }
}

impl CalibrationModel {
    pub fn new(temperature: f64) -> Result<Self> {
        if !(temperature.is_finite() && temperature > 0.0) {
            return Err(Error::OutOfRange {
                name: "temperature",
                value: temperature,
                expected: "> 0",
            });
        }
        Ok(Self { temperature })
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }
}

/// `softmax(logits / T)`.
pub fn temperature_scale(logits: &[f64], model: &CalibrationModel) -> Result<Vec<f64>> {
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFinite("logits"));
    }
    if logits.is_empty() {
        return Ok(Vec::new());
    }
    let t = model.temperature;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|l| exp((l - max) / t)).collect();
    let sum: f64 = weights.iter().sum();
    Ok(weights.into_iter().map(|w| w / sum).collect())
}

/// Labeled logit vector used for temperature fitting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledLogits {
    pub logits: Vec<f64>,
    pub label: usize,
}

fn mean_nll(samples: &[LabeledLogits], log_t: f64) -> f64 {
    let inv_t = exp(-log_t);
    let total: f64 = samples
        .iter()
        .map(|s| log_sum_exp(s.logits.iter().map(|l| l * inv_t)) - s.logits[s.label] * inv_t)
        .sum();
    total / samples.len() as f64
}

const LOG_T_RANGE: (f64, f64) = (-4.0, 4.0);
const GOLDEN_TOLERANCE: f64 = 1e-6;

/// Temperature minimizing the mean negative log-likelihood, found by
/// golden-section search on `log T` over `[-4, 4]`.
pub fn fit_temperature(samples: &[LabeledLogits]) -> Result<CalibrationModel> {
    if samples.len() < 2 {
        return Err(Error::InsufficientData("temperature fitting needs at least two samples".into()));
    }
    for s in samples {
        if s.label >= s.logits.len() {
            return Err(Error::InvalidConfig("label outside the logit vector".into()));
        }
        if s.logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::NonFinite("logits"));
        }
    }
    let labels: BTreeSet<usize> = samples.iter().map(|s| s.label).collect();
    if labels.len() < 2 {
        return Err(Error::InsufficientData("temperature fitting needs at least two distinct labels".into()));
    }

    let inv_phi = (crate::math::sqrt(5.0) - 1.0) / 2.0;
    let (mut a, mut b) = LOG_T_RANGE;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = mean_nll(samples, c);
    let mut fd = mean_nll(samples, d);
    while b - a > GOLDEN_TOLERANCE {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = mean_nll(samples, c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = mean_nll(samples, d);
        }
    }
    CalibrationModel::new(exp((a + b) / 2.0))
}

/// Negative log-likelihood of the samples at the model's temperature.
pub fn negative_log_likelihood(samples: &[LabeledLogits], model: &CalibrationModel) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    mean_nll(samples, ln(model.temperature))
}

/// Expected calibration error over `bins` equal-width bins. Bins are
/// half-open `[lo, hi)` except the last, which includes 1.
pub fn expected_calibration_error(predictions: &[(f64, bool)], bins: usize) -> Result<f64> {
    if bins == 0 {
        return Err(Error::InvalidConfig("bin count must be at least 1".into()));
    }
    if let Some((c, _)) = predictions.iter().find(|(c, _)| !(0.0..=1.0).contains(c)) {
        return Err(Error::OutOfRange {
            name: "confidence",
            value: *c,
            expected: "[0, 1]",
        });
    }
    if predictions.is_empty() {
        return Ok(0.0);
    }
    let mut count = alloc::vec![0usize; bins];
    let mut conf = alloc::vec![0.0; bins];
    let mut correct = alloc::vec![0usize; bins];
    for &(c, ok) in predictions {
        let i = ((c * bins as f64) as usize).min(bins - 1);
        count[i] += 1;
        conf[i] += c;
        correct[i] += usize::from(ok);
    }
    let n = predictions.len() as f64;
    let ece = (0..bins)
        .filter(|&i| count[i] > 0)
        .map(|i| {
            let m = count[i] as f64;
            (m / n) * (correct[i] as f64 / m - conf[i] / m).abs()
        })
        .sum();
    Ok(ece)
}
