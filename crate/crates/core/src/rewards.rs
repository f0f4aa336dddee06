//! Cost-sensitive detection reward: localization, confidence with a
//! missed-detection penalty, and format compliance.

use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{denormalize_from_grid, greedy_match, BoundingBox, Candidate};
use crate::protocol::{parse_detection, FormatReport};

/// How unmatched ground truths are turned into a penalty.
///
/// `Count` is the default: every extra miss lowers `r_conf` by `λ_FN`, and
/// one miss outweighs one false positive for any ground-truth count. The
/// fractional form saturates once every ground truth is missed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FnPenalty {
    /// Missed ground truths divided by the ground-truth count.
    Fractional,
    /// Raw number of missed ground truths.
    #[default]
    Count,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "WeightsRepr", into = "WeightsRepr")]
pub struct RewardWeights {
    alpha: f64,
    beta: f64,
    gamma: f64,
    lambda_fn: f64,
    tau_match: f64,
    tau_iou: f64,
    fn_penalty: FnPenalty,
}

#[derive(Serialize, Deserialize)]
struct WeightsRepr {
    alpha: f64,
    beta: f64,
    gamma: f64,
    lambda_fn: f64,
    tau_match: f64,
    tau_iou: f64,
    #[serde(default)]
    fn_penalty: FnPenalty,
}

impl TryFrom<WeightsRepr> for RewardWeights {
    type Error = Error;

    fn try_from(r: WeightsRepr) -> Result<Self> {
        RewardWeights::new(r.alpha, r.beta, r.gamma, r.lambda_fn, r.tau_match, r.tau_iou, r.fn_penalty)
    }
}

impl From<RewardWeights> for WeightsRepr {
    fn from(w: RewardWeights) -> Self {
        Self {
            alpha: w.alpha,
            beta: w.beta,
            gamma: w.gamma,
            lambda_fn: w.lambda_fn,
            tau_match: w.tau_match,
            tau_iou: w.tau_iou,
            fn_penalty: w.fn_penalty,
        }
    }
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            alpha: 0.6,
            beta: 0.3,
            gamma: 0.1,
            lambda_fn: 2.0,
            tau_match: 0.3,
            tau_iou: 0.3,
            fn_penalty: FnPenalty::Count,
        }
    }
}

impl RewardWeights {
    pub fn new(
        alpha: f64,
        beta: f64,
        gamma: f64,
        lambda_fn: f64,
        tau_match: f64,
        tau_iou: f64,
        fn_penalty: FnPenalty,
    ) -> Result<Self> {
        for (name, v) in [("alpha", alpha), ("beta", beta), ("gamma", gamma), ("lambda_fn", lambda_fn)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::OutOfRange {
                    name,
                    value: v,
                    expected: ">= 0",
                });
            }
        }
        let sum = alpha + beta + gamma;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::WeightsNotNormalized {
                name: "reward weights",
                sum,
            });
        }
        for (name, v) in [("tau_match", tau_match), ("tau_iou", tau_iou)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::OutOfRange {
                    name,
                    value: v,
                    expected: "(0, 1]",
                });
            }
        }
        Ok(Self {
            alpha,
            beta,
            gamma,
            lambda_fn,
            tau_match,
            tau_iou,
            fn_penalty,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn lambda_fn(&self) -> f64 {
        self.lambda_fn
    }

    pub fn tau_match(&self) -> f64 {
        self.tau_match
    }

    pub fn tau_iou(&self) -> f64 {
        self.tau_iou
    }

    pub fn fn_penalty(&self) -> FnPenalty {
        self.fn_penalty
    }

    /// Same weights with a different missed-detection multiplier.
    pub fn with_lambda_fn(mut self, lambda_fn: f64) -> Result<Self> {
        self.lambda_fn = lambda_fn;
        Self::try_from(WeightsRepr::from(self))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_iou: f64,
    pub r_conf: f64,
    pub r_format: f64,
    pub r_total: f64,
    pub matches: usize,
    pub predictions: usize,
    pub false_negatives: usize,
}

/// Mean IoU over greedy pairs at `tau_match`, with the pair count. Zero
/// when nothing matches.
pub fn reward_iou(predictions: &[Candidate], ground_truths: &[BoundingBox], tau_match: f64) -> (f64, usize) {
    let m = greedy_match(predictions, ground_truths, tau_match);
    if m.pairs.is_empty() {
        return (0.0, 0);
    }
    let sum: f64 = m.pairs.iter().map(|p| p.iou).sum();
    (sum / m.pairs.len() as f64, m.pairs.len())
}

/// Confidence reward and the number of missed ground truths.
///
/// A prediction counts as correct when its greedy partner has IoU strictly
/// above `tau_iou`; it then earns its confidence, otherwise the complement.
/// Ground truths without such a partner are missed.
pub fn reward_conf(
    predictions: &[Candidate],
    ground_truths: &[BoundingBox],
    tau_iou: f64,
    lambda_fn: f64,
    mode: FnPenalty,
) -> (f64, usize) {
    let m = greedy_match(predictions, ground_truths, tau_iou);
    let assignment = m.prediction_assignment(predictions.len());
    let mut hit = alloc::vec![false; ground_truths.len()];
    let mut sum = 0.0;
    for (p, pair) in predictions.iter().zip(&assignment) {
        let c = p.confidence();
        match pair {
            Some(pair) if pair.iou > tau_iou => {
                hit[pair.ground_truth] = true;
                sum += c;
            }
            _ => sum += 1.0 - c,
        }
    }
    let missed = hit.iter().filter(|h| !**h).count();
    let penalty = match (mode, ground_truths.len()) {
        (_, 0) => 0.0,
        (FnPenalty::Fractional, g) => missed as f64 / g as f64,
        (FnPenalty::Count, _) => missed as f64,
    };
    let mean = if predictions.is_empty() {
        0.0
    } else {
        sum / predictions.len() as f64
    };
    (mean - lambda_fn * penalty, missed)
}

/// 1 when every format check passed, else 0.
pub fn reward_format(raw_response: &str) -> f64 {
    format_reward(&parse_detection(raw_response).report)
}

fn format_reward(report: &FormatReport) -> f64 {
    if report.all_passed() {
        1.0
    } else {
        0.0
    }
}

/// Predictions carried by a detection response, in pixel space. Returns the
/// format report alongside; predictions are empty unless parsing succeeded.
pub fn response_predictions(raw_response: &str, image_width: f64, image_height: f64) -> (Vec<Candidate>, FormatReport) {
    let parsed = parse_detection(raw_response);
    let predictions = parsed
        .value
        .map(|r| {
            r.items
                .iter()
                .filter_map(|item| {
                    let bbox = denormalize_from_grid(&item.bbox, image_width, image_height).ok()?;
                    Candidate::new(bbox, item.confidence.value()).ok()
                })
                .collect()
        })
        .unwrap_or_default();
    (predictions, parsed.report)
}

/// Combines the three terms on already-extracted predictions.
pub fn compose(predictions: &[Candidate], ground_truths: &[BoundingBox], r_format: f64, w: &RewardWeights) -> RewardBreakdown {
    let (r_iou, matches) = reward_iou(predictions, ground_truths, w.tau_match);
    let (r_conf, false_negatives) = reward_conf(predictions, ground_truths, w.tau_iou, w.lambda_fn, w.fn_penalty);
    RewardBreakdown {
        r_iou,
        r_conf,
        r_format,
        r_total: w.alpha * r_iou + w.beta * r_conf + w.gamma * r_format,
        matches,
        predictions: predictions.len(),
        false_negatives,
    }
}

/// Full reward of a raw detection response against pixel-space ground
/// truth for an image of the given size.
pub fn reward_total(
    raw_response: &str,
    ground_truths: &[BoundingBox],
    image_width: f64,
    image_height: f64,
    w: &RewardWeights,
) -> RewardBreakdown {
    let (predictions, report) = response_predictions(raw_response, image_width, image_height);
    compose(&predictions, ground_truths, format_reward(&report), w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::normalize_to_grid;
    use crate::protocol::{render_detection_response, Confidence, DetectionItem, DetectionResponse};
    use alloc::string::String;
    use alloc::vec;
    use approx::assert_abs_diff_eq;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
        BoundingBox::new(x1, y1, x2, y2).unwrap()
    }

    fn c(bb: BoundingBox, conf: f64) -> Candidate {
        Candidate::new(bb, conf).unwrap()
    }

    #[test]
    fn iou_reward_examples() {
        let g = b(0., 0., 100., 100.);
        assert_eq!(reward_iou(&[c(g, 0.5)], &[g], 0.3), (1.0, 1));
        assert_eq!(reward_iou(&[], &[g], 0.3), (0.0, 0));
        // Two disjoint scenes: IoU 0.5 (half box) and 0.9 (90% strip).
        let g2 = b(1000., 0., 1100., 100.);
        let preds = [c(b(0., 0., 100., 50.), 0.9), c(b(1000., 0., 1090., 100.), 0.8)];
        let (r, m) = reward_iou(&preds, &[g, g2], 0.3);
        assert_eq!(m, 2);
        assert_abs_diff_eq!(r, (0.5 + 0.9) / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn conf_reward_examples() {
        let g = b(0., 0., 100., 100.);
        let (r, fneg) = reward_conf(&[c(g, 0.9)], &[g], 0.3, 2.0, FnPenalty::Fractional);
        assert_abs_diff_eq!(r, 0.9, epsilon = 1e-12);
        assert_eq!(fneg, 0);
        let (r, _) = reward_conf(&[c(g, 0.8)], &[], 0.3, 2.0, FnPenalty::Fractional);
        assert_abs_diff_eq!(r, 0.2, epsilon = 1e-12);
        let g2 = b(500., 500., 600., 600.);
        let (r, fneg) = reward_conf(&[c(g, 0.9)], &[g, g2], 0.3, 2.0, FnPenalty::Fractional);
        assert_abs_diff_eq!(r, 0.9 - 2.0 * 0.5, epsilon = 1e-12);
        assert_eq!(fneg, 1);
        let (r, _) = reward_conf(&[c(g, 0.9)], &[g, g2], 0.3, 2.0, FnPenalty::Count);
        assert_abs_diff_eq!(r, 0.9 - 2.0, epsilon = 1e-12);
        let (r, _) = reward_conf(&[], &[g], 0.3, 2.0, FnPenalty::Fractional);
        assert_abs_diff_eq!(r, -2.0, epsilon = 1e-12);
    }

    #[test]
    fn strict_inequality_at_tau_iou() {
        // IoU exactly 1/3 against tau 1/3: matched but not strictly above.
        let g = b(0., 0., 100., 100.);
        let p = c(b(50., 0., 150., 100.), 0.9);
        let tau = crate::geometry::iou(p.bbox(), &g);
        let (r, fneg) = reward_conf(&[p], &[g], tau, 0.0, FnPenalty::Fractional);
        assert_abs_diff_eq!(r, 0.1, epsilon = 1e-12);
        assert_eq!(fneg, 1);
    }

    fn response(items: &[(BoundingBox, u8)], w: f64, h: f64) -> String {
        let items = items
            .iter()
            .map(|(bb, conf)| DetectionItem {
                bbox: normalize_to_grid(bb, w, h).unwrap(),
                confidence: Confidence::from_hundredths(*conf).unwrap(),
            })
            .collect();
        render_detection_response(&DetectionResponse {
            think: "t".into(),
            items,
        })
        .unwrap()
    }

    #[test]
    fn total_examples() {
        let w = RewardWeights::default();
        let r = RewardBreakdown {
            r_iou: 0.5,
            r_conf: 0.8,
            r_format: 1.0,
            r_total: 0.0,
            matches: 0,
            predictions: 0,
            false_negatives: 0,
        };
        assert_abs_diff_eq!(w.alpha() * r.r_iou + w.beta() * r.r_conf + w.gamma() * r.r_format, 0.64, epsilon = 1e-12);

        let g = b(0., 0., 500., 500.);
        let raw = response(&[(g, 85)], 1000.0, 1000.0);
        let out = reward_total(&raw, &[g], 1000.0, 1000.0, &w);
        assert_abs_diff_eq!(out.r_total, 0.6 + 0.3 * 0.85 + 0.1, epsilon = 1e-12);

        let out = reward_total("\u{0}\u{1}garbage", &[g], 1000.0, 1000.0, &w);
        assert_eq!(out.r_format, 0.0);
        assert_abs_diff_eq!(out.r_total, 0.3 * (-2.0), epsilon = 1e-12);
    }

    #[test]
    fn format_examples() {
        let g = b(0., 0., 500., 500.);
        assert_eq!(reward_format(&response(&[(g, 85)], 1000.0, 1000.0)), 1.0);
        assert_eq!(
            reward_format("<think></think><answer>[{'Position': [1,2,3,4]}]</answer>"),
            0.0
        );
        assert_eq!(
            reward_format("<think></think><answer>[{'Position': [1,2,3,4], 'Confidence': 1.5}]</answer>"),
            0.0
        );
    }

    #[test]
    fn weights_validation() {
        assert!(RewardWeights::new(0.6, 0.3, 0.2, 2.0, 0.3, 0.3, FnPenalty::Fractional).is_err());
        assert!(RewardWeights::new(0.6, 0.3, 0.1, -1.0, 0.3, 0.3, FnPenalty::Fractional).is_err());
        assert!(RewardWeights::new(0.6, 0.3, 0.1, 2.0, 0.0, 0.3, FnPenalty::Fractional).is_err());
        assert!(RewardWeights::default().with_lambda_fn(0.0).is_ok());
        let preds = vec![c(b(0., 0., 10., 10.), 0.4)];
        let zero_beta = RewardWeights::new(0.9, 0.0, 0.1, 2.0, 0.3, 0.3, FnPenalty::Fractional).unwrap();
        let out = compose(&preds, &[b(50., 50., 60., 60.)], 1.0, &zero_beta);
        assert_abs_diff_eq!(out.r_total, 0.1, epsilon = 1e-12);
    }
}
