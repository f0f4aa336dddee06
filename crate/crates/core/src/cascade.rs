//! Per-frame cascade logic: Stage 1 threshold filtering, Stage 2 verdict
//! consensus, and ground-truth evaluation.
//!
//! Backends and clocks live outside this crate. The functions here take the
//! detector proposals and the raw verifier replies and produce the frame
//! record deterministically.

use alloc::collections::BTreeSet;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{confidence_order, detected, expand_region, scale_region, BoundingBox, Candidate};
use crate::protocol::{parse_verdict, Decision, FormatReport};
use crate::quality::QualityFactors;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    #[default]
    Clean,
    Degraded,
}

impl Condition {
    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Clean => "clean",
            Condition::Degraded => "degraded",
        }
    }
}

/// One annotated frame. Ground-truth boxes are in pixel space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame_id: String,
    #[serde(default)]
    pub patient_id: Option<String>,
    pub image_width: f64,
    pub image_height: f64,
    #[serde(default)]
    pub condition: Condition,
    #[serde(default)]
    pub degradation_tags: BTreeSet<String>,
    #[serde(default)]
    pub quality: Option<QualityFactors>,
    #[serde(default)]
    pub ground_truths: Vec<BoundingBox>,
    /// Path or opaque id that backends use to fetch pixels.
    #[serde(default)]
    pub image_ref: Option<String>,
}

impl FrameRecord {
    /// Checks the image size and that every ground truth lies inside it.
    pub fn validate(&self) -> Result<()> {
        let (w, h) = (self.image_width, self.image_height);
        if !(w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite()) {
            return Err(Error::InvalidImageSize { width: w, height: h });
        }
        if self.frame_id.is_empty() {
            return Err(Error::InvalidConfig("frame_id must not be empty".into()));
        }
        for gt in &self.ground_truths {
            if !gt.is_inside(w, h) {
                let [x1, y1, x2, y2] = gt.corners();
                return Err(Error::InvalidBox { x1, y1, x2, y2 });
            }
        }
        Ok(())
    }
}

/// Stage 1: keeps proposals at or above `tau`, sorted by descending
/// confidence with the original index breaking ties.
pub fn filter_candidates(proposals: &[Candidate], tau: f64) -> Vec<Candidate> {
    confidence_order(proposals)
        .into_iter()
        .map(|i| proposals[i])
        .filter(|c| c.confidence() >= tau)
        .collect()
}

/// Crop scales and their fusion weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScaleRepr", into = "ScaleRepr")]
pub struct ScaleSet {
    scales: Vec<f64>,
    weights: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ScaleRepr {
    scales: Vec<f64>,
    weights: Vec<f64>,
}

impl TryFrom<ScaleRepr> for ScaleSet {
    type Error = Error;

    fn try_from(r: ScaleRepr) -> Result<Self> {
        ScaleSet::new(r.scales, r.weights)
    }
}

impl From<ScaleSet> for ScaleRepr {
    fn from(s: ScaleSet) -> Self {
        Self {
            scales: s.scales,
            weights: s.weights,
        }
    }
}

impl Default for ScaleSet {
    fn default() -> Self {
        Self {
            scales: alloc::vec![0.8, 1.0, 1.2],
            weights: alloc::vec![0.2, 0.6, 0.2],
        }
    }
}

impl ScaleSet {
    /// Requires matching lengths, positive scales including the nominal
    /// scale 1.0, and nonnegative weights summing to 1.
    pub fn new(scales: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if scales.is_empty() || scales.len() != weights.len() {
            return Err(Error::InvalidConfig("scales and weights must be non-empty and equally long".into()));
        }
        if scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidConfig("scales must be positive".into()));
        }
        if !scales.contains(&1.0) {
            return Err(Error::InvalidConfig("scales must include the nominal scale 1.0".into()));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidConfig("scale weights must be nonnegative".into()));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::WeightsNotNormalized {
                name: "scale weights",
                sum,
            });
        }
        Ok(Self { scales, weights })
    }

    /// Only the nominal scale, so no extra verifier calls are made.
    pub fn nominal() -> Self {
        Self {
            scales: alloc::vec![1.0],
            weights: alloc::vec![1.0],
        }
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn nominal_index(&self) -> usize {
        self.scales.iter().position(|s| *s == 1.0).unwrap_or(0)
    }
}

/// Which score is compared against `tau_conf`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AcceptanceScore {
    /// The nominal-scale verdict confidence.
    #[default]
    Verdict,
    /// The weighted multi-scale score.
    Multiscale,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Config {
    pub tau_conf: f64,
    /// Context expansion factor for the crop handed to the verifier.
    pub rho: f64,
    pub scales: ScaleSet,
    #[serde(default)]
    pub acceptance: AcceptanceScore,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            tau_conf: 0.7,
            rho: 1.5,
            scales: ScaleSet::default(),
            acceptance: AcceptanceScore::Verdict,
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau_conf) {
            return Err(Error::OutOfRange {
                name: "tau_conf",
                value: self.tau_conf,
                expected: "[0, 1]",
            });
        }
        if !(self.rho >= 1.0 && self.rho.is_finite()) {
            return Err(Error::OutOfRange {
                name: "rho",
                value: self.rho,
                expected: ">= 1",
            });
        }
        ScaleSet::new(self.scales.scales.clone(), self.scales.weights.clone()).map(|_| ())
    }
}

/// Rectangles sent to the verifier for one candidate at one scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropRequest {
    pub scale: f64,
    /// Candidate box scaled about its center.
    pub crop: BoundingBox,
    /// `crop` grown by the context factor.
    pub expanded_crop: BoundingBox,
}

/// One verifier request per configured scale, nominal scale first.
pub fn crop_requests(candidate: &Candidate, frame: &FrameRecord, cfg: &Stage2Config) -> Result<Vec<CropRequest>> {
    let (w, h) = (frame.image_width, frame.image_height);
    let nominal = cfg.scales.nominal_index();
    let order = core::iter::once(nominal).chain((0..cfg.scales.scales.len()).filter(|&i| i != nominal));
    order
        .map(|i| {
            let scale = cfg.scales.scales[i];
            let crop = scale_region(&candidate.bbox().clip(w, h), scale, w, h)?;
            let expanded_crop = expand_region(&crop, cfg.rho, w, h)?;
            Ok(CropRequest {
                scale,
                crop,
                expanded_crop,
            })
        })
        .collect()
}

/// Raw verifier reply for one crop, or the transport error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleReply {
    pub scale: f64,
    pub outcome: core::result::Result<String, String>,
    /// Transport attempts used, retries included.
    pub attempts: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifiedCandidate {
    pub candidate: Candidate,
    pub crop: BoundingBox,
    pub expanded_crop: BoundingBox,
    /// Nominal-scale decision; `None` when the verdict was unusable.
    pub decision: Option<Decision>,
    /// Nominal-scale verdict confidence `s_k` (0 when unusable).
    pub confidence: f64,
    pub format: FormatReport,
    pub multiscale_score: Option<f64>,
    pub accepted: bool,
    pub error: Option<String>,
    pub attempts: u32,
    /// Backend-supplied aleatoric uncertainty, logged as is.
    #[serde(default)]
    pub aleatoric: Option<f64>,
}

/// Per-scale support for a positive: the confidence for Yes, its
/// complement for No.
pub fn scale_score(decision: Decision, confidence: f64) -> f64 {
    match decision {
        Decision::Yes => confidence,
        Decision::No => 1.0 - confidence,
    }
}

/// Stage 2 consensus for one candidate.
///
/// Any transport error or unparseable nominal reply rejects the candidate.
/// A failed non-nominal scale only drops the multi-scale score.
pub fn judge_candidate(
    candidate: Candidate,
    requests: &[CropRequest],
    replies: &[ScaleReply],
    cfg: &Stage2Config,
) -> VerifiedCandidate {
    let nominal = requests.first().copied();
    let (crop, expanded_crop) = nominal.map_or((*candidate.bbox(), *candidate.bbox()), |r| (r.crop, r.expanded_crop));
    let mut out = VerifiedCandidate {
        candidate,
        crop,
        expanded_crop,
        decision: None,
        confidence: 0.0,
        format: FormatReport::default(),
        multiscale_score: None,
        accepted: false,
        error: None,
        attempts: replies.iter().map(|r| r.attempts).sum(),
        aleatoric: None,
    };

    let verdicts: Vec<core::result::Result<(Decision, f64), String>> = replies
        .iter()
        .map(|r| match &r.outcome {
            Err(e) => Err(e.clone()),
            Ok(raw) => {
                let parsed = parse_verdict(raw);
                parsed
                    .value
                    .map(|v| (v.decision, v.confidence.value()))
                    .ok_or_else(|| "unparseable verdict".to_string())
            }
        })
        .collect();

    match replies.first() {
        None => {
            out.error = Some("no verifier reply".into());
            return out;
        }
        Some(first) => {
            if let Ok(raw) = &first.outcome {
                out.format = parse_verdict(raw).report;
            }
        }
    }
    let (decision, confidence) = match &verdicts[0] {
        Ok(v) => *v,
        Err(e) => {
            out.error = Some(e.clone());
            return out;
        }
    };
    out.decision = Some(decision);
    out.confidence = confidence;

    let weight_of = |scale: f64| {
        cfg.scales
            .scales
            .iter()
            .position(|s| *s == scale)
            .map(|i| cfg.scales.weights[i])
    };
    if replies.len() == cfg.scales.scales.len() {
        let mut total = 0.0;
        let mut complete = true;
        for (reply, v) in replies.iter().zip(&verdicts) {
            match (v, weight_of(reply.scale)) {
                (Ok((d, c)), Some(w)) => total += w * scale_score(*d, *c),
                _ => complete = false,
            }
        }
        if complete {
            out.multiscale_score = Some(total.clamp(0.0, 1.0));
        }
    }

    let score = match cfg.acceptance {
        AcceptanceScore::Verdict => Some(confidence),
        AcceptanceScore::Multiscale => out.multiscale_score,
    };
    out.accepted = decision.is_yes() && score.is_some_and(|s| s >= cfg.tau_conf);
    out
}

/// Wall-clock cost of one frame, in milliseconds.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub t_preprocess: f64,
    pub t_detect: f64,
    pub t_verify_each: Vec<f64>,
    pub t_postprocess: f64,
}

impl StageTiming {
    pub fn total(&self) -> f64 {
        self.t_preprocess + self.t_detect + self.t_verify_each.iter().sum::<f64>() + self.t_postprocess
    }
}

/// Everything decided for one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameResult {
    pub frame_id: String,
    pub condition: Condition,
    pub degradation_tags: BTreeSet<String>,
    pub adverse: bool,
    pub quality_score: Option<f64>,
    /// Threshold applied in Stage 1.
    pub tau: f64,
    pub stage1_candidates: Vec<Candidate>,
    pub verified: Vec<VerifiedCandidate>,
    pub finals: Vec<Candidate>,
    pub ground_truths: Vec<BoundingBox>,
    pub per_gt_detected: Vec<bool>,
    pub timing: StageTiming,
    pub warnings: Vec<String>,
}

/// Detection flag for every ground truth of the frame.
pub fn evaluate_frame(finals: &[Candidate], ground_truths: &[BoundingBox], tau_iou: f64) -> Vec<bool> {
    ground_truths.iter().map(|gt| detected(gt, finals, tau_iou)).collect()
}

/// Inputs for assembling a [`FrameResult`].
#[derive(Debug, Clone, Default)]
pub struct FrameOutcome {
    pub adverse: bool,
    pub quality_score: Option<f64>,
    pub tau: f64,
    pub stage1_candidates: Vec<Candidate>,
    pub verified: Vec<VerifiedCandidate>,
    pub timing: StageTiming,
    pub warnings: Vec<String>,
}

/// Collects finals from accepted candidates (in Stage 1 order) and
/// evaluates them against the frame's ground truth.
pub fn assemble_frame(frame: &FrameRecord, outcome: FrameOutcome, tau_iou: f64) -> FrameResult {
    let finals: Vec<Candidate> = outcome.verified.iter().filter(|v| v.accepted).map(|v| v.candidate).collect();
    let per_gt_detected = evaluate_frame(&finals, &frame.ground_truths, tau_iou);
    FrameResult {
        frame_id: frame.frame_id.clone(),
        condition: frame.condition,
        degradation_tags: frame.degradation_tags.clone(),
        adverse: outcome.adverse,
        quality_score: outcome.quality_score,
        tau: outcome.tau,
        stage1_candidates: outcome.stage1_candidates,
        verified: outcome.verified,
        finals,
        ground_truths: frame.ground_truths.clone(),
        per_gt_detected,
        timing: outcome.timing,
        warnings: outcome.warnings,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::iou;
    use crate::protocol::{render_verdict_response, Confidence, VerdictResponse};
    use alloc::vec;
    use proptest::prelude::*;

    fn cand(x1: f64, y1: f64, x2: f64, y2: f64, c: f64) -> Candidate {
        Candidate::new(BoundingBox::new(x1, y1, x2, y2).unwrap(), c).unwrap()
    }

    fn verdict(d: Decision, hundredths: u8) -> String {
        render_verdict_response(&VerdictResponse {
            think: String::new(),
            decision: d,
            confidence: Confidence::from_hundredths(hundredths).unwrap(),
        })
        .unwrap()
    }

    fn frame() -> FrameRecord {
        FrameRecord {
            frame_id: "f".into(),
            patient_id: None,
            image_width: 400.0,
            image_height: 300.0,
            condition: Condition::Degraded,
            degradation_tags: BTreeSet::new(),
            quality: None,
            ground_truths: vec![BoundingBox::new(100.0, 100.0, 200.0, 200.0).unwrap()],
            image_ref: None,
        }
    }

    #[test]
    fn stage1_filtering() {
        let proposals = [cand(0., 0., 1., 1., 0.25), cand(0., 0., 1., 1., 0.45), cand(0., 0., 1., 1., 0.15)];
        let kept: Vec<f64> = filter_candidates(&proposals, 0.2).iter().map(|c| c.confidence()).collect();
        assert_eq!(kept, vec![0.45, 0.25]);
        assert!(filter_candidates(&proposals, 0.5).is_empty());
        assert!(filter_candidates(&[], 0.2).is_empty());
    }

    fn judge(replies: Vec<ScaleReply>, cfg: &Stage2Config) -> VerifiedCandidate {
        let c = cand(100., 100., 200., 200., 0.6);
        let reqs = crop_requests(&c, &frame(), cfg).unwrap();
        judge_candidate(c, &reqs, &replies, cfg)
    }

    fn ok(scale: f64, raw: String) -> ScaleReply {
        ScaleReply {
            scale,
            outcome: Ok(raw),
            attempts: 1,
        }
    }

    #[test]
    fn consensus_rule() {
        let cfg = Stage2Config {
            scales: ScaleSet::nominal(),
            ..Default::default()
        };
        assert!(judge(vec![ok(1.0, verdict(Decision::Yes, 80))], &cfg).accepted);
        assert!(!judge(vec![ok(1.0, verdict(Decision::Yes, 69))], &cfg).accepted);
        let v = judge(vec![ok(1.0, verdict(Decision::No, 99))], &cfg);
        assert!(!v.accepted);
        assert_eq!(v.decision, Some(Decision::No));

        let v = judge(vec![ok(1.0, "garbage".into())], &cfg);
        assert!(!v.accepted && v.error.is_some());
        let v = judge(
            vec![ScaleReply {
                scale: 1.0,
                outcome: Err("timeout".into()),
                attempts: 3,
            }],
            &cfg,
        );
        assert!(!v.accepted);
        assert_eq!(v.error.as_deref(), Some("timeout"));
        assert_eq!(v.attempts, 3);
    }

    #[test]
    fn multiscale_score() {
        let cfg = Stage2Config::default();
        let v = judge(
            vec![
                ok(1.0, verdict(Decision::Yes, 80)),
                ok(0.8, verdict(Decision::Yes, 80)),
                ok(1.2, verdict(Decision::Yes, 80)),
            ],
            &cfg,
        );
        assert!((v.multiscale_score.unwrap() - 0.8).abs() < 1e-12);
        let v = judge(
            vec![
                ok(1.0, verdict(Decision::Yes, 90)),
                ok(0.8, verdict(Decision::No, 90)),
                ok(1.2, verdict(Decision::Yes, 50)),
            ],
            &cfg,
        );
        let expected = 0.6 * 0.9 + 0.2 * 0.1 + 0.2 * 0.5;
        assert!((v.multiscale_score.unwrap() - expected).abs() < 1e-12);
        assert!(v.accepted);
        let strict = Stage2Config {
            acceptance: AcceptanceScore::Multiscale,
            ..Default::default()
        };
        let v2 = judge(
            vec![
                ok(1.0, verdict(Decision::Yes, 90)),
                ok(0.8, verdict(Decision::No, 90)),
                ok(1.2, verdict(Decision::Yes, 50)),
            ],
            &strict,
        );
        assert!(!v2.accepted);
    }

    #[test]
    fn crop_geometry() {
        let cfg = Stage2Config::default();
        let reqs = crop_requests(&cand(100., 100., 200., 200., 0.6), &frame(), &cfg).unwrap();
        assert_eq!(reqs.len(), 3);
        assert_eq!(reqs[0].scale, 1.0);
        assert_eq!(reqs[0].crop.corners(), [100., 100., 200., 200.]);
        assert_eq!(reqs[0].expanded_crop.corners(), [75., 75., 225., 225.]);
        assert_eq!(reqs[1].crop.corners(), [110., 110., 190., 190.]);
    }

    #[test]
    fn evaluate_examples() {
        let gt = BoundingBox::new(0., 0., 100., 100.).unwrap();
        assert_eq!(evaluate_frame(&[], &[gt], 0.3), vec![false]);
        assert_eq!(evaluate_frame(&[Candidate::new(gt, 0.9).unwrap()], &[gt], 0.3), vec![true]);
        let half = cand(0., 0., 100., 50., 0.9);
        assert!((iou(half.bbox(), &gt) - 0.5).abs() < 1e-12);
        let third = cand(50., 0., 150., 100., 0.9);
        assert!((iou(third.bbox(), &gt) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(evaluate_frame(&[third], &[gt], 0.3), vec![true]);
    }

    #[test]
    fn timing_total() {
        let t = StageTiming {
            t_preprocess: 1.0,
            t_detect: 2.0,
            t_verify_each: vec![],
            t_postprocess: 3.0,
        };
        assert_eq!(t.total(), 6.0);
    }

    #[test]
    fn scale_set_validation() {
        assert!(ScaleSet::new(vec![0.8, 1.2], vec![0.5, 0.5]).is_err());
        assert!(ScaleSet::new(vec![1.0, 1.2], vec![0.5, 0.6]).is_err());
        assert!(ScaleSet::new(vec![1.0], vec![1.0, 0.0]).is_err());
    }

    proptest! {
        // Lowering the threshold with a perfect verifier never loses finals.
        #[test]
        fn threshold_monotone_under_oracle(
            confs in proptest::collection::vec(0.0f64..=1.0, 0..6),
            xs in proptest::collection::vec(0.0f64..300.0, 6),
            t1 in 0.0f64..=1.0, t2 in 0.0f64..=1.0,
        ) {
            let f = frame();
            let proposals: Vec<Candidate> = confs.iter().zip(&xs).map(|(c, x)| cand(*x, 100., x + 100., 200., *c)).collect();
            let oracle = |tau: f64| {
                let finals: Vec<Candidate> = filter_candidates(&proposals, tau)
                    .into_iter()
                    .filter(|c| f.ground_truths.iter().any(|g| iou(c.bbox(), g) >= 0.3))
                    .collect();
                (finals.len(), evaluate_frame(&finals, &f.ground_truths, 0.3))
            };
            let (lo, hi) = (t1.min(t2), t1.max(t2));
            let (n_lo, d_lo) = oracle(lo);
            let (n_hi, d_hi) = oracle(hi);
            prop_assert!(n_lo >= n_hi);
            for (a, b) in d_lo.iter().zip(&d_hi) {
                prop_assert!(*a || !*b);
            }
        }
    }
}
