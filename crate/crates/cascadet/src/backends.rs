//! Detector and verifier backends.
//!
//! Replay backends serve recorded outputs from JSONL fixtures and are
//! immutable after load. The oracle verifier answers from ground truth.
//! The policy verifier re-decides a base verifier's answers with a trained
//! toy policy. The HTTP client lives in [`crate::http`].

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use cascadet_core::cascade::{scale_score, FrameRecord};
use cascadet_core::geometry::{iou, BoundingBox, Candidate};
use cascadet_core::grpo::{ToyCandidate, ToyVerifierPolicy, VerifierAction};
use cascadet_core::protocol::{parse_verdict, render_verdict_response, Confidence, Decision, VerdictResponse};
use cascadet_core::quality::QualityFactors;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capability {
    pub name: String,
    pub version: String,
}

impl Capability {
    fn new(name: &str) -> Self {
        Self {
            name: name.into(),
            version: env!("CARGO_PKG_VERSION").into(),
        }
    }
}

/// Failure of a single backend call.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("no recorded response for {0}")]
    Missing(String),
    #[error("recorded failure: {0}")]
    Recorded(String),
    #[error("timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("HTTP status {status} after {attempts} attempt(s)")]
    Status { status: u16, attempts: u32 },
    #[error("malformed envelope: {message}")]
    Envelope { attempts: u32, message: String },
}

impl BackendError {
    /// Network attempts made before giving up; 0 for local backends.
    pub fn attempts(&self) -> u32 {
        match self {
            BackendError::Missing(_) | BackendError::Recorded(_) => 0,
            BackendError::Timeout { attempts }
            | BackendError::Transport { attempts, .. }
            | BackendError::Status { attempts, .. }
            | BackendError::Envelope { attempts, .. } => *attempts,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Proposals {
    /// Unthresholded, in the backend's order.
    pub candidates: Vec<Candidate>,
    pub warnings: Vec<String>,
}

/// Global frame assessment. Either part may be unknown.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Assessment {
    #[serde(default)]
    pub adverse: Option<bool>,
    #[serde(default)]
    pub quality: Option<QualityFactors>,
}

#[derive(Debug, Clone, Copy)]
pub struct VerifyRequest<'a> {
    pub frame: &'a FrameRecord,
    pub candidate: Candidate,
    pub crop: BoundingBox,
    pub expanded_crop: BoundingBox,
    pub scale: f64,
    pub prompt: &'a str,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReply {
    /// Model output exactly as received.
    pub raw_response: String,
    pub attempts: u32,
    pub aleatoric: Option<f64>,
}

pub trait DetectorBackend: Send + Sync {
    fn capability(&self) -> Capability;
    fn propose(&self, frame: &FrameRecord) -> Result<Proposals, BackendError>;
}

pub trait VerifierBackend: Send + Sync {
    fn capability(&self) -> Capability;
    fn assess_global(&self, frame: &FrameRecord) -> Result<Assessment, BackendError>;
    fn verify(&self, request: &VerifyRequest<'_>) -> Result<VerifyReply, BackendError>;
}

impl<T: VerifierBackend + ?Sized> VerifierBackend for &T {
    fn capability(&self) -> Capability {
        (**self).capability()
    }

    fn assess_global(&self, frame: &FrameRecord) -> Result<Assessment, BackendError> {
        (**self).assess_global(frame)
    }

    fn verify(&self, request: &VerifyRequest<'_>) -> Result<VerifyReply, BackendError> {
        (**self).verify(request)
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DetectorLine {
    frame_id: String,
    #[serde(default)]
    boxes: Vec<Candidate>,
    /// Simulates a detector failure for the frame.
    #[serde(default)]
    error: Option<String>,
}

/// Non-blank lines with 1-based line numbers.
fn jsonl_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty())
}

/// The dataset frame a fixture line refers to. Lines for frames outside
/// the dataset (for example a subset manifest) are kept but not checked.
fn frame_bounds<'a>(frames: Option<&BTreeMap<&str, &'a FrameRecord>>, frame_id: &str) -> Option<&'a FrameRecord> {
    frames.and_then(|m| m.get(frame_id).copied())
}

fn check_inside(path: &Path, line: usize, what: &str, b: &BoundingBox, frame: Option<&FrameRecord>) -> Result<()> {
    if let Some(f) = frame {
        if !b.is_inside(f.image_width, f.image_height) {
            return Err(Error::line(
                path,
                line,
                format!(
                    "{what} [{}, {}, {}, {}] lies outside the {}x{} image of frame {:?}",
                    b.x1(),
                    b.y1(),
                    b.x2(),
                    b.y2(),
                    f.image_width,
                    f.image_height,
                    f.frame_id
                ),
            ));
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
enum Recorded<T> {
    Ok(T),
    Failed(String),
}

/// Serves recorded proposals. Unknown frames yield no candidates and a
/// warning.
#[derive(Debug, Clone, Default)]
pub struct ReplayDetector {
    frames: HashMap<String, Recorded<Vec<Candidate>>>,
}

impl ReplayDetector {
    /// Loads a fixture file. With a dataset, boxes of its frames must lie
    /// inside the frame's image.
    pub fn load(path: &Path, dataset: Option<&Dataset>) -> Result<Self> {
        let text = crate::error::read_to_string(path)?;
        Self::parse(path, &text, dataset)
    }

    pub fn parse(path: &Path, text: &str, dataset: Option<&Dataset>) -> Result<Self> {
        let map = dataset.map(Dataset::frame_map);
        let mut frames = HashMap::new();
        for (n, line) in jsonl_lines(text) {
            let rec: DetectorLine = serde_json::from_str(line).map_err(|e| Error::line(path, n, e))?;
            let frame = frame_bounds(map.as_ref(), &rec.frame_id);
            for c in &rec.boxes {
                check_inside(path, n, "box", c.bbox(), frame)?;
            }
            let entry = match rec.error {
                Some(e) if rec.boxes.is_empty() => Recorded::Failed(e),
                Some(_) => return Err(Error::line(path, n, "a line cannot carry both boxes and an error")),
                None => Recorded::Ok(rec.boxes),
            };
            if frames.insert(rec.frame_id.clone(), entry).is_some() {
                return Err(Error::line(path, n, format!("duplicate frame_id {:?}", rec.frame_id)));
            }
        }
        Ok(Self { frames })
    }
}

impl DetectorBackend for ReplayDetector {
    fn capability(&self) -> Capability {
        Capability::new("replay-detector")
    }

    fn propose(&self, frame: &FrameRecord) -> Result<Proposals, BackendError> {
        match self.frames.get(&frame.frame_id) {
            Some(Recorded::Ok(c)) => Ok(Proposals {
                candidates: c.clone(),
                warnings: Vec::new(),
            }),
            Some(Recorded::Failed(e)) => Err(BackendError::Recorded(e.clone())),
            None => Ok(Proposals {
                candidates: Vec::new(),
                warnings: vec![format!("detector fixture has no entry for frame {:?}", frame.frame_id)],
            }),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct VerifierLine {
    frame_id: String,
    #[serde(default)]
    crop: Option<[f64; 4]>,
    #[serde(default = "nominal_scale")]
    scale: f64,
    #[serde(default)]
    raw_response: Option<String>,
    #[serde(default)]
    error: Option<String>,
    #[serde(default)]
    quality: Option<QualityFactors>,
    #[serde(default)]
    adverse: Option<bool>,
    #[serde(default)]
    aleatoric: Option<f64>,
}

fn nominal_scale() -> f64 {
    1.0
}

/// Lookup key of a recorded crop: coordinates to a thousandth of a pixel
/// and the scale to a millionth.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct CropKey(String, [i64; 4], i64);

impl CropKey {
    fn new(frame_id: &str, crop: &BoundingBox, scale: f64) -> Self {
        let q = |v: f64| (v * 1e3).round() as i64;
        Self(
            frame_id.to_string(),
            [q(crop.x1()), q(crop.y1()), q(crop.x2()), q(crop.y2())],
            (scale * 1e6).round() as i64,
        )
    }
}

/// Serves recorded raw responses keyed by frame, crop and scale. A crop
/// with no recording fails, which rejects the candidate.
#[derive(Debug, Clone, Default)]
pub struct ReplayVerifier {
    responses: HashMap<CropKey, (Recorded<String>, Option<f64>)>,
    assessments: HashMap<String, Assessment>,
}

impl ReplayVerifier {
    pub fn load(path: &Path, dataset: Option<&Dataset>) -> Result<Self> {
        let text = crate::error::read_to_string(path)?;
        Self::parse(path, &text, dataset)
    }

    pub fn parse(path: &Path, text: &str, dataset: Option<&Dataset>) -> Result<Self> {
        let map = dataset.map(Dataset::frame_map);
        let mut out = Self::default();
        for (n, line) in jsonl_lines(text) {
            let rec: VerifierLine = serde_json::from_str(line).map_err(|e| Error::line(path, n, e))?;
            let frame = frame_bounds(map.as_ref(), &rec.frame_id);

            if rec.adverse.is_some() || rec.quality.is_some() {
                let a = Assessment {
                    adverse: rec.adverse,
                    quality: rec.quality,
                };
                let slot = out.assessments.entry(rec.frame_id.clone()).or_default();
                let merged = Assessment {
                    adverse: slot.adverse.or(a.adverse),
                    quality: slot.quality.or(a.quality),
                };
                let conflict = matches!((slot.adverse, a.adverse), (Some(x), Some(y)) if x != y)
                    || matches!((slot.quality, a.quality), (Some(x), Some(y)) if x != y);
                if conflict {
                    return Err(Error::line(
                        path,
                        n,
                        format!("conflicting assessment for frame {:?}", rec.frame_id),
                    ));
                }
                *slot = merged;
            }

            let Some([x1, y1, x2, y2]) = rec.crop else {
                if rec.raw_response.is_some() || rec.error.is_some() {
                    return Err(Error::line(path, n, "a response line needs a crop"));
                }
                if rec.adverse.is_none() && rec.quality.is_none() {
                    return Err(Error::line(path, n, "line carries neither a crop nor an assessment"));
                }
                continue;
            };
            let crop = BoundingBox::new(x1, y1, x2, y2).map_err(|e| Error::line(path, n, e))?;
            check_inside(path, n, "crop", &crop, frame)?;
            if !(rec.scale > 0.0 && rec.scale.is_finite()) {
                return Err(Error::line(path, n, format!("scale {} must be positive", rec.scale)));
            }
            if let Some(a) = rec.aleatoric {
                if !(a >= 0.0 && a.is_finite()) {
                    return Err(Error::line(path, n, format!("aleatoric {a} must be a finite nonnegative value")));
                }
            }
            let outcome = match (rec.raw_response, rec.error) {
                (Some(r), None) => Recorded::Ok(r),
                (None, Some(e)) => Recorded::Failed(e),
                _ => return Err(Error::line(path, n, "exactly one of raw_response and error is required")),
            };
            let key = CropKey::new(&rec.frame_id, &crop, rec.scale);
            if out.responses.insert(key, (outcome, rec.aleatoric)).is_some() {
                return Err(Error::line(path, n, "duplicate crop for this frame and scale"));
            }
        }
        Ok(out)
    }
}

impl VerifierBackend for ReplayVerifier {
    fn capability(&self) -> Capability {
        Capability::new("replay-verifier")
    }

    fn assess_global(&self, frame: &FrameRecord) -> Result<Assessment, BackendError> {
        Ok(self.assessments.get(&frame.frame_id).copied().unwrap_or_default())
    }

    fn verify(&self, req: &VerifyRequest<'_>) -> Result<VerifyReply, BackendError> {
        let key = CropKey::new(&req.frame.frame_id, &req.crop, req.scale);
        match self.responses.get(&key) {
            Some((Recorded::Ok(raw), aleatoric)) => Ok(VerifyReply {
                raw_response: raw.clone(),
                attempts: 0,
                aleatoric: *aleatoric,
            }),
            Some((Recorded::Failed(e), _)) => Err(BackendError::Recorded(e.clone())),
            None => Err(BackendError::Missing(format!(
                "frame {:?} crop [{}, {}, {}, {}] at scale {}",
                req.frame.frame_id,
                req.crop.x1(),
                req.crop.y1(),
                req.crop.x2(),
                req.crop.y2(),
                req.scale
            ))),
        }
    }
}

/// Answers from ground truth: "Yes" with full confidence when the
/// candidate overlaps some ground truth by at least `tau_iou`, otherwise
/// "No". Global assessment comes from the frame's own labels.
#[derive(Debug, Clone, Copy)]
pub struct OracleVerifier {
    pub tau_iou: f64,
}

impl OracleVerifier {
    pub fn answer(&self, frame: &FrameRecord, candidate: &Candidate) -> Decision {
        let hit = frame.ground_truths.iter().any(|g| iou(candidate.bbox(), g) >= self.tau_iou);
        if hit {
            Decision::Yes
        } else {
            Decision::No
        }
    }
}

fn verdict_text(decision: Decision, confidence: Confidence) -> String {
    render_verdict_response(&VerdictResponse {
        think: String::new(),
        decision,
        confidence,
    })
    .expect("empty think always renders")
}

impl VerifierBackend for OracleVerifier {
    fn capability(&self) -> Capability {
        Capability::new("oracle-verifier")
    }

    fn assess_global(&self, frame: &FrameRecord) -> Result<Assessment, BackendError> {
        Ok(Assessment {
            adverse: Some(frame.condition == cascadet_core::cascade::Condition::Degraded),
            quality: frame.quality,
        })
    }

    fn verify(&self, req: &VerifyRequest<'_>) -> Result<VerifyReply, BackendError> {
        let full = Confidence::from_hundredths(100).expect("100 hundredths is valid");
        Ok(VerifyReply {
            raw_response: verdict_text(self.answer(req.frame, &req.candidate), full),
            attempts: 0,
            aleatoric: None,
        })
    }
}

/// Wraps a base verifier and lets a toy policy make the final call from
/// the detector confidence and the base verdict (as P(yes) evidence).
/// Failures and unparseable base replies pass through unchanged, so the
/// cascade still fails closed on them.
pub struct PolicyVerifier<V> {
    pub base: V,
    pub policy: ToyVerifierPolicy,
}

impl<V: VerifierBackend> VerifierBackend for PolicyVerifier<V> {
    fn capability(&self) -> Capability {
        let base = self.base.capability();
        Capability {
            name: format!("policy({})", base.name),
            version: base.version,
        }
    }

    fn assess_global(&self, frame: &FrameRecord) -> Result<Assessment, BackendError> {
        self.base.assess_global(frame)
    }

    fn verify(&self, req: &VerifyRequest<'_>) -> Result<VerifyReply, BackendError> {
        let reply = self.base.verify(req)?;
        let Some(v) = parse_verdict(&reply.raw_response).value else {
            return Ok(reply);
        };
        let features = ToyCandidate {
            bbox: *req.candidate.bbox(),
            detector_confidence: req.candidate.confidence(),
            evidence: scale_score(v.decision, v.confidence.value()),
            positive: false,
        }
        .features();
        let action = VerifierAction::from_index(self.policy.greedy(&features));
        Ok(VerifyReply {
            raw_response: verdict_text(action.decision, action.confidence()),
            ..reply
        })
    }
}
