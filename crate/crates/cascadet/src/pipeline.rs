//! Runs the two-stage cascade over frames.
//!
//! Frames are independent and processed on a rayon pool; results are
//! collected in dataset order, so output never depends on the worker
//! count. Stage timings come from a monotonic clock.

use std::time::Instant;

use cascadet_core::cascade::{
    assemble_frame, crop_requests, filter_candidates, judge_candidate, Condition, FrameOutcome, FrameRecord,
    FrameResult, ScaleReply, Stage2Config, StageTiming, VerifiedCandidate,
};
use cascadet_core::geometry::Candidate;
use cascadet_core::protocol::FormatReport;
use cascadet_core::quality::{quality_score, QualitySignals, ThresholdController};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backends::{Assessment, BackendError, DetectorBackend, VerifierBackend, VerifyRequest};
use crate::error::{Error, Result};

/// Runs `f` and returns its value with the elapsed milliseconds.
pub fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let start = Instant::now();
    let v = f();
    (v, start.elapsed().as_secs_f64() * 1e3)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThresholdRule {
    /// Per-frame threshold from the quality controller.
    Adaptive(ThresholdController),
    /// One threshold for every frame. The controller still labels frames
    /// as adverse for reporting.
    Fixed { tau: f64, controller: ThresholdController },
}

impl ThresholdRule {
    fn controller(&self) -> &ThresholdController {
        match self {
            ThresholdRule::Adaptive(c) | ThresholdRule::Fixed { controller: c, .. } => c,
        }
    }
}

pub struct Engine<'a> {
    pub detector: &'a dyn DetectorBackend,
    /// `None` accepts every Stage 1 candidate unverified.
    pub verifier: Option<&'a dyn VerifierBackend>,
    pub threshold: ThresholdRule,
    pub stage2: Stage2Config,
    pub tau_iou: f64,
    pub prompt: String,
}

/// A frame whose detector call failed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameFailure {
    pub frame_id: String,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunOutcome {
    pub results: Vec<FrameResult>,
    pub failures: Vec<FrameFailure>,
    /// Dataset order of every frame: `Ok` indexes `results`, `Err` indexes
    /// `failures`.
    pub order: Vec<std::result::Result<usize, usize>>,
}

fn unverified(candidate: Candidate) -> VerifiedCandidate {
    VerifiedCandidate {
        candidate,
        crop: *candidate.bbox(),
        expanded_crop: *candidate.bbox(),
        decision: None,
        confidence: candidate.confidence(),
        format: FormatReport::default(),
        multiscale_score: None,
        accepted: true,
        error: None,
        attempts: 0,
        aleatoric: None,
    }
}

impl Engine<'_> {
    fn preprocess(&self, frame: &FrameRecord, warnings: &mut Vec<String>) -> (bool, Option<f64>, f64) {
        let assessment = match self.verifier {
            Some(v) => v.assess_global(frame).unwrap_or_else(|e| {
                warnings.push(format!("global assessment failed: {e}"));
                Assessment::default()
            }),
            None => Assessment::default(),
        };
        let controller = self.threshold.controller();
        let factors = assessment.quality.or(frame.quality);
        let signals = QualitySignals {
            backend_adverse: assessment.adverse,
            metadata_adverse: Some(frame.condition == Condition::Degraded),
            quality: factors.map(|f| quality_score(&f, &controller.weights)),
        };
        let tau = match self.threshold {
            ThresholdRule::Adaptive(c) => c.threshold(&signals),
            ThresholdRule::Fixed { tau, .. } => tau,
        };
        (controller.is_adverse(&signals), signals.quality, tau)
    }

    /// Clips proposals to the image, dropping ones with no area left.
    fn clip(frame: &FrameRecord, proposals: Vec<Candidate>, warnings: &mut Vec<String>) -> Vec<Candidate> {
        let (w, h) = (frame.image_width, frame.image_height);
        proposals
            .into_iter()
            .filter_map(|c| {
                if c.bbox().is_inside(w, h) {
                    return Some(c);
                }
                let clipped = c.bbox().clip(w, h);
                match Candidate::new(clipped, c.confidence()) {
                    Ok(k) if !clipped.is_degenerate() => {
                        warnings.push("detector box clipped to the image".to_string());
                        Some(k)
                    }
                    _ => {
                        warnings.push("detector box outside the image dropped".to_string());
                        None
                    }
                }
            })
            .collect()
    }

    fn verify_candidate(&self, verifier: &dyn VerifierBackend, frame: &FrameRecord, c: Candidate) -> VerifiedCandidate {
        let requests = match crop_requests(&c, frame, &self.stage2) {
            Ok(r) => r,
            Err(e) => {
                let mut v = judge_candidate(c, &[], &[], &self.stage2);
                v.error = Some(format!("crop: {e}"));
                return v;
            }
        };
        let mut aleatoric = None;
        let replies: Vec<ScaleReply> = requests
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let req = VerifyRequest {
                    frame,
                    candidate: c,
                    crop: r.crop,
                    expanded_crop: r.expanded_crop,
                    scale: r.scale,
                    prompt: &self.prompt,
                };
                match verifier.verify(&req) {
                    Ok(reply) => {
                        if i == 0 {
                            aleatoric = reply.aleatoric;
                        }
                        ScaleReply {
                            scale: r.scale,
                            outcome: Ok(reply.raw_response),
                            attempts: reply.attempts,
                        }
                    }
                    Err(e) => ScaleReply {
                        scale: r.scale,
                        attempts: e.attempts(),
                        outcome: Err(e.to_string()),
                    },
                }
            })
            .collect();
        let mut v = judge_candidate(c, &requests, &replies, &self.stage2);
        v.aleatoric = aleatoric;
        v
    }

    /// Both stages for one frame. Only a detector failure fails the frame;
    /// verifier failures reject the affected candidates.
    pub fn process_frame(&self, frame: &FrameRecord) -> Result<FrameResult, BackendError> {
        let mut warnings = Vec::new();
        let ((adverse, quality_score, tau), t_preprocess) = timed(|| self.preprocess(frame, &mut warnings));

        let (proposals, t_detect) = timed(|| self.detector.propose(frame));
        let proposals = proposals?;
        warnings.extend(proposals.warnings);
        let candidates = Self::clip(frame, proposals.candidates, &mut warnings);
        let stage1 = filter_candidates(&candidates, tau);

        let mut verified = Vec::with_capacity(stage1.len());
        let mut t_verify_each = Vec::with_capacity(stage1.len());
        for &c in &stage1 {
            let (v, ms) = match self.verifier {
                Some(verifier) => timed(|| self.verify_candidate(verifier, frame, c)),
                None => (unverified(c), 0.0),
            };
            if let Some(e) = &v.error {
                warnings.push(format!("candidate rejected: {e}"));
            }
            verified.push(v);
            t_verify_each.push(ms);
        }

        let outcome = FrameOutcome {
            adverse,
            quality_score,
            tau,
            stage1_candidates: stage1,
            verified,
            timing: StageTiming {
                t_preprocess,
                t_detect,
                t_verify_each,
                t_postprocess: 0.0,
            },
            warnings,
        };
        let (mut result, t_post) = timed(|| assemble_frame(frame, outcome, self.tau_iou));
        result.timing.t_postprocess = t_post;
        Ok(result)
    }

    /// Processes every frame on `workers` threads.
    pub fn run(&self, frames: &[FrameRecord], workers: usize) -> Result<RunOutcome> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .build()
            .map_err(|e| Error::Other(format!("thread pool: {e}")))?;
        let each: Vec<std::result::Result<FrameResult, FrameFailure>> = pool.install(|| {
            frames
                .par_iter()
                .map(|f| {
                    self.process_frame(f).map_err(|e| FrameFailure {
                        frame_id: f.frame_id.clone(),
                        error: e.to_string(),
                    })
                })
                .collect()
        });
        let mut out = RunOutcome::default();
        for r in each {
            match r {
                Ok(res) => {
                    out.order.push(Ok(out.results.len()));
                    out.results.push(res);
                }
                Err(fail) => {
                    log::warn!("frame {} failed: {}", fail.frame_id, fail.error);
                    out.order.push(Err(out.failures.len()));
                    out.failures.push(fail);
                }
            }
        }
        Ok(out)
    }
}
