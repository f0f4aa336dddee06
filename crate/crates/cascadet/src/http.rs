//! Remote verifier over HTTP.
//!
//! Requests and responses are JSON envelopes tagged with [`WIRE_VERSION`].
//! The model output travels as an opaque string and is handed to the
//! parser untouched. Connect failures and 5xx answers are retried with
//! exponential backoff; 4xx answers, timeouts and bad envelopes are not.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use cascadet_core::cascade::FrameRecord;
use cascadet_core::geometry::BoundingBox;
use cascadet_core::quality::QualityFactors;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::backends::{Assessment, BackendError, Capability, VerifierBackend, VerifyReply, VerifyRequest};
use crate::config::BackendSection;

pub const WIRE_VERSION: &str = "cascadet.v1";
pub const VERIFY_PATH: &str = "/v1/verify";
pub const ASSESS_PATH: &str = "/v1/assess";

fn corners(b: &BoundingBox) -> [f64; 4] {
    [b.x1(), b.y1(), b.x2(), b.y2()]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyEnvelope {
    pub version: String,
    pub request_id: String,
    pub frame_id: String,
    #[serde(default)]
    pub image_ref: Option<String>,
    pub image_width: f64,
    pub image_height: f64,
    pub candidate: [f64; 4],
    pub detector_confidence: f64,
    /// Candidate box scaled about its center.
    pub crop: [f64; 4],
    /// The scaled crop grown by the context factor; the server picks which
    /// of the two rectangles to show the model.
    pub expanded_crop: [f64; 4],
    pub scale: f64,
    pub prompt: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyAnswer {
    pub version: String,
    pub request_id: String,
    pub raw_response: String,
    #[serde(default)]
    pub aleatoric: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssessEnvelope {
    pub version: String,
    pub request_id: String,
    pub frame_id: String,
    #[serde(default)]
    pub image_ref: Option<String>,
    pub image_width: f64,
    pub image_height: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssessAnswer {
    pub version: String,
    pub request_id: String,
    #[serde(default)]
    pub adverse: Option<bool>,
    #[serde(default)]
    pub quality: Option<QualityFactors>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HttpSettings {
    /// Base URL, e.g. `http://127.0.0.1:8080`.
    pub endpoint: String,
    pub token: Option<String>,
    pub timeout: Duration,
    pub max_attempts: u32,
    pub backoff: Duration,
    pub backoff_factor: f64,
    pub max_in_flight: usize,
}

impl HttpSettings {
    /// Settings from the backend section; the token is read from the
    /// environment variable it names.
    pub fn from_config(b: &BackendSection) -> Self {
        Self {
            endpoint: b.endpoint.clone(),
            token: std::env::var(&b.token_env).ok().filter(|t| !t.is_empty()),
            timeout: Duration::from_millis(b.timeout_ms),
            max_attempts: b.max_attempts.max(1),
            backoff: Duration::from_millis(b.backoff_ms),
            backoff_factor: b.backoff_factor,
            max_in_flight: b.max_in_flight.max(1),
        }
    }
}

/// Counting semaphore. The guard frees its slot on drop, including when
/// the request unwinds.
#[derive(Debug)]
struct Slots {
    free: Mutex<usize>,
    cv: Condvar,
}

struct SlotGuard<'a>(&'a Slots);

impl Slots {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> SlotGuard<'_> {
        let mut free = self.free.lock().unwrap_or_else(|p| p.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|p| p.into_inner());
        }
        *free -= 1;
        SlotGuard(self)
    }
}

impl Drop for SlotGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|p| p.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

enum Attempt {
    Done(String),
    Retry(BackendError),
    Fail(BackendError),
}

pub struct HttpVerifier {
    agent: ureq::Agent,
    settings: HttpSettings,
    slots: Slots,
    next_id: AtomicU64,
}

impl HttpVerifier {
    pub fn new(settings: HttpSettings) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(settings.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            agent,
            slots: Slots::new(settings.max_in_flight.max(1)),
            settings,
            next_id: AtomicU64::new(1),
        }
    }

    pub fn settings(&self) -> &HttpSettings {
        &self.settings
    }

    fn request_id(&self, frame_id: &str) -> String {
        format!("{frame_id}#{}", self.next_id.fetch_add(1, Ordering::Relaxed))
    }

    fn attempt(&self, url: &str, body: &str, attempt: u32) -> Attempt {
        let _slot = self.slots.acquire();
        let mut req = self.agent.post(url).header("Content-Type", "application/json");
        if let Some(t) = &self.settings.token {
            req = req.header("Authorization", format!("Bearer {t}"));
        }
        match req.send(body) {
            Ok(mut resp) => {
                let status = resp.status().as_u16();
                if (200..300).contains(&status) {
                    match resp.body_mut().read_to_string() {
                        Ok(text) => Attempt::Done(text),
                        Err(ureq::Error::Timeout(_)) => Attempt::Fail(BackendError::Timeout { attempts: attempt }),
                        Err(e) => Attempt::Retry(BackendError::Transport {
                            attempts: attempt,
                            message: e.to_string(),
                        }),
                    }
                } else if status >= 500 {
                    Attempt::Retry(BackendError::Status { status, attempts: attempt })
                } else {
                    Attempt::Fail(BackendError::Status { status, attempts: attempt })
                }
            }
            Err(ureq::Error::Timeout(_)) => Attempt::Fail(BackendError::Timeout { attempts: attempt }),
            Err(e @ (ureq::Error::Io(_) | ureq::Error::ConnectionFailed | ureq::Error::HostNotFound)) => {
                Attempt::Retry(BackendError::Transport {
                    attempts: attempt,
                    message: e.to_string(),
                })
            }
            Err(e) => Attempt::Fail(BackendError::Transport {
                attempts: attempt,
                message: e.to_string(),
            }),
        }
    }

    /// POSTs `body` with retries. Returns the response text and the number
    /// of attempts made.
    fn post(&self, path: &str, body: &str) -> Result<(String, u32), BackendError> {
        let url = format!("{}{path}", self.settings.endpoint.trim_end_matches('/'));
        let mut delay = self.settings.backoff;
        let max = self.settings.max_attempts.max(1);
        for attempt in 1..=max {
            match self.attempt(&url, body, attempt) {
                Attempt::Done(text) => {
                    if attempt > 1 {
                        log::info!("{path}: succeeded after {} retries", attempt - 1);
                    }
                    return Ok((text, attempt));
                }
                Attempt::Fail(e) => return Err(e),
                Attempt::Retry(e) if attempt == max => return Err(e),
                Attempt::Retry(e) => {
                    log::warn!("{path}: attempt {attempt} failed ({e}); retrying in {delay:?}");
                    std::thread::sleep(delay);
                    delay = delay.mul_f64(self.settings.backoff_factor);
                }
            }
        }
        unreachable!("the loop returns on its last attempt")
    }

    fn exchange<Q: Serialize, A: DeserializeOwned>(
        &self,
        path: &str,
        request: &Q,
        request_id: &str,
        reply_id: impl Fn(&A) -> (&str, &str),
    ) -> Result<(A, u32), BackendError> {
        let body = serde_json::to_string(request).expect("envelopes always serialize");
        let (text, attempts) = self.post(path, &body)?;
        let answer: A = serde_json::from_str(&text).map_err(|e| BackendError::Envelope {
            attempts,
            message: e.to_string(),
        })?;
        let (version, id) = reply_id(&answer);
        if version != WIRE_VERSION {
            return Err(BackendError::Envelope {
                attempts,
                message: format!("version {version:?}, expected {WIRE_VERSION:?}"),
            });
        }
        if id != request_id {
            return Err(BackendError::Envelope {
                attempts,
                message: format!("request id {id:?} does not echo {request_id:?}"),
            });
        }
        Ok((answer, attempts))
    }
}

impl VerifierBackend for HttpVerifier {
    fn capability(&self) -> Capability {
        Capability {
            name: format!("http-verifier({})", self.settings.endpoint),
            version: WIRE_VERSION.into(),
        }
    }

    fn assess_global(&self, frame: &FrameRecord) -> Result<Assessment, BackendError> {
        let request_id = self.request_id(&frame.frame_id);
        let req = AssessEnvelope {
            version: WIRE_VERSION.into(),
            request_id: request_id.clone(),
            frame_id: frame.frame_id.clone(),
            image_ref: frame.image_ref.clone(),
            image_width: frame.image_width,
            image_height: frame.image_height,
        };
        let (a, _) = self.exchange(ASSESS_PATH, &req, &request_id, |a: &AssessAnswer| {
            (a.version.as_str(), a.request_id.as_str())
        })?;
        Ok(Assessment {
            adverse: a.adverse,
            quality: a.quality,
        })
    }

    fn verify(&self, r: &VerifyRequest<'_>) -> Result<VerifyReply, BackendError> {
        let request_id = self.request_id(&r.frame.frame_id);
        let req = VerifyEnvelope {
            version: WIRE_VERSION.into(),
            request_id: request_id.clone(),
            frame_id: r.frame.frame_id.clone(),
            image_ref: r.frame.image_ref.clone(),
            image_width: r.frame.image_width,
            image_height: r.frame.image_height,
            candidate: corners(r.candidate.bbox()),
            detector_confidence: r.candidate.confidence(),
            crop: corners(&r.crop),
            expanded_crop: corners(&r.expanded_crop),
            scale: r.scale,
            prompt: r.prompt.to_string(),
        };
        let (a, attempts) = self.exchange(VERIFY_PATH, &req, &request_id, |a: &VerifyAnswer| {
            (a.version.as_str(), a.request_id.as_str())
        })?;
        Ok(VerifyReply {
            raw_response: a.raw_response,
            attempts,
            aleatoric: a.aleatoric.filter(|v| v.is_finite() && *v >= 0.0),
        })
    }
}
