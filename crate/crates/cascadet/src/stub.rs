//! Scripted verifier server for tests and local runs.
//!
//! Speaks just enough HTTP/1.1 for one request per connection. Every
//! request is counted, and the highest number of requests being served at
//! the same time is recorded so clients' concurrency caps can be checked.

use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use cascadet_core::quality::QualityFactors;

use crate::http::{AssessAnswer, AssessEnvelope, VerifyAnswer, VerifyEnvelope, ASSESS_PATH, VERIFY_PATH, WIRE_VERSION};

#[derive(Debug, Clone)]
pub struct StubScript {
    /// Model text returned for every verify request.
    pub raw_response: String,
    pub adverse: Option<bool>,
    pub quality: Option<QualityFactors>,
    /// The first this-many requests are answered with `fail_status`.
    pub fail_first: usize,
    pub fail_status: u16,
    /// Sleep before answering.
    pub delay: Duration,
    /// When set, requests without this bearer token get 401.
    pub token: Option<String>,
    /// Answer with a request id that does not match the request.
    pub wrong_request_id: bool,
}

impl Default for StubScript {
    fn default() -> Self {
        Self {
            raw_response: "<think>stub</think>\n<answer> [{\"Decision\": \"Yes\", \"Confidence\": 0.91}] </answer>".into(),
            adverse: None,
            quality: None,
            fail_first: 0,
            fail_status: 500,
            delay: Duration::ZERO,
            token: None,
            wrong_request_id: false,
        }
    }
}

#[derive(Debug, Default)]
pub struct StubStats {
    requests: AtomicUsize,
    verify_requests: AtomicUsize,
    failures_served: AtomicUsize,
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
}

impl StubStats {
    pub fn requests(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    pub fn verify_requests(&self) -> usize {
        self.verify_requests.load(Ordering::SeqCst)
    }

    pub fn failures_served(&self) -> usize {
        self.failures_served.load(Ordering::SeqCst)
    }

    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight.load(Ordering::SeqCst)
    }
}

pub struct StubServer {
    addr: SocketAddr,
    stats: Arc<StubStats>,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl StubServer {
    /// Binds `addr` (use port 0 for an ephemeral port) and starts serving.
    pub fn start(addr: &str, script: StubScript) -> io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let stats = Arc::new(StubStats::default());
        let stop = Arc::new(AtomicBool::new(false));
        let script = Arc::new(script);
        let accept = {
            let (stats, stop) = (stats.clone(), stop.clone());
            std::thread::spawn(move || {
                for conn in listener.incoming() {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(stream) = conn else { continue };
                    let (stats, script) = (stats.clone(), script.clone());
                    std::thread::spawn(move || {
                        if let Err(e) = serve(stream, &script, &stats) {
                            log::debug!("stub connection: {e}");
                        }
                    });
                }
            })
        };
        Ok(Self {
            addr,
            stats,
            stop,
            accept: Some(accept),
        })
    }

    pub fn endpoint(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn stats(&self) -> &StubStats {
        &self.stats
    }

    /// Blocks until the accept loop ends (it only ends through `Drop`).
    pub fn wait(mut self) {
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Wake the blocking accept.
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

struct Request {
    path: String,
    authorization: Option<String>,
    body: Vec<u8>,
}

fn read_request(stream: &TcpStream) -> io::Result<Request> {
    let mut reader = BufReader::new(stream);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    let mut parts = line.split_whitespace();
    let _method = parts.next();
    let path = parts.next().unwrap_or("").to_string();
    let mut length = 0usize;
    let mut authorization = None;
    loop {
        let mut h = String::new();
        if reader.read_line(&mut h)? == 0 || h == "\r\n" || h == "\n" {
            break;
        }
        if let Some((k, v)) = h.split_once(':') {
            let v = v.trim();
            match k.trim().to_ascii_lowercase().as_str() {
                "content-length" => length = v.parse().unwrap_or(0),
                "authorization" => authorization = Some(v.to_string()),
                _ => {}
            }
        }
    }
    let mut body = vec![0; length];
    reader.read_exact(&mut body)?;
    Ok(Request {
        path,
        authorization,
        body,
    })
}

fn respond(mut stream: &TcpStream, status: u16, body: &str) -> io::Result<()> {
    let reason = match status {
        200 => "OK",
        400 => "Bad Request",
        401 => "Unauthorized",
        404 => "Not Found",
        500 => "Internal Server Error",
        503 => "Service Unavailable",
        _ => "Status",
    };
    write!(
        stream,
        "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    )?;
    stream.flush()
}

fn answer(req: &Request, script: &StubScript, stats: &StubStats) -> (u16, String) {
    let n = stats.requests.fetch_add(1, Ordering::SeqCst);
    if req.path == VERIFY_PATH {
        stats.verify_requests.fetch_add(1, Ordering::SeqCst);
    }
    if n < script.fail_first {
        stats.failures_served.fetch_add(1, Ordering::SeqCst);
        return (script.fail_status, "{\"error\":\"scripted failure\"}".into());
    }
    if let Some(t) = &script.token {
        if req.authorization.as_deref() != Some(format!("Bearer {t}").as_str()) {
            return (401, "{\"error\":\"missing or wrong token\"}".into());
        }
    }
    let echo = |id: String| if script.wrong_request_id { format!("{id}-other") } else { id };
    match req.path.as_str() {
        VERIFY_PATH => match serde_json::from_slice::<VerifyEnvelope>(&req.body) {
            Ok(v) => {
                let a = VerifyAnswer {
                    version: WIRE_VERSION.into(),
                    request_id: echo(v.request_id),
                    raw_response: script.raw_response.clone(),
                    aleatoric: None,
                };
                (200, serde_json::to_string(&a).expect("serializable"))
            }
            Err(e) => (400, serde_json::json!({ "error": e.to_string() }).to_string()),
        },
        ASSESS_PATH => match serde_json::from_slice::<AssessEnvelope>(&req.body) {
            Ok(v) => {
                let a = AssessAnswer {
                    version: WIRE_VERSION.into(),
                    request_id: echo(v.request_id),
                    adverse: script.adverse,
                    quality: script.quality,
                };
                (200, serde_json::to_string(&a).expect("serializable"))
            }
            Err(e) => (400, serde_json::json!({ "error": e.to_string() }).to_string()),
        },
        _ => (404, "{\"error\":\"not found\"}".into()),
    }
}

fn serve(stream: TcpStream, script: &StubScript, stats: &StubStats) -> io::Result<()> {
    let req = read_request(&stream)?;
    let now = stats.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
    stats.max_in_flight.fetch_max(now, Ordering::SeqCst);
    if !script.delay.is_zero() {
        std::thread::sleep(script.delay);
    }
    let (status, body) = answer(&req, script, stats);
    // Leave the count before the client can see the answer and free its slot.
    stats.in_flight.fetch_sub(1, Ordering::SeqCst);
    respond(&stream, status, &body)
}
