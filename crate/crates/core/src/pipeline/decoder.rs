//! Decoder boundary.
//!
//! A request carries the prompt, the query embedding and one embedding per
//! prompt caption; the response carries the generated caption. Transports:
//!
//! * `top1`: builtin, answers with the best retrieved caption.
//! * `echo`: builtin, answers with the prompt itself.
//! * `exec:<program> [args...]`: a child process speaking length-prefixed
//!   JSON frames (u32 big-endian byte length, then the UTF-8 JSON body) on
//!   stdin/stdout. Responses may arrive in any order; they are matched on
//!   `request_id`.
//! * `http://host:port[/base]`: `POST {base}/generate` with the request as
//!   the JSON body, expecting the response as JSON.
//!
//! Requests are never retried.

use std::collections::HashMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::mpsc::{self, Sender};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

const MAX_FRAME_BYTES: usize = 64 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderRequest {
    pub prompt: String,
    pub input_embedding: Vec<f64>,
    pub neighbor_embeddings: Vec<Vec<f64>>,
    pub request_id: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderResponse {
    pub request_id: u64,
    pub caption: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DecoderError {
    #[error("request {request_id}: decoder timed out after {after_ms} ms")]
    Timeout { request_id: u64, after_ms: u64 },
    #[error("request {request_id}: protocol error: {reason}")]
    ProtocolError { request_id: u64, reason: String },
    #[error("request {request_id}: decoder exited with status {code:?}")]
    NonzeroExit { request_id: u64, code: Option<i32> },
}

impl DecoderError {
    pub fn request_id(&self) -> u64 {
        match self {
            DecoderError::Timeout { request_id, .. }
            | DecoderError::ProtocolError { request_id, .. }
            | DecoderError::NonzeroExit { request_id, .. } => *request_id,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            DecoderError::Timeout { .. } => "timeout",
            DecoderError::ProtocolError { .. } => "protocol_error",
            DecoderError::NonzeroExit { .. } => "nonzero_exit",
        }
    }

    fn protocol(request_id: u64, reason: impl Into<String>) -> Self {
        DecoderError::ProtocolError {
            request_id,
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum DecoderEndpoint {
    #[default]
    Top1,
    Echo,
    Subprocess(Vec<String>),
    Http(String),
}

impl std::str::FromStr for DecoderEndpoint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "top1" => Ok(Self::Top1),
            "echo" => Ok(Self::Echo),
            _ if s.starts_with("http://") || s.starts_with("https://") => {
                Ok(Self::Http(s.trim_end_matches('/').to_string()))
            }
            _ => match s.strip_prefix("exec:") {
                Some(cmd) => {
                    let argv: Vec<String> = cmd.split_whitespace().map(str::to_owned).collect();
                    if argv.is_empty() {
                        Err(Error::Config("exec: decoder needs a program".into()))
                    } else {
                        Ok(Self::Subprocess(argv))
                    }
                }
                None => Err(Error::Config(format!(
                    "unknown decoder endpoint {s:?} (expected top1, echo, exec:<cmd> or http://...)"
                ))),
            },
        }
    }
}

impl std::fmt::Display for DecoderEndpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Top1 => f.write_str("top1"),
            Self::Echo => f.write_str("echo"),
            Self::Subprocess(argv) => write!(f, "exec:{}", argv.join(" ")),
            Self::Http(url) => f.write_str(url),
        }
    }
}

impl Serialize for DecoderEndpoint {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for DecoderEndpoint {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Something that turns a request into a caption.
///
/// `retrieved` holds the selected captions best first, independent of the
/// prompt ordering policy; only the builtins look at it.
pub trait Decoder: Send + Sync {
    fn generate(
        &self,
        request: &DecoderRequest,
        retrieved: &[String],
    ) -> std::result::Result<DecoderResponse, DecoderError>;
}

pub struct Top1Decoder;

impl Decoder for Top1Decoder {
    fn generate(
        &self,
        request: &DecoderRequest,
        retrieved: &[String],
    ) -> std::result::Result<DecoderResponse, DecoderError> {
        let caption = retrieved
            .first()
            .ok_or_else(|| DecoderError::protocol(request.request_id, "no retrieved captions"))?;
        Ok(DecoderResponse {
            request_id: request.request_id,
            caption: caption.clone(),
        })
    }
}

pub struct EchoDecoder;

impl Decoder for EchoDecoder {
    fn generate(
        &self,
        request: &DecoderRequest,
        _retrieved: &[String],
    ) -> std::result::Result<DecoderResponse, DecoderError> {
        Ok(DecoderResponse {
            request_id: request.request_id,
            caption: request.prompt.clone(),
        })
    }
}

fn check_response(
    request_id: u64,
    resp: DecoderResponse,
) -> std::result::Result<DecoderResponse, DecoderError> {
    if resp.request_id != request_id {
        return Err(DecoderError::protocol(
            request_id,
            format!("response carries request_id {}", resp.request_id),
        ));
    }
    if resp.caption.trim().is_empty() {
        return Err(DecoderError::protocol(request_id, "empty caption"));
    }
    Ok(resp)
}

pub fn write_frame<W: Write>(w: &mut W, body: &[u8]) -> std::io::Result<()> {
    let len = u32::try_from(body.len())
        .map_err(|_| std::io::Error::new(std::io::ErrorKind::InvalidInput, "frame too large"))?;
    w.write_all(&len.to_be_bytes())?;
    w.write_all(body)?;
    w.flush()
}

/// Read one frame; `Ok(None)` on a clean end of stream before a length prefix.
pub fn read_frame<R: Read>(r: &mut R) -> std::io::Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut len[got..])? {
            0 if got == 0 => return Ok(None),
            0 => {
                return Err(std::io::Error::new(
                    std::io::ErrorKind::UnexpectedEof,
                    "stream ended inside a frame length",
                ))
            }
            n => got += n,
        }
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME_BYTES {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            format!("frame of {len} bytes exceeds limit"),
        ));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    Ok(Some(body))
}

type Reply = std::result::Result<DecoderResponse, Failure>;

/// Why the subprocess can no longer answer.
#[derive(Debug, Clone)]
enum Failure {
    Exited(Option<i32>),
    Protocol(String),
}

impl Failure {
    fn for_request(&self, request_id: u64) -> DecoderError {
        match self {
            Failure::Exited(code) => DecoderError::NonzeroExit {
                request_id,
                code: *code,
            },
            Failure::Protocol(reason) => DecoderError::protocol(request_id, reason.clone()),
        }
    }
}

#[derive(Default)]
struct Shared {
    pending: HashMap<u64, Sender<Reply>>,
    failed: Option<Failure>,
}

pub struct SubprocessDecoder {
    child: Arc<Mutex<Child>>,
    stdin: Mutex<Option<BufWriter<ChildStdin>>>,
    shared: Arc<Mutex<Shared>>,
    timeout: Duration,
    reader: Option<JoinHandle<()>>,
}

impl SubprocessDecoder {
    pub fn spawn(argv: &[String], timeout: Duration) -> Result<Self> {
        let (program, args) = argv
            .split_first()
            .ok_or_else(|| Error::Config("empty decoder command".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::io(format!("spawning decoder {program}"), e))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let child = Arc::new(Mutex::new(child));
        let shared = Arc::new(Mutex::new(Shared::default()));
        let reader = {
            let (child, shared) = (Arc::clone(&child), Arc::clone(&shared));
            std::thread::Builder::new()
                .name("decoder-reader".into())
                .spawn(move || read_responses(stdout, &child, &shared))
                .map_err(|e| Error::io("starting decoder reader", e))?
        };
        Ok(Self {
            child,
            stdin: Mutex::new(Some(BufWriter::new(stdin))),
            shared,
            timeout,
            reader: Some(reader),
        })
    }
}

fn read_responses(stdout: ChildStdout, child: &Mutex<Child>, shared: &Mutex<Shared>) {
    let mut r = BufReader::new(stdout);
    let failure = loop {
        let frame = match read_frame(&mut r) {
            Ok(Some(f)) => f,
            Ok(None) => break exit_failure(child),
            Err(e) => break Failure::Protocol(format!("bad frame from decoder: {e}")),
        };
        let resp: DecoderResponse = match serde_json::from_slice(&frame) {
            Ok(r) => r,
            Err(e) => break Failure::Protocol(format!("malformed response frame: {e}")),
        };
        let tx = shared
            .lock()
            .expect("decoder state")
            .pending
            .remove(&resp.request_id);
        match tx {
            Some(tx) => {
                let _ = tx.send(Ok(resp));
            }
            None => log::warn!(
                "decoder answered unknown or expired request {}",
                resp.request_id
            ),
        }
    };
    let mut s = shared.lock().expect("decoder state");
    for (_, tx) in s.pending.drain() {
        let _ = tx.send(Err(failure.clone()));
    }
    s.failed = Some(failure);
}

fn exit_failure(child: &Mutex<Child>) -> Failure {
    // stdout closed; give the process a moment to report its status
    for _ in 0..50 {
        if let Ok(Some(status)) = child.lock().expect("child handle").try_wait() {
            return if status.success() {
                Failure::Protocol("decoder closed its output".into())
            } else {
                Failure::Exited(status.code())
            };
        }
        std::thread::sleep(Duration::from_millis(10));
    }
    Failure::Protocol("decoder closed its output".into())
}

impl Decoder for SubprocessDecoder {
    fn generate(
        &self,
        request: &DecoderRequest,
        _retrieved: &[String],
    ) -> std::result::Result<DecoderResponse, DecoderError> {
        let id = request.request_id;
        let (tx, rx) = mpsc::channel();
        {
            let mut s = self.shared.lock().expect("decoder state");
            if let Some(f) = &s.failed {
                return Err(f.for_request(id));
            }
            if s.pending.insert(id, tx).is_some() {
                return Err(DecoderError::protocol(id, "request_id already in flight"));
            }
        }
        let body = serde_json::to_vec(request)
            .map_err(|e| DecoderError::protocol(id, format!("encoding request: {e}")))?;
        let written = {
            let mut stdin = self.stdin.lock().expect("decoder stdin");
            match stdin.as_mut() {
                Some(w) => write_frame(w, &body),
                None => Err(std::io::ErrorKind::BrokenPipe.into()),
            }
        };
        if written.is_err() {
            // the reader thread reports the exit status once stdout closes
            match rx.recv_timeout(self.timeout) {
                Ok(Err(f)) => return Err(f.for_request(id)),
                _ => {
                    self.shared
                        .lock()
                        .expect("decoder state")
                        .pending
                        .remove(&id);
                    return Err(DecoderError::protocol(id, "could not write to decoder"));
                }
            }
        }
        match rx.recv_timeout(self.timeout) {
            Ok(Ok(resp)) => check_response(id, resp),
            Ok(Err(f)) => Err(f.for_request(id)),
            Err(_) => {
                self.shared
                    .lock()
                    .expect("decoder state")
                    .pending
                    .remove(&id);
                Err(DecoderError::Timeout {
                    request_id: id,
                    after_ms: self.timeout.as_millis() as u64,
                })
            }
        }
    }
}

impl Drop for SubprocessDecoder {
    fn drop(&mut self) {
        // closing stdin asks the decoder to exit
        if let Ok(mut stdin) = self.stdin.lock() {
            stdin.take();
        }
        let deadline = std::time::Instant::now() + Duration::from_secs(2);
        loop {
            let mut child = self.child.lock().expect("child handle");
            match child.try_wait() {
                Ok(Some(_)) => break,
                Ok(None) if std::time::Instant::now() < deadline => {
                    drop(child);
                    std::thread::sleep(Duration::from_millis(10));
                }
                _ => {
                    let _ = child.kill();
                    let _ = child.wait();
                    break;
                }
            }
        }
        if let Some(h) = self.reader.take() {
            let _ = h.join();
        }
    }
}

pub struct HttpDecoder {
    url: String,
    agent: ureq::Agent,
    timeout: Duration,
}

impl HttpDecoder {
    pub fn new(base: &str, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self {
            url: format!("{}/generate", base.trim_end_matches('/')),
            agent,
            timeout,
        }
    }
}

impl Decoder for HttpDecoder {
    fn generate(
        &self,
        request: &DecoderRequest,
        _retrieved: &[String],
    ) -> std::result::Result<DecoderResponse, DecoderError> {
        let id = request.request_id;
        let mut resp = match self.agent.post(&self.url).send_json(request) {
            Ok(r) => r,
            Err(ureq::Error::Timeout(_)) => {
                return Err(DecoderError::Timeout {
                    request_id: id,
                    after_ms: self.timeout.as_millis() as u64,
                })
            }
            Err(ureq::Error::StatusCode(code)) => {
                return Err(DecoderError::protocol(id, format!("HTTP status {code}")))
            }
            Err(e) => return Err(DecoderError::protocol(id, format!("HTTP transport: {e}"))),
        };
        let body: DecoderResponse = match resp.body_mut().read_json() {
            Ok(b) => b,
            Err(ureq::Error::Timeout(_)) => {
                return Err(DecoderError::Timeout {
                    request_id: id,
                    after_ms: self.timeout.as_millis() as u64,
                })
            }
            Err(e) => {
                return Err(DecoderError::protocol(
                    id,
                    format!("bad response body: {e}"),
                ))
            }
        };
        check_response(id, body)
    }
}

/// Instantiate the transport for `endpoint`.
pub fn connect(endpoint: &DecoderEndpoint, timeout: Duration) -> Result<Box<dyn Decoder>> {
    Ok(match endpoint {
        DecoderEndpoint::Top1 => Box::new(Top1Decoder),
        DecoderEndpoint::Echo => Box::new(EchoDecoder),
        DecoderEndpoint::Subprocess(argv) => Box::new(SubprocessDecoder::spawn(argv, timeout)?),
        DecoderEndpoint::Http(url) => Box::new(HttpDecoder::new(url, timeout)),
    })
}
