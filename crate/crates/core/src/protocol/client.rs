use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::frame::{
    EmbeddingsResponse, EncodeImageRequest, EncodeTextRequest, ErrorPayload, Frame, Op, ScoreRequest, ScoreResponse,
    Tensor, WirePrompt,
};
use crate::error::{Error, Result};
use crate::objective::{validate_batch, BackendInfo, CompiledPrompts, Embedding, ScoreReport, ScoringBackend};
use crate::raster::ImageTensor;

/// Environment variable holding the service endpoint.
pub const SERVICE_ADDR_ENV: &str = "VECSKETCH_SERVICE_ADDR";

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(60);

/// Where the scoring service lives.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Endpoint {
    /// `host:port`.
    Tcp(String),
    /// A child process speaking the protocol on stdin/stdout.
    Subprocess { command: String, args: Vec<String> },
}

impl Endpoint {
    /// `host:port`, `tcp://host:port`, or `stdio:command arg...`.
    pub fn parse(spec: &str) -> Result<Self> {
        let spec = spec.trim();
        if let Some(rest) = spec.strip_prefix("stdio:") {
            let mut parts = rest.split_whitespace().map(str::to_owned);
            let command = parts.next().ok_or_else(|| Error::config("stdio endpoint needs a command"))?;
            return Ok(Endpoint::Subprocess { command, args: parts.collect() });
        }
        let addr = spec.strip_prefix("tcp://").unwrap_or(spec);
        if addr.rsplit_once(':').is_none_or(|(host, port)| host.is_empty() || port.parse::<u16>().is_err()) {
            return Err(Error::config(format!("service address {spec:?} is not host:port or stdio:command")));
        }
        Ok(Endpoint::Tcp(addr.to_owned()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConnectOptions {
    /// Per-request response deadline.
    pub timeout: Duration,
    /// Reject services whose embedding dimension differs.
    pub expected_dim: Option<usize>,
}

impl Default for ConnectOptions {
    fn default() -> Self {
        Self { timeout: DEFAULT_TIMEOUT, expected_dim: None }
    }
}

fn transport(e: impl std::fmt::Display) -> Error {
    Error::Transport(e.to_string())
}

/// Client side of the protocol; one request in flight at a time.
pub struct ServiceBackend {
    writer: Box<dyn Write + Send>,
    lines: Receiver<io::Result<String>>,
    next_id: u64,
    timeout: Duration,
    info: BackendInfo,
    child: Option<Child>,
}

impl std::fmt::Debug for ServiceBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ServiceBackend").field("info", &self.info).field("next_id", &self.next_id).finish()
    }
}

impl ServiceBackend {
    pub fn connect(endpoint: &Endpoint, options: ConnectOptions) -> Result<Self> {
        match endpoint {
            Endpoint::Tcp(addr) => {
                let addrs: Vec<_> = addr.to_socket_addrs().map_err(transport)?.collect();
                let mut last = None;
                for a in addrs {
                    match TcpStream::connect_timeout(&a, options.timeout) {
                        Ok(stream) => {
                            let _ = stream.set_nodelay(true);
                            let read_half = stream.try_clone().map_err(transport)?;
                            return Self::from_streams(read_half, stream, options);
                        }
                        Err(e) => last = Some(e),
                    }
                }
                Err(match last {
                    Some(e) => Error::Transport(format!("cannot connect to {addr}: {e}")),
                    None => Error::Transport(format!("{addr} resolved to no addresses")),
                })
            }
            Endpoint::Subprocess { command, args } => {
                let mut child = Command::new(command)
                    .args(args)
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .stderr(Stdio::inherit())
                    .spawn()
                    .map_err(|e| Error::Transport(format!("cannot launch {command}: {e}")))?;
                let stdin = child.stdin.take().expect("piped stdin");
                let stdout = child.stdout.take().expect("piped stdout");
                let mut backend = Self::from_streams(stdout, stdin, options).inspect_err(|_| {
                    let _ = child.kill();
                    let _ = child.wait();
                })?;
                backend.child = Some(child);
                Ok(backend)
            }
        }
    }

    /// Runs the info handshake over an already open byte stream pair.
    pub fn from_streams(
        reader: impl Read + Send + 'static,
        writer: impl Write + Send + 'static,
        options: ConnectOptions,
    ) -> Result<Self> {
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for line in BufReader::new(reader).lines() {
                let stop = line.is_err();
                if tx.send(line).is_err() || stop {
                    break;
                }
            }
        });
        let mut backend = ServiceBackend {
            writer: Box::new(writer),
            lines: rx,
            next_id: 1,
            timeout: options.timeout,
            info: BackendInfo { dim: 0, model: String::new() },
            child: None,
        };
        let (id, payload) = backend.request(Op::Info, Value::Object(Default::default()))?;
        backend.info = decode(id, payload)?;
        if let Some(dim) = options.expected_dim {
            if backend.info.dim != dim {
                return Err(Error::config(format!(
                    "service {:?} reports embedding dimension {}, expected {dim}",
                    backend.info.model, backend.info.dim
                )));
            }
        }
        Ok(backend)
    }

    /// Sends a debug echo request and returns the echoed payload.
    pub fn echo(&mut self, payload: Value) -> Result<Value> {
        Ok(self.request(Op::Echo, payload)?.1)
    }

    /// Id the next request will carry.
    pub fn next_id(&self) -> u64 {
        self.next_id
    }

    fn request(&mut self, op: Op, payload: Value) -> Result<(u64, Value)> {
        let id = self.next_id;
        self.next_id += 1;
        let mut line = serde_json::to_vec(&Frame { op, id, payload }).expect("frames serialize");
        line.push(b'\n');
        self.writer.write_all(&line).map_err(transport)?;
        self.writer.flush().map_err(transport)?;
        loop {
            let line = match self.lines.recv_timeout(self.timeout) {
                Ok(Ok(line)) => line,
                Ok(Err(e)) => return Err(transport(e)),
                Err(RecvTimeoutError::Timeout) => {
                    return Err(Error::Transport(format!("request {id} timed out after {:?}", self.timeout)))
                }
                Err(RecvTimeoutError::Disconnected) => return Err(Error::Transport("connection closed".into())),
            };
            if line.trim().is_empty() {
                continue;
            }
            let frame: Frame = match serde_json::from_str(&line) {
                Ok(f) => f,
                Err(e) => {
                    let bad = serde_json::from_str::<Value>(&line).ok().and_then(|v| v.get("id")?.as_u64());
                    return Err(Error::Protocol { id: bad.unwrap_or(id), message: format!("malformed response: {e}") });
                }
            };
            // Late answer to a request that already timed out.
            if frame.id < id {
                continue;
            }
            if frame.id > id {
                return Err(Error::Protocol {
                    id: frame.id,
                    message: format!("response to unsent request while awaiting {id}"),
                });
            }
            return match frame.op {
                Op::Error => {
                    let err: ErrorPayload = decode(id, frame.payload)?;
                    Err(Error::Service(err.message))
                }
                got if got == op => Ok((id, frame.payload)),
                got => Err(Error::Protocol { id, message: format!("expected {op:?} response, got {got:?}") }),
            };
        }
    }

    fn embeddings(&self, id: u64, payload: Value, expected: usize) -> Result<Vec<Embedding>> {
        let resp: EmbeddingsResponse = decode(id, payload)?;
        let rows = resp.embeddings.to_rows().map_err(|message| Error::Protocol { id, message })?;
        if rows.len() != expected || rows.iter().any(|r| r.len() != self.info.dim) {
            return Err(Error::Protocol {
                id,
                message: format!(
                    "expected {expected} embeddings of dimension {}, got shape {:?}",
                    self.info.dim, resp.embeddings.shape
                ),
            });
        }
        rows.into_iter().map(Embedding::normalized).collect()
    }
}

fn decode<T: DeserializeOwned>(id: u64, payload: Value) -> Result<T> {
    serde_json::from_value(payload).map_err(|e| Error::Protocol { id, message: format!("bad response payload: {e}") })
}

fn to_value<T: Serialize>(v: T) -> Value {
    serde_json::to_value(v).expect("payload types serialize")
}

impl ScoringBackend for ServiceBackend {
    fn info(&self) -> BackendInfo {
        self.info.clone()
    }

    fn encode_text(&mut self, texts: &[String]) -> Result<Vec<Embedding>> {
        let (id, payload) = self.request(Op::EncodeText, to_value(EncodeTextRequest { texts: texts.to_vec() }))?;
        self.embeddings(id, payload, texts.len())
    }

    fn encode_images(&mut self, images: &[ImageTensor]) -> Result<Vec<Embedding>> {
        validate_batch(images)?;
        let req = EncodeImageRequest { images: Tensor::from_images(images) };
        let (id, payload) = self.request(Op::EncodeImage, to_value(req))?;
        self.embeddings(id, payload, images.len())
    }

    fn score_images(
        &mut self,
        batch: &[ImageTensor],
        prompts: &CompiledPrompts,
    ) -> Result<(ScoreReport, Vec<ImageTensor>)> {
        validate_batch(batch)?;
        let rows: Vec<&[f64]> = prompts.prompts.iter().map(|p| p.embedding.as_slice()).collect();
        let req = ScoreRequest {
            images: Tensor::from_images(batch),
            prompts: prompts
                .prompts
                .iter()
                .map(|p| WirePrompt { text: p.text.clone(), weight: p.weight, polarity: p.polarity })
                .collect(),
            embeddings: Tensor::from_rows(&rows),
            negative_scale: prompts.negative_scale,
        };
        let (id, payload) = self.request(Op::ScoreImages, to_value(req))?;
        let resp: ScoreResponse = decode(id, payload)?;
        let sent = Tensor::from_images(batch).shape;
        if resp.grad.shape != sent {
            return Err(Error::Protocol {
                id,
                message: format!("gradient shape {:?} does not match batch shape {sent:?}", resp.grad.shape),
            });
        }
        if !resp.loss.is_finite() {
            return Err(Error::Numeric(format!("service returned non-finite loss {}", resp.loss)));
        }
        let grads = resp.grad.to_images().map_err(|message| Error::Protocol { id, message })?;
        let report =
            ScoreReport { loss: resp.loss, loss_mean: resp.loss_mean, copies: resp.copies, prompts: resp.prompts };
        Ok((report, grads))
    }
}

impl Drop for ServiceBackend {
    fn drop(&mut self) {
        if let Some(child) = &mut self.child {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}
