//! Line-delimited JSON protocol for an out-of-process scoring service.
//!
//! Each line is one [`Frame`] `{"op", "id", "payload"}`. Tensors travel as
//! base64 of little-endian `f32` with an explicit shape. The client sends raw
//! RGB in [0, 1]; any model-specific normalization happens in the service.
//! The full format is described in `docs/protocol.md`.

mod client;
mod frame;
mod server;

pub use client::{ConnectOptions, Endpoint, ServiceBackend, DEFAULT_TIMEOUT, SERVICE_ADDR_ENV};
pub use frame::{
    EmbeddingsResponse, EncodeImageRequest, EncodeTextRequest, ErrorPayload, Frame, InfoPayload, Op, ScoreRequest,
    ScoreResponse, Tensor, WirePrompt,
};
pub use server::{handle_line, serve, spawn_loopback, LoopbackServer};
