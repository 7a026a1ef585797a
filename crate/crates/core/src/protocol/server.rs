use std::io::{self, BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener};
use std::thread::JoinHandle;

use serde::de::DeserializeOwned;
use serde_json::Value;

use super::frame::{
    EmbeddingsResponse, EncodeImageRequest, EncodeTextRequest, Frame, Op, ScoreRequest, ScoreResponse, Tensor,
};
use crate::objective::{CompiledPrompt, CompiledPrompts, Embedding, ScoringBackend};

fn parse<T: DeserializeOwned>(payload: Value) -> Result<T, String> {
    serde_json::from_value(payload).map_err(|e| format!("bad request payload: {e}"))
}

fn to_value<T: serde::Serialize>(v: T) -> Value {
    serde_json::to_value(v).expect("payload types serialize")
}

fn embeddings_payload(embeddings: &[Embedding]) -> Value {
    let rows: Vec<&[f64]> = embeddings.iter().map(|e| e.as_slice()).collect();
    to_value(EmbeddingsResponse { embeddings: Tensor::from_rows(&rows) })
}

fn dispatch(backend: &mut dyn ScoringBackend, op: Op, payload: Value) -> Result<Value, String> {
    match op {
        Op::Info => Ok(to_value(backend.info())),
        Op::Echo => Ok(payload),
        Op::EncodeText => {
            let req: EncodeTextRequest = parse(payload)?;
            let embs = backend.encode_text(&req.texts).map_err(|e| e.to_string())?;
            Ok(embeddings_payload(&embs))
        }
        Op::EncodeImage => {
            let req: EncodeImageRequest = parse(payload)?;
            let images = req.images.to_images()?;
            let embs = backend.encode_images(&images).map_err(|e| e.to_string())?;
            Ok(embeddings_payload(&embs))
        }
        Op::ScoreImages => {
            let req: ScoreRequest = parse(payload)?;
            let images = req.images.to_images()?;
            let rows = req.embeddings.to_rows()?;
            if rows.len() != req.prompts.len() {
                return Err(format!("{} prompts but {} embeddings", req.prompts.len(), rows.len()));
            }
            let prompts = req
                .prompts
                .into_iter()
                .zip(rows)
                .map(|(p, row)| {
                    let embedding = Embedding::normalized(row).map_err(|e| e.to_string())?;
                    Ok(CompiledPrompt { text: p.text, weight: p.weight, polarity: p.polarity, embedding })
                })
                .collect::<Result<Vec<_>, String>>()?;
            let compiled = CompiledPrompts { prompts, negative_scale: req.negative_scale };
            let (report, grads) = backend.score_images(&images, &compiled).map_err(|e| e.to_string())?;
            Ok(to_value(ScoreResponse {
                loss: report.loss,
                loss_mean: report.loss_mean,
                copies: report.copies,
                prompts: report.prompts,
                grad: Tensor::from_images(&grads),
            }))
        }
        Op::Error => Err("error is a response-only op".into()),
    }
}

/// The response frame for one request line. Failures become error frames.
pub fn handle_line(backend: &mut dyn ScoringBackend, line: &str) -> Frame {
    let frame: Frame = match serde_json::from_str(line) {
        Ok(f) => f,
        Err(e) => {
            let id = serde_json::from_str::<Value>(line).ok().and_then(|v| v.get("id")?.as_u64()).unwrap_or(0);
            return Frame::error(id, format!("malformed request: {e}"));
        }
    };
    match dispatch(backend, frame.op, frame.payload) {
        Ok(payload) => Frame { op: frame.op, id: frame.id, payload },
        Err(message) => Frame::error(frame.id, message),
    }
}

/// Answers request lines from `reader` until end of input.
pub fn serve(backend: &mut dyn ScoringBackend, reader: impl BufRead, mut writer: impl Write) -> io::Result<()> {
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let response = handle_line(backend, &line);
        serde_json::to_writer(&mut writer, &response)?;
        writer.write_all(b"\n")?;
        writer.flush()?;
    }
    Ok(())
}

/// A server on an ephemeral loopback port, answering one connection at a
/// time on a background thread.
pub struct LoopbackServer {
    pub addr: SocketAddr,
    pub handle: JoinHandle<()>,
}

pub fn spawn_loopback(mut backend: Box<dyn ScoringBackend>) -> io::Result<LoopbackServer> {
    let listener = TcpListener::bind(("127.0.0.1", 0))?;
    let addr = listener.local_addr()?;
    let handle = std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(stream) = stream else { continue };
            let Ok(read_half) = stream.try_clone() else { continue };
            // A dropped client ends its session; keep accepting.
            let _ = serve(backend.as_mut(), BufReader::new(read_half), stream);
        }
    });
    Ok(LoopbackServer { addr, handle })
}
