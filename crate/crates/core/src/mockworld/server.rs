use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;

use serde_json::{json, Value};
use tiny_http::{Header, Method, Request, Response, Server};

use super::{MockEmbedder, MockVlm};
use crate::embedstore::{EmbedInput, Embedder};
use crate::error::{Error, Result};
use crate::inference::{from_messages, ChatModel};

/// The mock model and embedder behind the same HTTP schema as real
/// endpoints: `POST /v1/chat/completions`, `POST /v1/embeddings`,
/// `GET /health`.
pub struct MockServer {
    server: Arc<Server>,
    workers: Vec<JoinHandle<()>>,
    addr: SocketAddr,
}

struct Handlers {
    vlm: MockVlm,
    embedder: MockEmbedder,
}

fn json_response(status: u16, body: &Value) -> Response<std::io::Cursor<Vec<u8>>> {
    Response::from_data(serde_json::to_vec(body).unwrap())
        .with_status_code(status)
        .with_header(Header::from_bytes("Content-Type", "application/json").unwrap())
}

fn error_status(e: &Error) -> u16 {
    match e {
        Error::MalformedRequest(_) | Error::InvalidArgument(_) | Error::Json(_) => 400,
        _ => 500,
    }
}

impl Handlers {
    fn chat(&self, body: &Value) -> Result<Value> {
        let messages = body
            .get("messages")
            .ok_or_else(|| Error::MalformedRequest("missing messages".into()))?;
        let prompt = from_messages(messages)?;
        let max_tokens = body.get("max_tokens").and_then(Value::as_u64).unwrap_or(512) as u32;
        let temperature = body.get("temperature").and_then(Value::as_f64).unwrap_or(0.0);
        let r = self.vlm.complete(&prompt, temperature, max_tokens)?;
        Ok(json!({
            "object": "chat.completion",
            "model": self.vlm.model(),
            "choices": [{
                "index": 0,
                "message": {"role": "assistant", "content": r.text},
                "finish_reason": r.finish_reason,
            }],
            "usage": {
                "prompt_tokens": r.prompt_tokens,
                "completion_tokens": r.completion_tokens,
                "total_tokens": r.prompt_tokens + r.completion_tokens,
            },
        }))
    }

    fn embed(&self, body: &Value) -> Result<Value> {
        let input = match body.get("input") {
            Some(Value::String(s)) => EmbedInput::Text(s),
            Some(v) => EmbedInput::Image(
                v.get("image")
                    .and_then(Value::as_str)
                    .ok_or_else(|| Error::MalformedRequest("input must be a string or {image}".into()))?,
            ),
            None => return Err(Error::MalformedRequest("missing input".into())),
        };
        let e = self.embedder.embed(input)?;
        Ok(json!({"embedding": e.vector, "usage": {"tokens": e.tokens}}))
    }

    fn handle(&self, mut req: Request) {
        let mut raw = String::new();
        let read = req.as_reader().read_to_string(&mut raw);
        let route = (req.method().clone(), req.url().to_string());
        let result = match (&route.0, route.1.as_str()) {
            (Method::Get, "/health") => Ok(json!({"status": "ok"})),
            (Method::Post, "/v1/chat/completions") | (Method::Post, "/v1/embeddings") => read
                .map_err(Error::from)
                .and_then(|_| serde_json::from_str::<Value>(&raw).map_err(Error::from))
                .and_then(|body| {
                    if route.1.ends_with("embeddings") {
                        self.embed(&body)
                    } else {
                        self.chat(&body)
                    }
                }),
            _ => {
                let _ = req.respond(json_response(404, &json!({"error": {"message": "not found"}})));
                return;
            }
        };
        let resp = match result {
            Ok(v) => json_response(200, &v),
            Err(e) => json_response(error_status(&e), &json!({"error": {"message": e.to_string()}})),
        };
        let _ = req.respond(resp);
    }
}

impl MockServer {
    /// Binds `addr` (port 0 picks a free port) and serves on `workers` threads.
    pub fn start(addr: &str, vlm: MockVlm, embedder: MockEmbedder, workers: usize) -> Result<Self> {
        let server = Server::http(addr).map_err(|e| Error::invalid(format!("cannot bind {addr}: {e}")))?;
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| Error::invalid("server is not on a TCP socket"))?;
        let server = Arc::new(server);
        let handlers = Arc::new(Handlers { vlm, embedder });
        let workers = (0..workers.max(1))
            .map(|_| {
                let server = Arc::clone(&server);
                let handlers = Arc::clone(&handlers);
                std::thread::spawn(move || {
                    while let Ok(req) = server.recv() {
                        handlers.handle(req);
                    }
                })
            })
            .collect();
        Ok(MockServer { server, workers, addr })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Blocks until the server is shut down from another thread or process exit.
    pub fn join(mut self) {
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        for _ in 0..self.workers.len() {
            self.server.unblock();
        }
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.stop();
    }
}
