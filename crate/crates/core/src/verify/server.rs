//! Serves a `MemoLM` over the chat-completions protocol.

use std::io;
use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;

use tiny_http::{Header, Method, Response, Server};

use super::remote::{ChatRequest, ChatResponse};
use crate::memolm::MemoLM;

/// Status code and JSON body answering one chat-completions request body.
pub fn handle_chat(model: &MemoLM, model_name: &str, body: &str) -> (u16, String) {
    let error = |status: u16, msg: String| {
        (
            status,
            serde_json::json!({ "error": { "message": msg } }).to_string(),
        )
    };
    let request: ChatRequest = match serde_json::from_str(body) {
        Ok(r) => r,
        Err(e) => return error(400, format!("invalid request: {e}")),
    };
    let Some(prompt) = request.prompt() else {
        return error(400, "no user message".into());
    };
    match model.generate(prompt, &request.params()) {
        Ok(text) => {
            let resp = ChatResponse::single(model_name, text);
            (
                200,
                serde_json::to_string(&resp).expect("response serializes"),
            )
        }
        Err(e) => error(400, e.to_string()),
    }
}

/// Background HTTP server; stops when dropped.
pub struct SimServer {
    server: Arc<Server>,
    addr: SocketAddr,
    worker: Option<JoinHandle<()>>,
}

impl SimServer {
    /// Binds `addr` (port 0 picks a free port) and starts answering requests.
    pub fn start(model: Arc<MemoLM>, model_name: &str, addr: &str) -> io::Result<Self> {
        let server = Server::http(addr).map_err(io::Error::other)?;
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| io::Error::other("server is not bound to an IP address"))?;
        let server = Arc::new(server);
        let name = model_name.to_string();
        let srv = Arc::clone(&server);
        let worker = std::thread::spawn(move || {
            for mut request in srv.incoming_requests() {
                let (status, body) = if *request.method() != Method::Post
                    || !request.url().ends_with("/chat/completions")
                {
                    (404, r#"{"error":{"message":"not found"}}"#.to_string())
                } else {
                    let mut body = String::new();
                    match request.as_reader().read_to_string(&mut body) {
                        Ok(_) => handle_chat(&model, &name, &body),
                        Err(e) => (400, format!(r#"{{"error":{{"message":"{e}"}}}}"#)),
                    }
                };
                let header = Header::from_bytes("Content-Type", "application/json")
                    .expect("static header is valid");
                let resp = Response::from_string(body)
                    .with_status_code(status)
                    .with_header(header);
                if let Err(e) = request.respond(resp) {
                    log::warn!("failed to send response: {e}");
                }
            }
        });
        Ok(Self {
            server,
            addr,
            worker: Some(worker),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Blocks until the server is stopped from elsewhere.
    pub fn wait(mut self) {
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}

impl Drop for SimServer {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}
