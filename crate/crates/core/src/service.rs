//! Offline NDJSON-over-TCP inference server and a small blocking client.
//!
//! One JSON object per LF-terminated line in each direction. Requests are
//! `{"id","image_pgm_b64"}`; unknown fields are ignored. Responses are either
//! `{"id","label","probabilities":{"covid","healthy"},"latency_ms"}` or
//! `{"id","error_code","message"}`. Within a connection responses come back
//! in request order; connections are handled concurrently up to a cap, and
//! connections past the cap get a single `busy` error line and are closed.

use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::classifier::{ClassProbabilities, ClassifyError, Classifier};

pub const DEFAULT_MAX_CONCURRENT: usize = 16;
pub const MAX_LINE_BYTES: usize = 8 * 1024 * 1024;
pub const DEFAULT_CLIENT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferRequest {
    pub id: String,
    pub image_pgm_b64: String,
}

impl InferRequest {
    pub fn new(id: impl Into<String>, pgm: &[u8]) -> Self {
        Self {
            id: id.into(),
            image_pgm_b64: base64::engine::general_purpose::STANDARD.encode(pgm),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferResponse {
    pub id: String,
    pub label: String,
    pub probabilities: ClassProbabilities,
    pub latency_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorResponse {
    pub id: String,
    pub error_code: String,
    pub message: String,
}

/// Either response shape, as read off the wire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Response {
    Ok(InferResponse),
    Err(ErrorResponse),
}

impl Response {
    pub fn id(&self) -> &str {
        match self {
            Response::Ok(r) => &r.id,
            Response::Err(e) => &e.id,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ServiceConfig {
    pub max_concurrent: usize,
    pub max_line_bytes: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            max_concurrent: DEFAULT_MAX_CONCURRENT,
            max_line_bytes: MAX_LINE_BYTES,
        }
    }
}

struct Shared {
    classifier: Classifier,
    config: ServiceConfig,
    active: AtomicUsize,
    requests: AtomicU64,
    shutdown: AtomicBool,
}

pub struct Server {
    listener: TcpListener,
    shared: Arc<Shared>,
}

impl Server {
    pub fn bind(addr: impl ToSocketAddrs, classifier: Classifier, config: ServiceConfig) -> io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        Ok(Self {
            listener,
            shared: Arc::new(Shared {
                classifier,
                config,
                active: AtomicUsize::new(0),
                requests: AtomicU64::new(0),
                shutdown: AtomicBool::new(false),
            }),
        })
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    /// Accepts connections until shut down through a [`ServerHandle`].
    pub fn run(self) -> io::Result<()> {
        log::info!(
            "serving on {} (max {} connections)",
            self.local_addr()?,
            self.shared.config.max_concurrent
        );
        for stream in self.listener.incoming() {
            if self.shared.shutdown.load(Ordering::SeqCst) {
                break;
            }
            let stream = match stream {
                Ok(s) => s,
                Err(e) => {
                    log::warn!("accept failed: {e}");
                    continue;
                }
            };
            let shared = Arc::clone(&self.shared);
            if shared.active.fetch_add(1, Ordering::SeqCst) >= shared.config.max_concurrent {
                shared.active.fetch_sub(1, Ordering::SeqCst);
                reject_busy(stream);
                continue;
            }
            std::thread::spawn(move || {
                let _guard = ActiveGuard(&shared.active);
                if let Err(e) = handle_connection(&shared, stream) {
                    log::debug!("connection ended: {e}");
                }
            });
        }
        Ok(())
    }

    /// Runs the accept loop on a background thread.
    pub fn spawn(self) -> io::Result<ServerHandle> {
        let addr = self.local_addr()?;
        let shared = Arc::clone(&self.shared);
        let thread = std::thread::spawn(move || self.run());
        Ok(ServerHandle {
            addr,
            shared,
            thread: Some(thread),
        })
    }
}

pub struct ServerHandle {
    addr: SocketAddr,
    shared: Arc<Shared>,
    thread: Option<JoinHandle<io::Result<()>>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn requests_served(&self) -> u64 {
        self.shared.requests.load(Ordering::SeqCst)
    }

    pub fn active_connections(&self) -> usize {
        self.shared.active.load(Ordering::SeqCst)
    }

    pub fn classifier(&self) -> &Classifier {
        &self.shared.classifier
    }

    /// Stops accepting; in-flight connections finish on their own.
    pub fn shutdown(mut self) -> io::Result<()> {
        self.stop()
    }

    fn stop(&mut self) -> io::Result<()> {
        let Some(thread) = self.thread.take() else {
            return Ok(());
        };
        self.shared.shutdown.store(true, Ordering::SeqCst);
        let mut wake = self.addr;
        if wake.ip().is_unspecified() {
            wake.set_ip(match wake {
                SocketAddr::V4(_) => std::net::Ipv4Addr::LOCALHOST.into(),
                SocketAddr::V6(_) => std::net::Ipv6Addr::LOCALHOST.into(),
            });
        }
        // Unblocks the pending accept.
        let _ = TcpStream::connect_timeout(&wake, Duration::from_secs(1));
        thread.join().unwrap_or_else(|_| Err(io::Error::other("server thread panicked")))
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        let _ = self.stop();
    }
}

struct ActiveGuard<'a>(&'a AtomicUsize);

impl Drop for ActiveGuard<'_> {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::SeqCst);
    }
}

fn error_line(id: &str, code: &str, message: impl Into<String>) -> String {
    serde_json::to_string(&ErrorResponse {
        id: id.to_string(),
        error_code: code.to_string(),
        message: message.into(),
    })
    .expect("error response serializes")
}

fn reject_busy(mut stream: TcpStream) {
    log::warn!("connection limit reached, rejecting {:?}", stream.peer_addr().ok());
    let mut line = error_line("", "busy", "connection limit reached");
    line.push('\n');
    let _ = stream.write_all(line.as_bytes());
    let _ = stream.shutdown(Shutdown::Both);
}

fn handle_connection(shared: &Shared, stream: TcpStream) -> io::Result<()> {
    let limit = shared.config.max_line_bytes;
    let mut writer = stream.try_clone()?;
    let mut reader = BufReader::new(stream);
    let mut buf = Vec::new();
    loop {
        buf.clear();
        let n = (&mut reader).take(limit as u64 + 1).read_until(b'\n', &mut buf)?;
        if n == 0 {
            return Ok(());
        }
        let terminated = buf.last() == Some(&b'\n');
        if terminated {
            buf.pop();
            if buf.last() == Some(&b'\r') {
                buf.pop();
            }
        }
        if buf.len() > limit {
            let mut line = error_line("", "too_large", format!("request line exceeds {limit} bytes"));
            line.push('\n');
            writer.write_all(line.as_bytes())?;
            let _ = writer.shutdown(Shutdown::Both);
            return Ok(());
        }
        if buf.iter().all(u8::is_ascii_whitespace) {
            if !terminated {
                return Ok(());
            }
            continue;
        }
        let mut line = respond(&shared.classifier, &buf);
        shared.requests.fetch_add(1, Ordering::Relaxed);
        line.push('\n');
        writer.write_all(line.as_bytes())?;
        if !terminated {
            return Ok(());
        }
    }
}

/// Turns one request line into one response line (without the LF).
pub fn respond(classifier: &Classifier, line: &[u8]) -> String {
    let t0 = Instant::now();
    let value: Value = match serde_json::from_slice(line) {
        Ok(v) => v,
        Err(e) => return error_line("", "bad_request", format!("malformed JSON: {e}")),
    };
    let id = value.get("id").and_then(Value::as_str).unwrap_or("");
    if id.is_empty() {
        return error_line(id, "bad_request", "missing or empty id");
    }
    let Some(b64) = value.get("image_pgm_b64").and_then(Value::as_str) else {
        return error_line(id, "bad_request", "missing image_pgm_b64");
    };
    let bytes = match base64::engine::general_purpose::STANDARD.decode(b64) {
        Ok(b) => b,
        Err(e) => return error_line(id, "bad_request", format!("invalid base64: {e}")),
    };
    match classifier.classify_pgm(&bytes) {
        Ok(p) => serde_json::to_string(&InferResponse {
            id: id.to_string(),
            label: p.label.clone(),
            probabilities: ClassProbabilities::from_prediction(&p),
            latency_ms: t0.elapsed().as_secs_f64() * 1e3,
        })
        .expect("response serializes"),
        Err(ClassifyError::Image(e)) => error_line(id, "bad_image", e.to_string()),
        Err(ClassifyError::Network(e)) => error_line(id, "internal", e.to_string()),
    }
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("connection failed: {0}")]
    Connect(#[source] io::Error),
    #[error("request timed out")]
    Timeout,
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("server error {code}: {message}")]
    Remote { id: String, code: String, message: String },
}

fn classify_io(e: io::Error) -> ClientError {
    match e.kind() {
        io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => ClientError::Timeout,
        _ => ClientError::Io(e),
    }
}

/// One connection, used for any number of sequential requests.
pub struct Client {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl Client {
    pub fn connect(addr: impl ToSocketAddrs, timeout: Duration) -> Result<Self, ClientError> {
        let mut last = None;
        for a in addr.to_socket_addrs().map_err(ClientError::Connect)? {
            match TcpStream::connect_timeout(&a, timeout) {
                Ok(stream) => {
                    stream.set_read_timeout(Some(timeout))?;
                    stream.set_write_timeout(Some(timeout))?;
                    return Ok(Self {
                        writer: stream.try_clone()?,
                        reader: BufReader::new(stream),
                    });
                }
                Err(e) => last = Some(e),
            }
        }
        Err(ClientError::Connect(
            last.unwrap_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "no address resolved")),
        ))
    }

    /// Sends one raw line and returns the raw response line.
    pub fn send_line(&mut self, line: &str) -> Result<String, ClientError> {
        self.writer.write_all(line.as_bytes()).map_err(classify_io)?;
        self.writer.write_all(b"\n").map_err(classify_io)?;
        self.read_line()
    }

    pub fn read_line(&mut self) -> Result<String, ClientError> {
        let mut out = String::new();
        let n = self.reader.read_line(&mut out).map_err(classify_io)?;
        if n == 0 {
            return Err(ClientError::Protocol("connection closed before response".into()));
        }
        Ok(out.trim_end_matches(['\n', '\r']).to_string())
    }

    pub fn request(&mut self, request: &InferRequest) -> Result<Response, ClientError> {
        let line = serde_json::to_string(request).expect("request serializes");
        let reply = self.send_line(&line)?;
        serde_json::from_str(&reply).map_err(|e| ClientError::Protocol(format!("{e}: {reply}")))
    }

    /// Like [`Client::request`], with error responses surfaced as `Err(Remote)`.
    pub fn classify(&mut self, id: &str, pgm: &[u8]) -> Result<InferResponse, ClientError> {
        match self.request(&InferRequest::new(id, pgm))? {
            Response::Ok(r) => Ok(r),
            Response::Err(e) => Err(ClientError::Remote {
                id: e.id,
                code: e.error_code,
                message: e.message,
            }),
        }
    }
}

pub fn client_classify(addr: impl ToSocketAddrs, image_path: impl AsRef<Path>, id: &str) -> Result<InferResponse, ClientError> {
    client_classify_with_timeout(addr, image_path, id, DEFAULT_CLIENT_TIMEOUT)
}

pub fn client_classify_with_timeout(
    addr: impl ToSocketAddrs,
    image_path: impl AsRef<Path>,
    id: &str,
    timeout: Duration,
) -> Result<InferResponse, ClientError> {
    let pgm = std::fs::read(image_path)?;
    Client::connect(addr, timeout)?.classify(id, &pgm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::parse_arch;
    use crate::imaging::{encode_pgm, ImageU8};
    use crate::kernels::KernelMode;
    use crate::network::zero_params;

    const SMALL: &str = "C(8x8x2) - MP(4x4x2) - F(32) - FC(2)";

    fn zero_classifier() -> Classifier {
        let spec = parse_arch(SMALL).unwrap();
        Classifier::new(spec.clone(), zero_params(&spec).unwrap(), KernelMode::Fast).unwrap()
    }

    fn tiny_pgm() -> Vec<u8> {
        encode_pgm(&ImageU8::new(2, 2, vec![0, 64, 128, 255]).unwrap())
    }

    fn spawn(config: ServiceConfig) -> ServerHandle {
        Server::bind("127.0.0.1:0", zero_classifier(), config).unwrap().spawn().unwrap()
    }

    #[test]
    fn zero_weights_over_the_wire() {
        let server = spawn(ServiceConfig::default());
        let mut c = Client::connect(server.local_addr(), Duration::from_secs(5)).unwrap();
        let r = c.classify("a", &tiny_pgm()).unwrap();
        assert_eq!(r.label, "covid");
        assert_eq!(r.probabilities, ClassProbabilities { covid: 0.5, healthy: 0.5 });
        assert!(r.latency_ms >= 0.0);
        server.shutdown().unwrap();
    }

    #[test]
    fn ids_echo_in_order() {
        let server = spawn(ServiceConfig::default());
        let mut c = Client::connect(server.local_addr(), Duration::from_secs(5)).unwrap();
        let lines: Vec<String> = ["first", "second"]
            .iter()
            .map(|id| serde_json::to_string(&InferRequest::new(*id, &tiny_pgm())).unwrap())
            .collect();
        c.writer.write_all(format!("{}\n{}\n", lines[0], lines[1]).as_bytes()).unwrap();
        let a: Response = serde_json::from_str(&c.read_line().unwrap()).unwrap();
        let b: Response = serde_json::from_str(&c.read_line().unwrap()).unwrap();
        assert_eq!((a.id(), b.id()), ("first", "second"));
        assert_eq!(server.requests_served(), 2);
    }

    #[test]
    fn error_codes() {
        let server = spawn(ServiceConfig::default());
        let mut c = Client::connect(server.local_addr(), Duration::from_secs(5)).unwrap();
        let code = |c: &mut Client, line: &str| match serde_json::from_str(&c.send_line(line).unwrap()).unwrap() {
            Response::Err(e) => (e.id, e.error_code),
            Response::Ok(r) => panic!("unexpected success {r:?}"),
        };
        assert_eq!(code(&mut c, "{not json"), ("".into(), "bad_request".into()));
        assert_eq!(code(&mut c, r#"{"id":"x","image_pgm_b64":"!!!"}"#), ("x".into(), "bad_request".into()));
        assert_eq!(code(&mut c, r#"{"image_pgm_b64":""}"#).1, "bad_request");
        let bad = base64::engine::general_purpose::STANDARD.encode(b"P2\n2 2\n255\n");
        assert_eq!(
            code(&mut c, &format!(r#"{{"id":"y","image_pgm_b64":"{bad}"}}"#)),
            ("y".into(), "bad_image".into())
        );
        // Connection survives all of the above; unknown fields are ignored.
        let mut req = serde_json::to_value(InferRequest::new("z", &tiny_pgm())).unwrap();
        req["extra"] = Value::from(1);
        let ok: Response = serde_json::from_str(&c.send_line(&req.to_string()).unwrap()).unwrap();
        assert!(matches!(ok, Response::Ok(r) if r.id == "z"));
    }

    #[test]
    fn oversized_line_closes_connection() {
        let server = spawn(ServiceConfig {
            max_line_bytes: 64,
            ..ServiceConfig::default()
        });
        let mut c = Client::connect(server.local_addr(), Duration::from_secs(5)).unwrap();
        let reply = c.send_line(&"x".repeat(100)).unwrap();
        assert!(reply.contains("too_large"));
        assert!(matches!(c.read_line(), Err(ClientError::Protocol(_)) | Err(ClientError::Io(_))));
    }

    #[test]
    fn excess_connections_are_busy() {
        let server = spawn(ServiceConfig {
            max_concurrent: 1,
            ..ServiceConfig::default()
        });
        let mut first = Client::connect(server.local_addr(), Duration::from_secs(5)).unwrap();
        first.classify("hold", &tiny_pgm()).unwrap();
        let mut second = Client::connect(server.local_addr(), Duration::from_secs(5)).unwrap();
        assert!(second.read_line().unwrap().contains("busy"));
        drop(first);
    }

    #[test]
    fn server_down_is_an_error() {
        let addr = {
            let l = TcpListener::bind("127.0.0.1:0").unwrap();
            l.local_addr().unwrap()
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pgm");
        std::fs::write(&path, tiny_pgm()).unwrap();
        let err = client_classify_with_timeout(addr, &path, "a", Duration::from_secs(2)).unwrap_err();
        assert!(matches!(err, ClientError::Connect(_)));
    }
}
