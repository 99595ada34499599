#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;

use serde_json::Value;

pub const VOCAB: &str = "[PAD]\n[UNK]\n[CLS]\n[SEP]\n[MASK]\n.\n,\n!\nthe\na\ncat\ndog\nsat\non\nmat\nran\nto\nhouse\nbig\nold\nand\nsaw\n##s\n##ed\nun\n##aff\n##able\n";

pub fn write_vocab(dir: &Path) -> std::path::PathBuf {
    let p = dir.join("vocab.txt");
    std::fs::write(&p, VOCAB).unwrap();
    p
}

/// What the fake server answers: `(status, json body)`.
pub type Handler = dyn Fn(&Request) -> (u16, String) + Send + Sync;

#[derive(Debug, Clone)]
pub struct Request {
    pub method: String,
    pub path: String,
    pub body: Value,
    /// 1-based index among requests to the same path.
    pub nth: usize,
}

/// Minimal HTTP/1.1 server on a loopback port, one request per connection.
pub struct FakeServer {
    pub url: String,
    pub log: Arc<Mutex<Vec<Request>>>,
    topk: Arc<AtomicUsize>,
    health: Arc<AtomicUsize>,
}

impl FakeServer {
    pub fn start(handler: impl Fn(&Request) -> (u16, String) + Send + Sync + 'static) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let handler: Arc<Handler> = Arc::new(handler);
        let log = Arc::new(Mutex::new(Vec::new()));
        let topk = Arc::new(AtomicUsize::new(0));
        let health = Arc::new(AtomicUsize::new(0));
        let (l, t, h) = (log.clone(), topk.clone(), health.clone());
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(stream) = stream else { continue };
                let (handler, l, t, h) = (handler.clone(), l.clone(), t.clone(), h.clone());
                thread::spawn(move || serve(stream, &*handler, &l, &t, &h));
            }
        });
        Self {
            url,
            log,
            topk,
            health,
        }
    }

    pub fn topk_calls(&self) -> usize {
        self.topk.load(Ordering::SeqCst)
    }

    pub fn health_calls(&self) -> usize {
        self.health.load(Ordering::SeqCst)
    }
}

fn serve(
    stream: TcpStream,
    handler: &Handler,
    log: &Mutex<Vec<Request>>,
    topk: &AtomicUsize,
    health: &AtomicUsize,
) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut line = String::new();
    if reader.read_line(&mut line).unwrap_or(0) == 0 {
        return;
    }
    let mut parts = line.split_whitespace();
    let method = parts.next().unwrap_or_default().to_string();
    let path = parts.next().unwrap_or_default().to_string();
    let mut len = 0usize;
    loop {
        let mut h = String::new();
        reader.read_line(&mut h).unwrap();
        let h = h.trim_end();
        if h.is_empty() {
            break;
        }
        if let Some((name, value)) = h.split_once(':') {
            if name.eq_ignore_ascii_case("content-length") {
                len = value.trim().parse().unwrap();
            }
        }
    }
    let mut body = vec![0u8; len];
    reader.read_exact(&mut body).unwrap();
    let body: Value = if body.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&body).unwrap_or(Value::Null)
    };
    let counter = if path == "/topk" { topk } else { health };
    let nth = counter.fetch_add(1, Ordering::SeqCst) + 1;
    let req = Request {
        method,
        path,
        body,
        nth,
    };
    let (status, text) = handler(&req);
    log.lock().unwrap().push(req);
    let mut stream = stream;
    let _ = write!(
        stream,
        "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
        text.len()
    );
    let _ = stream.flush();
}

/// A well-behaved model: a fixed ranking rotated by the masked position.
pub fn ranking_model(model: &'static str) -> impl Fn(&Request) -> (u16, String) + Send + Sync {
    const RANKING: [&str; 12] = [
        "the", "cat", "a", "sat", "on", "mat", "dog", "ran", "to", "house", "big", "old",
    ];
    move |req: &Request| match req.path.as_str() {
        "/health" => (200, format!("{{\"model\": \"{model}\"}}")),
        "/topk" => {
            let idx = req.body["masked_index"].as_u64().unwrap() as usize;
            let k = req.body["k"].as_u64().unwrap() as usize;
            let tokens: Vec<&str> = (0..RANKING.len().min(k))
                .map(|i| RANKING[(i + idx) % RANKING.len()])
                .collect();
            (
                200,
                serde_json::json!({"model": model, "tokens": tokens}).to_string(),
            )
        }
        _ => (404, "{}".into()),
    }
}
