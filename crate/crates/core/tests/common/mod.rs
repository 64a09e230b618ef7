#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use ragcap::{build_store, CaptionStore, RawRecord};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

/// Load `<stem>.tsv` + `<stem>.vec` from the fixture directory.
pub fn fixture_store(stem: &str) -> CaptionStore {
    ragcap::cli::ingest(
        &fixture(&format!("{stem}.tsv")),
        Some(&fixture(&format!("{stem}.vec"))),
        None,
        stem,
    )
    .expect("fixture loads")
}

pub fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal) as f32).collect()
}

pub fn random_store(rng: &mut ChaCha8Rng, n: usize, dim: usize, label: &str) -> CaptionStore {
    let records = (0..n)
        .map(|i| {
            RawRecord::new(
                format!("{label}-{i:04}"),
                format!("{label} caption {i}"),
                gaussian(rng, dim),
                if i % 3 == 0 { "alpha" } else { "beta" },
            )
        })
        .collect();
    build_store(records, label).expect("random store builds")
}

/// Independent cosine: normalize both sides in f64, then take the dot product.
pub fn oracle_cosine(a: &[f32], b: &[f32]) -> f64 {
    let na = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    a.iter().zip(b).map(|(&x, &y)| (x as f64 / na) * (y as f64 / nb)).sum()
}

pub struct Reply {
    pub status: u16,
    pub body: String,
    pub delay: Duration,
}

impl Reply {
    pub fn ok_text(text: &str) -> Self {
        Self {
            status: 200,
            body: serde_json::json!({ "text": text }).to_string(),
            delay: Duration::ZERO,
        }
    }

    pub fn status(status: u16) -> Self {
        Self {
            status,
            body: r#"{"error":"stub"}"#.into(),
            delay: Duration::ZERO,
        }
    }

    pub fn raw(body: &str) -> Self {
        Self {
            status: 200,
            body: body.into(),
            delay: Duration::ZERO,
        }
    }

    pub fn delayed(mut self, delay: Duration) -> Self {
        self.delay = delay;
        self
    }
}

/// Minimal HTTP/1.1 server on a loopback port. The handler sees the
/// zero-based index of the request and its JSON body.
pub struct StubServer {
    pub url: String,
    hits: Arc<AtomicUsize>,
    auth: Arc<Mutex<Vec<String>>>,
}

type Handler = dyn Fn(usize, &serde_json::Value) -> Reply + Send + Sync;

impl StubServer {
    pub fn start<F>(handler: F) -> Self
    where
        F: Fn(usize, &serde_json::Value) -> Reply + Send + Sync + 'static,
    {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind loopback");
        let url = format!("http://{}/generate", listener.local_addr().unwrap());
        let hits = Arc::new(AtomicUsize::new(0));
        let handler: Arc<Handler> = Arc::new(handler);
        let auth = Arc::new(Mutex::new(Vec::new()));
        let counter = Arc::clone(&hits);
        let seen = Arc::clone(&auth);
        thread::spawn(move || {
            for stream in listener.incoming().flatten() {
                let handler = Arc::clone(&handler);
                let counter = Arc::clone(&counter);
                let seen = Arc::clone(&seen);
                thread::spawn(move || serve(stream, &*handler, &counter, &seen));
            }
        });
        Self { url, hits, auth }
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }

    /// `Authorization` header values received so far.
    pub fn auth_headers(&self) -> Vec<String> {
        self.auth.lock().unwrap().clone()
    }
}

fn serve(stream: TcpStream, handler: &Handler, counter: &AtomicUsize, auth: &Mutex<Vec<String>>) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut content_length = 0usize;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).unwrap_or(0) == 0 {
            return;
        }
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        if let Some((name, value)) = line.split_once(':') {
            if name.eq_ignore_ascii_case("content-length") {
                content_length = value.trim().parse().unwrap_or(0);
            } else if name.eq_ignore_ascii_case("authorization") {
                auth.lock().unwrap().push(value.trim().to_string());
            }
        }
    }
    let mut body = vec![0u8; content_length];
    if reader.read_exact(&mut body).is_err() {
        return;
    }
    let json: serde_json::Value = serde_json::from_slice(&body).unwrap_or(serde_json::Value::Null);
    let index = counter.fetch_add(1, Ordering::SeqCst);
    let reply = handler(index, &json);
    thread::sleep(reply.delay);
    let mut stream = stream;
    let _ = write!(
        stream,
        "HTTP/1.1 {} Stub\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
        reply.status,
        reply.body.len(),
        reply.body
    );
    let _ = stream.flush();
}
