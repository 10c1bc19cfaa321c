use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;

use riskqueue::embedding::{EmbeddingVector, Provider, ProviderConfig};
use riskqueue::Error;
use serde_json::{json, Value};

type Handler = dyn Fn(&str, &str, &Value) -> (u16, String) + Send + Sync;

struct MockServer {
    url: String,
    embed_calls: Arc<AtomicUsize>,
    bodies: Arc<Mutex<Vec<Value>>>,
}

fn read_request(stream: &mut TcpStream) -> Option<(String, String, Value)> {
    let mut reader = BufReader::new(stream.try_clone().ok()?);
    let mut first = String::new();
    reader.read_line(&mut first).ok()?;
    let mut parts = first.split_whitespace();
    let method = parts.next()?.to_string();
    let path = parts.next()?.to_string();
    let mut length = 0;
    loop {
        let mut line = String::new();
        reader.read_line(&mut line).ok()?;
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        if let Some((k, v)) = line.split_once(':') {
            if k.eq_ignore_ascii_case("content-length") {
                length = v.trim().parse().ok()?;
            }
        }
    }
    let mut body = vec![0; length];
    reader.read_exact(&mut body).ok()?;
    let body = serde_json::from_slice(&body).unwrap_or(Value::Null);
    Some((method, path, body))
}

fn serve(handler: Box<Handler>) -> MockServer {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let embed_calls = Arc::new(AtomicUsize::new(0));
    let bodies = Arc::new(Mutex::new(Vec::new()));
    let (calls, seen) = (embed_calls.clone(), bodies.clone());
    let handler: Arc<Handler> = Arc::from(handler);
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let (calls, seen, handler) = (calls.clone(), seen.clone(), handler.clone());
            thread::spawn(move || {
                let Some((method, path, body)) = read_request(&mut stream) else { return };
                if path == "/embed" {
                    calls.fetch_add(1, Ordering::SeqCst);
                    seen.lock().unwrap().push(body.clone());
                }
                let (status, payload) = handler(&method, &path, &body);
                let reply = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
                    payload.len()
                );
                let _ = stream.write_all(reply.as_bytes());
            });
        }
    });
    MockServer {
        url,
        embed_calls,
        bodies,
    }
}

/// A deterministic 3-dim vector per text.
fn fake_vector(text: &str) -> Vec<f64> {
    let vowels = text.chars().filter(|c| "aeiou".contains(*c)).count();
    vec![text.len() as f64, vowels as f64, 1.0]
}

fn well_behaved() -> Box<Handler> {
    Box::new(|method, path, body| match (method, path) {
        ("GET", "/health") => (200, json!({"status": "ok", "model": "mock"}).to_string()),
        ("POST", "/embed") => {
            let texts: Vec<String> = serde_json::from_value(body["texts"].clone()).unwrap();
            let rows: Vec<Vec<f64>> = texts.iter().map(|t| fake_vector(t)).collect();
            (200, json!({"model": body["model"], "dim": 3, "embeddings": rows}).to_string())
        }
        _ => (404, "{}".into()),
    })
}

fn provider(url: &str) -> Provider {
    Provider::new(ProviderConfig::http(url, "mock")).unwrap()
}

#[test]
fn rows_follow_request_order() {
    let server = serve(well_behaved());
    let p = provider(&server.url);
    assert_eq!(p.health().unwrap().status, "ok");
    let texts = ["a", "bee", "oboe", "xyz"];
    let got = p.embed_batch(&texts).unwrap();
    let want: Vec<EmbeddingVector> = texts.iter().map(|t| EmbeddingVector::new(fake_vector(t))).collect();
    assert_eq!(got, want);
    assert_eq!(server.embed_calls.load(Ordering::SeqCst), 1);
    let body = &server.bodies.lock().unwrap()[0];
    assert_eq!(body["model"], "mock");
    assert_eq!(body["texts"], json!(["a", "bee", "oboe", "xyz"]));
}

#[test]
fn requests_are_split_at_max_batch() {
    let server = serve(well_behaved());
    let config = ProviderConfig {
        max_batch: 2,
        max_in_flight: 2,
        ..ProviderConfig::http(&server.url, "mock")
    };
    let p = Provider::new(config).unwrap();
    let texts: Vec<String> = (0..5).map(|i| "w".repeat(i + 1)).collect();
    let got = p.embed_batch(&texts).unwrap();
    for (i, v) in got.iter().enumerate() {
        assert_eq!(v.values()[0], (i + 1) as f64);
    }
    assert_eq!(server.embed_calls.load(Ordering::SeqCst), 3);
    assert_eq!(p.remote_requests(), 3);
}

#[test]
fn duplicates_are_sent_once() {
    let server = serve(well_behaved());
    let p = provider(&server.url);
    let got = p.embed_batch(&["same text", "same   text", "other"]).unwrap();
    assert_eq!(got[0], got[1]);
    assert_eq!(server.bodies.lock().unwrap()[0]["texts"], json!(["same text", "other"]));
}

#[test]
fn warm_cache_makes_no_requests() {
    let server = serve(well_behaved());
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("cache.jsonl");
    let config = ProviderConfig::http(&server.url, "mock").with_cache(&cache);
    let texts = ["one", "two", "three"];

    let cold = Provider::new(config.clone()).unwrap();
    let first = cold.embed_batch(&texts).unwrap();
    assert_eq!(cold.remote_requests(), 1);
    cold.embed_batch(&texts).unwrap();
    assert_eq!(cold.remote_requests(), 1);
    drop(cold);

    let warm = Provider::new(config).unwrap();
    assert_eq!(warm.embed_batch(&texts).unwrap(), first);
    assert_eq!(warm.remote_requests(), 0);
    assert_eq!(server.embed_calls.load(Ordering::SeqCst), 1);
}

#[test]
fn unavailable_is_retriable() {
    let server = serve(Box::new(|_, _, _| (503, r#"{"error":"loading"}"#.into())));
    let err = provider(&server.url).embed("hello").unwrap_err();
    assert!(matches!(err, Error::ProviderUnavailable(_)), "{err}");
    assert!(err.is_retriable());

    // Nothing listens on a freshly released port.
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let err = provider(&format!("http://127.0.0.1:{port}")).embed("hello").unwrap_err();
    assert!(err.is_retriable(), "{err}");
}

#[test]
fn malformed_responses_are_not_retriable() {
    let cases: Vec<Box<Handler>> = vec![
        Box::new(|_, _, _| (200, "not json".into())),
        Box::new(|_, _, _| (200, json!({"model": "mock", "dim": 3, "embeddings": [[1.0, 2.0, 3.0]]}).to_string())),
        Box::new(|_, _, _| {
            (200, json!({"model": "mock", "dim": 3, "embeddings": [[1.0, 2.0, 3.0], [1.0, 2.0]]}).to_string())
        }),
        Box::new(|_, _, _| (200, json!({"model": "mock", "dim": 2, "embeddings": [[1.0, 2.0, 3.0], [1.0, 2.0, 3.0]]}).to_string())),
    ];
    for (i, handler) in cases.into_iter().enumerate() {
        let server = serve(handler);
        let err = provider(&server.url).embed_batch(&["a", "b"]).unwrap_err();
        assert!(matches!(err, Error::MalformedResponse(_)), "case {i}: {err}");
        assert!(!err.is_retriable());
    }
}

#[test]
fn rejected_requests_are_input_errors() {
    let server = serve(Box::new(|_, _, _| (400, r#"{"error":"bad"}"#.into())));
    let err = provider(&server.url).embed("x").unwrap_err();
    assert!(matches!(err, Error::InvalidInput(_)), "{err}");
    assert!(!err.is_retriable());
}
