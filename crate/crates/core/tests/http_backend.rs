use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

use demo_forge::llm::{Backend, GenRequest, HttpBackend, HttpConfig, LlmError, RetryPolicy};
use demo_forge::similarity::{Embedder, HttpEmbedder};

#[derive(Debug, Clone)]
struct Seen {
    path: String,
    auth: Option<String>,
    body: serde_json::Value,
}

/// Serve one canned `(status, extra headers, body)` per connection, in order.
fn serve(replies: Vec<(u16, &'static str, String)>) -> (String, Arc<Mutex<Vec<Seen>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = format!("http://{}", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    thread::spawn(move || {
        for (status, headers, body) in replies {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            let path = line.split_whitespace().nth(1).unwrap_or("").to_string();
            let mut len = 0;
            let mut auth = None;
            loop {
                let mut h = String::new();
                reader.read_line(&mut h).unwrap();
                if h.trim().is_empty() {
                    break;
                }
                let (k, v) = h.split_once(':').unwrap();
                match k.to_ascii_lowercase().as_str() {
                    "content-length" => len = v.trim().parse().unwrap(),
                    "authorization" => auth = Some(v.trim().to_string()),
                    _ => {}
                }
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            log.lock().unwrap().push(Seen {
                path,
                auth,
                body: serde_json::from_slice(&buf).unwrap_or(serde_json::Value::Null),
            });
            let mut out = stream;
            write!(
                out,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n{headers}\r\n{body}",
                body.len()
            )
            .unwrap();
        }
    });
    (addr, seen)
}

fn ok_body(text: &str) -> String {
    serde_json::json!({"choices": [{"text": text, "finish_reason": "stop"}], "usage": {"prompt_tokens": 3, "completion_tokens": 1}}).to_string()
}

fn backend(addr: &str, key: Option<&str>) -> HttpBackend {
    let mut cfg = HttpConfig::new(addr, "test-model");
    cfg.retry = RetryPolicy {
        max_retries: 3,
        base_delay_ms: 1,
        max_delay_ms: 5,
    };
    cfg.timeout_secs = 5;
    HttpBackend::with_key(cfg, key.map(String::from)).unwrap()
}

#[test]
fn request_shape_and_auth() {
    let (addr, seen) = serve(vec![(200, "", ok_body("count(w['x'])"))]);
    let b = backend(&addr, Some("sk-test"));
    let resp = b.generate(&GenRequest::new("Q: hi\nProgram:").temperature(0.7).seed(9)).unwrap();
    assert_eq!(resp.text(), "count(w['x'])");
    let s = seen.lock().unwrap()[0].clone();
    assert_eq!(s.path, "/v1/completions");
    assert_eq!(s.auth.as_deref(), Some("Bearer sk-test"));
    assert_eq!(s.body["model"], "test-model");
    assert_eq!(s.body["prompt"], "Q: hi\nProgram:");
    assert_eq!(s.body["temperature"], 0.7);
    assert_eq!(s.body["max_tokens"], 256);
    assert_eq!(s.body["n"], 1);
    assert_eq!(s.body["stop"], serde_json::json!(["\n\n"]));
    assert_eq!(s.body["seed"], 9);
}

#[test]
fn retries_server_errors_and_rate_limits() {
    let (addr, seen) = serve(vec![
        (500, "", "boom".into()),
        (429, "Retry-After: 0\r\n", "slow down".into()),
        (200, "", ok_body("1")),
    ]);
    let resp = backend(&addr, None).generate(&GenRequest::new("p")).unwrap();
    assert_eq!(resp.text(), "1");
    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 3);
    assert!(seen[0].auth.is_none());
}

#[test]
fn client_errors_are_not_retried() {
    let (addr, seen) = serve(vec![(400, "", "bad".into()), (200, "", ok_body("1"))]);
    let err = backend(&addr, None).generate(&GenRequest::new("p")).unwrap_err();
    match err {
        LlmError::Backend { retryable, status, .. } => {
            assert!(!retryable);
            assert_eq!(status, Some(400));
        }
        e => panic!("{e:?}"),
    }
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn retries_run_out() {
    let (addr, seen) = serve(vec![(503, "", "a".into()); 4]);
    let err = backend(&addr, None).generate(&GenRequest::new("p")).unwrap_err();
    assert!(err.retryable());
    assert_eq!(seen.lock().unwrap().len(), 4);
}

#[test]
fn malformed_and_short_bodies_fail() {
    let (addr, _) = serve(vec![(200, "", "{\"nope\": 1}".into())]);
    assert!(backend(&addr, None).generate(&GenRequest::new("p")).is_err());
    let (addr, _) = serve(vec![(200, "", ok_body("x"))]);
    let mut req = GenRequest::new("p");
    req.n_choices = 2;
    assert!(backend(&addr, None).generate(&req).is_err());
}

#[test]
fn embeddings_are_normalized_and_cached() {
    let body = serde_json::json!({"data": [{"embedding": [3.0, 4.0]}, {"embedding": [0.0, 2.0]}]}).to_string();
    let (addr, seen) = serve(vec![(200, "", body)]);
    let dir = tempfile::tempdir().unwrap();
    let e = HttpEmbedder::new(&addr, "emb", Some(dir.path().to_path_buf()), 5).unwrap();
    let texts = vec!["a".to_string(), "b".to_string()];
    let v = e.embed(&texts).unwrap();
    assert!((v[0][0] - 0.6).abs() < 1e-12 && (v[0][1] - 0.8).abs() < 1e-12);
    assert_eq!(v[1], vec![0.0, 1.0]);
    // served from disk: the server accepts no further connections
    assert_eq!(e.embed(&texts).unwrap(), v);
    let s = seen.lock().unwrap();
    assert_eq!(s.len(), 1);
    assert_eq!(s[0].path, "/v1/embeddings");
    assert_eq!(s[0].body["input"], serde_json::json!(["a", "b"]));
}
