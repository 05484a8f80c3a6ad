use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

use flipaudit_core::gateway::{DecisionModel, ModelEndpointConfig, RemoteChatModel, ResponseCache};
use flipaudit_core::Error;
use serde_json::Value;

/// Serves the scripted `(status, body)` replies in order, one per connection,
/// and records each request body.
fn serve(replies: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Value>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    thread::spawn(move || {
        for (status, body) in replies {
            let Ok((stream, _)) = listener.accept() else { return };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0usize;
            let mut auth = String::new();
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let lower = line.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                if lower.starts_with("authorization:") {
                    auth = lower.trim().to_owned();
                }
                if line == "\r\n" || line.is_empty() {
                    break;
                }
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            let mut req: Value = serde_json::from_slice(&buf).unwrap();
            req["_auth"] = Value::String(auth);
            log.lock().unwrap().push(req);
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
    });
    (format!("http://{addr}/v1"), seen)
}

fn completion(text: &str) -> String {
    serde_json::json!({"choices": [{"message": {"role": "assistant", "content": text}}]}).to_string()
}

fn config(base_url: &str, key_env: &str) -> ModelEndpointConfig {
    ModelEndpointConfig {
        name: "mock".into(),
        model: Some("mock-large".into()),
        base_url: base_url.into(),
        api_key_env: key_env.into(),
        temperature: 0.0,
        max_tokens: 64,
        timeout_secs: 5.0,
        max_retries: 3,
        backoff_initial_ms: 1,
        requests_per_second: None,
    }
}

#[test]
fn retries_server_errors_then_caches() {
    std::env::set_var("FLIPAUDIT_MOCK_KEY_A", "secret-a");
    let (url, seen) = serve(vec![(503, "busy".into()), (200, completion("(a) Approve"))]);
    let cache_dir = tempfile::tempdir().unwrap();
    let cache = ResponseCache::open(cache_dir.path(), "mock").unwrap();
    let model = RemoteChatModel::new(config(&url, "FLIPAUDIT_MOCK_KEY_A"), Some(cache)).unwrap();

    let first = model.query("Decide the case.").unwrap();
    assert_eq!(first.raw_text, "(a) Approve");
    assert!(!first.cached);
    let requests = seen.lock().unwrap().clone();
    assert_eq!(requests.len(), 2);
    assert_eq!(requests[1]["model"], "mock-large");
    assert_eq!(requests[1]["temperature"], 0.0);
    assert_eq!(requests[1]["max_tokens"], 64);
    assert_eq!(requests[1]["messages"][0]["content"], "Decide the case.");
    assert_eq!(requests[1]["_auth"], "authorization: bearer secret-a");

    // the server is gone; only the cache can answer
    let second = model.query("Decide the case.").unwrap();
    assert!(second.cached);
    assert_eq!(second.raw_text, first.raw_text);
    assert_eq!(second.request_fingerprint, first.request_fingerprint);
}

#[test]
fn client_errors_are_not_retried() {
    std::env::set_var("FLIPAUDIT_MOCK_KEY_B", "secret-b");
    let (url, seen) = serve(vec![(400, "bad request body".into()), (200, completion("unused"))]);
    let model = RemoteChatModel::new(config(&url, "FLIPAUDIT_MOCK_KEY_B"), None).unwrap();
    match model.query("p") {
        Err(Error::Status { status: 400, body }) => assert!(body.contains("bad request")),
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn rate_limits_exhaust_retries() {
    std::env::set_var("FLIPAUDIT_MOCK_KEY_C", "secret-c");
    let (url, seen) = serve(vec![(429, "slow down".into()); 4]);
    let model = RemoteChatModel::new(config(&url, "FLIPAUDIT_MOCK_KEY_C"), None).unwrap();
    match model.query("p") {
        Err(Error::RetriesExhausted { attempts, last }) => {
            assert_eq!(attempts, 4);
            assert!(matches!(*last, Error::Status { status: 429, .. }));
        }
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(seen.lock().unwrap().len(), 4);
}

#[test]
fn malformed_completion_is_an_error() {
    std::env::set_var("FLIPAUDIT_MOCK_KEY_D", "secret-d");
    let mut cfg = config("", "FLIPAUDIT_MOCK_KEY_D");
    cfg.max_retries = 0;
    let (url, _) = serve(vec![(200, "{\"choices\": []}".into())]);
    cfg.base_url = url;
    let model = RemoteChatModel::new(cfg, None).unwrap();
    assert!(matches!(model.query("p"), Err(Error::Transport(_))));
}

#[test]
fn missing_key_fails_before_sending() {
    let model = RemoteChatModel::new(config("http://127.0.0.1:9", "FLIPAUDIT_MOCK_KEY_UNSET"), None).unwrap();
    assert!(matches!(model.query("p"), Err(Error::MissingApiKey(v)) if v == "FLIPAUDIT_MOCK_KEY_UNSET"));
}

#[test]
fn rejects_hot_temperatures() {
    let mut cfg = config("http://127.0.0.1:9", "K");
    cfg.temperature = 0.7;
    assert!(RemoteChatModel::new(cfg, None).is_err());
}
