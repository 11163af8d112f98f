use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use intent_augment::lm::{BackendKind, EngineRun, LmClient, RemoteBackend};
use intent_augment::prompting::{build_generation_prompt, PromptTemplate};
use serde_json::{json, Value};

#[derive(Default)]
struct Seen {
    bodies: Vec<Value>,
    auth: Vec<String>,
}

/// Serves one canned (status, body) per connection, recording each request.
fn serve(replies: Vec<(u16, String)>) -> (String, Arc<Mutex<Seen>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/completions", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Seen::default()));
    let log = seen.clone();
    std::thread::spawn(move || {
        for (status, body) in replies {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut length = 0;
            let mut auth = String::new();
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                let lower = line.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    length = v.trim().parse().unwrap();
                }
                if lower.starts_with("authorization:") {
                    auth = line["authorization:".len()..].trim().to_string();
                }
            }
            let mut buf = vec![0; length];
            reader.read_exact(&mut buf).unwrap();
            {
                let mut log = log.lock().unwrap();
                log.bodies.push(serde_json::from_slice(&buf).unwrap());
                log.auth.push(auth);
            }
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
    });
    (url, seen)
}

fn client(url: &str, cache: &std::path::Path) -> LmClient {
    let run = EngineRun {
        backend: BackendKind::Remote,
        engine_name: "davinci".into(),
        endpoint_url: Some(url.into()),
        temperature: 0.7,
        samples_per_call: 2,
        max_length: 32,
        cache_dir: cache.to_path_buf(),
        initial_backoff_ms: 1,
        max_retries: 2,
        ..EngineRun::default()
    };
    LmClient::with_backend(run, Arc::new(RemoteBackend::new(url, "secret", Duration::from_secs(5))))
}

fn prompt() -> intent_augment::prompting::RenderedPrompt {
    build_generation_prompt(
        "play music",
        "play_music",
        &["play some jazz".into(), "put on a song".into()],
        &PromptTemplate::single_intent(),
    )
    .unwrap()
}

#[test]
fn transient_status_is_retried_and_result_cached() {
    let ok = json!({
        "choices": [{"text": " second\n", "index": 1}, {"text": " first\n", "index": 0}],
        "usage": {"total_tokens": 12}
    });
    let (url, seen) = serve(vec![(503, "busy".into()), (200, ok.to_string())]);
    let cache = tempfile::tempdir().unwrap();
    let lm = client(&url, cache.path());
    let p = prompt();

    let record = lm.complete(&p).unwrap();
    assert_eq!(record.completions, [" first\n", " second\n"]);
    assert_eq!(record.call_cost_meta, Some(json!({"total_tokens": 12})));
    assert_eq!(lm.backend_calls(), 2);

    let seen = seen.lock().unwrap();
    assert_eq!(seen.bodies.len(), 2);
    let body = &seen.bodies[1];
    assert_eq!(body["model"], "davinci");
    assert_eq!(body["prompt"], p.text.as_str());
    assert_eq!(body["temperature"], 0.7);
    assert_eq!(body["n"], 2);
    assert_eq!(body["stop"], "\nExample");
    assert_eq!(body["max_tokens"], 32);
    assert_eq!(seen.auth[1], "Bearer secret");
    drop(seen);

    // The server is gone; only the cache can answer now.
    let again = client(&url, cache.path());
    assert_eq!(again.complete(&p).unwrap().completions, record.completions);
    assert_eq!(again.backend_calls(), 0);
}

#[test]
fn client_errors_are_not_retried() {
    let (url, seen) = serve(vec![(400, "bad request".into())]);
    let cache = tempfile::tempdir().unwrap();
    let lm = client(&url, cache.path());
    let err = lm.complete(&prompt()).unwrap_err();
    assert!(err.to_string().contains("400"), "{err}");
    assert_eq!(lm.backend_calls(), 1);
    assert_eq!(seen.lock().unwrap().bodies.len(), 1);
}

#[test]
fn retries_give_up_after_the_limit() {
    let (url, _) = serve(vec![(429, "slow".into()), (429, "slow".into()), (500, "down".into())]);
    let cache = tempfile::tempdir().unwrap();
    let lm = client(&url, cache.path());
    let err = lm.complete(&prompt()).unwrap_err();
    assert!(err.to_string().contains("giving up after 3 attempts"), "{err}");
    assert_eq!(lm.backend_calls(), 3);
}
