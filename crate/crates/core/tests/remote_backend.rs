use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use actor_reasoner::model::{DrivingStyle, Instruction, Intention, MetaAction, ScenarioDescription};
use actor_reasoner::reasoner::{heuristic_infer, reason, BackendConfig, BackendKind};

const ANSWER: &str =
    r#"{"intention":"yield","style":"conservative","action":"ACCELERATE","ehmi":"I will be Faster"}"#;

struct Stub {
    url: String,
    requests: mpsc::Receiver<(String, serde_json::Value)>,
}

/// Serves `replies` connections: waits `delay`, then answers with `status`
/// and `body`. Records each request line and JSON body.
fn stub(status: u16, body: String, delay: Duration, replies: usize) -> Stub {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let (tx, requests) = mpsc::channel();
    thread::spawn(move || {
        for _ in 0..replies {
            let Ok((stream, _)) = listener.accept() else { return };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request_line = String::new();
            reader.read_line(&mut request_line).unwrap();
            let mut length = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" || line.is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    length = v.trim().parse().unwrap();
                }
            }
            let mut payload = vec![0; length];
            reader.read_exact(&mut payload).unwrap();
            let json = serde_json::from_slice(&payload).unwrap_or(serde_json::Value::Null);
            let _ = tx.send((request_line.trim().to_string(), json));
            thread::sleep(delay);
            let mut stream = stream;
            let _ = write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
        }
    });
    Stub { url, requests }
}

fn remote(endpoint: &str, timeout: f64, retries: u32) -> BackendConfig {
    BackendConfig {
        kind: BackendKind::Remote,
        endpoint: Some(endpoint.to_string()),
        model: Some("stub-model".into()),
        timeout,
        max_retries: retries,
    }
}

fn scenario() -> ScenarioDescription {
    ScenarioDescription([-20.0, 0.0, 4.0, 0.0, 0.0, 18.0, 0.0, -3.0, 5.0])
}

#[test]
fn healthy_backend_answers() {
    let body = serde_json::json!({ "response": format!("Here is my reasoning. {ANSWER} Done.") }).to_string();
    let s = stub(200, body, Duration::ZERO, 1);
    let out = reason(&scenario(), &Instruction::new("I will be slower", 0.0, 1), &remote(&s.url, 5.0, 0));
    assert!(!out.is_fallback());
    assert_eq!(
        (out.intention, out.style, out.action, out.ehmi.as_str()),
        (Intention::Yield, DrivingStyle::Conservative, MetaAction::Accelerate, "I will be Faster")
    );
    let (line, json) = s.requests.recv().unwrap();
    assert!(line.starts_with("POST /api/generate "), "{line}");
    assert_eq!(json["model"], "stub-model");
    assert_eq!(json["stream"], false);
    assert!(json["prompt"].as_str().unwrap().contains("I will be slower"));
}

#[test]
fn unreachable_backend_falls_back() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    drop(listener);
    let i = Instruction::none();
    let out = reason(&scenario(), &i, &remote(&url, 2.0, 1));
    assert!(out.is_fallback());
    let h = heuristic_infer(&scenario(), &i);
    assert_eq!((out.intention, out.style, out.action, out.ehmi), (h.intention, h.style, h.action, h.ehmi));
}

#[test]
fn slow_backend_times_out_and_falls_back() {
    let body = serde_json::json!({ "response": ANSWER }).to_string();
    let s = stub(200, body, Duration::from_secs(3), 1);
    let start = Instant::now();
    let out = reason(&scenario(), &Instruction::none(), &remote(&s.url, 0.5, 0));
    assert!(out.is_fallback());
    assert!(start.elapsed() < Duration::from_secs(2), "{:?}", start.elapsed());
}

#[test]
fn error_status_and_bad_bodies_fall_back() {
    let s = stub(500, "{}".into(), Duration::ZERO, 2);
    assert!(reason(&scenario(), &Instruction::none(), &remote(&s.url, 2.0, 1)).is_fallback());
    // One retry after the first failure.
    for _ in 0..2 {
        s.requests.recv_timeout(Duration::from_secs(1)).unwrap();
    }

    let s = stub(200, r#"{"response":"I refuse to answer in JSON."}"#.into(), Duration::ZERO, 1);
    assert!(reason(&scenario(), &Instruction::none(), &remote(&s.url, 2.0, 0)).is_fallback());
    let s = stub(200, r#"{"text":"wrong key"}"#.into(), Duration::ZERO, 1);
    assert!(reason(&scenario(), &Instruction::none(), &remote(&s.url, 2.0, 0)).is_fallback());
}
