//! Gateway behavior against a real (local) HTTP server: retry schedules,
//! bounded concurrency, cache idempotence.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use caplign_core::blocking::SubtitleBlock;
use caplign_core::gateway::{Gateway, GatewayConfig, GatewayError};
use caplign_core::ingest::Subtitle;
use caplign_core::prompt::{build_prompt, ModelParams, PromptTemplate};

/// Minimal chat-completion server for tests: logs every POST body, can fail
/// the first N requests with 500, can delay, and tracks peak concurrency.
struct MockServer {
    addr: String,
    state: Arc<MockState>,
    shutdown: Arc<AtomicBool>,
    handle: Option<std::thread::JoinHandle<()>>,
}

#[derive(Default)]
struct MockState {
    bodies: Mutex<Vec<String>>,
    fail_first: AtomicUsize,
    served: AtomicUsize,
    delay_ms: AtomicU64,
    in_flight: AtomicUsize,
    peak_in_flight: AtomicUsize,
}

impl MockServer {
    fn start(reply_text: &'static str) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind mock server");
        let addr = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
        let state = Arc::new(MockState::default());
        let shutdown = Arc::new(AtomicBool::new(false));
        let state2 = Arc::clone(&state);
        let shutdown2 = Arc::clone(&shutdown);
        let handle = std::thread::spawn(move || {
            for stream in listener.incoming() {
                if shutdown2.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                let state = Arc::clone(&state2);
                std::thread::spawn(move || handle_connection(stream, state, reply_text));
            }
        });
        MockServer { addr, state, shutdown, handle: Some(handle) }
    }

    fn request_count(&self) -> usize {
        self.state.bodies.lock().unwrap().len()
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        // Unblock the accept loop.
        let authority = self.addr.trim_start_matches("http://");
        let authority = authority.split('/').next().unwrap();
        let _ = TcpStream::connect(authority);
        if let Some(handle) = self.handle.take() {
            let _ = handle.join();
        }
    }
}

fn handle_connection(stream: TcpStream, state: Arc<MockState>, reply_text: &str) {
    let current = state.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
    state.peak_in_flight.fetch_max(current, Ordering::SeqCst);

    let delay = state.delay_ms.load(Ordering::SeqCst);
    if delay > 0 {
        std::thread::sleep(Duration::from_millis(delay));
    }

    let mut reader = BufReader::new(stream);
    let mut content_length = 0usize;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).is_err() || line == "\r\n" || line.is_empty() {
            break;
        }
        if let Some(value) = line.to_ascii_lowercase().strip_prefix("content-length:") {
            content_length = value.trim().parse().unwrap_or(0);
        }
    }
    let mut body = vec![0u8; content_length];
    let _ = reader.read_exact(&mut body);
    state.bodies.lock().unwrap().push(String::from_utf8_lossy(&body).into_owned());

    let nth = state.served.fetch_add(1, Ordering::SeqCst);
    let failing = nth < state.fail_first.load(Ordering::SeqCst);
    let mut stream = reader.into_inner();
    if failing {
        let _ = stream.write_all(b"HTTP/1.1 500 Internal Server Error\r\ncontent-length: 0\r\nconnection: close\r\n\r\n");
    } else {
        let payload = serde_json::json!({
            "choices": [{"message": {"content": reply_text}}]
        })
        .to_string();
        let _ = stream.write_all(
            format!(
                "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{}",
                payload.len(),
                payload
            )
            .as_bytes(),
        );
    }
    state.in_flight.fetch_sub(1, Ordering::SeqCst);
}

fn config(addr: &str, cache_dir: std::path::PathBuf) -> GatewayConfig {
    GatewayConfig {
        endpoint_url: addr.to_string(),
        backoff_base_ms: 1,
        request_timeout_s: 10.0,
        cache_dir,
        ..GatewayConfig::default()
    }
}

fn request(n: u32) -> caplign_core::prompt::PromptRequest {
    let block = SubtitleBlock {
        video_id: format!("video{n}"),
        block_index: 0,
        duration_s: Some(600.0),
        subtitles: vec![Subtitle {
            text: format!("subtitle text {n}"),
            start_s: 5.0,
            end_s: 9.0,
        }],
    };
    build_prompt(&block, &PromptTemplate::default(), &ModelParams::default()).unwrap()
}

#[test]
fn fixed_reply_reaches_caller() {
    let server = MockServer::start("0s: A fixed test caption.");
    let dir = tempfile::tempdir().unwrap();
    let gateway = Gateway::new(config(&server.addr, dir.path().into())).unwrap();
    let response = gateway.complete(&request(1)).unwrap();
    assert_eq!(response.raw_text, "0s: A fixed test caption.");
    assert!(!response.from_cache);
}

#[test]
fn two_failures_then_success_within_three_attempts() {
    let server = MockServer::start("ok");
    server.state.fail_first.store(2, Ordering::SeqCst);
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(&server.addr, dir.path().into());
    cfg.max_retries = 3;
    let gateway = Gateway::new(cfg).unwrap();
    let response = gateway.complete(&request(1)).unwrap();
    assert_eq!(response.raw_text, "ok");
    assert_eq!(server.request_count(), 3, "failed twice, succeeded on the third attempt");
}

#[test]
fn retries_exhaust_with_last_status() {
    let server = MockServer::start("unreached");
    server.state.fail_first.store(100, Ordering::SeqCst);
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(&server.addr, dir.path().into());
    cfg.max_retries = 2;
    let gateway = Gateway::new(cfg).unwrap();
    let err = gateway.complete(&request(1)).unwrap_err();
    match err {
        GatewayError::ExhaustedRetries { attempts, last_status } => {
            assert_eq!(attempts, 3);
            assert_eq!(last_status, Some(500));
        }
        other => panic!("unexpected error: {other}"),
    }
    assert_eq!(server.request_count(), 3);
}

#[test]
fn batch_respects_concurrency_limit() {
    let server = MockServer::start("0s: batched.");
    server.state.delay_ms.store(15, Ordering::SeqCst);
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(&server.addr, dir.path().into());
    cfg.concurrency_limit = 4;
    let gateway = Gateway::new(cfg).unwrap();
    let requests: Vec<_> = (0..24).map(request).collect();
    let outcomes = gateway.batch_complete(&requests);
    assert_eq!(outcomes.len(), 24);
    assert!(outcomes.iter().all(|o| o.result.is_ok()));
    let peak = server.state.peak_in_flight.load(Ordering::SeqCst);
    assert!(peak <= 4, "peak in-flight {peak} exceeded the limit");
    assert!(peak >= 2, "expected some observed parallelism, saw {peak}");
}

#[test]
fn second_batch_is_served_from_cache() {
    let server = MockServer::start("0s: cache me.");
    let dir = tempfile::tempdir().unwrap();
    let gateway = Gateway::new(config(&server.addr, dir.path().into())).unwrap();
    let requests: Vec<_> = (0..10).map(request).collect();

    let first = gateway.batch_complete(&requests);
    assert!(first.iter().all(|o| o.result.is_ok()));
    let after_first = server.request_count();
    assert_eq!(after_first, 10);

    let second = gateway.batch_complete(&requests);
    assert!(second.iter().all(|o| o.result.as_ref().unwrap().from_cache));
    assert_eq!(server.request_count(), after_first, "no network traffic for cached prompts");
}

#[test]
fn failed_items_are_retried_on_rerun_cached_ones_are_not() {
    let server = MockServer::start("0s: eventually fine.");
    // Exactly one request fails every attempt in the first batch.
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(&server.addr, dir.path().into());
    cfg.max_retries = 0;
    cfg.concurrency_limit = 1;
    server.state.fail_first.store(1, Ordering::SeqCst);
    let gateway = Gateway::new(cfg).unwrap();
    let requests: Vec<_> = (0..5).map(request).collect();

    let first = gateway.batch_complete(&requests);
    let failed: Vec<usize> =
        first.iter().filter(|o| o.result.is_err()).map(|o| o.index).collect();
    assert_eq!(failed, vec![0]);
    let after_first = server.request_count();

    let second = gateway.batch_complete(&requests);
    assert!(second.iter().all(|o| o.result.is_ok()));
    // Only the previously failed item touches the network again.
    assert_eq!(server.request_count(), after_first + 1);
}
