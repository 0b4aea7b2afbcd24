use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use base64::Engine as _;
use serde_json::{json, Value};

use scenesynth::dataset::make_toy_dataset;
use scenesynth::embed::{EmbeddingSource, TextEmbedder};
use scenesynth::rfilter::{filter_dataset, Decision, RemoteEmbedder, RemoteScorer, RetryPolicy, Scorer};
use scenesynth::{Error, Raster};

type Handler = dyn Fn(usize, &str, &str, &[u8]) -> (u16, String) + Send + Sync;

/// One-request-per-connection HTTP server; the handler sees the request
/// index, method, path and body.
struct MockService {
    endpoint: String,
    requests: Arc<AtomicUsize>,
}

impl MockService {
    fn start(handler: impl Fn(usize, &str, &str, &[u8]) -> (u16, String) + Send + Sync + 'static) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let endpoint = format!("http://{}", listener.local_addr().unwrap());
        let requests = Arc::new(AtomicUsize::new(0));
        let counter = requests.clone();
        let handler: Arc<Handler> = Arc::new(handler);
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { continue };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 {
                    continue;
                }
                let mut parts = line.split_whitespace();
                let method = parts.next().unwrap_or_default().to_string();
                let path = parts.next().unwrap_or_default().to_string();
                let mut length = 0;
                loop {
                    let mut header = String::new();
                    reader.read_line(&mut header).unwrap();
                    let header = header.trim_end();
                    if header.is_empty() {
                        break;
                    }
                    if let Some((k, v)) = header.split_once(':') {
                        if k.eq_ignore_ascii_case("content-length") {
                            length = v.trim().parse().unwrap();
                        }
                    }
                }
                let mut body = vec![0; length];
                reader.read_exact(&mut body).unwrap();
                let index = counter.fetch_add(1, Ordering::SeqCst);
                let (status, payload) = handler(index, &method, &path, &body);
                let response = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
                    payload.len()
                );
                let _ = stream.write_all(response.as_bytes());
            }
        });
        Self { endpoint, requests }
    }

    fn count(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }
}

fn fast_retry() -> RetryPolicy {
    RetryPolicy {
        retries: 3,
        base_delay: Duration::from_millis(5),
    }
}

fn image() -> Raster {
    Raster::new(3, 2, 3, (0..18).map(|i| i * 13).collect()).unwrap()
}

/// Scores by checking the request shape: the image must decode to the
/// original raster.
fn scoring_service() -> MockService {
    MockService::start(|_, method, path, body| match (method, path) {
        ("GET", "/v1/health") => (200, json!({"model": "fixture-clip"}).to_string()),
        ("POST", "/v1/score") => {
            let req: Value = serde_json::from_slice(body).unwrap();
            let png = base64::engine::general_purpose::STANDARD
                .decode(req["image_b64"].as_str().unwrap())
                .unwrap();
            let decoded = Raster::from_image(image::load_from_memory(&png).unwrap()).unwrap();
            if decoded != image() || req["text"] != "A satellite image of disk" {
                return (400, json!({"error": "unexpected request"}).to_string());
            }
            (200, json!({"score": 0.3125}).to_string())
        }
        ("POST", "/v1/embed_text") => {
            let req: Value = serde_json::from_slice(body).unwrap();
            let text = req["text"].as_str().unwrap();
            if text == "unnormalized" {
                return (200, json!({"embedding": [3.0, 4.0, 0.0, 0.0]}).to_string());
            }
            let n = text.len() as f64;
            let norm = (n * n + 5.0).sqrt();
            (200, json!({"embedding": [n / norm, 1.0 / norm, 0.0, 2.0 / norm]}).to_string())
        }
        _ => (404, String::new()),
    })
}

#[test]
fn health_and_score_follow_the_protocol() {
    let svc = scoring_service();
    let scorer = RemoteScorer::with_retry(&svc.endpoint, fast_retry()).unwrap();
    assert_eq!(scorer.health().unwrap(), "fixture-clip");
    assert_eq!(scorer.score(&image(), "A satellite image of disk").unwrap(), 0.3125);
}

#[test]
fn embeddings_are_normalized_and_external() {
    let svc = scoring_service();
    let emb = RemoteEmbedder::connect(&svc.endpoint, fast_retry()).unwrap();
    assert_eq!(emb.dim(), 4);
    let e = emb.embed("abc").unwrap();
    assert_eq!(e.source(), EmbeddingSource::External);
    let norm: f64 = e.values().iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!((norm - 1.0).abs() < 1e-12);
    assert!((e.values()[0] - 3.0 / 14f64.sqrt()).abs() < 1e-12);
    assert_eq!(emb.embed("abc").unwrap(), e);
    assert!(emb.embed("unnormalized").unwrap_err().is_service());
}

#[test]
fn busy_service_is_retried() {
    let svc = MockService::start(|i, _, _, _| {
        if i < 2 {
            (503, String::new())
        } else {
            (200, json!({"score": -0.5}).to_string())
        }
    });
    let scorer = RemoteScorer::with_retry(&svc.endpoint, fast_retry()).unwrap();
    assert_eq!(scorer.score(&image(), "x").unwrap(), -0.5);
    assert_eq!(svc.count(), 3);
}

#[test]
fn client_errors_are_not_retried() {
    let svc = MockService::start(|_, _, _, _| (400, json!({"error": "bad image"}).to_string()));
    let scorer = RemoteScorer::with_retry(&svc.endpoint, fast_retry()).unwrap();
    let err = scorer.score(&image(), "x").unwrap_err();
    assert!(err.is_service(), "{err}");
    assert!(err.to_string().contains("400"), "{err}");
    assert_eq!(svc.count(), 1);
}

#[test]
fn persistent_busy_gives_up_after_retries() {
    let svc = MockService::start(|_, _, _, _| (503, String::new()));
    let scorer = RemoteScorer::with_retry(&svc.endpoint, fast_retry()).unwrap();
    assert!(matches!(scorer.score(&image(), "x"), Err(Error::Service(_))));
    assert_eq!(svc.count(), 4);
}

#[test]
fn out_of_range_and_malformed_scores_are_rejected() {
    let svc = MockService::start(|i, _, _, _| {
        if i == 0 {
            (200, json!({"score": 1.5}).to_string())
        } else {
            (200, json!({"points": 1}).to_string())
        }
    });
    let scorer = RemoteScorer::with_retry(&svc.endpoint, fast_retry()).unwrap();
    assert!(scorer.score(&image(), "x").unwrap_err().is_service());
    assert!(scorer.score(&image(), "x").unwrap_err().is_service());
}

#[test]
fn unreachable_service_is_a_service_error() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let scorer = RemoteScorer::with_retry(&format!("http://127.0.0.1:{port}"), fast_retry()).unwrap();
    assert!(scorer.health().unwrap_err().is_service());
    assert!(RemoteScorer::new("ftp://example").is_err());
}

#[test]
fn remote_filtering_keeps_order_and_reports_failures() {
    let ds = make_toy_dataset(6, 16, 2).unwrap();
    // Every seventh request fails permanently; a record stops at its first
    // failing view.
    let svc = MockService::start(|i, _, _, _| {
        if i % 7 == 6 {
            (400, json!({"error": "rejected"}).to_string())
        } else {
            (200, json!({"score": 0.9}).to_string())
        }
    });
    let scorer = RemoteScorer::with_retry(&svc.endpoint, fast_retry()).unwrap();
    let out = filter_dataset(&scorer, &ds, 0.4, 1).unwrap();
    let errors: Vec<&str> = out
        .rows
        .iter()
        .filter(|r| r.decision == Decision::Error)
        .map(|r| r.id.as_str())
        .collect();
    assert_eq!(errors, ["toy-00002", "toy-00005"]);
    let kept: Vec<&str> = out.kept.triplets.iter().map(|t| t.id.as_str()).collect();
    assert_eq!(kept, ["toy-00000", "toy-00001", "toy-00003", "toy-00004"]);
    assert!(out.rows[2].error.contains("toy-00002"));

    let down = MockService::start(|_, _, _, _| (400, String::new()));
    let scorer = RemoteScorer::with_retry(&down.endpoint, fast_retry()).unwrap();
    assert!(matches!(filter_dataset(&scorer, &ds, 0.4, 2), Err(Error::Service(_))));
}
