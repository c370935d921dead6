//! The embedding client against an in-process stub of the sidecar.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use kgwalk::encoder::{EncoderError, EncoderKind, EncoderSpec, HashEncoder, RemoteEncoder, StateEncoder};
use serde_json::{json, Value};
use tiny_http::{Header, Response, Server};

const DIM: usize = 16;

type Handler = dyn Fn(usize, &[String]) -> (u16, String) + Send + Sync;

struct Stub {
    server: Arc<Server>,
    calls: Arc<AtomicUsize>,
    requests: Arc<Mutex<Vec<Value>>>,
    worker: Option<JoinHandle<()>>,
}

impl Stub {
    fn start(handler: impl Fn(usize, &[String]) -> (u16, String) + Send + Sync + 'static) -> Self {
        let server = Arc::new(Server::http("127.0.0.1:0").unwrap());
        let calls = Arc::new(AtomicUsize::new(0));
        let requests = Arc::new(Mutex::new(Vec::new()));
        let handler: Box<Handler> = Box::new(handler);
        let worker = {
            let (server, calls, requests) = (server.clone(), calls.clone(), requests.clone());
            std::thread::spawn(move || {
                for mut req in server.incoming_requests() {
                    let mut body = String::new();
                    req.as_reader().read_to_string(&mut body).unwrap();
                    let (status, reply) = if req.url() != "/embed" || req.method() != &tiny_http::Method::Post {
                        (404, "no such route".to_owned())
                    } else {
                        let v: Value = serde_json::from_str(&body).unwrap();
                        let texts: Vec<String> = serde_json::from_value(v["texts"].clone()).unwrap();
                        requests.lock().unwrap().push(v);
                        handler(calls.fetch_add(1, Ordering::SeqCst), &texts)
                    };
                    let header = Header::from_bytes("Content-Type", "application/json").unwrap();
                    req.respond(Response::from_string(reply).with_status_code(status).with_header(header)).unwrap();
                }
            })
        };
        Self { server, calls, requests, worker: Some(worker) }
    }

    fn spec(&self) -> EncoderSpec {
        EncoderSpec {
            kind: EncoderKind::Remote,
            dim: DIM,
            endpoint: Some(format!("http://{}/", self.server.server_addr().to_ip().unwrap())),
            normalize: false,
            cache_capacity: 0,
            max_batch: 64,
            retries: 2,
            timeout_secs: 5,
            ..Default::default()
        }
    }

    fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Drop for Stub {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(w) = self.worker.take() {
            w.join().unwrap();
        }
    }
}

/// What the stub model returns for a text.
fn model(text: &str) -> Vec<f64> {
    HashEncoder::new(DIM, false).encode(text).unwrap().to_vec()
}

fn ok_body(texts: &[String]) -> String {
    json!({ "dim": DIM, "embeddings": texts.iter().map(|t| model(t)).collect::<Vec<_>>() }).to_string()
}

fn texts(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("### Environment: state {i} with tokens t{} t{}", i % 7, i * i)).collect()
}

#[test]
fn batch_round_trip_preserves_order_and_dimension() {
    let stub = Stub::start(|_, t| (200, ok_body(t)));
    let enc = RemoteEncoder::new(&stub.spec()).unwrap();
    let owned = texts(64);
    let refs: Vec<&str> = owned.iter().map(String::as_str).collect();
    let out = enc.encode_batch(&refs).unwrap();
    assert_eq!(out.len(), 64);
    for (t, e) in owned.iter().zip(&out) {
        assert_eq!(e.len(), DIM);
        assert_eq!(e.to_vec(), model(t));
    }
    assert_eq!(stub.calls(), 1);
    let req = &stub.requests.lock().unwrap()[0];
    assert_eq!(req["mode"], "last_token");
    assert_eq!(req["texts"].as_array().unwrap().len(), 64);
}

#[test]
fn large_batches_are_chunked_in_order() {
    let stub = Stub::start(|_, t| (200, ok_body(t)));
    let enc = RemoteEncoder::new(&EncoderSpec { max_batch: 10, ..stub.spec() }).unwrap();
    let owned = texts(25);
    let refs: Vec<&str> = owned.iter().map(String::as_str).collect();
    let out = enc.encode_batch(&refs).unwrap();
    assert_eq!(out.iter().map(|e| e.to_vec()).collect::<Vec<_>>(), owned.iter().map(|t| model(t)).collect::<Vec<_>>());
    let sizes: Vec<usize> = stub.requests.lock().unwrap().iter().map(|r| r["texts"].as_array().unwrap().len()).collect();
    assert_eq!(sizes, [10, 10, 5]);
}

#[test]
fn server_errors_are_retried() {
    let stub = Stub::start(|call, t| if call < 2 { (503, "warming up".into()) } else { (200, ok_body(t)) });
    let enc = RemoteEncoder::new(&stub.spec()).unwrap();
    assert_eq!(enc.encode("hello").unwrap().to_vec(), model("hello"));
    assert_eq!(stub.calls(), 3);
}

#[test]
fn retries_give_up_with_a_transport_error() {
    let stub = Stub::start(|_, _| (500, "boom".into()));
    let enc = RemoteEncoder::new(&stub.spec()).unwrap();
    match enc.encode("hello") {
        Err(EncoderError::Transport { attempts, message, .. }) => {
            assert_eq!(attempts, 3);
            assert!(message.contains("500"), "{message}");
        }
        other => panic!("expected transport error, got {other:?}"),
    }
    assert_eq!(stub.calls(), 3);
}

#[test]
fn client_errors_fail_immediately() {
    let stub = Stub::start(|_, _| (422, "texts must be strings".into()));
    let enc = RemoteEncoder::new(&stub.spec()).unwrap();
    match enc.encode("hello") {
        Err(EncoderError::Status { status, body }) => {
            assert_eq!(status, 422);
            assert_eq!(body, "texts must be strings");
        }
        other => panic!("expected status error, got {other:?}"),
    }
    assert_eq!(stub.calls(), 1);
}

#[test]
fn malformed_replies_are_rejected() {
    let wrong_dim = Stub::start(|_, t| (200, json!({ "dim": DIM + 1, "embeddings": t.iter().map(|_| vec![0.5; DIM + 1]).collect::<Vec<_>>() }).to_string()));
    assert!(matches!(
        RemoteEncoder::new(&wrong_dim.spec()).unwrap().encode("x"),
        Err(EncoderError::Dimension { expected: DIM, got }) if got == DIM + 1
    ));

    let short_row = Stub::start(|_, _| (200, json!({ "dim": DIM, "embeddings": [vec![0.5; DIM - 1]] }).to_string()));
    assert!(matches!(RemoteEncoder::new(&short_row.spec()).unwrap().encode("x"), Err(EncoderError::Dimension { .. })));

    let missing = Stub::start(|_, t| (200, ok_body(&t[1..])));
    assert!(matches!(
        RemoteEncoder::new(&missing.spec()).unwrap().encode_batch(&["a", "b", "c"]),
        Err(EncoderError::Count { expected: 3, got: 2 })
    ));

    let garbage = Stub::start(|_, _| (200, "not json".into()));
    assert!(matches!(RemoteEncoder::new(&garbage.spec()).unwrap().encode("x"), Err(EncoderError::Transport { .. })));
}

#[test]
fn empty_batch_makes_no_request() {
    let stub = Stub::start(|_, t| (200, ok_body(t)));
    let enc = RemoteEncoder::new(&stub.spec()).unwrap();
    assert!(enc.encode_batch(&[]).unwrap().is_empty());
    assert_eq!(stub.calls(), 0);
}

#[test]
fn repeated_calls_agree_and_normalization_is_applied() {
    let stub = Stub::start(|_, t| (200, ok_body(t)));
    let raw = RemoteEncoder::new(&stub.spec()).unwrap();
    let unit = RemoteEncoder::new(&EncoderSpec { normalize: true, ..stub.spec() }).unwrap();
    let text = "Current Entity: Washington Redskins";
    assert_eq!(raw.encode(text).unwrap(), raw.encode(text).unwrap());
    let u = unit.encode(text).unwrap().to_vec();
    let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!((norm - 1.0).abs() < 1e-12);
    assert_eq!(u, HashEncoder::new(DIM, true).encode(text).unwrap().to_vec());
}

#[test]
fn cached_remote_encoder_skips_repeat_requests() {
    let stub = Stub::start(|_, t| (200, ok_body(t)));
    let enc = EncoderSpec { cache_capacity: 8, ..stub.spec() }.build().unwrap();
    let first = enc.encode_batch(&["a", "b", "a"]).unwrap();
    let again = enc.encode_batch(&["b", "a"]).unwrap();
    assert_eq!(first[0], again[1]);
    assert_eq!(first[1], again[0]);
    assert_eq!(stub.calls(), 1);
    let sent = stub.requests.lock().unwrap()[0]["texts"].clone();
    assert_eq!(sent.as_array().unwrap().len(), 2, "{sent}");
}
