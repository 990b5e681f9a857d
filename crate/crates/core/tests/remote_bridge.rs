//! Remote refinement path against an in-process mock bridge: box prompts come
//! back as the filled rectangle, mask prompts are echoed.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use margin_ffcl::raster::{BinaryMask, GrayImage};
use margin_ffcl::refinement::{
    remote_refine, BBoxPrompt, Backend, Prompt, RefineError, RefineStage, RefinementConfig, Refiner, RemoteClient,
    RemoteError,
};
use serde_json::{json, Value};

#[derive(Clone, Copy, PartialEq)]
enum Mode {
    Mock,
    /// Answers every refinement with a mask one row short.
    WrongDims,
    /// Health reports a non-ok status.
    Unhealthy,
}

struct Bridge {
    url: String,
    health_calls: Arc<AtomicUsize>,
    refine_calls: Arc<AtomicUsize>,
}

fn read_request(stream: &mut TcpStream) -> Option<(String, String, Vec<u8>)> {
    let mut reader = BufReader::new(stream);
    let mut line = String::new();
    reader.read_line(&mut line).ok()?;
    let mut parts = line.split_whitespace();
    let method = parts.next()?.to_string();
    let path = parts.next()?.to_string();
    let mut len = 0usize;
    loop {
        let mut h = String::new();
        reader.read_line(&mut h).ok()?;
        let h = h.trim_end();
        if h.is_empty() {
            break;
        }
        if let Some((k, v)) = h.split_once(':') {
            if k.eq_ignore_ascii_case("content-length") {
                len = v.trim().parse().ok()?;
            }
        }
    }
    let mut body = vec![0; len];
    reader.read_exact(&mut body).ok()?;
    Some((method, path, body))
}

fn respond(stream: &mut TcpStream, code: u16, body: &str) {
    let head = format!(
        "HTTP/1.1 {code} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n",
        body.len()
    );
    let _ = stream.write_all(head.as_bytes());
    let _ = stream.write_all(body.as_bytes());
}

fn answer(mode: Mode, req: &Value) -> (u16, String) {
    let decode = |s: &Value| B64.decode(s.as_str().unwrap_or_default()).ok();
    let Some(image) = decode(&req["image"]).and_then(|b| GrayImage::from_png_bytes(&b).ok()) else {
        return (400, r#"{"detail":"bad image"}"#.into());
    };
    let (h, w) = image.dims();
    let mask = match req["prompt_type"].as_str() {
        Some("box") => {
            let b: Vec<usize> = serde_json::from_value(req["box"].clone()).unwrap_or_default();
            if b.len() != 4 {
                return (422, r#"{"detail":"empty prompt"}"#.into());
            }
            BinaryMask::from_fn(h, w, |r, c| (b[1]..=b[3]).contains(&r) && (b[0]..=b[2]).contains(&c))
        }
        Some("mask") => match decode(&req["mask"]).and_then(|b| BinaryMask::from_png_bytes(&b).ok()) {
            Some(m) => m,
            None => return (400, r#"{"detail":"bad mask"}"#.into()),
        },
        _ => return (422, r#"{"detail":"empty prompt"}"#.into()),
    };
    let mask = if mode == Mode::WrongDims {
        BinaryMask::from_fn(h - 1, w, |r, c| mask.is_set(r, c))
    } else {
        mask
    };
    let png = mask.to_png_bytes().unwrap();
    (200, json!({"mask": B64.encode(png), "score": 1.0}).to_string())
}

fn spawn(mode: Mode) -> Bridge {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let health_calls = Arc::new(AtomicUsize::new(0));
    let refine_calls = Arc::new(AtomicUsize::new(0));
    let (hc, rc) = (health_calls.clone(), refine_calls.clone());
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let (hc, rc) = (hc.clone(), rc.clone());
            thread::spawn(move || {
                let Some((method, path, body)) = read_request(&mut stream) else { return };
                match (method.as_str(), path.as_str()) {
                    ("GET", "/v1/health") => {
                        hc.fetch_add(1, Ordering::SeqCst);
                        let status = if mode == Mode::Unhealthy { "loading" } else { "ok" };
                        respond(&mut stream, 200, &json!({"status": status, "backend": "mock"}).to_string());
                    }
                    ("POST", "/v1/refine") => {
                        rc.fetch_add(1, Ordering::SeqCst);
                        let (code, text) = match serde_json::from_slice::<Value>(&body) {
                            Ok(req) => answer(mode, &req),
                            Err(_) => (400, r#"{"detail":"malformed json"}"#.into()),
                        };
                        respond(&mut stream, code, &text);
                    }
                    _ => respond(&mut stream, 404, "{}"),
                }
            });
        }
    });
    Bridge {
        url,
        health_calls,
        refine_calls,
    }
}

/// An address nothing listens on.
fn dead_endpoint() -> String {
    let l = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", l.local_addr().unwrap());
    drop(l);
    url
}

fn image() -> GrayImage {
    GrayImage::new(10, 10, (0..100).map(|v| (v * 2) as u8).collect()).unwrap()
}

fn remote_cfg(endpoint: &str) -> RefinementConfig {
    RefinementConfig {
        backend: Backend::Remote,
        endpoint: Some(endpoint.to_string()),
        timeout_ms: 2000,
        ..RefinementConfig::default()
    }
}

#[test]
fn mask_prompt_is_echoed() {
    let bridge = spawn(Mode::Mock);
    let prompt = BinaryMask::from_fn(10, 10, |r, c| (r * 7 + c * 3) % 5 == 0);
    let got = remote_refine(&image(), Prompt::Mask(&prompt), &bridge.url, 2000).unwrap();
    assert_eq!(got, prompt);
}

#[test]
fn box_prompt_fills_the_rectangle() {
    let bridge = spawn(Mode::Mock);
    let b = BBoxPrompt {
        x_min: 2,
        y_min: 3,
        x_max: 5,
        y_max: 7,
        delta_w: 0,
        delta_h: 0,
    };
    let got = remote_refine(&image(), Prompt::Box(&b), &bridge.url, 2000).unwrap();
    let want = BinaryMask::from_fn(10, 10, |r, c| (3..=7).contains(&r) && (2..=5).contains(&c));
    assert_eq!(got, want);
    assert_eq!(got.count_ones(), 4 * 5);
}

#[test]
fn two_stage_refinement_returns_box_then_echo() {
    let bridge = spawn(Mode::Mock);
    let refiner = Refiner::new(&remote_cfg(&bridge.url)).unwrap();
    let mc = BinaryMask::from_fn(10, 10, |r, c| (4..6).contains(&r) && (3..7).contains(&c));
    let r = refiner.refine(&image(), &mc, "s1").unwrap();
    assert_eq!(r.m2, mc);
    assert_eq!(r.m1, r.bbox.fill(10, 10));
    assert_eq!(r.backend, "remote:mock");
    // A second image reuses the cached health state.
    refiner.refine(&image(), &mc, "s2").unwrap();
    assert_eq!(bridge.health_calls.load(Ordering::SeqCst), 1);
    assert_eq!(bridge.refine_calls.load(Ordering::SeqCst), 4);
}

#[test]
fn mismatched_response_dims_are_rejected() {
    let bridge = spawn(Mode::WrongDims);
    let prompt = BinaryMask::ones(10, 10);
    let err = remote_refine(&image(), Prompt::Mask(&prompt), &bridge.url, 2000).unwrap_err();
    assert!(matches!(
        err,
        RemoteError::DimMismatch {
            expected: (10, 10),
            got: (9, 10)
        }
    ));

    let refiner = Refiner::new(&remote_cfg(&bridge.url)).unwrap();
    let err = refiner.refine(&image(), &prompt, "s").unwrap_err();
    assert!(matches!(
        err,
        RefineError::Backend {
            stage: RefineStage::Box,
            source: RemoteError::DimMismatch { .. }
        }
    ));
}

#[test]
fn mismatched_prompt_dims_never_leave_the_client() {
    let bridge = spawn(Mode::Mock);
    let client = RemoteClient::new(&bridge.url, 2000, 1);
    let err = client.refine(&image(), Prompt::Mask(&BinaryMask::ones(10, 9)), "s").unwrap_err();
    assert!(matches!(err, RemoteError::DimMismatch { .. }));
    assert_eq!(bridge.refine_calls.load(Ordering::SeqCst), 0);
}

#[test]
fn unreachable_bridge_fails_the_health_gate() {
    let refiner = Refiner::new(&remote_cfg(&dead_endpoint())).unwrap();
    let err = refiner.refine(&image(), &BinaryMask::ones(10, 10), "s").unwrap_err();
    assert!(matches!(
        err,
        RefineError::Backend {
            stage: RefineStage::Health,
            source: RemoteError::Unreachable { .. }
        }
    ));
}

#[test]
fn unhealthy_bridge_gets_no_refinement_calls() {
    let bridge = spawn(Mode::Unhealthy);
    let client = RemoteClient::new(&bridge.url, 2000, 1);
    assert!(matches!(client.health(), Err(RemoteError::Unreachable { .. })));
    let err = client.refine(&image(), Prompt::Mask(&BinaryMask::ones(10, 10)), "s").unwrap_err();
    assert!(matches!(err, RemoteError::Unreachable { .. }));
    assert_eq!(bridge.refine_calls.load(Ordering::SeqCst), 0);
}

#[test]
fn concurrent_callers_share_one_client() {
    let bridge = spawn(Mode::Mock);
    let client = RemoteClient::new(&bridge.url, 2000, 2);
    let prompts: Vec<BinaryMask> = (0..6).map(|k| BinaryMask::from_fn(10, 10, |r, _| r == k)).collect();
    thread::scope(|s| {
        for p in &prompts {
            let client = &client;
            s.spawn(move || assert_eq!(&client.refine(&image(), Prompt::Mask(p), "s").unwrap(), p));
        }
    });
    assert_eq!(bridge.health_calls.load(Ordering::SeqCst), 1);
    assert_eq!(bridge.refine_calls.load(Ordering::SeqCst), 6);
}
