//! HTTP client for an external promptable-segmentation bridge.
//!
//! `GET /v1/health` must answer `{"status":"ok","backend":...}` before the
//! first refinement call. `POST /v1/refine` carries a base64 PNG image plus a
//! box or mask prompt and returns a base64 1-bit PNG mask. Requests are never
//! retried; at most `max_in_flight` run concurrently per client.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::raster::{BinaryMask, GrayImage};

use super::BBoxPrompt;

#[derive(Debug, thiserror::Error)]
pub enum RemoteError {
    #[error("bridge unreachable at {endpoint}: {reason}")]
    Unreachable { endpoint: String, reason: String },
    #[error("request timed out after {0} ms")]
    Timeout(u64),
    #[error("bridge answered HTTP {code}: {body}")]
    Status { code: u16, body: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("mask is {got:?}, expected {expected:?}")]
    DimMismatch { expected: (usize, usize), got: (usize, usize) },
}

pub enum Prompt<'a> {
    Box(&'a BBoxPrompt),
    Mask(&'a BinaryMask),
}

#[derive(Serialize)]
struct RefineRequest<'a> {
    image: String,
    prompt_type: &'a str,
    #[serde(rename = "box", skip_serializing_if = "Option::is_none")]
    bbox: Option<[usize; 4]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mask: Option<String>,
    session: &'a str,
}

#[derive(Deserialize)]
struct RefineResponse {
    mask: String,
    #[allow(dead_code)]
    score: f64,
}

#[derive(Deserialize)]
struct HealthResponse {
    status: String,
    backend: String,
}

struct InFlight {
    count: Mutex<usize>,
    freed: Condvar,
    max: usize,
}

struct Permit<'a>(&'a InFlight);

impl InFlight {
    fn acquire(&self) -> Permit<'_> {
        let mut n = self.count.lock().unwrap_or_else(|e| e.into_inner());
        while *n >= self.max {
            n = self.freed.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.0.count.lock().unwrap_or_else(|e| e.into_inner());
        *n -= 1;
        self.0.freed.notify_one();
    }
}

pub struct RemoteClient {
    agent: ureq::Agent,
    endpoint: String,
    timeout_ms: u64,
    backend: Mutex<Option<String>>,
    in_flight: InFlight,
}

impl RemoteClient {
    pub fn new(endpoint: &str, timeout_ms: u64, max_in_flight: usize) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            agent,
            endpoint: endpoint.trim_end_matches('/').to_string(),
            timeout_ms,
            backend: Mutex::new(None),
            in_flight: InFlight {
                count: Mutex::new(0),
                freed: Condvar::new(),
                max: max_in_flight.max(1),
            },
        }
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    fn transport(&self, e: ureq::Error) -> RemoteError {
        match e {
            ureq::Error::Timeout(_) => RemoteError::Timeout(self.timeout_ms),
            ureq::Error::Io(io) if io.kind() == std::io::ErrorKind::TimedOut => RemoteError::Timeout(self.timeout_ms),
            ureq::Error::Io(_) | ureq::Error::ConnectionFailed | ureq::Error::HostNotFound => RemoteError::Unreachable {
                endpoint: self.endpoint.clone(),
                reason: e.to_string(),
            },
            other => RemoteError::Protocol(other.to_string()),
        }
    }

    fn read_body(&self, resp: &mut ureq::http::Response<ureq::Body>) -> Result<String, RemoteError> {
        resp.body_mut().read_to_string().map_err(|e| self.transport(e))
    }

    /// Queries `/v1/health`; returns the backend id. Any failure is reported
    /// as unreachable.
    pub fn health(&self) -> Result<String, RemoteError> {
        let unreachable = |reason: String| RemoteError::Unreachable {
            endpoint: self.endpoint.clone(),
            reason,
        };
        let mut resp = self
            .agent
            .get(format!("{}/v1/health", self.endpoint))
            .call()
            .map_err(|e| unreachable(e.to_string()))?;
        let status = resp.status().as_u16();
        let body = self.read_body(&mut resp).map_err(|e| unreachable(e.to_string()))?;
        if status != 200 {
            return Err(unreachable(format!("health returned HTTP {status}")));
        }
        let h: HealthResponse = serde_json::from_str(&body).map_err(|e| unreachable(format!("bad health body: {e}")))?;
        if h.status != "ok" {
            return Err(unreachable(format!("health status `{}`", h.status)));
        }
        Ok(h.backend)
    }

    /// Backend id, running the health check on first use.
    pub fn ensure_healthy(&self) -> Result<String, RemoteError> {
        let mut cached = self.backend.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(b) = cached.as_ref() {
            return Ok(b.clone());
        }
        let b = self.health()?;
        *cached = Some(b.clone());
        Ok(b)
    }

    /// One refinement round trip. The returned mask must match the image size.
    pub fn refine(&self, image: &GrayImage, prompt: Prompt<'_>, session: &str) -> Result<BinaryMask, RemoteError> {
        self.ensure_healthy()?;
        let encode_err = |e: crate::raster::RasterError| RemoteError::Protocol(format!("encoding request: {e}"));
        let image_b64 = B64.encode(image.to_png_bytes().map_err(encode_err)?);
        let req = match prompt {
            Prompt::Box(b) => RefineRequest {
                image: image_b64,
                prompt_type: "box",
                bbox: Some([b.x_min, b.y_min, b.x_max, b.y_max]),
                mask: None,
                session,
            },
            Prompt::Mask(m) => {
                if m.dims() != image.dims() {
                    return Err(RemoteError::DimMismatch {
                        expected: image.dims(),
                        got: m.dims(),
                    });
                }
                RefineRequest {
                    image: image_b64,
                    prompt_type: "mask",
                    bbox: None,
                    mask: Some(B64.encode(m.to_png_bytes().map_err(encode_err)?)),
                    session,
                }
            }
        };
        let body = serde_json::to_string(&req).map_err(|e| RemoteError::Protocol(e.to_string()))?;
        let _permit = self.in_flight.acquire();
        let mut resp = self
            .agent
            .post(format!("{}/v1/refine", self.endpoint))
            .header("content-type", "application/json")
            .send(body.as_str())
            .map_err(|e| self.transport(e))?;
        let status = resp.status().as_u16();
        let text = self.read_body(&mut resp)?;
        if status != 200 {
            return Err(RemoteError::Status { code: status, body: text });
        }
        let parsed: RefineResponse = serde_json::from_str(&text).map_err(|e| RemoteError::Protocol(format!("response body: {e}")))?;
        let png = B64
            .decode(parsed.mask.as_bytes())
            .map_err(|e| RemoteError::Protocol(format!("mask base64: {e}")))?;
        let mask = BinaryMask::from_png_bytes(&png).map_err(|e| RemoteError::Protocol(format!("mask png: {e}")))?;
        if mask.dims() != image.dims() {
            return Err(RemoteError::DimMismatch {
                expected: image.dims(),
                got: mask.dims(),
            });
        }
        Ok(mask)
    }
}

/// Single call against a fresh client: health check, then one refinement.
pub fn remote_refine(image: &GrayImage, prompt: Prompt<'_>, endpoint: &str, timeout_ms: u64) -> Result<BinaryMask, RemoteError> {
    RemoteClient::new(endpoint, timeout_ms, 1).refine(image, prompt, "single")
}
