//! Prompt generation from a coarse mask and the two-stage refinement: a box
//! prompt produces `m1`, the coarse mask itself as prompt produces the final
//! `m2`. Both stages go to the configured backend.

mod morphology;
mod remote;

use std::fmt;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::raster::{BinaryMask, CoarseMask, GrayImage};

pub use morphology::{morph_refine, snap_to_edges};
pub use remote::{remote_refine, Prompt, RemoteClient, RemoteError};

/// Environment variable overriding the configured remote endpoint.
pub const ENDPOINT_ENV: &str = "FFCL_REFINE_ENDPOINT";

#[derive(Debug, thiserror::Error)]
pub enum RefineError {
    #[error("coarse mask is empty; nothing to prompt with")]
    EmptyMask,
    #[error("dimension mismatch: {0}")]
    Dims(String),
    #[error("invalid refinement config: {0}")]
    Config(String),
    #[error("{stage} stage failed: {source}")]
    Backend {
        stage: RefineStage,
        #[source]
        source: RemoteError,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RefineStage {
    Health,
    Box,
    Mask,
}

impl fmt::Display for RefineStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RefineStage::Health => "health-check",
            RefineStage::Box => "box-prompt",
            RefineStage::Mask => "mask-prompt",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Morphological,
    Remote,
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Backend::Morphological => "morphological",
            Backend::Remote => "remote",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefinementConfig {
    pub backend: Backend,
    pub delta_w: usize,
    pub delta_h: usize,
    /// Disk radius for morphology.
    pub radius: usize,
    pub min_area: usize,
    pub endpoint: Option<String>,
    pub timeout_ms: u64,
    pub max_in_flight: usize,
    /// Band around the coarse boundary re-decided from image intensity; 0 disables.
    pub snap_radius: usize,
    /// Minimum local inside/outside contrast (intensity in [0, 1]) for snapping.
    pub snap_min_contrast: f64,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        Self {
            backend: Backend::Morphological,
            delta_w: 10,
            delta_h: 10,
            radius: 5,
            min_area: 25,
            endpoint: None,
            timeout_ms: 5000,
            max_in_flight: 4,
            snap_radius: 12,
            snap_min_contrast: 0.08,
        }
    }
}

impl RefinementConfig {
    pub fn validate(&self) -> Result<(), RefineError> {
        if self.radius < 1 {
            return Err(RefineError::Config("radius must be >= 1".into()));
        }
        if self.backend == Backend::Remote && self.resolved_endpoint().is_none() {
            return Err(RefineError::Config(format!(
                "remote backend needs an endpoint (config `endpoint` or ${ENDPOINT_ENV})"
            )));
        }
        if !(self.snap_min_contrast >= 0.0) {
            return Err(RefineError::Config("snap_min_contrast must be >= 0".into()));
        }
        Ok(())
    }

    /// The environment variable wins over the configured endpoint.
    pub fn resolved_endpoint(&self) -> Option<String> {
        std::env::var(ENDPOINT_ENV)
            .ok()
            .filter(|s| !s.is_empty())
            .or_else(|| self.endpoint.clone())
    }
}

/// Padded bounding box; `x` is the column, `y` the row, bounds inclusive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBoxPrompt {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
    pub delta_w: usize,
    pub delta_h: usize,
}

impl BBoxPrompt {
    pub fn full(height: usize, width: usize) -> Self {
        Self {
            x_min: 0,
            y_min: 0,
            x_max: width.saturating_sub(1),
            y_max: height.saturating_sub(1),
            delta_w: 0,
            delta_h: 0,
        }
    }

    #[inline]
    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.y_min..=self.y_max).contains(&row) && (self.x_min..=self.x_max).contains(&col)
    }

    pub fn as_array(&self) -> [usize; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn fill(&self, height: usize, width: usize) -> BinaryMask {
        BinaryMask::from_fn(height, width, |r, c| self.contains(r, c))
    }
}

/// Extent of the positive pixels, padded by `delta_w` columns and `delta_h`
/// rows on each side and clamped to the image.
pub fn compute_bbox(mc: &CoarseMask, delta_w: usize, delta_h: usize) -> Result<BBoxPrompt, RefineError> {
    let (h, w) = mc.dims();
    let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
    for r in 0..h {
        for c in 0..w {
            if mc.is_set(r, c) {
                r0 = r0.min(r);
                r1 = r1.max(r);
                c0 = c0.min(c);
                c1 = c1.max(c);
            }
        }
    }
    if r0 == usize::MAX {
        return Err(RefineError::EmptyMask);
    }
    Ok(BBoxPrompt {
        x_min: c0.saturating_sub(delta_w),
        y_min: r0.saturating_sub(delta_h),
        x_max: (c1 + delta_w).min(w - 1),
        y_max: (r1 + delta_h).min(h - 1),
        delta_w,
        delta_h,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefineResult {
    pub bbox: BBoxPrompt,
    pub m1: CoarseMask,
    pub m2: CoarseMask,
    pub backend: String,
    /// Wall-clock milliseconds for the box and mask stages.
    pub latency_ms: [f64; 2],
}

/// Reusable refiner; holds the remote client (and its health state) when the
/// backend is remote.
pub struct Refiner {
    cfg: RefinementConfig,
    client: Option<RemoteClient>,
}

impl Refiner {
    pub fn new(cfg: &RefinementConfig) -> Result<Self, RefineError> {
        cfg.validate()?;
        let client = match cfg.backend {
            Backend::Morphological => None,
            Backend::Remote => Some(RemoteClient::new(
                &cfg.resolved_endpoint().expect("validated"),
                cfg.timeout_ms,
                cfg.max_in_flight,
            )),
        };
        Ok(Self { cfg: cfg.clone(), client })
    }

    pub fn config(&self) -> &RefinementConfig {
        &self.cfg
    }

    /// Health-checks the remote bridge; a no-op for the built-in backend.
    pub fn check_backend(&self) -> Result<String, RefineError> {
        match &self.client {
            None => Ok(Backend::Morphological.to_string()),
            Some(c) => c.ensure_healthy().map_err(|source| RefineError::Backend {
                stage: RefineStage::Health,
                source,
            }),
        }
    }

    pub fn refine(&self, image: &GrayImage, mc: &CoarseMask, session: &str) -> Result<RefineResult, RefineError> {
        if image.dims() != mc.dims() {
            return Err(RefineError::Dims(format!("image {:?} vs mask {:?}", image.dims(), mc.dims())));
        }
        let bbox = compute_bbox(mc, self.cfg.delta_w, self.cfg.delta_h)?;
        let (h, w) = mc.dims();
        match &self.client {
            None => {
                let t0 = Instant::now();
                let m1 = bbox.fill(h, w);
                let t1 = Instant::now();
                let snapped = snap_to_edges(image, mc, &bbox, self.cfg.snap_radius, self.cfg.snap_min_contrast);
                let m2 = morph_refine(&snapped, Some(&bbox), self.cfg.radius, self.cfg.min_area);
                let t2 = Instant::now();
                Ok(RefineResult {
                    bbox,
                    m1,
                    m2,
                    backend: Backend::Morphological.to_string(),
                    latency_ms: [ms(t1 - t0), ms(t2 - t1)],
                })
            }
            Some(client) => {
                let backend = self.check_backend()?;
                let t0 = Instant::now();
                let m1 = client
                    .refine(image, Prompt::Box(&bbox), session)
                    .map_err(|source| RefineError::Backend {
                        stage: RefineStage::Box,
                        source,
                    })?;
                let t1 = Instant::now();
                let m2 = client
                    .refine(image, Prompt::Mask(mc), session)
                    .map_err(|source| RefineError::Backend {
                        stage: RefineStage::Mask,
                        source,
                    })?;
                let t2 = Instant::now();
                Ok(RefineResult {
                    bbox,
                    m1,
                    m2,
                    backend: format!("remote:{backend}"),
                    latency_ms: [ms(t1 - t0), ms(t2 - t1)],
                })
            }
        }
    }
}

fn ms(d: std::time::Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

/// One-off refinement with a fresh [`Refiner`].
pub fn refine(image: &GrayImage, mc: &CoarseMask, cfg: &RefinementConfig) -> Result<RefineResult, RefineError> {
    Refiner::new(cfg)?.refine(image, mc, "default")
}
