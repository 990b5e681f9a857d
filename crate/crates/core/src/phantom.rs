//! Seeded synthetic specimen radiographs with four-label ground truth.
//!
//! A sample is an elliptical specimen (label 1) on a zero background
//! (label 0) holding one elliptical tumor (label 2) that is brighter by
//! `contrast`. When a margin is present the tumor is centred within half a
//! band width of the specimen boundary, and the tumor pixels lying within
//! `band_width` of the boundary are relabelled 3.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::patchflow::{Manifest, ManifestEntry, Split};
use crate::raster::{squared_edt, GrayImage, LabelMask, RasterError, LABEL_BACKGROUND, LABEL_MARGIN, LABEL_NEGATIVE, LABEL_TUMOR};

pub const MAX_ATTEMPTS: usize = 100;

#[derive(Debug, thiserror::Error)]
pub enum PhantomError {
    #[error("invalid phantom config: {0}")]
    Config(String),
    #[error("sample {index}: no feasible geometry after {attempts} attempts")]
    Infeasible { index: u64, attempts: usize },
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest: {0}")]
    Manifest(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub image_size: usize,
    /// Specimen semi-axis range as fractions of `image_size`.
    pub specimen_axes: [f64; 2],
    /// Tumor semi-axis range in pixels.
    pub tumor_radius: [f64; 2],
    pub band_width: f64,
    pub tissue_intensity: f64,
    pub contrast: f64,
    pub noise_std: f64,
    /// Probability that a generated sample has a positive margin.
    pub margin_present: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            image_size: 512,
            specimen_axes: [0.28, 0.44],
            tumor_radius: [40.0, 64.0],
            band_width: 40.0,
            tissue_intensity: 0.45,
            contrast: 0.25,
            noise_std: 0.05,
            margin_present: 0.5,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<(), PhantomError> {
        let bad = |m: String| Err(PhantomError::Config(m));
        if self.image_size < 16 {
            return bad(format!("image_size {} too small", self.image_size));
        }
        let [a0, a1] = self.specimen_axes;
        if !(0.0 < a0 && a0 <= a1 && a1 < 0.5) {
            return bad(format!("specimen_axes {:?} must satisfy 0 < lo <= hi < 0.5", self.specimen_axes));
        }
        let [r0, r1] = self.tumor_radius;
        if !(1.0 <= r0 && r0 <= r1) {
            return bad(format!("tumor_radius {:?} must satisfy 1 <= lo <= hi", self.tumor_radius));
        }
        if !(self.band_width >= 1.0) {
            return bad(format!("band_width {} must be >= 1", self.band_width));
        }
        for (name, v) in [
            ("tissue_intensity", self.tissue_intensity),
            ("contrast", self.contrast),
            ("margin_present", self.margin_present),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} {v} outside [0, 1]"));
            }
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise_std {} must be >= 0", self.noise_std));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSample {
    pub image: GrayImage,
    pub mask: LabelMask,
    pub margin_present: bool,
    pub seed: u64,
    pub index: u64,
}

#[derive(Clone, Copy)]
struct Ellipse {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    theta: f64,
}

impl Ellipse {
    fn contains(&self, r: usize, c: usize) -> bool {
        let (dy, dx) = (r as f64 + 0.5 - self.cy, c as f64 + 0.5 - self.cx);
        let (s, co) = self.theta.sin_cos();
        let u = dx * co + dy * s;
        let v = -dx * s + dy * co;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }
}

fn uniform(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Geometry only: the label mask for one attempt, or `None` if infeasible.
fn try_geometry(cfg: &PhantomConfig, margin: bool, rng: &mut ChaCha8Rng) -> Option<Vec<u8>> {
    let n = cfg.image_size;
    let nf = n as f64;
    let specimen = Ellipse {
        cy: nf / 2.0 + rng.random_range(-0.04..0.04) * nf,
        cx: nf / 2.0 + rng.random_range(-0.04..0.04) * nf,
        a: uniform(rng, cfg.specimen_axes) * nf,
        b: uniform(rng, cfg.specimen_axes) * nf,
        theta: rng.random_range(0.0..std::f64::consts::PI),
    };
    let tumor_a = uniform(rng, cfg.tumor_radius);
    let tumor_b = uniform(rng, cfg.tumor_radius);
    let tumor_theta = rng.random_range(0.0..std::f64::consts::PI);

    let mut labels: Vec<u8> = (0..n * n)
        .map(|i| if specimen.contains(i / n, i % n) { LABEL_NEGATIVE } else { LABEL_BACKGROUND })
        .collect();
    // The specimen must not touch the image border.
    let touches = (0..n).any(|k| labels[k] != 0 || labels[(n - 1) * n + k] != 0 || labels[k * n] != 0 || labels[k * n + n - 1] != 0);
    if touches {
        return None;
    }
    let dist2 = squared_edt(n, n, |i| labels[i] == LABEL_BACKGROUND);
    let band2 = cfg.band_width * cfg.band_width;
    let max_r = tumor_a.max(tumor_b);
    let candidates: Vec<usize> = (0..n * n)
        .filter(|&i| {
            if labels[i] != LABEL_NEGATIVE {
                return false;
            }
            let d = dist2[i].sqrt();
            if margin {
                d <= cfg.band_width / 2.0
            } else {
                d > max_r + cfg.band_width + 1.0
            }
        })
        .collect();
    if candidates.is_empty() {
        return None;
    }
    let centre = candidates[rng.random_range(0..candidates.len())];
    let tumor = Ellipse {
        cy: (centre / n) as f64 + 0.5,
        cx: (centre % n) as f64 + 0.5,
        a: tumor_a,
        b: tumor_b,
        theta: tumor_theta,
    };
    let (r0, r1) = ((tumor.cy - max_r).floor().max(0.0) as usize, ((tumor.cy + max_r).ceil() as usize).min(n));
    let (c0, c1) = ((tumor.cx - max_r).floor().max(0.0) as usize, ((tumor.cx + max_r).ceil() as usize).min(n));
    for r in r0..r1 {
        for c in c0..c1 {
            let i = r * n + c;
            if labels[i] == LABEL_NEGATIVE && tumor.contains(r, c) {
                labels[i] = if dist2[i] <= band2 { LABEL_MARGIN } else { LABEL_TUMOR };
            }
        }
    }
    let has_margin = labels.contains(&LABEL_MARGIN);
    (has_margin == margin && labels.iter().any(|&l| l == LABEL_TUMOR || l == LABEL_MARGIN)).then_some(labels)
}

/// Generates sample `index`; deterministic in `(cfg.seed, index)`.
pub fn generate_sample(cfg: &PhantomConfig, index: u64) -> Result<PhantomSample, PhantomError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);
    let margin = rng.random_bool(cfg.margin_present);
    let labels = (0..MAX_ATTEMPTS)
        .find_map(|_| try_geometry(cfg, margin, &mut rng))
        .ok_or(PhantomError::Infeasible {
            index,
            attempts: MAX_ATTEMPTS,
        })?;
    let n = cfg.image_size;
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| PhantomError::Config(e.to_string()))?;
    let pixels = labels
        .iter()
        .map(|&l| {
            let base = match l {
                LABEL_BACKGROUND => return 0u8,
                LABEL_NEGATIVE => cfg.tissue_intensity,
                _ => cfg.tissue_intensity + cfg.contrast,
            };
            let v = base + if cfg.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            (v.clamp(0.0, 1.0) * 255.0).round() as u8
        })
        .collect();
    Ok(PhantomSample {
        image: GrayImage::new(n, n, pixels)?,
        mask: LabelMask::new(n, n, labels)?,
        margin_present: margin,
        seed: cfg.seed,
        index,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

/// Writes `images/<id>.png`, `masks/<id>.png` and `manifest.json` under
/// `out_dir`. Validation and test samples always carry a margin; training
/// samples use `cfg.margin_present`. Sample indices run consecutively over
/// train, val, test so every image has its own noise stream.
pub fn generate_dataset(cfg: &PhantomConfig, counts: SplitCounts, out_dir: impl AsRef<Path>) -> Result<Manifest, PhantomError> {
    cfg.validate()?;
    if counts.train + counts.val + counts.test == 0 {
        return Err(PhantomError::Config("at least one split needs a non-zero count".into()));
    }
    let out = out_dir.as_ref();
    std::fs::create_dir_all(out.join("images"))?;
    std::fs::create_dir_all(out.join("masks"))?;
    let positive_only = PhantomConfig {
        margin_present: 1.0,
        ..cfg.clone()
    };
    let mut entries = Vec::new();
    let mut index = 0u64;
    for split in Split::ALL {
        let c = if split == Split::Train { cfg } else { &positive_only };
        for k in 0..counts.get(split) {
            let s = generate_sample(c, index)?;
            let id = format!("{split}_{k:04}");
            let image_path = format!("images/{id}.png");
            let mask_path = format!("masks/{id}.png");
            s.image.save_png(out.join(&image_path))?;
            s.mask.save_png(out.join(&mask_path))?;
            entries.push(ManifestEntry {
                image_path,
                mask_path,
                split,
                patient_id: format!("P{index:04}"),
            });
            index += 1;
        }
    }
    let manifest = Manifest {
        entries,
        root: out.to_path_buf(),
    };
    manifest
        .save(out.join("manifest.json"))
        .map_err(|e| PhantomError::Manifest(e.to_string()))?;
    Ok(manifest)
}
