//! Sliding-window patch extraction, balanced batching and coarse-mask
//! reconstruction, plus the dataset manifest and a binary patch cache.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::Tensor;
use crate::raster::{BinaryMask, CoarseMask, GrayImage, RasterError, LABEL_MARGIN, LABEL_NEGATIVE, LABEL_TUMOR};

pub use crate::raster::LabelMask;

#[derive(Debug, thiserror::Error)]
pub enum PatchError {
    #[error("extraction: {0}")]
    Extraction(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid patch spec: {0}")]
    Config(String),
    #[error("balanced batches need both classes (positives {positives}, negatives {negatives})")]
    SingleClass { positives: usize, negatives: usize },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("patch cache: {0}")]
    Cache(String),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    /// Region labels counted as positive in this split: tumor and margin for
    /// training, margin only for validation and test.
    pub fn positive_labels(self) -> &'static [u8] {
        match self {
            Split::Train => &[LABEL_TUMOR, LABEL_MARGIN],
            Split::Val | Split::Test => &[LABEL_MARGIN],
        }
    }

    fn code(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.code() == c)
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}` (expected train, val or test)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NegativeStrides {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl NegativeStrides {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchSpec {
    pub patch_size: usize,
    pub stride_positive: usize,
    pub stride_negative: NegativeStrides,
    /// Fraction of window pixels a region must cover to label the window.
    pub label_fraction: f64,
}

impl Default for PatchSpec {
    fn default() -> Self {
        Self {
            patch_size: 64,
            stride_positive: 3,
            stride_negative: NegativeStrides {
                train: 45,
                val: 35,
                test: 60,
            },
            label_fraction: 0.5,
        }
    }
}

impl PatchSpec {
    pub fn validate(&self) -> Result<(), PatchError> {
        if self.patch_size == 0 {
            return Err(PatchError::Config("patch_size must be positive".into()));
        }
        let max = self.patch_size * 4;
        for (what, s) in [
            ("stride_positive", self.stride_positive),
            ("stride_negative.train", self.stride_negative.train),
            ("stride_negative.val", self.stride_negative.val),
            ("stride_negative.test", self.stride_negative.test),
        ] {
            if s == 0 || s > max {
                return Err(PatchError::Config(format!("{what} = {s} outside 1..={max}")));
            }
        }
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return Err(PatchError::Config(format!(
                "label_fraction = {} outside (0, 1]",
                self.label_fraction
            )));
        }
        Ok(())
    }

    /// Minimum pixel count for a region to claim a window.
    pub fn min_pixels(&self) -> u64 {
        (self.label_fraction * (self.patch_size * self.patch_size) as f64).ceil() as u64
    }
}

/// Which window classes to extract.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassPolicy {
    Positive,
    Negative,
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceRegion {
    Negative,
    Tumor,
    Margin,
}

impl SourceRegion {
    fn code(self) -> u8 {
        match self {
            SourceRegion::Negative => 0,
            SourceRegion::Tumor => 1,
            SourceRegion::Margin => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        [SourceRegion::Negative, SourceRegion::Tumor, SourceRegion::Margin]
            .into_iter()
            .find(|s| s.code() == c)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchRecord {
    /// Identifier of the source image; empty unless the caller sets it.
    pub image_id: String,
    /// `[1, patch_size, patch_size]`, values in `[0, 1]`.
    pub pixels: Tensor,
    /// `(row, col)` of the top-left pixel.
    pub origin: (usize, usize),
    pub label: u8,
    pub source_region: SourceRegion,
}

/// Summed-area table of an indicator over the mask.
struct Integral {
    w1: usize,
    s: Vec<u64>,
}

impl Integral {
    fn new(mask: &LabelMask, pred: impl Fn(u8) -> bool) -> Self {
        let (h, w) = mask.dims();
        let w1 = w + 1;
        let mut s = vec![0u64; (h + 1) * w1];
        for r in 0..h {
            let mut row = 0u64;
            for c in 0..w {
                row += u64::from(pred(mask.get(r, c)));
                s[(r + 1) * w1 + c + 1] = s[r * w1 + c + 1] + row;
            }
        }
        Self { w1, s }
    }

    fn window(&self, r: usize, c: usize, size: usize) -> u64 {
        let w1 = self.w1;
        self.s[(r + size) * w1 + c + size] + self.s[r * w1 + c] - self.s[r * w1 + c + size] - self.s[(r + size) * w1 + c]
    }
}

/// Origins along one axis: `0, stride, 2·stride, …` while the window fits.
pub fn grid_positions(extent: usize, patch_size: usize, stride: usize) -> Vec<usize> {
    if extent < patch_size || stride == 0 {
        return Vec::new();
    }
    (0..=extent - patch_size).step_by(stride).collect()
}

fn check_inputs(image: &GrayImage, mask: &LabelMask, spec: &PatchSpec) -> Result<(), PatchError> {
    spec.validate()?;
    if image.dims() != mask.dims() {
        return Err(PatchError::Extraction(format!(
            "image {:?} and mask {:?} differ in size",
            image.dims(),
            mask.dims()
        )));
    }
    let (h, w) = image.dims();
    if h < spec.patch_size || w < spec.patch_size {
        return Err(PatchError::Extraction(format!(
            "image {h}x{w} is smaller than the {0}x{0} patch",
            spec.patch_size
        )));
    }
    Ok(())
}

/// Extracts labelled windows. Positive windows come from the positive stride
/// grid, negative windows from the split's negative stride grid. A window is
/// positive if at least `τ` of its pixels carry a positive label for `split`
/// (checked first), negative if at least `τ` are negative tissue, and skipped
/// otherwise.
pub fn extract_patches(
    image: &GrayImage,
    mask: &LabelMask,
    spec: &PatchSpec,
    split: Split,
    policy: ClassPolicy,
) -> Result<Vec<PatchRecord>, PatchError> {
    check_inputs(image, mask, spec)?;
    let (h, w) = image.dims();
    let p = spec.patch_size;
    let need = spec.min_pixels();
    let pos_labels = split.positive_labels();
    let pos = Integral::new(mask, |l| pos_labels.contains(&l));
    let margin = Integral::new(mask, |l| l == LABEL_MARGIN && pos_labels.contains(&l));
    let neg = Integral::new(mask, |l| l == LABEL_NEGATIVE);
    let mut out = Vec::new();

    if matches!(policy, ClassPolicy::Positive | ClassPolicy::Both) {
        let s = spec.stride_positive;
        for &r in &grid_positions(h, p, s) {
            for &c in &grid_positions(w, p, s) {
                let n_pos = pos.window(r, c, p);
                if n_pos >= need {
                    let n_margin = margin.window(r, c, p);
                    let region = if 2 * n_margin >= n_pos {
                        SourceRegion::Margin
                    } else {
                        SourceRegion::Tumor
                    };
                    out.push(record(image, r, c, p, 1, region)?);
                }
            }
        }
    }
    if matches!(policy, ClassPolicy::Negative | ClassPolicy::Both) {
        let s = spec.stride_negative.get(split);
        for &r in &grid_positions(h, p, s) {
            for &c in &grid_positions(w, p, s) {
                if pos.window(r, c, p) < need && neg.window(r, c, p) >= need {
                    out.push(record(image, r, c, p, 0, SourceRegion::Negative)?);
                }
            }
        }
    }
    Ok(out)
}

fn record(image: &GrayImage, r: usize, c: usize, p: usize, label: u8, region: SourceRegion) -> Result<PatchRecord, PatchError> {
    Ok(PatchRecord {
        image_id: String::new(),
        pixels: image.crop_tensor(r, c, p)?,
        origin: (r, c),
        label,
        source_region: region,
    })
}

/// Every window on a `stride` grid labelled by `τ`-majority of `truth`,
/// without the negative-tissue requirement. Used for inference over whole
/// images and for quantisation studies.
pub fn window_labels(truth: &BinaryMask, patch_size: usize, stride: usize, label_fraction: f64) -> Vec<((usize, usize), u8)> {
    let (h, w) = truth.dims();
    let lm = LabelMask::new(h, w, truth.data().to_vec()).expect("binary values are valid labels");
    let ones = Integral::new(&lm, |v| v == 1);
    let need = (label_fraction * (patch_size * patch_size) as f64).ceil() as u64;
    let mut out = Vec::new();
    for &r in &grid_positions(h, patch_size, stride) {
        for &c in &grid_positions(w, patch_size, stride) {
            out.push(((r, c), u8::from(ones.window(r, c, patch_size) >= need)));
        }
    }
    out
}

/// The ground truth as seen at patch resolution: every window position
/// (stride 1) labelled by `τ`-majority, then painted back with
/// `aggregation`. Strided extraction followed by reconstruction converges
/// to this mask as the stride shrinks.
pub fn patch_quantized_truth(truth: &BinaryMask, patch_size: usize, label_fraction: f64, aggregation: Aggregation) -> Result<BinaryMask, PatchError> {
    let windows = window_labels(truth, patch_size, 1, label_fraction);
    reconstruct_coarse_mask(&windows, truth.dims(), patch_size, aggregation)
}

/// Class-balanced batches over an epoch. Each batch has `batch_size/2`
/// positives followed by `batch_size/2` negatives. The larger class is
/// visited as a seeded permutation (wrapping for the final batch); the
/// smaller class is drawn uniformly with replacement. An epoch has
/// `ceil(max_class / (batch_size/2))` batches.
pub fn balanced_batches(labels: &[u8], batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>, PatchError> {
    if batch_size < 2 || batch_size % 2 != 0 {
        return Err(PatchError::Config(format!("batch_size must be even and >= 2, got {batch_size}")));
    }
    let positives: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1).collect();
    let negatives: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 0).collect();
    if positives.is_empty() || negatives.is_empty() {
        return Err(PatchError::SingleClass {
            positives: positives.len(),
            negatives: negatives.len(),
        });
    }
    let half = batch_size / 2;
    let max = positives.len().max(negatives.len());
    let n_batches = max.div_ceil(half);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stream = |pool: &[usize], rng: &mut ChaCha8Rng| -> Vec<usize> {
        let need = n_batches * half;
        if pool.len() == max {
            let mut perm = pool.to_vec();
            perm.shuffle(rng);
            (0..need).map(|k| perm[k % perm.len()]).collect()
        } else {
            (0..need).map(|_| pool[rng.random_range(0..pool.len())]).collect()
        }
    };
    let ps = stream(&positives, &mut rng);
    let ns = stream(&negatives, &mut rng);
    Ok((0..n_batches)
        .map(|b| {
            let mut batch = Vec::with_capacity(batch_size);
            batch.extend_from_slice(&ps[b * half..(b + 1) * half]);
            batch.extend_from_slice(&ns[b * half..(b + 1) * half]);
            batch
        })
        .collect())
}

/// [`balanced_batches`] over patch records, yielding index batches.
pub fn balanced_iter(patches: &[PatchRecord], batch_size: usize, seed: u64) -> Result<std::vec::IntoIter<Vec<usize>>, PatchError> {
    let labels: Vec<u8> = patches.iter().map(|p| p.label).collect();
    Ok(balanced_batches(&labels, batch_size, seed)?.into_iter())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum Aggregation {
    /// Pixel is set when the mean label of covering patches is at least `threshold`.
    MeanVote { threshold: f64 },
    /// Pixel is set when any covering patch is positive.
    AnyPositive,
}

impl Default for Aggregation {
    fn default() -> Self {
        Aggregation::MeanVote { threshold: 0.5 }
    }
}

/// Paints patch labels back onto the image grid. Pixels covered by no patch
/// stay 0.
pub fn reconstruct_coarse_mask(
    predictions: &[((usize, usize), u8)],
    dims: (usize, usize),
    patch_size: usize,
    aggregation: Aggregation,
) -> Result<CoarseMask, PatchError> {
    let (h, w) = dims;
    let w1 = w + 1;
    let mut cover = vec![0i64; (h + 1) * w1];
    let mut positive = vec![0i64; (h + 1) * w1];
    for &((r, c), label) in predictions {
        if r + patch_size > h || c + patch_size > w {
            return Err(PatchError::Contract(format!(
                "patch at ({r},{c}) of size {patch_size} exceeds {h}x{w}"
            )));
        }
        if label > 1 {
            return Err(PatchError::Contract(format!("patch label {label} is not binary")));
        }
        let l = i64::from(label);
        for (arr, v) in [(&mut cover, 1), (&mut positive, l)] {
            arr[r * w1 + c] += v;
            arr[r * w1 + c + patch_size] -= v;
            arr[(r + patch_size) * w1 + c] -= v;
            arr[(r + patch_size) * w1 + c + patch_size] += v;
        }
    }
    for arr in [&mut cover, &mut positive] {
        for r in 0..h {
            for c in 0..w {
                let i = r * w1 + c;
                let up = if r > 0 { arr[i - w1] } else { 0 };
                let left = if c > 0 { arr[i - 1] } else { 0 };
                let diag = if r > 0 && c > 0 { arr[i - w1 - 1] } else { 0 };
                arr[i] += up + left - diag;
            }
        }
    }
    Ok(BinaryMask::from_fn(h, w, |r, c| {
        let n = cover[r * w1 + c];
        let k = positive[r * w1 + c];
        n > 0
            && match aggregation {
                Aggregation::MeanVote { threshold } => k as f64 / n as f64 >= threshold,
                Aggregation::AnyPositive => k > 0,
            }
    }))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub image_path: String,
    pub mask_path: String,
    pub split: Split,
    pub patient_id: String,
}

impl ManifestEntry {
    /// Identifier derived from the image file stem.
    pub fn id(&self) -> String {
        Path::new(&self.image_path)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| self.image_path.clone())
    }
}

/// Dataset manifest. Paths are relative to the manifest's directory.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, PatchError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| PatchError::Manifest(format!("{}: {e}", path.display())))?;
        let mut m: Manifest =
            serde_json::from_str(&text).map_err(|e| PatchError::Manifest(format!("{}: {e}", path.display())))?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), PatchError> {
        let mut text = serde_json::to_string_pretty(self).map_err(|e| PatchError::Manifest(e.to_string()))?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn load_entry(&self, e: &ManifestEntry) -> Result<(GrayImage, LabelMask), PatchError> {
        let image = GrayImage::load_png(self.resolve(&e.image_path))?;
        let mask = LabelMask::load_png(self.resolve(&e.mask_path))?;
        if image.dims() != mask.dims() {
            return Err(PatchError::Manifest(format!(
                "{}: image {:?} and mask {:?} differ in size",
                e.image_path,
                image.dims(),
                mask.dims()
            )));
        }
        Ok((image, mask))
    }
}

/// Extracts patches from every manifest entry of `split`, tagging each record
/// with its image id. Entries are processed in manifest order.
pub fn extract_split(manifest: &Manifest, spec: &PatchSpec, split: Split, policy: ClassPolicy) -> Result<Vec<PatchRecord>, PatchError> {
    let mut out = Vec::new();
    for e in manifest.split(split) {
        let (image, mask) = manifest.load_entry(e)?;
        let id = e.id();
        for mut rec in extract_patches(&image, &mask, spec, split, policy)? {
            rec.image_id.clone_from(&id);
            out.push(rec);
        }
    }
    Ok(out)
}

pub const PATCH_CACHE_MAGIC: &[u8; 4] = b"FFPC";
pub const PATCH_CACHE_VERSION: u32 = 1;

/// Binary patch cache, little-endian:
/// `"FFPC" | u32 version | u8 split | u32 count`, then per record
/// `u16 id_len | id | u32 row | u32 col | u8 label | u8 region | u16 size | f32 pixels[size²]`.
pub fn write_patch_cache(path: impl AsRef<Path>, split: Split, patches: &[PatchRecord]) -> Result<(), PatchError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(PATCH_CACHE_MAGIC);
    buf.extend_from_slice(&PATCH_CACHE_VERSION.to_le_bytes());
    buf.push(split.code());
    buf.extend_from_slice(&(patches.len() as u32).to_le_bytes());
    for p in patches {
        let size = p.pixels.shape().last().copied().unwrap_or(0);
        let id_len = u16::try_from(p.image_id.len()).map_err(|_| PatchError::Cache("image id too long".into()))?;
        buf.extend_from_slice(&id_len.to_le_bytes());
        buf.extend_from_slice(p.image_id.as_bytes());
        buf.extend_from_slice(&(p.origin.0 as u32).to_le_bytes());
        buf.extend_from_slice(&(p.origin.1 as u32).to_le_bytes());
        buf.push(p.label);
        buf.push(p.source_region.code());
        buf.extend_from_slice(&(size as u16).to_le_bytes());
        for v in p.pixels.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn read_patch_cache(path: impl AsRef<Path>) -> Result<(Split, Vec<PatchRecord>), PatchError> {
    let bytes = std::fs::read(path)?;
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8], PatchError> {
        let s = bytes
            .get(pos..pos + n)
            .ok_or_else(|| PatchError::Cache("truncated".into()))?;
        pos += n;
        Ok(s)
    };
    if take(4)? != PATCH_CACHE_MAGIC {
        return Err(PatchError::Cache("bad magic".into()));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().expect("4"));
    if version != PATCH_CACHE_VERSION {
        return Err(PatchError::Cache(format!("unsupported version {version}")));
    }
    let split = Split::from_code(take(1)?[0]).ok_or_else(|| PatchError::Cache("bad split code".into()))?;
    let count = u32::from_le_bytes(take(4)?.try_into().expect("4")) as usize;
    let mut out = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let id_len = u16::from_le_bytes(take(2)?.try_into().expect("2")) as usize;
        let image_id = String::from_utf8(take(id_len)?.to_vec()).map_err(|e| PatchError::Cache(e.to_string()))?;
        let row = u32::from_le_bytes(take(4)?.try_into().expect("4")) as usize;
        let col = u32::from_le_bytes(take(4)?.try_into().expect("4")) as usize;
        let label = take(1)?[0];
        let source_region = SourceRegion::from_code(take(1)?[0]).ok_or_else(|| PatchError::Cache("bad region code".into()))?;
        let size = u16::from_le_bytes(take(2)?.try_into().expect("2")) as usize;
        let data = take(size * size * 4)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4")))
            .collect();
        out.push(PatchRecord {
            image_id,
            pixels: Tensor::new(vec![1, size, size], data).map_err(|e| PatchError::Cache(e.to_string()))?,
            origin: (row, col),
            label,
            source_region,
        });
    }
    if pos != bytes.len() {
        return Err(PatchError::Cache("trailing bytes".into()));
    }
    Ok((split, out))
}
