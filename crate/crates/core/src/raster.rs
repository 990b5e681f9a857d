//! Image and mask rasters, PNG codecs, exact Euclidean distance transform and
//! connected components.

use std::io::{Read, Write};
use std::path::Path;

use crate::numerics::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum RasterError {
    #[error("dimension error: {0}")]
    Dims(String),
    #[error("invalid label {label} at pixel {index}")]
    Label { label: u8, index: usize },
    #[error("png decode: {0}")]
    Decode(String),
    #[error("png encode: {0}")]
    Encode(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

macro_rules! raster_common {
    ($t:ident) => {
        impl $t {
            pub fn width(&self) -> usize {
                self.width
            }

            pub fn height(&self) -> usize {
                self.height
            }

            pub fn dims(&self) -> (usize, usize) {
                (self.height, self.width)
            }

            pub fn data(&self) -> &[u8] {
                &self.data
            }

            #[inline]
            pub fn get(&self, row: usize, col: usize) -> u8 {
                self.data[row * self.width + col]
            }

            #[inline]
            pub fn set(&mut self, row: usize, col: usize, v: u8) {
                self.data[row * self.width + col] = v;
            }
        }
    };
}

/// 8-bit grayscale image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

raster_common!(GrayImage);

impl GrayImage {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self, RasterError> {
        if data.len() != height * width {
            return Err(RasterError::Dims(format!(
                "{height}x{width} image needs {} bytes, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(height: usize, width: usize, v: u8) -> Self {
        Self {
            width,
            height,
            data: vec![v; height * width],
        }
    }

    /// Square crop as a `[1, size, size]` tensor scaled to `[0, 1]`.
    pub fn crop_tensor(&self, row: usize, col: usize, size: usize) -> Result<Tensor, RasterError> {
        if row + size > self.height || col + size > self.width {
            return Err(RasterError::Dims(format!(
                "crop {size}x{size} at ({row},{col}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut out = Vec::with_capacity(size * size);
        for r in row..row + size {
            let start = r * self.width + col;
            out.extend(self.data[start..start + size].iter().map(|&v| f32::from(v) / 255.0));
        }
        Ok(Tensor::new(vec![1, size, size], out).expect("sized"))
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>, RasterError> {
        let mut out = Vec::new();
        encode(&mut out, self.width, self.height, png::ColorType::Grayscale, png::BitDepth::Eight, None, &self.data)?;
        Ok(out)
    }

    /// Accepts 8-bit grayscale only; other layouts are a decode error.
    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self, RasterError> {
        let d = decode(bytes)?;
        if d.color != png::ColorType::Grayscale || d.depth != png::BitDepth::Eight {
            return Err(RasterError::Decode(format!(
                "expected 8-bit grayscale, found {:?} {:?}",
                d.color, d.depth
            )));
        }
        Self::new(d.height, d.width, d.samples)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<(), RasterError> {
        write_file(path, &self.to_png_bytes()?)
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self, RasterError> {
        Self::from_png_bytes(&read_file(path)?)
    }
}

pub const LABEL_BACKGROUND: u8 = 0;
pub const LABEL_NEGATIVE: u8 = 1;
pub const LABEL_TUMOR: u8 = 2;
pub const LABEL_MARGIN: u8 = 3;

/// Region labels: 0 background, 1 negative tissue, 2 tumor, 3 positive margin.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

raster_common!(LabelMask);

// Palette used when writing label PNGs; readers use the raw indices.
const LABEL_PALETTE: [u8; 12] = [0, 0, 0, 90, 90, 90, 220, 40, 40, 250, 210, 0];

impl LabelMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self, RasterError> {
        if data.len() != height * width {
            return Err(RasterError::Dims(format!(
                "{height}x{width} mask needs {} labels, got {}",
                height * width,
                data.len()
            )));
        }
        if let Some((index, &label)) = data.iter().enumerate().find(|(_, &l)| l > LABEL_MARGIN) {
            return Err(RasterError::Label { label, index });
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Result<Self, RasterError> {
        Self::new(height, width, vec![label; height * width])
    }

    pub fn count(&self, label: u8) -> usize {
        self.data.iter().filter(|&&l| l == label).count()
    }

    /// Binary mask of pixels whose label is in `labels`.
    pub fn select(&self, labels: &[u8]) -> BinaryMask {
        BinaryMask {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|l| u8::from(labels.contains(l))).collect(),
        }
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>, RasterError> {
        let mut out = Vec::new();
        encode(
            &mut out,
            self.width,
            self.height,
            png::ColorType::Indexed,
            png::BitDepth::Eight,
            Some(&LABEL_PALETTE),
            &self.data,
        )?;
        Ok(out)
    }

    /// Indexed PNGs are read as raw palette indices; 8-bit grayscale is read as
    /// label values directly.
    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self, RasterError> {
        let d = decode(bytes)?;
        match (d.color, d.depth) {
            (png::ColorType::Indexed, _) | (png::ColorType::Grayscale, png::BitDepth::Eight) => {
                Self::new(d.height, d.width, d.samples)
            }
            _ => Err(RasterError::Decode(format!(
                "expected indexed or 8-bit grayscale label mask, found {:?} {:?}",
                d.color, d.depth
            ))),
        }
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<(), RasterError> {
        write_file(path, &self.to_png_bytes()?)
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self, RasterError> {
        Self::from_png_bytes(&read_file(path)?)
    }
}

/// Binary mask with values in {0, 1}.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

raster_common!(BinaryMask);

/// Coarse segmentation reconstructed from patch predictions.
pub type CoarseMask = BinaryMask;

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self, RasterError> {
        if data.len() != height * width {
            return Err(RasterError::Dims(format!(
                "{height}x{width} mask needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        if let Some((index, &label)) = data.iter().enumerate().find(|(_, &v)| v > 1) {
            return Err(RasterError::Label { label, index });
        }
        Ok(Self { width, height, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            width,
            height,
            data: vec![1; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(u8::from(f(r, c)));
            }
        }
        Self { width, height, data }
    }

    #[inline]
    pub fn is_set(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col] != 0
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>, RasterError> {
        let row_bytes = self.width.div_ceil(8);
        let mut packed = vec![0u8; row_bytes * self.height];
        for r in 0..self.height {
            for c in 0..self.width {
                if self.is_set(r, c) {
                    packed[r * row_bytes + c / 8] |= 0x80 >> (c % 8);
                }
            }
        }
        let mut out = Vec::new();
        encode(&mut out, self.width, self.height, png::ColorType::Grayscale, png::BitDepth::One, None, &packed)?;
        Ok(out)
    }

    /// 1-bit grayscale is read bitwise; 8-bit grayscale or indexed maps any
    /// nonzero sample to 1.
    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self, RasterError> {
        let d = decode(bytes)?;
        match d.color {
            png::ColorType::Grayscale | png::ColorType::Indexed => Ok(Self {
                width: d.width,
                height: d.height,
                data: d.samples.into_iter().map(|v| u8::from(v != 0)).collect(),
            }),
            other => Err(RasterError::Decode(format!("expected single-channel mask, found {other:?}"))),
        }
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<(), RasterError> {
        write_file(path, &self.to_png_bytes()?)
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self, RasterError> {
        Self::from_png_bytes(&read_file(path)?)
    }
}

fn encode<W: Write>(
    w: W,
    width: usize,
    height: usize,
    color: png::ColorType,
    depth: png::BitDepth,
    palette: Option<&[u8]>,
    data: &[u8],
) -> Result<(), RasterError> {
    let dims = |v: usize| u32::try_from(v).map_err(|_| RasterError::Encode(format!("dimension {v} too large")));
    let mut enc = png::Encoder::new(w, dims(width)?, dims(height)?);
    enc.set_color(color);
    enc.set_depth(depth);
    if let Some(p) = palette {
        enc.set_palette(p.to_vec());
    }
    let mut writer = enc.write_header().map_err(|e| RasterError::Encode(e.to_string()))?;
    writer.write_image_data(data).map_err(|e| RasterError::Encode(e.to_string()))?;
    writer.finish().map_err(|e| RasterError::Encode(e.to_string()))
}

struct Decoded {
    width: usize,
    height: usize,
    color: png::ColorType,
    depth: png::BitDepth,
    /// One sample per pixel for single-channel images (sub-byte depths unpacked, unscaled).
    samples: Vec<u8>,
}

fn decode(bytes: &[u8]) -> Result<Decoded, RasterError> {
    let mut dec = png::Decoder::new(std::io::Cursor::new(bytes));
    dec.set_transformations(png::Transformations::IDENTITY);
    let mut reader = dec.read_info().map_err(|e| RasterError::Decode(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| RasterError::Decode("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| RasterError::Decode(e.to_string()))?;
    let (width, height) = (info.width as usize, info.height as usize);
    let (color, depth) = (info.color_type, info.bit_depth);
    let samples = match (color, depth) {
        (png::ColorType::Grayscale | png::ColorType::Indexed, png::BitDepth::Eight) => {
            let mut s = Vec::with_capacity(width * height);
            for r in 0..height {
                s.extend_from_slice(&buf[r * info.line_size..r * info.line_size + width]);
            }
            s
        }
        (png::ColorType::Grayscale | png::ColorType::Indexed, png::BitDepth::One | png::BitDepth::Two | png::BitDepth::Four) => {
            let bits = depth as usize;
            let per_byte = 8 / bits;
            let max = (1u16 << bits) as u8 - 1;
            let mut s = Vec::with_capacity(width * height);
            for r in 0..height {
                let line = &buf[r * info.line_size..(r + 1) * info.line_size];
                for c in 0..width {
                    let shift = 8 - bits * (c % per_byte + 1);
                    s.push((line[c / per_byte] >> shift) & max);
                }
            }
            s
        }
        _ => Vec::new(),
    };
    Ok(Decoded {
        width,
        height,
        color,
        depth,
        samples,
    })
}

fn write_file(path: impl AsRef<Path>, bytes: &[u8]) -> Result<(), RasterError> {
    std::fs::write(path, bytes)?;
    Ok(())
}

fn read_file(path: impl AsRef<Path>) -> Result<Vec<u8>, RasterError> {
    let mut f = std::fs::File::open(path)?;
    let mut v = Vec::new();
    f.read_to_end(&mut v)?;
    Ok(v)
}

/// One-dimensional squared distance transform of a sampled function
/// (lower envelope of parabolas). Infinite samples contribute no parabola.
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    v.clear();
    z.clear();
    for (q, &fq) in f.iter().enumerate() {
        if !fq.is_finite() {
            continue;
        }
        let qf = q as f64;
        loop {
            let Some(&p) = v.last() else {
                v.push(q);
                z.push(f64::NEG_INFINITY);
                break;
            };
            let pf = p as f64;
            let s = ((fq + qf * qf) - (f[p] + pf * pf)) / (2.0 * (qf - pf));
            if s <= *z.last().expect("parallel to v") {
                v.pop();
                z.pop();
            } else {
                v.push(q);
                z.push(s);
                break;
            }
        }
    }
    if v.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        let qf = q as f64;
        while k + 1 < v.len() && z[k + 1] < qf {
            k += 1;
        }
        let d = qf - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest pixel
/// where `feature` is true; `f64::INFINITY` everywhere if there is none.
/// Values are integers stored exactly in `f64`.
pub fn squared_edt(height: usize, width: usize, feature: impl Fn(usize) -> bool) -> Vec<f64> {
    let mut d: Vec<f64> = (0..height * width)
        .map(|i| if feature(i) { 0.0 } else { f64::INFINITY })
        .collect();
    let (mut v, mut z) = (Vec::new(), Vec::new());
    let mut col = vec![0.0; height];
    let mut tmp = vec![0.0; height.max(width)];
    for c in 0..width {
        for r in 0..height {
            col[r] = d[r * width + c];
        }
        edt_1d(&col, &mut tmp[..height], &mut v, &mut z);
        for r in 0..height {
            d[r * width + c] = tmp[r];
        }
    }
    for r in 0..height {
        let row = &mut d[r * width..(r + 1) * width];
        edt_1d(row, &mut tmp[..width], &mut v, &mut z);
        row.copy_from_slice(&tmp[..width]);
    }
    d
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Connectivity {
    Four,
    Eight,
}

impl Connectivity {
    fn offsets(self) -> &'static [(isize, isize)] {
        match self {
            Connectivity::Four => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
            Connectivity::Eight => &[(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)],
        }
    }
}

/// Component labelling of the pixels where `member` holds. Returns a label per
/// pixel (0 = not a member, components numbered from 1 in raster order) and
/// the pixel lists of each component.
pub fn connected_components(
    height: usize,
    width: usize,
    conn: Connectivity,
    member: impl Fn(usize) -> bool,
) -> (Vec<u32>, Vec<Vec<usize>>) {
    let mut labels = vec![0u32; height * width];
    let mut comps: Vec<Vec<usize>> = Vec::new();
    let mut stack = Vec::new();
    for start in 0..height * width {
        if labels[start] != 0 || !member(start) {
            continue;
        }
        let id = comps.len() as u32 + 1;
        let mut pixels = Vec::new();
        labels[start] = id;
        stack.push(start);
        while let Some(i) = stack.pop() {
            pixels.push(i);
            let (r, c) = ((i / width) as isize, (i % width) as isize);
            for &(dr, dc) in conn.offsets() {
                let (nr, nc) = (r + dr, c + dc);
                if nr < 0 || nc < 0 || nr >= height as isize || nc >= width as isize {
                    continue;
                }
                let j = nr as usize * width + nc as usize;
                if labels[j] == 0 && member(j) {
                    labels[j] = id;
                    stack.push(j);
                }
            }
        }
        pixels.sort_unstable();
        comps.push(pixels);
    }
    (labels, comps)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray_png_round_trip() {
        let img = GrayImage::new(3, 5, (0..15).map(|v| v * 17).collect()).unwrap();
        let back = GrayImage::from_png_bytes(&img.to_png_bytes().unwrap()).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn label_png_keeps_raw_indices() {
        let m = LabelMask::new(2, 3, vec![0, 1, 2, 3, 2, 1]).unwrap();
        let back = LabelMask::from_png_bytes(&m.to_png_bytes().unwrap()).unwrap();
        assert_eq!(m, back);
        assert!(LabelMask::new(1, 1, vec![4]).is_err());
    }

    #[test]
    fn binary_png_is_one_bit_and_round_trips() {
        let m = BinaryMask::from_fn(7, 11, |r, c| (r * 3 + c) % 4 == 0);
        let bytes = m.to_png_bytes().unwrap();
        let d = decode(&bytes).unwrap();
        assert_eq!(d.depth, png::BitDepth::One);
        assert_eq!(BinaryMask::from_png_bytes(&bytes).unwrap(), m);
    }

    #[test]
    fn gray_reader_rejects_one_bit() {
        let m = BinaryMask::ones(2, 2);
        assert!(GrayImage::from_png_bytes(&m.to_png_bytes().unwrap()).is_err());
    }

    #[test]
    fn crop_scales_to_unit_range() {
        let img = GrayImage::new(2, 2, vec![0, 255, 51, 102]).unwrap();
        let t = img.crop_tensor(0, 0, 2).unwrap();
        assert_eq!(t.shape(), &[1, 2, 2]);
        assert_eq!(t.data(), &[0.0, 1.0, 0.2, 0.4]);
        assert!(img.crop_tensor(1, 0, 2).is_err());
    }

    #[test]
    fn edt_matches_brute_force() {
        let (h, w) = (13, 9);
        let feat = |i: usize| (i * 7919) % 23 == 0;
        let d = squared_edt(h, w, feat);
        for i in 0..h * w {
            let (r, c) = ((i / w) as i64, (i % w) as i64);
            let best = (0..h * w)
                .filter(|&j| feat(j))
                .map(|j| {
                    let (rr, cc) = ((j / w) as i64, (j % w) as i64);
                    ((r - rr).pow(2) + (c - cc).pow(2)) as f64
                })
                .fold(f64::INFINITY, f64::min);
            assert_eq!(d[i], best, "pixel {i}");
        }
    }

    #[test]
    fn edt_without_features_is_infinite() {
        assert!(squared_edt(3, 4, |_| false).iter().all(|v| v.is_infinite()));
    }

    #[test]
    fn components_respect_connectivity() {
        // Two diagonal pixels: one component under 8-connectivity, two under 4.
        let m = [1u8, 0, 0, 1];
        let (_, c8) = connected_components(2, 2, Connectivity::Eight, |i| m[i] == 1);
        let (_, c4) = connected_components(2, 2, Connectivity::Four, |i| m[i] == 1);
        assert_eq!(c8.len(), 1);
        assert_eq!(c4.len(), 2);
    }
}
