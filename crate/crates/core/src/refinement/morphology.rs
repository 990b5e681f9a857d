//! Binary morphology by reconstruction and intensity-guided edge snapping.
//!
//! Erosion by a disk of radius `r` keeps the pixels whose squared distance to
//! the nearest in-image background pixel exceeds `r²`; pixels outside the
//! image never erode anything. Reconstruction keeps whole connected
//! components (8-connected foreground, 4-connected background) that contain
//! a surviving pixel, so shapes that hold a disk are returned untouched.

use crate::raster::{connected_components, squared_edt, BinaryMask, Connectivity, GrayImage};

use super::BBoxPrompt;

/// Components of `set` (under `conn`) that contain a pixel deeper than `r`.
fn open_by_reconstruction(set: &[bool], h: usize, w: usize, r: usize, conn: Connectivity) -> Vec<bool> {
    let depth2 = squared_edt(h, w, |i| !set[i]);
    let r2 = (r * r) as f64;
    let (labels, comps) = connected_components(h, w, conn, |i| set[i]);
    let keep: Vec<bool> = comps.iter().map(|px| px.iter().any(|&i| depth2[i] > r2)).collect();
    labels.iter().map(|&l| l != 0 && keep[l as usize - 1]).collect()
}

/// Closing then opening by reconstruction with a radius-`r` disk, then drops
/// components smaller than `min_area` or lying entirely outside `bbox`.
/// Idempotent, and masks whose components and background components each
/// hold a disk of radius `r` are fixed points.
pub fn morph_refine(mask: &BinaryMask, bbox: Option<&BBoxPrompt>, r: usize, min_area: usize) -> BinaryMask {
    let (h, w) = mask.dims();
    let fg: Vec<bool> = mask.data().iter().map(|&v| v != 0).collect();
    let bg: Vec<bool> = fg.iter().map(|&v| !v).collect();
    let closed: Vec<bool> = open_by_reconstruction(&bg, h, w, r, Connectivity::Four)
        .into_iter()
        .map(|b| !b)
        .collect();
    let opened = open_by_reconstruction(&closed, h, w, r, Connectivity::Eight);
    let (labels, comps) = connected_components(h, w, Connectivity::Eight, |i| opened[i]);
    let keep: Vec<bool> = comps
        .iter()
        .map(|px| {
            px.len() >= min_area
                && bbox.is_none_or(|b| px.iter().any(|&i| b.contains(i / w, i % w)))
        })
        .collect();
    BinaryMask::from_fn(h, w, |row, col| {
        let l = labels[row * w + col];
        l != 0 && keep[l as usize - 1]
    })
}

/// Re-decides pixels within `radius` of the mask boundary (inside `bbox`) by
/// comparing each pixel's intensity with the midpoint of the local mean
/// intensities inside and outside the mask, measured over a window of
/// half-size `2·radius`. Where the local means differ by less than
/// `min_contrast` (intensity in `[0, 1]`) the pixel keeps its value.
pub fn snap_to_edges(image: &GrayImage, mask: &BinaryMask, bbox: &BBoxPrompt, radius: usize, min_contrast: f64) -> BinaryMask {
    let (h, w) = mask.dims();
    if radius == 0 || mask.is_empty() {
        return mask.clone();
    }
    let fg = |i: usize| mask.data()[i] != 0;
    let to_bg = squared_edt(h, w, |i| !fg(i));
    let to_fg = squared_edt(h, w, fg);
    let r2 = (radius * radius) as f64;

    // Integral images of inside/outside counts and intensity sums.
    let w1 = w + 1;
    let mut n_in = vec![0u32; (h + 1) * w1];
    let mut s_in = vec![0u64; (h + 1) * w1];
    let mut s_all = vec![0u64; (h + 1) * w1];
    for r in 0..h {
        let (mut rn, mut rs, mut ra) = (0u32, 0u64, 0u64);
        for c in 0..w {
            let v = u64::from(image.get(r, c));
            let m = mask.is_set(r, c);
            rn += u32::from(m);
            rs += if m { v } else { 0 };
            ra += v;
            let i = (r + 1) * w1 + c + 1;
            n_in[i] = n_in[i - w1] + rn;
            s_in[i] = s_in[i - w1] + rs;
            s_all[i] = s_all[i - w1] + ra;
        }
    }
    let rect = |a: &[u64], r0: usize, c0: usize, r1: usize, c1: usize| a[r1 * w1 + c1] + a[r0 * w1 + c0] - a[r0 * w1 + c1] - a[r1 * w1 + c0];
    let rect_n = |r0: usize, c0: usize, r1: usize, c1: usize| {
        u64::from(n_in[r1 * w1 + c1]) + u64::from(n_in[r0 * w1 + c0]) - u64::from(n_in[r0 * w1 + c1]) - u64::from(n_in[r1 * w1 + c0])
    };
    let half = 2 * radius;
    let floor = min_contrast * 255.0;
    BinaryMask::from_fn(h, w, |r, c| {
        let i = r * w + c;
        let inside = fg(i);
        let near = if inside { to_bg[i] <= r2 } else { to_fg[i] <= r2 };
        if !near || !bbox.contains(r, c) {
            return inside;
        }
        let (r0, c0) = (r.saturating_sub(half), c.saturating_sub(half));
        let (r1, c1) = ((r + half + 1).min(h), (c + half + 1).min(w));
        let total = ((r1 - r0) * (c1 - c0)) as u64;
        let ni = rect_n(r0, c0, r1, c1);
        if ni == 0 || ni == total {
            return inside;
        }
        let si = rect(&s_in, r0, c0, r1, c1);
        let so = rect(&s_all, r0, c0, r1, c1) - si;
        let mu_in = si as f64 / ni as f64;
        let mu_out = so as f64 / (total - ni) as f64;
        if (mu_in - mu_out).abs() < floor {
            return inside;
        }
        let t = 0.5 * (mu_in + mu_out);
        let v = f64::from(image.get(r, c));
        if mu_in > mu_out {
            v > t
        } else {
            v < t
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rect(h: usize, w: usize, r0: usize, r1: usize, c0: usize, c1: usize) -> BinaryMask {
        BinaryMask::from_fn(h, w, |r, c| (r0..r1).contains(&r) && (c0..c1).contains(&c))
    }

    #[test]
    fn empty_and_full_are_fixed() {
        let e = BinaryMask::zeros(20, 30);
        assert_eq!(morph_refine(&e, None, 3, 25), e);
        let f = BinaryMask::ones(20, 30);
        assert_eq!(morph_refine(&f, None, 3, 25), f);
    }

    #[test]
    fn speckles_removed_block_kept() {
        let mut m = rect(100, 100, 20, 70, 20, 70);
        for (r, c) in [(5, 5), (90, 10), (80, 90), (3, 60)] {
            m.set(r, c, 1);
        }
        let out = morph_refine(&m, None, 2, 1);
        assert_eq!(out, rect(100, 100, 20, 70, 20, 70));
    }

    #[test]
    fn small_hole_filled() {
        let mut m = rect(60, 60, 10, 50, 10, 50);
        m.set(30, 30, 0);
        assert_eq!(morph_refine(&m, None, 2, 1), rect(60, 60, 10, 50, 10, 50));
    }

    #[test]
    fn rectangle_larger_than_disk_is_fixed_point() {
        let m = rect(64, 64, 10, 21, 5, 40);
        assert_eq!(morph_refine(&m, None, 5, 25), m);
    }

    #[test]
    fn snap_on_flat_image_is_identity() {
        let m = rect(40, 40, 10, 30, 8, 33);
        let img = GrayImage::filled(40, 40, 120);
        let b = BBoxPrompt::full(40, 40);
        assert_eq!(snap_to_edges(&img, &m, &b, 4, 0.05), m);
    }

    #[test]
    fn snap_pulls_boundary_to_intensity_edge() {
        let truth = rect(60, 60, 20, 40, 20, 40);
        let img = GrayImage::new(60, 60, truth.data().iter().map(|&v| if v == 1 { 200 } else { 60 }).collect()).unwrap();
        let coarse = rect(60, 60, 17, 43, 22, 44);
        let b = BBoxPrompt::full(60, 60);
        assert_eq!(snap_to_edges(&img, &coarse, &b, 6, 0.05), truth);
    }
}
