//! Forward and backward kernels. The graph in [`super::graph`] records which
//! of these ran; they are also usable directly for inference.

use super::{NumericsError, Scalar, Tensor};

pub const NORM_EPS: f64 = 1e-5;
/// Added to squared norms inside the cosine similarity used for training.
pub const COSINE_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub padding: usize,
    pub stride: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeometry {
    pub fn new(
        input: &[usize],
        kernel: &[usize],
        padding: usize,
        stride: usize,
    ) -> Result<Self, NumericsError> {
        let &[c_in, h, w] = input else {
            return Err(NumericsError::Shape(format!(
                "conv2d input must be [C,H,W], got {input:?}"
            )));
        };
        let &[c_out, kc, k, k2] = kernel else {
            return Err(NumericsError::Shape(format!(
                "conv2d kernel must be [O,C,k,k], got {kernel:?}"
            )));
        };
        if kc != c_in || k != k2 {
            return Err(NumericsError::Shape(format!(
                "conv2d kernel {kernel:?} incompatible with input {input:?}"
            )));
        }
        if k % 2 == 0 || stride == 0 {
            return Err(NumericsError::Shape(format!(
                "conv2d needs an odd kernel and stride >= 1 (k={k}, stride={stride})"
            )));
        }
        if h + 2 * padding < k || w + 2 * padding < k {
            return Err(NumericsError::Shape(format!(
                "conv2d input {h}x{w} smaller than kernel {k} with padding {padding}"
            )));
        }
        Ok(Self {
            c_in,
            h,
            w,
            c_out,
            k,
            padding,
            stride,
            h_out: (h + 2 * padding - k) / stride + 1,
            w_out: (w + 2 * padding - k) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn out_len(&self) -> usize {
        self.h_out * self.w_out
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeometry, cols: &mut [T]) {
    let n_out = g.out_len();
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * n_out..(row + 1) * n_out];
                for oh in 0..g.h_out {
                    let ih = (oh * g.stride + ki) as isize - g.padding as isize;
                    let out_row = &mut dst[oh * g.w_out..(oh + 1) * g.w_out];
                    if ih < 0 || ih >= g.h as isize {
                        out_row.iter_mut().for_each(|v| *v = T::ZERO);
                        continue;
                    }
                    let src = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for (ow, v) in out_row.iter_mut().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - g.padding as isize;
                        *v = if iw < 0 || iw >= g.w as isize {
                            T::ZERO
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeometry, dx: &mut [T]) {
    let n_out = g.out_len();
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * n_out..(row + 1) * n_out];
                for oh in 0..g.h_out {
                    let ih = (oh * g.stride + ki) as isize - g.padding as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for ow in 0..g.w_out {
                        let iw = (ow * g.stride + kj) as isize - g.padding as isize;
                        if iw >= 0 && iw < g.w as isize {
                            dst[iw as usize] += src[oh * g.w_out + ow];
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation of a `[C_in,H,W]` input with a `[C_out,C_in,k,k]`
/// kernel plus per-output-channel bias.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    padding: usize,
    stride: usize,
) -> Result<Tensor<T>, NumericsError> {
    conv2d_forward_cols(input, kernel, bias, padding, stride).map(|(y, _, _)| y)
}

pub(crate) fn conv2d_forward_cols<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    padding: usize,
    stride: usize,
) -> Result<(Tensor<T>, Vec<T>, ConvGeometry), NumericsError> {
    let g = ConvGeometry::new(input.shape(), kernel.shape(), padding, stride)?;
    if bias.shape() != [g.c_out] {
        return Err(NumericsError::Shape(format!(
            "conv2d bias must be [{}], got {:?}",
            g.c_out,
            bias.shape()
        )));
    }
    let n_out = g.out_len();
    let mut cols = vec![T::ZERO; g.patch_len() * n_out];
    im2col(input.data(), &g, &mut cols);
    let mut out = vec![T::ZERO; g.c_out * n_out];
    for (o, &b) in bias.data().iter().enumerate() {
        out[o * n_out..(o + 1) * n_out]
            .iter_mut()
            .for_each(|v| *v = b);
    }
    T::gemm(
        g.c_out,
        g.patch_len(),
        n_out,
        kernel.data(),
        false,
        &cols,
        false,
        &mut out,
        true,
    );
    let y = Tensor::new(vec![g.c_out, g.h_out, g.w_out], out)?;
    Ok((y, cols, g))
}

/// Returns `(d_input, d_kernel, d_bias)`; `d_input` only when requested.
pub(crate) fn conv2d_backward<T: Scalar>(
    g: &ConvGeometry,
    cols: &[T],
    kernel: &[T],
    dy: &[T],
    need_dx: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let n_out = g.out_len();
    let p = g.patch_len();
    let mut dw = vec![T::ZERO; g.c_out * p];
    T::gemm(g.c_out, n_out, p, dy, false, cols, true, &mut dw, false);
    let db = (0..g.c_out)
        .map(|o| dy[o * n_out..(o + 1) * n_out].iter().copied().sum())
        .collect();
    let dx = need_dx.then(|| {
        let mut dcols = vec![T::ZERO; p * n_out];
        T::gemm(p, g.c_out, n_out, kernel, true, dy, false, &mut dcols, false);
        let mut dx = vec![T::ZERO; g.c_in * g.h * g.w];
        col2im(&dcols, g, &mut dx);
        dx
    });
    (dx, dw, db)
}

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::ZERO { v } else { T::ZERO })
}

/// Per-channel normalisation over the spatial extent of a `[C,H,W]` tensor
/// followed by a per-channel affine map. Returns `(y, x_hat, inv_std)`.
pub fn channel_norm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>), NumericsError> {
    let &[c, h, w] = x.shape() else {
        return Err(NumericsError::Shape(format!(
            "channel norm input must be [C,H,W], got {:?}",
            x.shape()
        )));
    };
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(NumericsError::Shape(format!(
            "channel norm affine params must be [{c}]"
        )));
    }
    let n = h * w;
    let inv_n = T::ONE / T::from_usize(n);
    let eps = T::from_f64(NORM_EPS);
    let mut xhat = vec![T::ZERO; c * n];
    let mut inv_std = vec![T::ZERO; c];
    let mut y = vec![T::ZERO; c * n];
    for ch in 0..c {
        let src = &x.data()[ch * n..(ch + 1) * n];
        let mean = src.iter().copied().sum::<T>() * inv_n;
        let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
        let is = T::ONE / (var + eps).sqrt();
        inv_std[ch] = is;
        let (gm, bt) = (gamma.data()[ch], beta.data()[ch]);
        for i in 0..n {
            let xh = (src[i] - mean) * is;
            xhat[ch * n + i] = xh;
            y[ch * n + i] = gm * xh + bt;
        }
    }
    Ok((Tensor::new(vec![c, h, w], y)?, xhat, inv_std))
}

/// Returns `(d_x, d_gamma, d_beta)`.
pub(crate) fn channel_norm_backward<T: Scalar>(
    xhat: &[T],
    inv_std: &[T],
    gamma: &[T],
    dy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let c = inv_std.len();
    let n = xhat.len() / c;
    let nf = T::from_usize(n);
    let mut dx = vec![T::ZERO; c * n];
    let mut dgamma = vec![T::ZERO; c];
    let mut dbeta = vec![T::ZERO; c];
    for ch in 0..c {
        let xh = &xhat[ch * n..(ch + 1) * n];
        let g = &dy[ch * n..(ch + 1) * n];
        let mut sum_g = T::ZERO;
        let mut sum_gx = T::ZERO;
        for i in 0..n {
            sum_g += g[i];
            sum_gx += g[i] * xh[i];
        }
        dbeta[ch] = sum_g;
        dgamma[ch] = sum_gx;
        let scale = gamma[ch] * inv_std[ch] / nf;
        for i in 0..n {
            dx[ch * n + i] = scale * (nf * g[i] - sum_g - xh[i] * sum_gx);
        }
    }
    (dx, dgamma, dbeta)
}

/// `[C,H,W] -> [C]` spatial mean.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>, NumericsError> {
    let &[c, h, w] = x.shape() else {
        return Err(NumericsError::Shape(format!(
            "global average pool input must be [C,H,W], got {:?}",
            x.shape()
        )));
    };
    let n = h * w;
    let inv = T::ONE / T::from_usize(n);
    Ok(Tensor::from_vec(
        (0..c)
            .map(|ch| x.data()[ch * n..(ch + 1) * n].iter().copied().sum::<T>() * inv)
            .collect(),
    ))
}

/// `y = W·x + b` for a vector `x`.
pub fn linear_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>, NumericsError> {
    let &[d] = x.shape() else {
        return Err(NumericsError::Shape(format!(
            "linear input must be a vector, got {:?}",
            x.shape()
        )));
    };
    let &[o, wd] = weight.shape() else {
        return Err(NumericsError::Shape(format!(
            "linear weight must be [O,D], got {:?}",
            weight.shape()
        )));
    };
    if wd != d || bias.shape() != [o] {
        return Err(NumericsError::Shape(format!(
            "linear weight {:?} / bias {:?} incompatible with input [{d}]",
            weight.shape(),
            bias.shape()
        )));
    }
    let xs = x.data();
    Ok(Tensor::from_vec(
        (0..o)
            .map(|r| {
                let row = &weight.data()[r * d..(r + 1) * d];
                let mut acc = bias.data()[r];
                for (wv, &xv) in row.iter().zip(xs) {
                    acc += *wv * xv;
                }
                acc
            })
            .collect(),
    ))
}

/// Cosine similarity with `eps` added to each squared norm. Returns
/// `(cos, |a|, |b|)` with the stabilised norms.
pub(crate) fn cosine_parts<T: Scalar>(a: &[T], b: &[T], eps: T) -> (T, T, T) {
    let mut dot = T::ZERO;
    let mut aa = T::ZERO;
    let mut bb = T::ZERO;
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        aa += x * x;
        bb += y * y;
    }
    let na = (aa + eps).sqrt();
    let nb = (bb + eps).sqrt();
    (dot / (na * nb), na, nb)
}
