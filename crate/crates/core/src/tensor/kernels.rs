//! Forward and backward kernels on raw buffers. The tape owns graph
//! bookkeeping; everything here is pure arithmetic.

use super::gemm::{gemm, MatRef};
use crate::error::{shape_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub const fn same(dilation: usize) -> Self {
        Self {
            stride: 1,
            dilation,
            padding: dilation,
        }
    }

    pub const fn pointwise() -> Self {
        Self {
            stride: 1,
            dilation: 1,
            padding: 0,
        }
    }

    pub fn output_len(&self, input: usize, kernel: usize) -> Result<usize> {
        if self.stride == 0 || self.dilation == 0 {
            return Err(shape_err!("stride and dilation must be positive: {:?}", self));
        }
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        if padded < span {
            return Err(shape_err!(
                "convolution output would be empty: input {input}, kernel {kernel}, {:?}",
                self
            ));
        }
        Ok((padded - span) / self.stride + 1)
    }
}

/// Resolved dimensions for one convolution call.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvShape {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub h_out: usize,
    pub w_out: usize,
    pub geom: ConvGeometry,
}

impl ConvShape {
    pub fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn positions(&self) -> usize {
        self.h_out * self.w_out
    }

    /// Source coordinate for output index `o` and kernel tap `t`, or `None`
    /// when it lands in the zero padding.
    #[inline]
    fn src(o: usize, t: usize, stride: usize, dilation: usize, pad: usize, len: usize) -> Option<usize> {
        let pos = (o * stride + t * dilation) as isize - pad as isize;
        (pos >= 0 && (pos as usize) < len).then_some(pos as usize)
    }
}

pub(crate) fn im2col(input: &[f32], s: &ConvShape) -> Vec<f32> {
    let p = s.positions();
    let mut cols = vec![0.0f32; s.patch_len() * p];
    let g = s.geom;
    for ci in 0..s.c_in {
        let plane = &input[ci * s.h * s.w..(ci + 1) * s.h * s.w];
        for ky in 0..s.k {
            for kx in 0..s.k {
                let row = (ci * s.k + ky) * s.k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..s.h_out {
                    let Some(iy) = ConvShape::src(oy, ky, g.stride, g.dilation, g.padding, s.h) else {
                        continue;
                    };
                    for ox in 0..s.w_out {
                        if let Some(ix) = ConvShape::src(ox, kx, g.stride, g.dilation, g.padding, s.w) {
                            dst[oy * s.w_out + ox] = plane[iy * s.w + ix];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f32], s: &ConvShape, out: &mut [f32]) {
    let p = s.positions();
    let g = s.geom;
    for ci in 0..s.c_in {
        let plane = &mut out[ci * s.h * s.w..(ci + 1) * s.h * s.w];
        for ky in 0..s.k {
            for kx in 0..s.k {
                let row = (ci * s.k + ky) * s.k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..s.h_out {
                    let Some(iy) = ConvShape::src(oy, ky, g.stride, g.dilation, g.padding, s.h) else {
                        continue;
                    };
                    for ox in 0..s.w_out {
                        if let Some(ix) = ConvShape::src(ox, kx, g.stride, g.dilation, g.padding, s.w) {
                            plane[iy * s.w + ix] += src[oy * s.w_out + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_shape(input: &[usize], kernel: &[usize], bias: &[usize], geom: ConvGeometry) -> Result<ConvShape> {
    let &[c_in, h, w] = input else {
        return Err(shape_err!("conv2d input must be C×h×w, got {:?}", input));
    };
    let &[c_out, kc, kh, kw] = kernel else {
        return Err(shape_err!("conv2d kernel must be Cout×Cin×k×k, got {:?}", kernel));
    };
    if kh != kw || kh % 2 == 0 {
        return Err(shape_err!("conv2d kernel must be square and odd, got {kh}×{kw}"));
    }
    if kc != c_in {
        return Err(shape_err!(
            "conv2d kernel expects {kc} input channels, input has {c_in}"
        ));
    }
    if bias != [c_out] {
        return Err(shape_err!("conv2d bias must be [{c_out}], got {:?}", bias));
    }
    let h_out = geom.output_len(h, kh)?;
    let w_out = geom.output_len(w, kw)?;
    Ok(ConvShape {
        c_in,
        h,
        w,
        c_out,
        k: kh,
        h_out,
        w_out,
        geom,
    })
}

/// Returns the output and the im2col buffer kept for the backward pass.
pub(crate) fn conv2d_forward(input: &[f32], kernel: &[f32], bias: &[f32], s: &ConvShape) -> (Vec<f32>, Vec<f32>) {
    let p = s.positions();
    let cols = im2col(input, s);
    let mut out = vec![0.0f32; s.c_out * p];
    for (co, row) in out.chunks_mut(p).enumerate() {
        row.fill(bias[co]);
    }
    gemm(
        MatRef::new(kernel, s.c_out, s.patch_len()),
        MatRef::new(&cols, s.patch_len(), p),
        &mut out,
        1.0,
    );
    (out, cols)
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f32>>,
    pub kernel: Vec<f32>,
    pub bias: Vec<f32>,
}

pub(crate) fn conv2d_backward(
    grad_out: &[f32],
    kernel: &[f32],
    cols: &[f32],
    s: &ConvShape,
    need_input: bool,
) -> ConvGrads {
    let p = s.positions();
    let kl = s.patch_len();
    let mut d_kernel = vec![0.0f32; s.c_out * kl];
    gemm(
        MatRef::new(grad_out, s.c_out, p),
        MatRef::new(cols, kl, p).t(),
        &mut d_kernel,
        0.0,
    );
    let d_bias = grad_out
        .chunks(p)
        .map(|row| row.iter().map(|&v| v as f64).sum::<f64>() as f32)
        .collect();
    let d_input = need_input.then(|| {
        let mut d_cols = vec![0.0f32; kl * p];
        gemm(
            MatRef::new(kernel, s.c_out, kl).t(),
            MatRef::new(grad_out, s.c_out, p),
            &mut d_cols,
            0.0,
        );
        let mut d_in = vec![0.0f32; s.c_in * s.h * s.w];
        col2im(&d_cols, s, &mut d_in);
        d_in
    });
    ConvGrads {
        input: d_input,
        kernel: d_kernel,
        bias: d_bias,
    }
}

pub(crate) fn avg_pool2_forward(input: &[f32], c: usize, h: usize, w: usize) -> Vec<f32> {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0f32; c * ho * wo];
    for ch in 0..c {
        let src = &input[ch * h * w..];
        for y in 0..ho {
            for x in 0..wo {
                let i = 2 * y * w + 2 * x;
                out[(ch * ho + y) * wo + x] = 0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
            }
        }
    }
    out
}

pub(crate) fn avg_pool2_backward(grad: &[f32], c: usize, h: usize, w: usize) -> Vec<f32> {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0f32; c * h * w];
    for ch in 0..c {
        for y in 0..ho {
            for x in 0..wo {
                let g = 0.25 * grad[(ch * ho + y) * wo + x];
                let i = ch * h * w + 2 * y * w + 2 * x;
                out[i] += g;
                out[i + 1] += g;
                out[i + w] += g;
                out[i + w + 1] += g;
            }
        }
    }
    out
}

/// Interpolation taps along one axis: `(lo, hi, frac)` per output index.
pub(crate) fn bilinear_axis(input: usize, output: usize) -> Vec<(usize, usize, f32)> {
    (0..output)
        .map(|o| {
            let src = if output == 1 {
                (input - 1) as f64 / 2.0
            } else {
                o as f64 * (input - 1) as f64 / (output - 1) as f64
            };
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            (lo, hi, (src - lo as f64) as f32)
        })
        .collect()
}

pub(crate) struct ResizePlan {
    pub c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub ys: Vec<(usize, usize, f32)>,
    pub xs: Vec<(usize, usize, f32)>,
}

impl ResizePlan {
    pub fn new(c: usize, in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Self {
        Self {
            c,
            in_h,
            in_w,
            ys: bilinear_axis(in_h, out_h),
            xs: bilinear_axis(in_w, out_w),
        }
    }

    pub fn forward(&self, input: &[f32]) -> Vec<f32> {
        let (oh, ow) = (self.ys.len(), self.xs.len());
        let mut out = vec![0.0f32; self.c * oh * ow];
        for ch in 0..self.c {
            let src = &input[ch * self.in_h * self.in_w..(ch + 1) * self.in_h * self.in_w];
            for (oy, &(y0, y1, fy)) in self.ys.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in self.xs.iter().enumerate() {
                    let top = src[y0 * self.in_w + x0] * (1.0 - fx) + src[y0 * self.in_w + x1] * fx;
                    let bot = src[y1 * self.in_w + x0] * (1.0 - fx) + src[y1 * self.in_w + x1] * fx;
                    out[(ch * oh + oy) * ow + ox] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
        out
    }

    pub fn backward(&self, grad: &[f32]) -> Vec<f32> {
        let (oh, ow) = (self.ys.len(), self.xs.len());
        let mut out = vec![0.0f32; self.c * self.in_h * self.in_w];
        for ch in 0..self.c {
            let dst = &mut out[ch * self.in_h * self.in_w..(ch + 1) * self.in_h * self.in_w];
            for (oy, &(y0, y1, fy)) in self.ys.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in self.xs.iter().enumerate() {
                    let g = grad[(ch * oh + oy) * ow + ox];
                    let (gt, gb) = (g * (1.0 - fy), g * fy);
                    dst[y0 * self.in_w + x0] += gt * (1.0 - fx);
                    dst[y0 * self.in_w + x1] += gt * fx;
                    dst[y1 * self.in_w + x0] += gb * (1.0 - fx);
                    dst[y1 * self.in_w + x1] += gb * fx;
                }
            }
        }
        out
    }
}

/// Per-channel statistics saved by the instance-norm forward pass.
pub(crate) struct NormCache {
    pub normalized: Vec<f32>,
    pub inv_std: Vec<f32>,
}

pub(crate) fn instance_norm_forward(
    input: &[f32],
    gamma: &[f32],
    beta: &[f32],
    c: usize,
    n: usize,
    eps: f32,
) -> (Vec<f32>, NormCache) {
    let mut out = vec![0.0f32; c * n];
    let mut normalized = vec![0.0f32; c * n];
    let mut inv_std = vec![0.0f32; c];
    for ch in 0..c {
        let x = &input[ch * n..(ch + 1) * n];
        let mean = x.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        let var = x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
        let istd = 1.0 / (var + eps as f64).sqrt();
        inv_std[ch] = istd as f32;
        for i in 0..n {
            let xh = (x[i] as f64 - mean) * istd;
            normalized[ch * n + i] = xh as f32;
            out[ch * n + i] = (xh * gamma[ch] as f64 + beta[ch] as f64) as f32;
        }
    }
    (out, NormCache { normalized, inv_std })
}

pub(crate) fn instance_norm_backward(
    grad: &[f32],
    gamma: &[f32],
    cache: &NormCache,
    c: usize,
    n: usize,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let mut d_in = vec![0.0f32; c * n];
    let mut d_gamma = vec![0.0f32; c];
    let mut d_beta = vec![0.0f32; c];
    for ch in 0..c {
        let g = &grad[ch * n..(ch + 1) * n];
        let xh = &cache.normalized[ch * n..(ch + 1) * n];
        let mut sum_g = 0.0f64;
        let mut sum_gx = 0.0f64;
        for i in 0..n {
            sum_g += g[i] as f64;
            sum_gx += (g[i] * xh[i]) as f64;
        }
        d_beta[ch] = sum_g as f32;
        d_gamma[ch] = sum_gx as f32;
        // dxhat = g·gamma; dx = istd/n · (n·dxhat − Σdxhat − xhat·Σ(dxhat·xhat))
        let gm = gamma[ch] as f64;
        let scale = cache.inv_std[ch] as f64 / n as f64;
        for i in 0..n {
            let v = n as f64 * g[i] as f64 * gm - sum_g * gm - xh[i] as f64 * sum_gx * gm;
            d_in[ch * n + i] = (scale * v) as f32;
        }
    }
    (d_in, d_gamma, d_beta)
}

pub(crate) fn cosine_forward(features: &[f32], probe: &[f32], c: usize, n: usize, eps: f32) -> Vec<f32> {
    let pn = probe.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
    (0..n)
        .map(|p| {
            let mut dot = 0.0f64;
            let mut fn2 = 0.0f64;
            for ch in 0..c {
                let f = features[ch * n + p] as f64;
                dot += f * probe[ch] as f64;
                fn2 += f * f;
            }
            (dot / (fn2.sqrt() * pn + eps as f64)) as f32
        })
        .collect()
}

pub(crate) fn cosine_backward(
    grad: &[f32],
    features: &[f32],
    probe: &[f32],
    c: usize,
    n: usize,
    eps: f32,
) -> (Vec<f32>, Vec<f32>) {
    let pn = probe.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
    let mut d_feat = vec![0.0f32; c * n];
    let mut d_probe = vec![0.0f64; c];
    for p in 0..n {
        let g = grad[p] as f64;
        if g == 0.0 {
            continue;
        }
        let mut dot = 0.0f64;
        let mut fn2 = 0.0f64;
        for ch in 0..c {
            let f = features[ch * n + p] as f64;
            dot += f * probe[ch] as f64;
            fn2 += f * f;
        }
        let fnorm = fn2.sqrt();
        let denom = fnorm * pn + eps as f64;
        let d2 = denom * denom;
        // d/df (dot/denom) = z/denom − dot·pn·(f/|f|)/denom²; symmetric in z.
        let kf = if fnorm > 0.0 { dot * pn / (fnorm * d2) } else { 0.0 };
        let kz = if pn > 0.0 { dot * fnorm / (pn * d2) } else { 0.0 };
        for ch in 0..c {
            let f = features[ch * n + p] as f64;
            let z = probe[ch] as f64;
            d_feat[ch * n + p] = (g * (z / denom - kf * f)) as f32;
            d_probe[ch] += g * (f / denom - kz * z);
        }
    }
    (d_feat, d_probe.into_iter().map(|v| v as f32).collect())
}

/// Denominator guard of the attention normalization. Half of it is added
/// to each numerator so the two maps sum to one even where both similarity
/// maps vanish.
pub(crate) const ATTENTION_EPS: f64 = 1e-8;

/// `(A^f, A^b)` from the two cosine maps, stacked as `2×n`.
pub(crate) fn attention_forward(cos_fg: &[f32], cos_bg: &[f32]) -> Vec<f32> {
    let n = cos_fg.len();
    let half = ATTENTION_EPS / 2.0;
    let mut out = vec![0.0f32; 2 * n];
    for i in 0..n {
        let cf = (1.0 + cos_fg[i] as f64) / 2.0 + half;
        let cb = (1.0 + cos_bg[i] as f64) / 2.0 + half;
        let s = cf + cb;
        out[i] = (cf / s) as f32;
        out[n + i] = (cb / s) as f32;
    }
    out
}

pub(crate) fn attention_backward(grad: &[f32], cos_fg: &[f32], cos_bg: &[f32]) -> (Vec<f32>, Vec<f32>) {
    let n = cos_fg.len();
    let half = ATTENTION_EPS / 2.0;
    let mut d_fg = vec![0.0f32; n];
    let mut d_bg = vec![0.0f32; n];
    for i in 0..n {
        let cf = (1.0 + cos_fg[i] as f64) / 2.0 + half;
        let cb = (1.0 + cos_bg[i] as f64) / 2.0 + half;
        let s2 = (cf + cb) * (cf + cb);
        let diff = grad[i] as f64 - grad[n + i] as f64;
        d_fg[i] = (0.5 * diff * cb / s2) as f32;
        d_bg[i] = (-0.5 * diff * cf / s2) as f32;
    }
    (d_fg, d_bg)
}

/// Mean pixel cross-entropy of two-class logits; also returns the softmax
/// probabilities for the backward pass.
pub(crate) fn softmax_ce_forward(logits: &[f32], target: &[u8]) -> (f64, Vec<f32>) {
    let n = target.len();
    let mut probs = vec![0.0f32; 2 * n];
    let mut total = 0.0f64;
    for i in 0..n {
        let (l0, l1) = (logits[i] as f64, logits[n + i] as f64);
        let m = l0.max(l1);
        let lse = m + ((l0 - m).exp() + (l1 - m).exp()).ln();
        let lt = if target[i] == 1 { l1 } else { l0 };
        total += lse - lt;
        probs[i] = (l0 - lse).exp() as f32;
        probs[n + i] = (l1 - lse).exp() as f32;
    }
    (total / n as f64, probs)
}

pub(crate) fn softmax_ce_backward(grad: f32, probs: &[f32], target: &[u8]) -> Vec<f32> {
    let n = target.len();
    let scale = grad / n as f32;
    let mut out = vec![0.0f32; 2 * n];
    for i in 0..n {
        let t = target[i] as usize;
        for ch in 0..2 {
            let onehot = if ch == t { 1.0 } else { 0.0 };
            out[ch * n + i] = (probs[ch * n + i] - onehot) * scale;
        }
    }
    out
}
