//! Dense kernels behind the graph ops.

use alloc::vec;
use alloc::vec::Vec;

use super::Unary;
use crate::math::{self, gemm};
use crate::tensor::Tensor;

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)
const GELU_A: f32 = 0.044_715;

pub(super) fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + math::tanh(GELU_C * (x + GELU_A * x * x * x)))
}

fn gelu_grad(x: f32) -> f32 {
    let t = math::tanh(GELU_C * (x + GELU_A * x * x * x));
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub(super) fn unary_backward(kind: Unary, x: &[f32], y: &[f32], g: &[f32], s: &mut [f32]) {
    match kind {
        Unary::Relu => {
            for ((s, &x), g) in s.iter_mut().zip(x).zip(g) {
                if x > 0.0 {
                    *s += g;
                }
            }
        }
        Unary::Silu => {
            for ((s, &x), g) in s.iter_mut().zip(x).zip(g) {
                let sg = math::sigmoid(x);
                *s += g * sg * (1.0 + x * (1.0 - sg));
            }
        }
        Unary::Sigmoid => {
            for ((s, &y), g) in s.iter_mut().zip(y).zip(g) {
                *s += g * y * (1.0 - y);
            }
        }
        Unary::Tanh => {
            for ((s, &y), g) in s.iter_mut().zip(y).zip(g) {
                *s += g * (1.0 - y * y);
            }
        }
        Unary::Gelu => {
            for ((s, &x), g) in s.iter_mut().zip(x).zip(g) {
                *s += g * gelu_grad(x);
            }
        }
        Unary::Square => {
            for ((s, &x), g) in s.iter_mut().zip(x).zip(g) {
                *s += 2.0 * x * g;
            }
        }
    }
}

pub(super) fn softmax_in_place(row: &mut [f32]) {
    let m = math::lane_max(row);
    row.iter_mut().for_each(|v| *v = math::exp(*v - m));
    let inv = 1.0 / math::lane_sum(row);
    row.iter_mut().for_each(|v| *v *= inv);
}

pub(super) fn permute(t: &Tensor, perm: &[usize]) -> Tensor {
    let shape = t.shape();
    let rank = shape.len();
    assert_eq!(perm.len(), rank, "permute rank");
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let src = t.data();
    let mut out = Vec::with_capacity(src.len());
    if src.is_empty() {
        return Tensor::new(out_shape, out);
    }
    let last = rank - 1;
    let (last_len, last_stride) = (out_shape[last], strides[last]);
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    'outer: loop {
        for j in 0..last_len {
            out.push(src[offset + j * last_stride]);
        }
        // advance the multi-index over all but the last axis
        let mut d = last;
        loop {
            if d == 0 {
                break 'outer;
            }
            d -= 1;
            idx[d] += 1;
            offset += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    Tensor::new(out_shape, out)
}

fn dims4(t: &[usize]) -> (usize, usize, usize, usize) {
    assert_eq!(t.len(), 4, "expected a rank-4 tensor, got {t:?}");
    (t[0], t[1], t[2], t[3])
}

struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds one image into `col`, row `r` landing at `col[r * ld + off..][..P]`.
fn im2col(x: &[f32], g: &ConvGeom, col: &mut [f32], ld: usize, off: usize) {
    for ci in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((ci * g.kh + ky) * g.kw + kx) * ld + off;
                for oy in 0..g.ho {
                    let dst = &mut col[row + oy * g.wo..row + (oy + 1) * g.wo];
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &x[(ci * g.h + iy as usize) * g.w..(ci * g.h + iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        // valid ox: 0 <= ox + kx - pad < w
                        let lo = g.pad.saturating_sub(kx).min(g.wo);
                        let hi = (g.w + g.pad).saturating_sub(kx).min(g.wo).max(lo);
                        dst[..lo].fill(0.0);
                        dst[hi..].fill(0.0);
                        let s0 = lo + kx - g.pad;
                        dst[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                    } else {
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            *d = if ix >= 0 && ix < g.w as isize { src[ix as usize] } else { 0.0 };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into one image.
fn col2im(col: &[f32], g: &ConvGeom, x: &mut [f32], ld: usize, off: usize) {
    for ci in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((ci * g.kh + ky) * g.kw + kx) * ld + off;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &col[row + oy * g.wo..row + (oy + 1) * g.wo];
                    let base = (ci * g.h + iy as usize) * g.w;
                    let dst = &mut x[base..base + g.w];
                    if g.stride == 1 {
                        let lo = g.pad.saturating_sub(kx).min(g.wo);
                        let hi = (g.w + g.pad).saturating_sub(kx).min(g.wo).max(lo);
                        let s0 = lo + kx - g.pad;
                        for (d, &v) in dst[s0..s0 + (hi - lo)].iter_mut().zip(&src[lo..hi]) {
                            *d += v;
                        }
                        continue;
                    }
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

fn geometry(x: &[usize], w: &[usize], stride: usize, pad: usize) -> (usize, usize, ConvGeom) {
    let (n, cin, h, wd) = dims4(x);
    let (cout, cin_w, kh, kw) = dims4(w);
    assert_eq!(cin, cin_w, "conv2d: input has {cin} channels, weight expects {cin_w}");
    assert!(h + 2 * pad >= kh && wd + 2 * pad >= kw, "conv2d: kernel larger than input");
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    (n, cout, ConvGeom { cin, h, w: wd, kh, kw, stride, pad, ho, wo })
}

/// Images per GEMM so that small feature maps still give wide products.
fn group_size(n: usize, p: usize) -> usize {
    (2048 / p.max(1)).clamp(1, n.max(1))
}

/// Lays out images `i0..i0+gs` of a (N, C, P) buffer as a (C, gs*P) matrix.
fn gather_channels(src: &[f32], c: usize, p: usize, i0: usize, gs: usize, dst: &mut [f32]) {
    let ld = gs * p;
    for j in 0..gs {
        let img = &src[(i0 + j) * c * p..(i0 + j + 1) * c * p];
        for ch in 0..c {
            dst[ch * ld + j * p..ch * ld + (j + 1) * p].copy_from_slice(&img[ch * p..(ch + 1) * p]);
        }
    }
}

fn scatter_channels(src: &[f32], c: usize, p: usize, i0: usize, gs: usize, dst: &mut [f32]) {
    let ld = gs * p;
    for j in 0..gs {
        let img = &mut dst[(i0 + j) * c * p..(i0 + j + 1) * c * p];
        for ch in 0..c {
            img[ch * p..(ch + 1) * p].copy_from_slice(&src[ch * ld + j * p..ch * ld + (j + 1) * p]);
        }
    }
}

/// Columns for images `i0..i0+gs`: im2col, or a channel gather for 1x1 kernels.
fn unfold_group(x: &Tensor, g: &ConvGeom, i0: usize, gs: usize, col: &mut [f32]) {
    let in_size = g.cin * g.h * g.w;
    let p = g.ho * g.wo;
    if g.pointwise() {
        gather_channels(x.data(), g.cin, p, i0, gs, col);
    } else {
        for j in 0..gs {
            let xi = &x.data()[(i0 + j) * in_size..(i0 + j + 1) * in_size];
            im2col(xi, g, col, gs * p, j * p);
        }
    }
}

pub(super) fn conv2d_forward(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Tensor {
    let (n, cout, g) = geometry(x.shape(), w.shape(), stride, pad);
    let k = g.cin * g.kh * g.kw;
    let p = g.ho * g.wo;
    let gmax = group_size(n, p);
    let mut out = vec![0.0f32; n * cout * p];
    let mut col = vec![0.0f32; k * gmax * p];
    let mut res = vec![0.0f32; cout * gmax * p];
    let mut i0 = 0;
    while i0 < n {
        let gs = gmax.min(n - i0);
        let ld = gs * p;
        unfold_group(x, &g, i0, gs, &mut col);
        let res = &mut res[..cout * ld];
        if let Some(b) = b {
            for (row, &bv) in res.chunks_mut(ld).zip(b.data()) {
                row.fill(bv);
            }
        }
        gemm(cout, k, ld, 1.0, w.data(), (k, 1), &col, (ld, 1), if b.is_some() { 1.0 } else { 0.0 }, res, (ld, 1));
        scatter_channels(res, cout, p, i0, gs, &mut out);
        i0 += gs;
    }
    Tensor::new(vec![n, cout, g.ho, g.wo], out)
}

#[allow(clippy::too_many_arguments)]
pub(super) fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    grad: &[f32],
    out_shape: &[usize],
    stride: usize,
    pad: usize,
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<f32>>, Option<Vec<f32>>) {
    let (n, cout, g) = geometry(x.shape(), w.shape(), stride, pad);
    debug_assert_eq!(out_shape, [n, cout, g.ho, g.wo]);
    let k = g.cin * g.kh * g.kw;
    let p = g.ho * g.wo;
    let in_size = g.cin * g.h * g.w;
    let gmax = group_size(n, p);
    // Stride-1 "same" convolutions get dX as a forward conv with the flipped
    // kernel, avoiding the wide column buffer and col2im scatter.
    let same = stride == 1 && g.kh == g.kw && 2 * pad + 1 == g.kh && !g.pointwise();
    let gx_direct = (need_x && same).then(|| {
        let gy = Tensor::new(out_shape.to_vec(), grad.to_vec());
        conv2d_forward(&gy, &flip_kernel(w), None, 1, pad).into_data()
    });
    let mut gx = (need_x && !same).then(|| vec![0.0f32; x.numel()]);
    let mut gw = need_w.then(|| vec![0.0f32; w.numel()]);
    let mut col = vec![0.0f32; k * gmax * p];
    let mut gcols = vec![0.0f32; cout * gmax * p];
    let mut i0 = 0;
    while i0 < n {
        let gs = gmax.min(n - i0);
        let ld = gs * p;
        gather_channels(grad, cout, p, i0, gs, &mut gcols);
        let gcols = &gcols[..cout * ld];
        if let Some(gw) = gw.as_mut() {
            unfold_group(x, &g, i0, gs, &mut col);
            gemm(k, ld, cout, 1.0, &col, (ld, 1), gcols, (1, ld), 1.0, gw, (1, k));
        }
        if let Some(gx) = gx.as_mut() {
            let col = &mut col[..k * ld];
            gemm(k, cout, ld, 1.0, w.data(), (1, k), gcols, (ld, 1), 0.0, col, (ld, 1));
            if g.pointwise() {
                for j in 0..gs {
                    let gxi = &mut gx[(i0 + j) * in_size..(i0 + j + 1) * in_size];
                    for ch in 0..g.cin {
                        let src = &col[ch * ld + j * p..ch * ld + (j + 1) * p];
                        gxi[ch * p..(ch + 1) * p].iter_mut().zip(src).for_each(|(d, s)| *d += s);
                    }
                }
            } else {
                for j in 0..gs {
                    col2im(col, &g, &mut gx[(i0 + j) * in_size..(i0 + j + 1) * in_size], ld, j * p);
                }
            }
        }
        i0 += gs;
    }
    (gx.or(gx_direct), gw)
}

/// `(cout, cin, kh, kw)` to `(cin, cout, kh, kw)` with both spatial axes reversed.
fn flip_kernel(w: &Tensor) -> Tensor {
    let (cout, cin, kh, kw) = dims4(w.shape());
    let src = w.data();
    let mut out = vec![0.0f32; src.len()];
    for co in 0..cout {
        for ci in 0..cin {
            for a in 0..kh {
                for b in 0..kw {
                    out[((ci * cout + co) * kh + kh - 1 - a) * kw + kw - 1 - b] = src[((co * cin + ci) * kh + a) * kw + b];
                }
            }
        }
    }
    Tensor::new(vec![cin, cout, kh, kw], out)
}

pub(super) fn upsample2x(x: &Tensor) -> Tensor {
    let (n, c, h, w) = dims4(x.shape());
    let mut out = vec![0.0f32; n * c * 4 * h * w];
    let src = x.data();
    for plane in 0..n * c {
        let s = &src[plane * h * w..(plane + 1) * h * w];
        let d = &mut out[plane * 4 * h * w..(plane + 1) * 4 * h * w];
        for y in 0..h {
            for xx in 0..w {
                let v = s[y * w + xx];
                let o = 2 * y * 2 * w + 2 * xx;
                d[o] = v;
                d[o + 1] = v;
                d[o + 2 * w] = v;
                d[o + 2 * w + 1] = v;
            }
        }
    }
    Tensor::new(vec![n, c, 2 * h, 2 * w], out)
}

pub(super) fn upsample2x_backward(g: &[f32], in_shape: &[usize]) -> Vec<f32> {
    let (n, c, h, w) = dims4(in_shape);
    let mut out = vec![0.0f32; n * c * h * w];
    for plane in 0..n * c {
        let s = &g[plane * 4 * h * w..(plane + 1) * 4 * h * w];
        let d = &mut out[plane * h * w..(plane + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                let o = 2 * y * 2 * w + 2 * xx;
                d[y * w + xx] = s[o] + s[o + 1] + s[o + 2 * w] + s[o + 2 * w + 1];
            }
        }
    }
    out
}

/// Mean and reciprocal standard deviation (two-pass, biased variance).
fn moments(xs: &[f32], eps: f32) -> (f32, f32) {
    let n = xs.len() as f32;
    let mean = math::lane_sum(xs) / n;
    let mut acc = [0.0f32; 8];
    let chunks = xs.chunks_exact(8);
    let rest = chunks.remainder();
    for c in chunks {
        for l in 0..8 {
            let d = c[l] - mean;
            acc[l] += d * d;
        }
    }
    let mut ss = acc.iter().sum::<f32>();
    for &v in rest {
        ss += (v - mean) * (v - mean);
    }
    (mean, 1.0 / math::sqrt(ss / n + eps))
}

/// Returns the output and `[mean, rstd]` per (sample, group).
pub(super) fn group_norm_forward(
    x: &Tensor,
    gamma: &[f32],
    beta: &[f32],
    groups: usize,
    eps: f32,
) -> (Tensor, Vec<f32>) {
    let s = x.shape();
    let (n, c) = (s[0], s[1]);
    assert!(groups > 0 && c % groups == 0, "group_norm: {c} channels into {groups} groups");
    assert_eq!(gamma.len(), c);
    let spatial: usize = s[2..].iter().product();
    let cpg = c / groups;
    let m = cpg * spatial;
    let mut out = x.clone();
    let mut stats = Vec::with_capacity(2 * n * groups);
    for (ng, chunk) in out.data_mut().chunks_mut(m).enumerate() {
        let (mean, rstd) = moments(chunk, eps);
        let c0 = (ng % groups) * cpg;
        for (j, plane) in chunk.chunks_mut(spatial).enumerate() {
            let (ga, be) = (gamma[c0 + j], beta[c0 + j]);
            plane.iter_mut().for_each(|v| *v = (*v - mean) * rstd * ga + be);
        }
        stats.push(mean);
        stats.push(rstd);
    }
    (out, stats)
}

pub(super) fn group_norm_backward(
    x: &Tensor,
    gamma: &[f32],
    groups: usize,
    stats: &[f32],
    g: &[f32],
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let s = x.shape();
    let c = s[1];
    let spatial: usize = s[2..].iter().product();
    let cpg = c / groups;
    let m = cpg * spatial;
    let mut gx = vec![0.0f32; x.numel()];
    let mut ggamma = vec![0.0f32; c];
    let mut gbeta = vec![0.0f32; c];
    let xd = x.data();
    for ng in 0..xd.len() / m {
        let (mean, rstd) = (stats[2 * ng], stats[2 * ng + 1]);
        let c0 = (ng % groups) * cpg;
        let xs = &xd[ng * m..(ng + 1) * m];
        let gs = &g[ng * m..(ng + 1) * m];
        let (mut sum1, mut sum2) = (0.0f32, 0.0f32);
        for j in 0..cpg {
            let ga = gamma[c0 + j];
            let plane = j * spatial..(j + 1) * spatial;
            let sg = math::lane_sum(&gs[plane.clone()]);
            let sgx = rstd * (math::lane_dot(&gs[plane.clone()], &xs[plane]) - mean * sg);
            ggamma[c0 + j] += sgx;
            gbeta[c0 + j] += sg;
            sum1 += sg * ga;
            sum2 += sgx * ga;
        }
        let (mean1, mean2) = (sum1 / m as f32, sum2 / m as f32);
        let out = &mut gx[ng * m..(ng + 1) * m];
        for j in 0..cpg {
            let ga = gamma[c0 + j];
            for q in j * spatial..(j + 1) * spatial {
                let xhat = (xs[q] - mean) * rstd;
                out[q] = rstd * (gs[q] * ga - mean1 - xhat * mean2);
            }
        }
    }
    (gx, ggamma, gbeta)
}

pub(super) fn layer_norm_forward(x: &Tensor, gamma: &[f32], beta: &[f32], eps: f32) -> (Tensor, Vec<f32>) {
    let d = *x.shape().last().unwrap();
    assert_eq!(gamma.len(), d, "layer_norm: affine size");
    let mut out = x.clone();
    let mut stats = Vec::with_capacity(2 * x.numel() / d);
    for row in out.data_mut().chunks_mut(d) {
        let (mean, rstd) = moments(row, eps);
        for ((v, ga), be) in row.iter_mut().zip(gamma).zip(beta) {
            *v = (*v - mean) * rstd * ga + be;
        }
        stats.push(mean);
        stats.push(rstd);
    }
    (out, stats)
}

pub(super) fn layer_norm_backward(
    x: &Tensor,
    gamma: &[f32],
    stats: &[f32],
    g: &[f32],
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let d = gamma.len();
    let mut gx = vec![0.0f32; x.numel()];
    let mut ggamma = vec![0.0f32; d];
    let mut gbeta = vec![0.0f32; d];
    for (r, ((xr, gr), out)) in x.data().chunks(d).zip(g.chunks(d)).zip(gx.chunks_mut(d)).enumerate() {
        let (mean, rstd) = (stats[2 * r], stats[2 * r + 1]);
        let (mut sum1, mut sum2) = (0.0f32, 0.0f32);
        for j in 0..d {
            let xhat = (xr[j] - mean) * rstd;
            ggamma[j] += gr[j] * xhat;
            gbeta[j] += gr[j];
            let dxhat = gr[j] * gamma[j];
            sum1 += dxhat;
            sum2 += dxhat * xhat;
        }
        let (m1, m2) = (sum1 / d as f32, sum2 / d as f32);
        for j in 0..d {
            let xhat = (xr[j] - mean) * rstd;
            out[j] = rstd * (gr[j] * gamma[j] - m1 - xhat * m2);
        }
    }
    (gx, ggamma, gbeta)
}
