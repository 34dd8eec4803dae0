//! Dense math kernels behind the graph operations.
//!
//! Everything here is a pure function on tensors: forward kernels return a
//! fresh tensor, backward kernels scatter into caller-provided gradient
//! buffers. The graph layer owns shape validation; kernels assume conforming
//! shapes and only carry debug assertions.

use crate::tensor::{Scalar, Shape4, Tensor4};

/// Output spatial size of a strided, padded, dilated convolution.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize, dilation: usize) -> usize {
    let span = dilation * (kernel - 1) + 1;
    (input + 2 * pad - span) / stride + 1
}

// ── conv2d ────────────────────────────────────────────────────────────

/// x: (n, ci, h, w), w: (co, ci, kh, kw), b: (1, co, 1, 1).
pub fn conv2d_fwd<T: Scalar>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    b: &Tensor4<T>,
    stride: usize,
    pad: usize,
    dilation: usize,
) -> Tensor4<T> {
    let (n, ci, h, wd) = x.shape().as_tuple();
    let (co, _, kh, kw) = w.shape().as_tuple();
    let oh = conv_out_size(h, kh, stride, pad, dilation);
    let ow = conv_out_size(wd, kw, stride, pad, dilation);
    let mut out = Tensor4::zeros(Shape4::new(n, co, oh, ow));
    for bn in 0..n {
        for oc in 0..co {
            let bias = b.at(0, oc, 0, 0);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias;
                    for ic in 0..ci {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky * dilation) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx * dilation) as isize - pad as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                acc = acc.add(
                                    x.at(bn, ic, iy as usize, ix as usize)
                                        .mul(w.at(oc, ic, ky, kx)),
                                );
                            }
                        }
                    }
                    out.set(bn, oc, oy, ox, acc);
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_bwd<T: Scalar>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    g_out: &Tensor4<T>,
    stride: usize,
    pad: usize,
    dilation: usize,
    g_x: &mut Tensor4<T>,
    g_w: &mut Tensor4<T>,
    g_b: &mut Tensor4<T>,
) {
    let (n, ci, h, wd) = x.shape().as_tuple();
    let (co, _, kh, kw) = w.shape().as_tuple();
    let (_, _, oh, ow) = g_out.shape().as_tuple();
    for bn in 0..n {
        for oc in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = g_out.at(bn, oc, oy, ox);
                    let gb = g_b.at(0, oc, 0, 0).add(g);
                    g_b.set(0, oc, 0, 0, gb);
                    for ic in 0..ci {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky * dilation) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx * dilation) as isize - pad as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                let (iyu, ixu) = (iy as usize, ix as usize);
                                let gx = g_x.at(bn, ic, iyu, ixu).add(g.mul(w.at(oc, ic, ky, kx)));
                                g_x.set(bn, ic, iyu, ixu, gx);
                                let gw = g_w.at(oc, ic, ky, kx).add(g.mul(x.at(bn, ic, iyu, ixu)));
                                g_w.set(oc, ic, ky, kx, gw);
                            }
                        }
                    }
                }
            }
        }
    }
}

// ── depthwise conv (stride 1, same padding) ──────────────────────────

/// x: (n, c, h, w), w: (c, 1, k, k), b: (1, c, 1, 1); k odd, pad = (k-1)/2.
pub fn depthwise_conv2d_fwd<T: Scalar>(x: &Tensor4<T>, w: &Tensor4<T>, b: &Tensor4<T>) -> Tensor4<T> {
    let (n, c, h, wd) = x.shape().as_tuple();
    let k = w.shape().h;
    let pad = (k - 1) / 2;
    let mut out = Tensor4::zeros(x.shape());
    for bn in 0..n {
        for ch in 0..c {
            for oy in 0..h {
                for ox in 0..wd {
                    let mut acc = b.at(0, ch, 0, 0);
                    for ky in 0..k {
                        let iy = (oy + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox + kx) as isize - pad as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            acc = acc
                                .add(x.at(bn, ch, iy as usize, ix as usize).mul(w.at(ch, 0, ky, kx)));
                        }
                    }
                    out.set(bn, ch, oy, ox, acc);
                }
            }
        }
    }
    out
}

pub fn depthwise_conv2d_bwd<T: Scalar>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    g_out: &Tensor4<T>,
    g_x: &mut Tensor4<T>,
    g_w: &mut Tensor4<T>,
    g_b: &mut Tensor4<T>,
) {
    let (n, c, h, wd) = x.shape().as_tuple();
    let k = w.shape().h;
    let pad = (k - 1) / 2;
    for bn in 0..n {
        for ch in 0..c {
            for oy in 0..h {
                for ox in 0..wd {
                    let g = g_out.at(bn, ch, oy, ox);
                    let gb = g_b.at(0, ch, 0, 0).add(g);
                    g_b.set(0, ch, 0, 0, gb);
                    for ky in 0..k {
                        let iy = (oy + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox + kx) as isize - pad as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            let (iyu, ixu) = (iy as usize, ix as usize);
                            let gx = g_x.at(bn, ch, iyu, ixu).add(g.mul(w.at(ch, 0, ky, kx)));
                            g_x.set(bn, ch, iyu, ixu, gx);
                            let gw = g_w.at(ch, 0, ky, kx).add(g.mul(x.at(bn, ch, iyu, ixu)));
                            g_w.set(ch, 0, ky, kx, gw);
                        }
                    }
                }
            }
        }
    }
}

// ── transposed conv ───────────────────────────────────────────────────

/// x: (n, ci, h, w), w: (ci, co, k, k). Output spatial = (in-1)*stride + k.
pub fn transpose_conv2d_fwd<T: Scalar>(x: &Tensor4<T>, w: &Tensor4<T>, stride: usize) -> Tensor4<T> {
    let (n, ci, h, wd) = x.shape().as_tuple();
    let (_, co, kh, kw) = w.shape().as_tuple();
    let oh = (h - 1) * stride + kh;
    let ow = (wd - 1) * stride + kw;
    let mut out: Tensor4<T> = Tensor4::zeros(Shape4::new(n, co, oh, ow));
    for bn in 0..n {
        for ic in 0..ci {
            for iy in 0..h {
                for ix in 0..wd {
                    let v = x.at(bn, ic, iy, ix);
                    for oc in 0..co {
                        let wv_base = v;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let oy = iy * stride + ky;
                                let ox = ix * stride + kx;
                                let o = out.at(bn, oc, oy, ox).add(wv_base.mul(w.at(ic, oc, ky, kx)));
                                out.set(bn, oc, oy, ox, o);
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn transpose_conv2d_bwd<T: Scalar>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    g_out: &Tensor4<T>,
    stride: usize,
    g_x: &mut Tensor4<T>,
    g_w: &mut Tensor4<T>,
) {
    let (n, ci, h, wd) = x.shape().as_tuple();
    let (_, co, kh, kw) = w.shape().as_tuple();
    for bn in 0..n {
        for ic in 0..ci {
            for iy in 0..h {
                for ix in 0..wd {
                    let xv = x.at(bn, ic, iy, ix);
                    let mut gx = g_x.at(bn, ic, iy, ix);
                    for oc in 0..co {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let g = g_out.at(bn, oc, iy * stride + ky, ix * stride + kx);
                                gx = gx.add(g.mul(w.at(ic, oc, ky, kx)));
                                let gw = g_w.at(ic, oc, ky, kx).add(g.mul(xv));
                                g_w.set(ic, oc, ky, kx, gw);
                            }
                        }
                    }
                    g_x.set(bn, ic, iy, ix, gx);
                }
            }
        }
    }
}

// ── pooling / resampling ──────────────────────────────────────────────

pub fn avg_pool2d_fwd<T: Scalar>(x: &Tensor4<T>, factor: usize) -> Tensor4<T> {
    let (n, c, h, w) = x.shape().as_tuple();
    let (oh, ow) = (h / factor, w / factor);
    let inv = T::from_f64(1.0 / (factor * factor) as f64);
    let mut out = Tensor4::zeros(Shape4::new(n, c, oh, ow));
    for bn in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = T::zero();
                    for dy in 0..factor {
                        for dx in 0..factor {
                            acc = acc.add(x.at(bn, ch, oy * factor + dy, ox * factor + dx));
                        }
                    }
                    out.set(bn, ch, oy, ox, acc.mul(inv));
                }
            }
        }
    }
    out
}

pub fn avg_pool2d_bwd<T: Scalar>(g_out: &Tensor4<T>, factor: usize, g_x: &mut Tensor4<T>) {
    let (n, c, oh, ow) = g_out.shape().as_tuple();
    let inv = T::from_f64(1.0 / (factor * factor) as f64);
    for bn in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = g_out.at(bn, ch, oy, ox).mul(inv);
                    for dy in 0..factor {
                        for dx in 0..factor {
                            let (iy, ix) = (oy * factor + dy, ox * factor + dx);
                            let v = g_x.at(bn, ch, iy, ix).add(g);
                            g_x.set(bn, ch, iy, ix, v);
                        }
                    }
                }
            }
        }
    }
}

pub fn upsample_nearest2x_fwd<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    let (n, c, h, w) = x.shape().as_tuple();
    let mut out = Tensor4::zeros(Shape4::new(n, c, h * 2, w * 2));
    for bn in 0..n {
        for ch in 0..c {
            for y in 0..h * 2 {
                for xx in 0..w * 2 {
                    out.set(bn, ch, y, xx, x.at(bn, ch, y / 2, xx / 2));
                }
            }
        }
    }
    out
}

pub fn upsample_nearest2x_bwd<T: Scalar>(g_out: &Tensor4<T>, g_x: &mut Tensor4<T>) {
    let (n, c, oh, ow) = g_out.shape().as_tuple();
    for bn in 0..n {
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    let v = g_x.at(bn, ch, y / 2, xx / 2).add(g_out.at(bn, ch, y, xx));
                    g_x.set(bn, ch, y / 2, xx / 2, v);
                }
            }
        }
    }
}

/// out[p] = x[p + (dy,dx)] with zero fill outside bounds.
pub fn shift2d_fwd<T: Scalar>(x: &Tensor4<T>, dy: isize, dx: isize) -> Tensor4<T> {
    let (n, c, h, w) = x.shape().as_tuple();
    let mut out = Tensor4::zeros(x.shape());
    for bn in 0..n {
        for ch in 0..c {
            for y in 0..h {
                let sy = y as isize + dy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for xx in 0..w {
                    let sx = xx as isize + dx;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    out.set(bn, ch, y, xx, x.at(bn, ch, sy as usize, sx as usize));
                }
            }
        }
    }
    out
}

// ── axial attention pieces ────────────────────────────────────────────

/// Attention axis for striped self-attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Stripes are columns; tokens indexed by row.
    Vertical,
    /// Stripes are rows; tokens indexed by column.
    Horizontal,
}

/// Scaled dot-product scores along one axis.
///
/// q, k: (n, d, h, w). Vertical output: (n, h, h, w) with
/// scores[n, j, i, x] = sum_d q[n,d,i,x] k[n,d,j,x] / sqrt(d); channel dim
/// indexes keys, so a channel softmax normalizes each query's weights.
/// Horizontal output: (n, w, h, w) with scores[n, j, y, i] over key column j.
pub fn axial_scores_fwd<T: Scalar>(q: &Tensor4<T>, k: &Tensor4<T>, axis: Axis) -> Tensor4<T> {
    let (n, d, h, w) = q.shape().as_tuple();
    let scale = T::from_f64(1.0 / (d as f64).sqrt());
    match axis {
        Axis::Vertical => {
            let mut out = Tensor4::zeros(Shape4::new(n, h, h, w));
            for bn in 0..n {
                for x in 0..w {
                    for i in 0..h {
                        for j in 0..h {
                            let mut acc = T::zero();
                            for dd in 0..d {
                                acc = acc.add(q.at(bn, dd, i, x).mul(k.at(bn, dd, j, x)));
                            }
                            out.set(bn, j, i, x, acc.mul(scale));
                        }
                    }
                }
            }
            out
        }
        Axis::Horizontal => {
            let mut out = Tensor4::zeros(Shape4::new(n, w, h, w));
            for bn in 0..n {
                for y in 0..h {
                    for i in 0..w {
                        for j in 0..w {
                            let mut acc = T::zero();
                            for dd in 0..d {
                                acc = acc.add(q.at(bn, dd, y, i).mul(k.at(bn, dd, y, j)));
                            }
                            out.set(bn, j, y, i, acc.mul(scale));
                        }
                    }
                }
            }
            out
        }
    }
}

pub fn axial_scores_bwd<T: Scalar>(
    q: &Tensor4<T>,
    k: &Tensor4<T>,
    g_out: &Tensor4<T>,
    axis: Axis,
    g_q: &mut Tensor4<T>,
    g_k: &mut Tensor4<T>,
) {
    let (n, d, h, w) = q.shape().as_tuple();
    let scale = T::from_f64(1.0 / (d as f64).sqrt());
    match axis {
        Axis::Vertical => {
            for bn in 0..n {
                for x in 0..w {
                    for i in 0..h {
                        for j in 0..h {
                            let g = g_out.at(bn, j, i, x).mul(scale);
                            for dd in 0..d {
                                let gq = g_q.at(bn, dd, i, x).add(g.mul(k.at(bn, dd, j, x)));
                                g_q.set(bn, dd, i, x, gq);
                                let gk = g_k.at(bn, dd, j, x).add(g.mul(q.at(bn, dd, i, x)));
                                g_k.set(bn, dd, j, x, gk);
                            }
                        }
                    }
                }
            }
        }
        Axis::Horizontal => {
            for bn in 0..n {
                for y in 0..h {
                    for i in 0..w {
                        for j in 0..w {
                            let g = g_out.at(bn, j, y, i).mul(scale);
                            for dd in 0..d {
                                let gq = g_q.at(bn, dd, y, i).add(g.mul(k.at(bn, dd, y, j)));
                                g_q.set(bn, dd, y, i, gq);
                                let gk = g_k.at(bn, dd, y, j).add(g.mul(q.at(bn, dd, y, i)));
                                g_k.set(bn, dd, y, j, gk);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Applies normalized axial weights to values.
///
/// weights: (n, L, h, w) where L = h (vertical) or w (horizontal);
/// v: (n, c, h, w). Vertical: out[n,c,i,x] = sum_j weights[n,j,i,x] v[n,c,j,x].
pub fn axial_apply_fwd<T: Scalar>(weights: &Tensor4<T>, v: &Tensor4<T>, axis: Axis) -> Tensor4<T> {
    let (n, c, h, w) = v.shape().as_tuple();
    let mut out = Tensor4::zeros(v.shape());
    match axis {
        Axis::Vertical => {
            for bn in 0..n {
                for ch in 0..c {
                    for x in 0..w {
                        for i in 0..h {
                            let mut acc = T::zero();
                            for j in 0..h {
                                acc = acc.add(weights.at(bn, j, i, x).mul(v.at(bn, ch, j, x)));
                            }
                            out.set(bn, ch, i, x, acc);
                        }
                    }
                }
            }
        }
        Axis::Horizontal => {
            for bn in 0..n {
                for ch in 0..c {
                    for y in 0..h {
                        for i in 0..w {
                            let mut acc = T::zero();
                            for j in 0..w {
                                acc = acc.add(weights.at(bn, j, y, i).mul(v.at(bn, ch, y, j)));
                            }
                            out.set(bn, ch, y, i, acc);
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn axial_apply_bwd<T: Scalar>(
    weights: &Tensor4<T>,
    v: &Tensor4<T>,
    g_out: &Tensor4<T>,
    axis: Axis,
    g_weights: &mut Tensor4<T>,
    g_v: &mut Tensor4<T>,
) {
    let (n, c, h, w) = v.shape().as_tuple();
    match axis {
        Axis::Vertical => {
            for bn in 0..n {
                for ch in 0..c {
                    for x in 0..w {
                        for i in 0..h {
                            let g = g_out.at(bn, ch, i, x);
                            for j in 0..h {
                                let gw = g_weights.at(bn, j, i, x).add(g.mul(v.at(bn, ch, j, x)));
                                g_weights.set(bn, j, i, x, gw);
                                let gv = g_v.at(bn, ch, j, x).add(g.mul(weights.at(bn, j, i, x)));
                                g_v.set(bn, ch, j, x, gv);
                            }
                        }
                    }
                }
            }
        }
        Axis::Horizontal => {
            for bn in 0..n {
                for ch in 0..c {
                    for y in 0..h {
                        for i in 0..w {
                            let g = g_out.at(bn, ch, y, i);
                            for j in 0..w {
                                let gw = g_weights.at(bn, j, y, i).add(g.mul(v.at(bn, ch, y, j)));
                                g_weights.set(bn, j, y, i, gw);
                                let gv = g_v.at(bn, ch, y, j).add(g.mul(weights.at(bn, j, y, i)));
                                g_v.set(bn, ch, y, j, gv);
                            }
                        }
                    }
                }
            }
        }
    }
}

// ── softmax ───────────────────────────────────────────────────────────

/// Softmax over the channel dimension restricted to `mask != 0` entries.
/// Masked entries output exactly 0; a fully masked column outputs all zeros.
pub fn masked_softmax_channels_fwd<T: Scalar>(x: &Tensor4<T>, mask: &Tensor4<T>) -> Tensor4<T> {
    let (n, c, h, w) = x.shape().as_tuple();
    let mut out = Tensor4::zeros(x.shape());
    for bn in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let mut max = f64::NEG_INFINITY;
                for ch in 0..c {
                    if mask.at(bn, ch, y, xx).to_f64() != 0.0 {
                        max = max.max(x.at(bn, ch, y, xx).to_f64());
                    }
                }
                if max == f64::NEG_INFINITY {
                    continue; // fully masked
                }
                let mut denom = T::zero();
                for ch in 0..c {
                    if mask.at(bn, ch, y, xx).to_f64() != 0.0 {
                        let e = x.at(bn, ch, y, xx).sub(T::from_f64(max)).exp();
                        out.set(bn, ch, y, xx, e);
                        denom = denom.add(e);
                    }
                }
                for ch in 0..c {
                    out.set(bn, ch, y, xx, out.at(bn, ch, y, xx).div(denom));
                }
            }
        }
    }
    out
}

/// dL/dx_i = s_i (g_i - sum_j s_j g_j); masked entries have s = 0 so they
/// receive no gradient without special casing.
pub fn masked_softmax_channels_bwd<T: Scalar>(
    out: &Tensor4<T>,
    g_out: &Tensor4<T>,
    g_x: &mut Tensor4<T>,
) {
    let (n, c, h, w) = out.shape().as_tuple();
    for bn in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let mut dot = T::zero();
                for ch in 0..c {
                    dot = dot.add(out.at(bn, ch, y, xx).mul(g_out.at(bn, ch, y, xx)));
                }
                for ch in 0..c {
                    let s = out.at(bn, ch, y, xx);
                    let g = g_x
                        .at(bn, ch, y, xx)
                        .add(s.mul(g_out.at(bn, ch, y, xx).sub(dot)));
                    g_x.set(bn, ch, y, xx, g);
                }
            }
        }
    }
}

/// Softmax over the last (width) dimension.
pub fn softmax_lastdim_fwd<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    let (n, c, h, w) = x.shape().as_tuple();
    let mut out = Tensor4::zeros(x.shape());
    for bn in 0..n {
        for ch in 0..c {
            for y in 0..h {
                let mut max = f64::NEG_INFINITY;
                for xx in 0..w {
                    max = max.max(x.at(bn, ch, y, xx).to_f64());
                }
                let mut denom = T::zero();
                for xx in 0..w {
                    let e = x.at(bn, ch, y, xx).sub(T::from_f64(max)).exp();
                    out.set(bn, ch, y, xx, e);
                    denom = denom.add(e);
                }
                for xx in 0..w {
                    out.set(bn, ch, y, xx, out.at(bn, ch, y, xx).div(denom));
                }
            }
        }
    }
    out
}

pub fn softmax_lastdim_bwd<T: Scalar>(out: &Tensor4<T>, g_out: &Tensor4<T>, g_x: &mut Tensor4<T>) {
    let (n, c, h, w) = out.shape().as_tuple();
    for bn in 0..n {
        for ch in 0..c {
            for y in 0..h {
                let mut dot = T::zero();
                for xx in 0..w {
                    dot = dot.add(out.at(bn, ch, y, xx).mul(g_out.at(bn, ch, y, xx)));
                }
                for xx in 0..w {
                    let s = out.at(bn, ch, y, xx);
                    let g = g_x
                        .at(bn, ch, y, xx)
                        .add(s.mul(g_out.at(bn, ch, y, xx).sub(dot)));
                    g_x.set(bn, ch, y, xx, g);
                }
            }
        }
    }
}

// ── scalar nonlinearities ─────────────────────────────────────────────

pub fn gelu_scalar<T: Scalar>(x: T) -> T {
    // tanh approximation
    let c = T::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
    let k = T::from_f64(0.044_715);
    let x3 = x.mul(x).mul(x);
    let inner = c.mul(x.add(k.mul(x3)));
    T::from_f64(0.5).mul(x).mul(T::one().add(inner.tanh()))
}

pub fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    let c = T::from_f64(0.797_884_560_802_865_4);
    let k = T::from_f64(0.044_715);
    let x2 = x.mul(x);
    let inner = c.mul(x.add(k.mul(x2.mul(x))));
    let t = inner.tanh();
    let sech2 = T::one().sub(t.mul(t));
    let d_inner = c.mul(T::one().add(T::from_f64(3.0 * 0.044_715).mul(x2)));
    let half = T::from_f64(0.5);
    half.mul(T::one().add(t)).add(half.mul(x).mul(sech2).mul(d_inner))
}

pub fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x.to_f64() >= 0.0 {
        T::one().div(T::one().add(x.neg().exp()))
    } else {
        let e = x.exp();
        e.div(T::one().add(e))
    }
}

/// Numerically stable ln(1 + e^x).
pub fn softplus_scalar<T: Scalar>(x: T) -> T {
    let xf = x.to_f64();
    if xf > 30.0 {
        x
    } else if xf < -30.0 {
        x.exp()
    } else {
        T::one().add(x.exp()).ln()
    }
}
