//! Eager tensor kernels: the operator set the model is built from.
//!
//! All kernels are pure functions, deterministic for fixed inputs, and use a
//! fixed reduction order (row-parallel work never reorders accumulation
//! within an output element). The tape in [`crate::tape`] records these same
//! kernels and adds the backward rules.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Layernorm variance floor.
pub const LAYERNORM_EPS: f64 = 1e-5;

/// Default Charbonnier epsilon.
pub const CHARBONNIER_EPS: f64 = 1e-3;

// ── raw matmul helpers (slices, caller-zeroed outputs) ──────────────────

const PAR_FLOP_THRESHOLD: usize = 1 << 17;

/// out[m,n] += a[m,k] · b[k,n]
pub(crate) fn mm_nn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    let body = |i: usize, out_row: &mut [T]| {
        let a_row = &a[i * k..(i + 1) * k];
        for (l, &a_il) in a_row.iter().enumerate() {
            let b_row = &b[l * n..(l + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row.iter()) {
                *o = *o + a_il * bv;
            }
        }
    };
    if m * k * n >= PAR_FLOP_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(|(i, row)| body(i, row));
    } else {
        for (i, row) in out.chunks_mut(n).enumerate() {
            body(i, row);
        }
    }
}

/// out[m,n] += a[m,k] · b[n,k]ᵀ
pub(crate) fn mm_nt<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    let body = |i: usize, out_row: &mut [T]| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&av, &bv) in a_row.iter().zip(b_row.iter()) {
                acc = acc + av * bv;
            }
            *o = *o + acc;
        }
    };
    if m * k * n >= PAR_FLOP_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(|(i, row)| body(i, row));
    } else {
        for (i, row) in out.chunks_mut(n).enumerate() {
            body(i, row);
        }
    }
}

/// out[k,n] += a[m,k]ᵀ · b[m,n]
pub(crate) fn mm_tn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    let body = |ci: usize, out_row: &mut [T]| {
        for r in 0..m {
            let av = a[r * k + ci];
            let b_row = &b[r * n..(r + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row.iter()) {
                *o = *o + av * bv;
            }
        }
    };
    if m * k * n >= PAR_FLOP_THRESHOLD && k > 1 {
        out.par_chunks_mut(n).enumerate().for_each(|(ci, row)| body(ci, row));
    } else {
        for (ci, row) in out.chunks_mut(n).enumerate() {
            body(ci, row);
        }
    }
}

// ── public kernels ───────────────────────────────────────────────────────

/// Standard matrix product of two rank-2 tensors.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 {
        return Err(Error::shape(format!("matmul expects rank-2 inputs, got {sa:?} and {sb:?}")));
    }
    if sa[1] != sb[0] {
        return Err(Error::shape(format!("matmul inner extents differ: {sa:?} vs {sb:?}")));
    }
    let (m, k, n) = (sa[0], sa[1], sb[1]);
    let mut out = vec![T::zero(); m * n];
    mm_nn(a.data(), b.data(), &mut out, m, k, n);
    Ok(Tensor::new(vec![m, n], out))
}

/// Direct 2D convolution over an `[H, W, Cin]` image with an
/// `[kh, kw, Cin, Cout]` kernel. Output extents follow the usual
/// `(H + 2·pad − kh) / stride + 1` floor rule.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (h, w, cin) = rank3(x, "conv2d input")?;
    let ks = kernel.shape();
    if ks.len() != 4 {
        return Err(Error::shape(format!("conv2d kernel must be rank 4, got {ks:?}")));
    }
    let (kh, kw, kcin, cout) = (ks[0], ks[1], ks[2], ks[3]);
    if kcin != cin {
        return Err(Error::shape(format!("conv2d channel mismatch: input {cin}, kernel {kcin}")));
    }
    if stride == 0 {
        return Err(Error::Invalid("conv2d stride must be >= 1".into()));
    }
    if kh > h + 2 * pad || kw > w + 2 * pad {
        return Err(Error::shape(format!(
            "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
            h + 2 * pad,
            w + 2 * pad
        )));
    }
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![T::zero(); oh * ow * cout];
    conv2d_into(x.data(), kernel.data(), &mut out, h, w, cin, kh, kw, cout, stride, pad);
    Ok(Tensor::new(vec![oh, ow, cout], out))
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_into<T: Scalar>(
    x: &[T],
    k: &[T],
    out: &mut [T],
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    stride: usize,
    pad: usize,
) {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let row_body = |oy: usize, out_row: &mut [T]| {
        for ox in 0..ow {
            let acc = &mut out_row[ox * cout..(ox + 1) * cout];
            for ky in 0..kh {
                let iy = (oy * stride + ky).wrapping_sub(pad);
                if iy >= h {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride + kx).wrapping_sub(pad);
                    if ix >= w {
                        continue;
                    }
                    let x_px = &x[(iy * w + ix) * cin..(iy * w + ix + 1) * cin];
                    let w_base = ((ky * kw + kx) * cin) * cout;
                    for (ci, &xv) in x_px.iter().enumerate() {
                        let w_row = &k[w_base + ci * cout..w_base + (ci + 1) * cout];
                        for (o, &wv) in acc.iter_mut().zip(w_row.iter()) {
                            *o = *o + xv * wv;
                        }
                    }
                }
            }
        }
    };
    if oh * ow * cout * kh * kw * cin >= PAR_FLOP_THRESHOLD && oh > 1 {
        out.par_chunks_mut(ow * cout).enumerate().for_each(|(oy, row)| row_body(oy, row));
    } else {
        for (oy, row) in out.chunks_mut(ow * cout).enumerate() {
            row_body(oy, row);
        }
    }
}

/// d(loss)/d(input) of `conv2d_into`, gather formulation (deterministic).
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward_input<T: Scalar>(
    k: &[T],
    gout: &[T],
    gx: &mut [T],
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    stride: usize,
    pad: usize,
) {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let row_body = |iy: usize, gx_row: &mut [T]| {
        for ix in 0..w {
            let gpix = &mut gx_row[ix * cin..(ix + 1) * cin];
            for ky in 0..kh {
                let oy_num = iy + pad;
                if oy_num < ky || (oy_num - ky) % stride != 0 {
                    continue;
                }
                let oy = (oy_num - ky) / stride;
                if oy >= oh {
                    continue;
                }
                for kx in 0..kw {
                    let ox_num = ix + pad;
                    if ox_num < kx || (ox_num - kx) % stride != 0 {
                        continue;
                    }
                    let ox = (ox_num - kx) / stride;
                    if ox >= ow {
                        continue;
                    }
                    let g_px = &gout[(oy * ow + ox) * cout..(oy * ow + ox + 1) * cout];
                    let w_base = ((ky * kw + kx) * cin) * cout;
                    for (ci, gv) in gpix.iter_mut().enumerate() {
                        let w_row = &k[w_base + ci * cout..w_base + (ci + 1) * cout];
                        let mut acc = T::zero();
                        for (&wv, &gvv) in w_row.iter().zip(g_px.iter()) {
                            acc = acc + wv * gvv;
                        }
                        *gv = *gv + acc;
                    }
                }
            }
        }
    };
    if h * w * cin * kh * kw * cout >= PAR_FLOP_THRESHOLD && h > 1 {
        gx.par_chunks_mut(w * cin).enumerate().for_each(|(iy, row)| row_body(iy, row));
    } else {
        for (iy, row) in gx.chunks_mut(w * cin).enumerate() {
            row_body(iy, row);
        }
    }
}

/// d(loss)/d(kernel) of `conv2d_into`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward_weight<T: Scalar>(
    x: &[T],
    gout: &[T],
    gk: &mut [T],
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    stride: usize,
    pad: usize,
) {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let tap_body = |tap: usize, gk_row: &mut [T]| {
        let ci = tap % cin;
        let kx = (tap / cin) % kw;
        let ky = tap / (cin * kw);
        for oy in 0..oh {
            let iy = (oy * stride + ky).wrapping_sub(pad);
            if iy >= h {
                continue;
            }
            for ox in 0..ow {
                let ix = (ox * stride + kx).wrapping_sub(pad);
                if ix >= w {
                    continue;
                }
                let xv = x[(iy * w + ix) * cin + ci];
                let g_px = &gout[(oy * ow + ox) * cout..(oy * ow + ox + 1) * cout];
                for (o, &gv) in gk_row.iter_mut().zip(g_px.iter()) {
                    *o = *o + xv * gv;
                }
            }
        }
    };
    if oh * ow * cout * kh * kw * cin >= PAR_FLOP_THRESHOLD && kh * kw * cin > 1 {
        gk.par_chunks_mut(cout).enumerate().for_each(|(tap, row)| tap_body(tap, row));
    } else {
        for (tap, row) in gk.chunks_mut(cout).enumerate() {
            tap_body(tap, row);
        }
    }
}

/// Bilinear interpolation of `f: [H, W, C]` at real-valued `(y, x)`
/// coordinates. Out-of-range coordinates are clamped to the border.
pub fn bilinear_sample<T: Scalar>(f: &Tensor<T>, coords: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w, c) = rank3(f, "bilinear_sample field")?;
    let cs = coords.shape();
    if cs.is_empty() || *cs.last().unwrap() != 2 {
        return Err(Error::shape(format!("coords last extent must be 2, got {cs:?}")));
    }
    let p = coords.numel() / 2;
    let mut out = vec![T::zero(); p * c];
    bilinear_sample_into(f.data(), coords.data(), &mut out, h, w, c);
    let mut out_shape: Vec<usize> = cs[..cs.len() - 1].to_vec();
    out_shape.push(c);
    Ok(Tensor::new(out_shape, out))
}

#[inline]
fn tap_indices<T: Scalar>(coord: T, len: usize) -> (usize, usize, T) {
    let max = T::from_f64((len - 1) as f64);
    let c = if coord < T::zero() {
        T::zero()
    } else if coord > max {
        max
    } else {
        coord
    };
    let mut i0 = c.floor().as_f64() as usize;
    if i0 + 1 >= len {
        i0 = len.saturating_sub(2);
    }
    let i1 = (i0 + 1).min(len - 1);
    let frac = c - T::from_f64(i0 as f64);
    (i0, i1, frac)
}

pub(crate) fn bilinear_sample_into<T: Scalar>(
    f: &[T],
    coords: &[T],
    out: &mut [T],
    h: usize,
    w: usize,
    c: usize,
) {
    let body = |p: usize, out_px: &mut [T]| {
        let y = coords[2 * p];
        let x = coords[2 * p + 1];
        let (y0, y1, fy) = tap_indices(y, h);
        let (x0, x1, fx) = tap_indices(x, w);
        let one = T::one();
        let w00 = (one - fy) * (one - fx);
        let w01 = (one - fy) * fx;
        let w10 = fy * (one - fx);
        let w11 = fy * fx;
        let r00 = &f[(y0 * w + x0) * c..(y0 * w + x0 + 1) * c];
        let r01 = &f[(y0 * w + x1) * c..(y0 * w + x1 + 1) * c];
        let r10 = &f[(y1 * w + x0) * c..(y1 * w + x0 + 1) * c];
        let r11 = &f[(y1 * w + x1) * c..(y1 * w + x1 + 1) * c];
        for (i, o) in out_px.iter_mut().enumerate() {
            *o = w00 * r00[i] + w01 * r01[i] + w10 * r10[i] + w11 * r11[i];
        }
    };
    let p = coords.len() / 2;
    if p * c >= PAR_FLOP_THRESHOLD && p > 1 {
        out.par_chunks_mut(c).enumerate().for_each(|(i, px)| body(i, px));
    } else {
        for (i, px) in out.chunks_mut(c).enumerate() {
            body(i, px);
        }
    }
}

/// Backward of `bilinear_sample_into`. `gf` is scatter-accumulated
/// sequentially (deterministic); `gcoords` gets the interpolation slope,
/// which is zero along any axis where the coordinate was clamped.
pub(crate) fn bilinear_sample_backward<T: Scalar>(
    f: &[T],
    coords: &[T],
    gout: &[T],
    gf: &mut [T],
    gcoords: &mut [T],
    h: usize,
    w: usize,
    c: usize,
) {
    let p = coords.len() / 2;
    let one = T::one();
    let h_max = T::from_f64((h - 1) as f64);
    let w_max = T::from_f64((w - 1) as f64);
    for pi in 0..p {
        let y = coords[2 * pi];
        let x = coords[2 * pi + 1];
        let (y0, y1, fy) = tap_indices(y, h);
        let (x0, x1, fx) = tap_indices(x, w);
        let g_px = &gout[pi * c..(pi + 1) * c];
        let w00 = (one - fy) * (one - fx);
        let w01 = (one - fy) * fx;
        let w10 = fy * (one - fx);
        let w11 = fy * fx;
        let (b00, b01, b10, b11) = ((y0 * w + x0) * c, (y0 * w + x1) * c, (y1 * w + x0) * c, (y1 * w + x1) * c);
        let mut gy = T::zero();
        let mut gx = T::zero();
        for (i, &g) in g_px.iter().enumerate() {
            gf[b00 + i] = gf[b00 + i] + w00 * g;
            gf[b01 + i] = gf[b01 + i] + w01 * g;
            gf[b10 + i] = gf[b10 + i] + w10 * g;
            gf[b11 + i] = gf[b11 + i] + w11 * g;
            let f00 = f[b00 + i];
            let f01 = f[b01 + i];
            let f10 = f[b10 + i];
            let f11 = f[b11 + i];
            let dvy = (one - fx) * (f10 - f00) + fx * (f11 - f01);
            let dvx = (one - fy) * (f01 - f00) + fy * (f11 - f10);
            gy = gy + g * dvy;
            gx = gx + g * dvx;
        }
        // Clamped coordinates do not move with the input coordinate.
        if y < T::zero() || y > h_max {
            gy = T::zero();
        }
        if x < T::zero() || x > w_max {
            gx = T::zero();
        }
        gcoords[2 * pi] = gcoords[2 * pi] + gy;
        gcoords[2 * pi + 1] = gcoords[2 * pi + 1] + gx;
    }
}

/// Backward warp: `out[y, x] = f(y + flow[y, x, 0], x + flow[y, x, 1])`
/// with bilinear sampling and border clamping.
pub fn flow_warp<T: Scalar>(f: &Tensor<T>, flow: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w, c) = rank3(f, "flow_warp field")?;
    let fs = flow.shape();
    if fs != [h, w, 2] {
        return Err(Error::shape(format!("flow_warp flow must be [{h}, {w}, 2], got {fs:?}")));
    }
    let coords = warp_coords(flow.data(), h, w);
    let mut out = vec![T::zero(); h * w * c];
    bilinear_sample_into(f.data(), &coords, &mut out, h, w, c);
    Ok(Tensor::new(vec![h, w, c], out))
}

/// Absolute sampling coordinates for a backward warp: grid + flow.
pub(crate) fn warp_coords<T: Scalar>(flow: &[T], h: usize, w: usize) -> Vec<T> {
    let mut coords = vec![T::zero(); h * w * 2];
    for y in 0..h {
        for x in 0..w {
            let i = (y * w + x) * 2;
            coords[i] = T::from_f64(y as f64) + flow[i];
            coords[i + 1] = T::from_f64(x as f64) + flow[i + 1];
        }
    }
    coords
}

/// Sub-pixel rearrangement `[H, W, s²·C] -> [sH, sW, C]`.
/// `pixel_unshuffle` is its exact inverse.
pub fn pixel_shuffle<T: Scalar>(f: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    let (h, w, cs2) = rank3(f, "pixel_shuffle input")?;
    if s == 0 || cs2 % (s * s) != 0 {
        return Err(Error::shape(format!(
            "pixel_shuffle channels {cs2} not divisible by s^2 = {}",
            s * s
        )));
    }
    let c = cs2 / (s * s);
    let mut out = vec![T::zero(); h * s * w * s * c];
    let ow = w * s;
    let src = f.data();
    for y in 0..h {
        for x in 0..w {
            let px = &src[(y * w + x) * cs2..(y * w + x + 1) * cs2];
            for cc in 0..c {
                for i in 0..s {
                    for j in 0..s {
                        out[((y * s + i) * ow + (x * s + j)) * c + cc] = px[cc * s * s + i * s + j];
                    }
                }
            }
        }
    }
    Ok(Tensor::new(vec![h * s, w * s, c], out))
}

/// Inverse of [`pixel_shuffle`]: `[sH, sW, C] -> [H, W, s²·C]`.
pub fn pixel_unshuffle<T: Scalar>(f: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    let (sh, sw, c) = rank3(f, "pixel_unshuffle input")?;
    if s == 0 || sh % s != 0 || sw % s != 0 {
        return Err(Error::shape(format!(
            "pixel_unshuffle extents {sh}x{sw} not divisible by s = {s}"
        )));
    }
    let (h, w) = (sh / s, sw / s);
    let cs2 = c * s * s;
    let mut out = vec![T::zero(); h * w * cs2];
    let src = f.data();
    for y in 0..h {
        for x in 0..w {
            let px = &mut out[(y * w + x) * cs2..(y * w + x + 1) * cs2];
            for cc in 0..c {
                for i in 0..s {
                    for j in 0..s {
                        px[cc * s * s + i * s + j] = src[((y * s + i) * sw + (x * s + j)) * c + cc];
                    }
                }
            }
        }
    }
    Ok(Tensor::new(vec![h, w, cs2], out))
}

/// Row-wise softmax over the last extent, max-shifted for stability.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let n = *logits.shape().last().expect("softmax needs rank >= 1");
    let mut out = logits.data().to_vec();
    softmax_rows(&mut out, n);
    Tensor::new(logits.shape().to_vec(), out)
}

pub(crate) fn softmax_rows<T: Scalar>(data: &mut [T], n: usize) {
    for row in data.chunks_mut(n) {
        let mut mx = row[0];
        for &v in row.iter() {
            if v > mx {
                mx = v;
            }
        }
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            sum = sum + *v;
        }
        let inv = T::one() / sum;
        for v in row.iter_mut() {
            *v = *v * inv;
        }
    }
}

/// GELU, tanh form. The backward rule differentiates this same expression,
/// so finite differences and analytic gradients agree exactly.
pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(gelu_scalar)
}

#[inline]
pub(crate) fn gelu_scalar<T: Scalar>(x: T) -> T {
    let c = T::from_f64(0.7978845608028654); // sqrt(2/pi)
    let a = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (T::one() + u.tanh())
}

#[inline]
pub(crate) fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    let c = T::from_f64(0.7978845608028654);
    let a = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + three * a * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Layer normalization over the last extent with affine parameters.
/// Before the affine, each row has mean 0 and unit variance (up to the
/// variance floor).
pub fn layernorm<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<Tensor<T>> {
    let n = *x.shape().last().ok_or_else(|| Error::shape("layernorm needs rank >= 1"))?;
    if gamma.numel() != n || beta.numel() != n {
        return Err(Error::shape(format!(
            "layernorm affine extents {} / {} do not match feature extent {n}",
            gamma.numel(),
            beta.numel()
        )));
    }
    let mut out = vec![T::zero(); x.numel()];
    layernorm_into(x.data(), gamma.data(), beta.data(), &mut out, n, None);
    Ok(Tensor::new(x.shape().to_vec(), out))
}

/// `stats`, when given, receives `(mean, rstd)` per row for the backward.
pub(crate) fn layernorm_into<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    out: &mut [T],
    n: usize,
    mut stats: Option<&mut Vec<(T, T)>>,
) {
    let eps = T::from_f64(LAYERNORM_EPS);
    let inv_n = T::one() / T::from_f64(n as f64);
    for (row_i, (row, orow)) in x.chunks(n).zip(out.chunks_mut(n)).enumerate() {
        let _ = row_i;
        let mut mean = T::zero();
        for &v in row.iter() {
            mean = mean + v;
        }
        mean = mean * inv_n;
        let mut var = T::zero();
        for &v in row.iter() {
            let d = v - mean;
            var = var + d * d;
        }
        var = var * inv_n;
        let rstd = T::one() / (var + eps).sqrt();
        for ((o, &v), (&g, &b)) in orow.iter_mut().zip(row.iter()).zip(gamma.iter().zip(beta.iter())) {
            *o = (v - mean) * rstd * g + b;
        }
        if let Some(s) = stats.as_deref_mut() {
            s.push((mean, rstd));
        }
    }
}

/// Reduction mode for the Charbonnier loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CharbonnierMode {
    /// `sqrt(sum(r^2) + eps^2)`: the single global norm.
    Global,
    /// `mean(sqrt(r_i^2 + eps^2))`: per-element, resolution independent.
    Mean,
}

/// Charbonnier loss between equal-shape tensors.
pub fn charbonnier<T: Scalar>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    eps: T,
    mode: CharbonnierMode,
) -> Result<T> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(format!(
            "charbonnier shapes differ: {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    Ok(charbonnier_value(pred.data(), target.data(), eps, mode))
}

pub(crate) fn charbonnier_value<T: Scalar>(pred: &[T], target: &[T], eps: T, mode: CharbonnierMode) -> T {
    match mode {
        CharbonnierMode::Global => {
            let mut acc = T::zero();
            for (&p, &t) in pred.iter().zip(target.iter()) {
                let r = p - t;
                acc = acc + r * r;
            }
            (acc + eps * eps).sqrt()
        }
        CharbonnierMode::Mean => {
            let mut acc = T::zero();
            for (&p, &t) in pred.iter().zip(target.iter()) {
                let r = p - t;
                acc = acc + (r * r + eps * eps).sqrt();
            }
            acc / T::from_f64(pred.len() as f64)
        }
    }
}

// ── bicubic resampling ───────────────────────────────────────────────────

fn cubic_weight(t: f64) -> f64 {
    // Keys kernel, a = -0.5.
    let a = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        (a + 2.0) * t * t * t - (a + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        a * (t * t * t - 5.0 * t * t + 8.0 * t - 4.0)
    } else {
        0.0
    }
}

struct ResampleTaps {
    start: Vec<isize>,
    weights: Vec<f64>,
    taps: usize,
}

fn cubic_taps(src_len: usize, dst_len: usize) -> ResampleTaps {
    let scale = src_len as f64 / dst_len as f64;
    // Antialias on downscale: widen the kernel by the scale factor.
    let filter_scale = scale.max(1.0);
    let support = 2.0 * filter_scale;
    let taps = (2.0 * support).ceil() as usize + 1;
    let mut start = Vec::with_capacity(dst_len);
    let mut weights = Vec::with_capacity(dst_len * taps);
    for d in 0..dst_len {
        let center = (d as f64 + 0.5) * scale - 0.5;
        let lo = (center - support).floor() as isize;
        let mut wsum = 0.0;
        let mut local = vec![0.0; taps];
        for (j, lw) in local.iter_mut().enumerate() {
            let s = lo + j as isize;
            let wv = cubic_weight((s as f64 - center) / filter_scale);
            *lw = wv;
            wsum += wv;
        }
        for lw in local.iter_mut() {
            *lw /= wsum;
        }
        start.push(lo);
        weights.extend_from_slice(&local);
    }
    ResampleTaps { start, weights, taps }
}

/// Separable bicubic resize of an `[H, W, C]` image to `[out_h, out_w, C]`,
/// antialiased when downscaling, border clamped. Weights are computed and
/// accumulated at f64 regardless of `T`.
pub fn resize_bicubic<T: Scalar>(src: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (h, w, c) = rank3(src, "resize_bicubic input")?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::Invalid("resize_bicubic output extents must be positive".into()));
    }
    // Horizontal pass.
    let tx = cubic_taps(w, out_w);
    let mut tmp = vec![0.0f64; h * out_w * c];
    let data = src.data();
    for y in 0..h {
        for ox in 0..out_w {
            let acc = &mut tmp[(y * out_w + ox) * c..(y * out_w + ox + 1) * c];
            let lo = tx.start[ox];
            let ws = &tx.weights[ox * tx.taps..(ox + 1) * tx.taps];
            for (j, &wv) in ws.iter().enumerate() {
                if wv == 0.0 {
                    continue;
                }
                let sx = (lo + j as isize).clamp(0, w as isize - 1) as usize;
                let px = &data[(y * w + sx) * c..(y * w + sx + 1) * c];
                for (o, &v) in acc.iter_mut().zip(px.iter()) {
                    *o += wv * v.as_f64();
                }
            }
        }
    }
    // Vertical pass.
    let ty = cubic_taps(h, out_h);
    let mut out = vec![T::zero(); out_h * out_w * c];
    for oy in 0..out_h {
        let lo = ty.start[oy];
        let ws = &ty.weights[oy * ty.taps..(oy + 1) * ty.taps];
        for ox in 0..out_w {
            let mut acc = vec![0.0f64; c];
            for (j, &wv) in ws.iter().enumerate() {
                if wv == 0.0 {
                    continue;
                }
                let sy = (lo + j as isize).clamp(0, h as isize - 1) as usize;
                let px = &tmp[(sy * out_w + ox) * c..(sy * out_w + ox + 1) * c];
                for (o, &v) in acc.iter_mut().zip(px.iter()) {
                    *o += wv * v;
                }
            }
            for (cc, &v) in acc.iter().enumerate() {
                out[(oy * out_w + ox) * c + cc] = T::from_f64(v);
            }
        }
    }
    Ok(Tensor::new(vec![out_h, out_w, c], out))
}

pub(crate) fn rank3<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<(usize, usize, usize)> {
    let s = t.shape();
    if s.len() != 3 {
        return Err(Error::shape(format!("{what} must be rank 3, got {s:?}")));
    }
    Ok((s[0], s[1], s[2]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() < tol
    }

    // Independent triple-loop oracle.
    fn matmul_oracle(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for l in 0..k {
                    acc += a.data()[i * k + l] * b.data()[l * n + j];
                }
                out[i * n + j] = acc;
            }
        }
        Tensor::new(vec![m, n], out)
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let mut rng = SeedStream::new(1, "mm");
        let eye = Tensor::<f64>::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]);
        let b: Tensor<f64> = rng.uniform_tensor(vec![3, 3], -1.0, 1.0);
        let prod = matmul(&eye, &b).unwrap();
        assert_eq!(prod.data(), b.data());

        let a = Tensor::<f64>::new(vec![1, 1], vec![2.0]);
        let c = Tensor::<f64>::new(vec![1, 1], vec![3.0]);
        assert_eq!(matmul(&a, &c).unwrap().data(), &[6.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = SeedStream::new(2, "mm");
        let a: Tensor<f64> = rng.uniform_tensor(vec![4, 5], -1.0, 1.0);
        let b: Tensor<f64> = rng.uniform_tensor(vec![5, 3], -1.0, 1.0);
        let got = matmul(&a, &b).unwrap();
        let want = matmul_oracle(&a, &b);
        assert!(got.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn matmul_rejects_shape_mismatch() {
        let a = Tensor::<f64>::zeros(vec![2, 3]);
        let b = Tensor::<f64>::zeros(vec![4, 2]);
        assert!(matmul(&a, &b).is_err());
    }

    // Direct-loop convolution oracle.
    fn conv2d_oracle(x: &Tensor<f64>, k: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let (h, w, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (kh, kw, _, cout) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; oh * ow * cout];
        for oy in 0..oh {
            for ox in 0..ow {
                for co in 0..cout {
                    let mut acc = 0.0;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = oy as isize * stride as isize + ky as isize - pad as isize;
                            let ix = ox as isize * stride as isize + kx as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                acc += x.data()[((iy as usize) * w + ix as usize) * cin + ci]
                                    * k.data()[((ky * kw + kx) * cin + ci) * cout + co];
                            }
                        }
                    }
                    out[(oy * ow + ox) * cout + co] = acc;
                }
            }
        }
        Tensor::new(vec![oh, ow, cout], out)
    }

    #[test]
    fn conv2d_identity_kernel() {
        let mut rng = SeedStream::new(3, "conv");
        let x: Tensor<f64> = rng.uniform_tensor(vec![5, 6, 2], -1.0, 1.0);
        // 1x1 kernel = identity over channels.
        let k = Tensor::<f64>::new(vec![1, 1, 2, 2], vec![1., 0., 0., 1.]);
        let out = conv2d(&x, &k, 1, 0).unwrap();
        assert_eq!(out.shape(), x.shape());
        assert!(out.max_abs_diff(&x) < 1e-15);
    }

    #[test]
    fn conv2d_delta_kernel_shifts() {
        let mut rng = SeedStream::new(4, "conv");
        let x: Tensor<f64> = rng.uniform_tensor(vec![4, 4, 1], -1.0, 1.0);
        // 3x3 delta at (0,0), pad 1: out[y,x] = x[y-1, x-1], zero fill.
        let mut kd = vec![0.0; 9];
        kd[0] = 1.0;
        let k = Tensor::<f64>::new(vec![3, 3, 1, 1], kd);
        let out = conv2d(&x, &k, 1, 1).unwrap();
        for y in 0..4 {
            for x_ in 0..4 {
                let want = if y >= 1 && x_ >= 1 { x.data()[(y - 1) * 4 + x_ - 1] } else { 0.0 };
                assert!(close(out.data()[y * 4 + x_], want, 1e-15));
            }
        }
    }

    #[test]
    fn conv2d_matches_direct_loop_oracle() {
        let mut rng = SeedStream::new(5, "conv");
        let x: Tensor<f64> = rng.uniform_tensor(vec![8, 8, 2], -1.0, 1.0);
        let k: Tensor<f64> = rng.uniform_tensor(vec![3, 3, 2, 4], -1.0, 1.0);
        for (stride, pad) in [(1, 0), (1, 1), (2, 1)] {
            let got = conv2d(&x, &k, stride, pad).unwrap();
            let want = conv2d_oracle(&x, &k, stride, pad);
            assert!(got.max_abs_diff(&want) < 1e-10);
        }
    }

    #[test]
    fn conv2d_rejects_oversized_kernel() {
        let x = Tensor::<f64>::zeros(vec![2, 2, 1]);
        let k = Tensor::<f64>::zeros(vec![5, 5, 1, 1]);
        assert!(conv2d(&x, &k, 1, 0).is_err());
    }

    #[test]
    fn bilinear_integer_and_midpoint() {
        let mut rng = SeedStream::new(6, "bl");
        let f: Tensor<f64> = rng.uniform_tensor(vec![4, 5, 3], -1.0, 1.0);
        let coords = Tensor::<f64>::new(vec![1, 2], vec![2.0, 3.0]);
        let out = bilinear_sample(&f, &coords).unwrap();
        for c in 0..3 {
            assert_eq!(out.data()[c], f.data()[(2 * 5 + 3) * 3 + c]);
        }

        let f2 = Tensor::<f64>::new(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]);
        let mid = bilinear_sample(&f2, &Tensor::new(vec![1, 2], vec![0.5, 0.5])).unwrap();
        assert!(close(mid.data()[0], 2.5, 1e-15));
    }

    #[test]
    fn bilinear_matches_four_neighbor_oracle() {
        let mut rng = SeedStream::new(7, "bl");
        let f: Tensor<f64> = rng.uniform_tensor(vec![6, 7, 2], -1.0, 1.0);
        for _ in 0..50 {
            let y = rng.uniform_f64(-1.0, 6.5);
            let x = rng.uniform_f64(-1.0, 7.5);
            let out = bilinear_sample(&f, &Tensor::new(vec![1, 2], vec![y, x])).unwrap();
            // Independent 4-neighbor oracle with explicit clamping.
            let yc = y.clamp(0.0, 5.0);
            let xc = x.clamp(0.0, 6.0);
            let y0 = (yc.floor() as usize).min(4);
            let x0 = (xc.floor() as usize).min(5);
            let fy = yc - y0 as f64;
            let fx = xc - x0 as f64;
            for c in 0..2 {
                let g = |yy: usize, xx: usize| f.data()[(yy * 7 + xx) * 2 + c];
                let want = (1.0 - fy) * (1.0 - fx) * g(y0, x0)
                    + (1.0 - fy) * fx * g(y0, x0 + 1)
                    + fy * (1.0 - fx) * g(y0 + 1, x0)
                    + fy * fx * g(y0 + 1, x0 + 1);
                assert!(close(out.data()[c], want, 1e-12));
            }
        }
    }

    #[test]
    fn flow_warp_identity_and_shift() {
        let mut rng = SeedStream::new(8, "fw");
        let f: Tensor<f64> = rng.uniform_tensor(vec![4, 4, 2], -1.0, 1.0);
        let zero = Tensor::<f64>::zeros(vec![4, 4, 2]);
        assert!(flow_warp(&f, &zero).unwrap().max_abs_diff(&f) < 1e-15);

        // Constant flow (0, 1): out[y, x] = f[y, x+1], last column clamped.
        let mut flow = Tensor::<f64>::zeros(vec![4, 4, 2]);
        for p in 0..16 {
            flow.data_mut()[2 * p + 1] = 1.0;
        }
        let out = flow_warp(&f, &flow).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let sx = (x + 1).min(3);
                for c in 0..2 {
                    assert_eq!(out.data()[(y * 4 + x) * 2 + c], f.data()[(y * 4 + sx) * 2 + c]);
                }
            }
        }
    }

    #[test]
    fn flow_warp_matches_per_pixel_oracle() {
        let mut rng = SeedStream::new(9, "fw");
        let f: Tensor<f64> = rng.uniform_tensor(vec![5, 6, 3], -1.0, 1.0);
        let flow: Tensor<f64> = rng.uniform_tensor(vec![5, 6, 2], -2.0, 2.0);
        let out = flow_warp(&f, &flow).unwrap();
        for y in 0..5 {
            for x in 0..6 {
                let i = (y * 6 + x) * 2;
                let coords =
                    Tensor::new(vec![1, 2], vec![y as f64 + flow.data()[i], x as f64 + flow.data()[i + 1]]);
                let want = bilinear_sample(&f, &coords).unwrap();
                for c in 0..3 {
                    assert!(close(out.data()[(y * 6 + x) * 3 + c], want.data()[c], 1e-12));
                }
            }
        }
    }

    #[test]
    fn pixel_shuffle_contracts() {
        let mut rng = SeedStream::new(10, "ps");
        let f: Tensor<f64> = rng.uniform_tensor(vec![3, 5, 4], -1.0, 1.0);
        let same = pixel_shuffle(&f, 1).unwrap();
        assert_eq!(same.data(), f.data());

        let big: Tensor<f64> = rng.uniform_tensor(vec![4, 4, 16 * 3], -1.0, 1.0);
        let up = pixel_shuffle(&big, 4).unwrap();
        assert_eq!(up.shape(), &[16, 16, 3]);

        let down = pixel_unshuffle(&up, 4).unwrap();
        assert_eq!(down.data(), big.data());

        assert!(pixel_shuffle(&f, 3).is_err());
    }

    #[test]
    fn softmax_contracts() {
        let one = softmax(&Tensor::<f64>::new(vec![1], vec![3.7]));
        assert!(close(one.data()[0], 1.0, 1e-15));

        let unif = softmax(&Tensor::<f64>::full(vec![5], 0.42));
        for &v in unif.data() {
            assert!(close(v, 0.2, 1e-12));
        }

        let mut rng = SeedStream::new(11, "sm");
        let t: Tensor<f64> = rng.uniform_tensor(vec![7, 9], -5.0, 5.0);
        let s = softmax(&t);
        for row in s.data().chunks(9) {
            let sum: f64 = row.iter().sum();
            assert!(close(sum, 1.0, 1e-6));
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn gelu_and_layernorm_fixed_points() {
        assert_eq!(gelu(&Tensor::<f64>::new(vec![1], vec![0.0])).data()[0], 0.0);

        let x = Tensor::<f64>::full(vec![2, 4], 3.3);
        let gamma = Tensor::<f64>::full(vec![4], 2.0);
        let beta = Tensor::<f64>::new(vec![4], vec![0.1, 0.2, 0.3, 0.4]);
        let out = layernorm(&x, &gamma, &beta).unwrap();
        for row in out.data().chunks(4) {
            for (o, b) in row.iter().zip(beta.data()) {
                assert!(close(*o, *b, 1e-12));
            }
        }
    }

    #[test]
    fn layernorm_normalizes_rows() {
        let mut rng = SeedStream::new(12, "ln");
        let x: Tensor<f64> = rng.uniform_tensor(vec![6, 16], -3.0, 3.0);
        let gamma = Tensor::<f64>::full(vec![16], 1.0);
        let beta = Tensor::<f64>::zeros(vec![16]);
        let out = layernorm(&x, &gamma, &beta).unwrap();
        for row in out.data().chunks(16) {
            let mean: f64 = row.iter().sum::<f64>() / 16.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4); // eps floor shifts variance slightly
        }
    }

    #[test]
    fn charbonnier_contracts() {
        let eps = 1e-3;
        let a = Tensor::<f64>::full(vec![2, 2], 0.5);
        let g = charbonnier(&a, &a, eps, CharbonnierMode::Global).unwrap();
        assert!(close(g, eps, 1e-15));

        let p = Tensor::<f64>::new(vec![1], vec![3e-3]);
        let t = Tensor::<f64>::new(vec![1], vec![0.0]);
        let m = charbonnier(&p, &t, eps, CharbonnierMode::Mean).unwrap();
        assert!(close(m, (1e-5f64).sqrt(), 1e-15));

        let mut rng = SeedStream::new(13, "cb");
        let pred: Tensor<f64> = rng.uniform_tensor(vec![2, 2], -1.0, 1.0);
        let targ: Tensor<f64> = rng.uniform_tensor(vec![2, 2], -1.0, 1.0);
        // Hand-summed oracle.
        let rs: Vec<f64> = pred.data().iter().zip(targ.data()).map(|(p, t)| p - t).collect();
        let want_global = (rs.iter().map(|r| r * r).sum::<f64>() + eps * eps).sqrt();
        let want_mean = rs.iter().map(|r| (r * r + eps * eps).sqrt()).sum::<f64>() / 4.0;
        let got_global = charbonnier(&pred, &targ, eps, CharbonnierMode::Global).unwrap();
        let got_mean = charbonnier(&pred, &targ, eps, CharbonnierMode::Mean).unwrap();
        assert!((got_global - want_global).abs() / want_global < 1e-12);
        assert!((got_mean - want_mean).abs() / want_mean < 1e-12);

        let bad = Tensor::<f64>::zeros(vec![3]);
        assert!(charbonnier(&pred, &bad, eps, CharbonnierMode::Mean).is_err());
    }

    #[test]
    fn resize_bicubic_preserves_constants() {
        let img = Tensor::<f64>::full(vec![8, 8, 3], 0.37);
        let down = resize_bicubic(&img, 2, 2).unwrap();
        for &v in down.data() {
            assert!(close(v, 0.37, 1e-12));
        }
        let up = resize_bicubic(&img, 32, 32).unwrap();
        for &v in up.data() {
            assert!(close(v, 0.37, 1e-12));
        }
    }

    #[test]
    fn resize_bicubic_interpolates_linear_ramp() {
        // Bicubic reproduces affine functions away from borders.
        let mut data = vec![0.0; 16 * 16];
        for y in 0..16 {
            for x in 0..16 {
                data[y * 16 + x] = 0.25 + 0.01 * y as f64 + 0.02 * x as f64;
            }
        }
        let img = Tensor::<f64>::new(vec![16, 16, 1], data);
        let up = resize_bicubic(&img, 32, 32).unwrap();
        for oy in 8..24 {
            for ox in 8..24 {
                let sy = (oy as f64 + 0.5) * 0.5 - 0.5;
                let sx = (ox as f64 + 0.5) * 0.5 - 0.5;
                let want = 0.25 + 0.01 * sy + 0.02 * sx;
                assert!(close(up.data()[oy * 32 + ox], want, 1e-10));
            }
        }
    }
}
