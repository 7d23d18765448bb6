//! f32 kernels. Each output element accumulates its taps in a fixed order
//! (kernel row, kernel column, input channel), then adds the bias.

use crate::graph::ConvGeometry;

/// Pixels processed together by the pointwise kernel.
const TILE: usize = 4;

/// Repacks OHWI weights to HWIO so the innermost loop runs over output
/// channels.
pub(crate) fn pack_ohwi_to_hwio<T: Copy>(w: &[T], o: usize, kh: usize, kw: usize, i: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(w.len());
    for y in 0..kh {
        for x in 0..kw {
            for c in 0..i {
                for oc in 0..o {
                    out.push(w[((oc * kh + y) * kw + x) * i + c]);
                }
            }
        }
    }
    out
}

pub(crate) fn transpose<T: Copy>(w: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(w.len());
    for c in 0..cols {
        for r in 0..rows {
            out.push(w[r * cols + c]);
        }
    }
    out
}

dispatch_avx2!(
    /// General convolution over output pixels `[first, first + out.len() / cout)`.
    conv => conv_body(geo: &ConvGeometry, x: &[f32], w_hwio: &[f32], bias: Option<&[f32]>, first: usize, out: &mut [f32])
);

dispatch_avx2!(
    /// 1x1 stride-1 convolution; `w` is `cin x cout`.
    pointwise => pointwise_body(cin: usize, cout: usize, x: &[f32], w: &[f32], bias: Option<&[f32]>, first: usize, out: &mut [f32])
);

dispatch_avx2!(
    /// Depthwise convolution (channel multiplier 1); `w` is `kh x kw x c`.
    depthwise => depthwise_body(geo: &ConvGeometry, x: &[f32], w: &[f32], bias: Option<&[f32]>, first: usize, out: &mut [f32])
);

#[inline(always)]
fn conv_body(geo: &ConvGeometry, x: &[f32], w_hwio: &[f32], bias: Option<&[f32]>, first: usize, out: &mut [f32]) {
    let cout = geo.out_c;
    let cin = geo.in_c;
    for (k, px) in out.chunks_exact_mut(cout).enumerate() {
        let p = first + k;
        let (oy, ox) = (p / geo.out_w, p % geo.out_w);
        px.fill(0.0);
        for ky in 0..geo.kernel_h {
            let Some(iy) = tap(oy, ky, geo.stride, geo.pad_top, geo.in_h) else { continue };
            for kx in 0..geo.kernel_w {
                let Some(ix) = tap(ox, kx, geo.stride, geo.pad_left, geo.in_w) else { continue };
                let xin = &x[(iy * geo.in_w + ix) * cin..][..cin];
                let wk = &w_hwio[(ky * geo.kernel_w + kx) * cin * cout..][..cin * cout];
                for (&a, wrow) in xin.iter().zip(wk.chunks_exact(cout)) {
                    for (o, &wv) in px.iter_mut().zip(wrow) {
                        *o += a * wv;
                    }
                }
            }
        }
        add_bias(px, bias);
    }
}

#[inline(always)]
fn pointwise_body(cin: usize, cout: usize, x: &[f32], w: &[f32], bias: Option<&[f32]>, first: usize, out: &mut [f32]) {
    let mut p = first;
    for tile in out.chunks_mut(TILE * cout) {
        let n = tile.len() / cout;
        tile.fill(0.0);
        if n == TILE {
            let (o0, rest) = tile.split_at_mut(cout);
            let (o1, rest) = rest.split_at_mut(cout);
            let (o2, o3) = rest.split_at_mut(cout);
            let xs = &x[p * cin..(p + TILE) * cin];
            for (ci, wrow) in w.chunks_exact(cout).enumerate() {
                let (a0, a1, a2, a3) = (xs[ci], xs[cin + ci], xs[2 * cin + ci], xs[3 * cin + ci]);
                for ((((v0, v1), v2), v3), &wv) in
                    o0.iter_mut().zip(o1.iter_mut()).zip(o2.iter_mut()).zip(o3.iter_mut()).zip(wrow)
                {
                    *v0 += a0 * wv;
                    *v1 += a1 * wv;
                    *v2 += a2 * wv;
                    *v3 += a3 * wv;
                }
            }
        } else {
            for (t, px) in tile.chunks_exact_mut(cout).enumerate() {
                let xin = &x[(p + t) * cin..][..cin];
                for (&a, wrow) in xin.iter().zip(w.chunks_exact(cout)) {
                    for (o, &wv) in px.iter_mut().zip(wrow) {
                        *o += a * wv;
                    }
                }
            }
        }
        for px in tile.chunks_exact_mut(cout) {
            add_bias(px, bias);
        }
        p += n;
    }
}

#[inline(always)]
fn depthwise_body(geo: &ConvGeometry, x: &[f32], w: &[f32], bias: Option<&[f32]>, first: usize, out: &mut [f32]) {
    let c = geo.out_c;
    for (k, px) in out.chunks_exact_mut(c).enumerate() {
        let p = first + k;
        let (oy, ox) = (p / geo.out_w, p % geo.out_w);
        px.fill(0.0);
        for ky in 0..geo.kernel_h {
            let Some(iy) = tap(oy, ky, geo.stride, geo.pad_top, geo.in_h) else { continue };
            for kx in 0..geo.kernel_w {
                let Some(ix) = tap(ox, kx, geo.stride, geo.pad_left, geo.in_w) else { continue };
                let xin = &x[(iy * geo.in_w + ix) * c..][..c];
                let wk = &w[(ky * geo.kernel_w + kx) * c..][..c];
                for ((o, &a), &wv) in px.iter_mut().zip(xin).zip(wk) {
                    *o += a * wv;
                }
            }
        }
        add_bias(px, bias);
    }
}

/// Fully connected layer over outputs `[first, first + out.len())`;
/// `w_t` is `in x out`.
pub(crate) fn fully_connected(n_out: usize, x: &[f32], w_t: &[f32], bias: Option<&[f32]>, first: usize, out: &mut [f32]) {
    out.fill(0.0);
    let cols = first..first + out.len();
    for (&a, wrow) in x.iter().zip(w_t.chunks_exact(n_out)) {
        for (o, &wv) in out.iter_mut().zip(&wrow[cols.clone()]) {
            *o += a * wv;
        }
    }
    add_bias(out, bias.map(|b| &b[cols]));
}

pub(crate) fn relu6(x: &[f32], out: &mut [f32]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v.clamp(0.0, 6.0);
    }
}

pub(crate) fn add(a: &[f32], b: &[f32], out: &mut [f32]) {
    for ((o, &u), &v) in out.iter_mut().zip(a).zip(b) {
        *o = u + v;
    }
}

/// Mean over pixels for channels `[first, first + out.len())`.
pub(crate) fn global_avg_pool(c: usize, pixels: usize, x: &[f32], first: usize, out: &mut [f32]) {
    out.fill(0.0);
    for px in x.chunks_exact(c) {
        for (o, &v) in out.iter_mut().zip(&px[first..]) {
            *o += v;
        }
    }
    let n = pixels as f32;
    out.iter_mut().for_each(|o| *o /= n);
}

pub(crate) fn softmax_row(x: &[f32], out: &mut [f32]) {
    out.copy_from_slice(x);
    softmax_in_place(out);
}

/// Numerically stable softmax over one row.
pub(crate) fn softmax_in_place(v: &mut [f32]) {
    let max = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for o in v.iter_mut() {
        *o = (*o - max).exp();
        sum += *o;
    }
    v.iter_mut().for_each(|o| *o /= sum);
}

#[inline]
fn add_bias(px: &mut [f32], bias: Option<&[f32]>) {
    if let Some(b) = bias {
        for (o, &bv) in px.iter_mut().zip(b) {
            *o += bv;
        }
    }
}

/// Input coordinate for output `o` and kernel tap `k`, if inside the image.
#[inline(always)]
pub(crate) fn tap(o: usize, k: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
    (o * stride + k).checked_sub(pad).filter(|&i| i < extent)
}
