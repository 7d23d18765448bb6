//! int8 kernels: inputs are offset by their zero point, products are
//! accumulated in i32 on top of the i32 bias, and each output channel is
//! requantized with the real multiplier `in_scale * w_scale / out_scale`.
//!
//! With `|x - zp| <= 255` and `|w| <= 127`, each product fits in i16.

use crate::graph::ConvGeometry;
use crate::runtime::float::tap;
use crate::tensor::{quantize, QuantParams};

const TILE: usize = 4;

/// Output-side requantization for one layer.
pub(crate) struct Requant {
    pub bias: Vec<i32>,
    pub multiplier: Vec<f32>,
    pub out_zero_point: i32,
}

impl Requant {
    /// `round_half_away(a * m) + zp` clamped to i8, in a form that
    /// vectorizes.
    #[inline(always)]
    fn apply(&self, acc: &[i32], mult: &[f32], out: &mut [i8]) {
        let zp = self.out_zero_point;
        for ((o, &a), &m) in out.iter_mut().zip(acc).zip(mult) {
            let v = (a as f32 * m) as f64;
            // Anything beyond +-512 saturates either way.
            let r = (v + 0.5f64.copysign(v)).clamp(-512.0, 512.0);
            // SAFETY: `r` is finite and within i32 range (multipliers are
            // checked to be finite when the layer is built).
            let q = unsafe { r.to_int_unchecked::<i32>() };
            *o = q.wrapping_add(zp).clamp(-128, 127) as i8;
        }
    }
}

dispatch_avx2!(
    /// General convolution over output pixels `[first, first + out.len() / cout)`.
    conv => conv_body(geo: &ConvGeometry, x: &[i8], in_zp: i32, w_hwio: &[i16], rq: &Requant, first: usize, out: &mut [i8], acc: &mut Vec<i32>)
);

dispatch_avx2!(
    /// Depthwise convolution (channel multiplier 1); `w` is `kh x kw x c`.
    depthwise => depthwise_body(geo: &ConvGeometry, x: &[i8], in_zp: i32, w: &[i16], rq: &Requant, first: usize, out: &mut [i8], acc: &mut Vec<i32>)
);


#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn conv_body(
    geo: &ConvGeometry,
    x: &[i8],
    in_zp: i32,
    w_hwio: &[i16],
    rq: &Requant,
    first: usize,
    out: &mut [i8],
    acc: &mut Vec<i32>,
) {
    let (cin, cout) = (geo.in_c, geo.out_c);
    let zp = in_zp as i16;
    acc.resize(cout, 0);
    for (k, px) in out.chunks_exact_mut(cout).enumerate() {
        let p = first + k;
        let (oy, ox) = (p / geo.out_w, p % geo.out_w);
        acc.copy_from_slice(&rq.bias);
        for ky in 0..geo.kernel_h {
            let Some(iy) = tap(oy, ky, geo.stride, geo.pad_top, geo.in_h) else { continue };
            for kx in 0..geo.kernel_w {
                let Some(ix) = tap(ox, kx, geo.stride, geo.pad_left, geo.in_w) else { continue };
                let xin = &x[(iy * geo.in_w + ix) * cin..][..cin];
                let wk = &w_hwio[(ky * geo.kernel_w + kx) * cin * cout..][..cin * cout];
                for (&v, wrow) in xin.iter().zip(wk.chunks_exact(cout)) {
                    let a = (v as i16).wrapping_sub(zp);
                    mac_row(acc, a, wrow);
                }
            }
        }
        rq.apply(acc, &rq.multiplier, px);
    }
}

/// Output channels per block of packed pointwise weights.
const BLOCK: usize = 16;

/// Pointwise weights packed for pair-wise multiply-add: for each block of
/// 16 output channels and each pair of input channels, 16 interleaved
/// `(w[2p][o], w[2p + 1][o])` pairs. Missing channels are zero.
pub(crate) struct PackedPointwise {
    pub cin: usize,
    pub cout: usize,
    pairs: usize,
    data: Vec<i16>,
}

impl PackedPointwise {
    /// Packs `cin x cout` weights.
    pub fn new(cin: usize, cout: usize, w: &[i16]) -> Self {
        let pairs = cin.div_ceil(2);
        let blocks = cout.div_ceil(BLOCK);
        let mut data = vec![0i16; blocks * pairs * BLOCK * 2];
        for ci in 0..cin {
            for co in 0..cout {
                let (b, l) = (co / BLOCK, co % BLOCK);
                data[((b * pairs + ci / 2) * BLOCK + l) * 2 + ci % 2] = w[ci * cout + co];
            }
        }
        PackedPointwise { cin, cout, pairs, data }
    }

    fn block(&self, b: usize) -> &[i16] {
        &self.data[b * self.pairs * BLOCK * 2..][..self.pairs * BLOCK * 2]
    }
}

/// 1x1 stride-1 convolution over output pixels `[first, first + out.len() / cout)`.
pub(crate) fn pointwise(
    w: &PackedPointwise,
    x: &[i8],
    in_zp: i32,
    rq: &Requant,
    first: usize,
    out: &mut [i8],
    scratch: &mut Vec<i32>,
) {
    let (cin, cout, pairs) = (w.cin, w.cout, w.pairs);
    let zp = in_zp as i16;
    scratch.resize(TILE * pairs, 0);
    let mut sums = [[0i32; BLOCK]; TILE];
    let mut p = first;
    for tile in out.chunks_mut(TILE * cout) {
        let n = tile.len() / cout;
        // Zero-point-offset inputs, two channels per i32 (low half first).
        for (t, row) in scratch.chunks_exact_mut(pairs).enumerate() {
            let xs = if t < n { &x[(p + t) * cin..][..cin] } else { &[][..] };
            for (k, slot) in row.iter_mut().enumerate() {
                let a = |c: usize| xs.get(c).map_or(0, |&v| (v as i16).wrapping_sub(zp)) as u16 as u32;
                *slot = (a(2 * k) | (a(2 * k + 1) << 16)) as i32;
            }
        }
        for b in 0..cout.div_ceil(BLOCK) {
            block_sums(w.block(b), scratch, pairs, &mut sums);
            let lanes = BLOCK.min(cout - b * BLOCK);
            let cols = b * BLOCK..b * BLOCK + lanes;
            for (t, px) in tile.chunks_exact_mut(cout).enumerate() {
                let mut acc = [0i32; BLOCK];
                for ((a, &s), &bias) in acc.iter_mut().zip(&sums[t]).zip(&rq.bias[cols.clone()]) {
                    *a = s.wrapping_add(bias);
                }
                rq.apply(&acc[..lanes], &rq.multiplier[cols.clone()], &mut px[cols.clone()]);
            }
        }
        p += n;
    }
}

/// `sums[t][l] = sum_k lo(x[t][k]) * w[k][l][0] + hi(x[t][k]) * w[k][l][1]`.
fn block_sums(w: &[i16], xpairs: &[i32], pairs: usize, sums: &mut [[i32; BLOCK]; TILE]) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: AVX2 support was just checked.
        unsafe { avx2::block_sums(w, xpairs, pairs, sums) };
        return;
    }
    block_sums_scalar(w, xpairs, pairs, sums);
}

fn block_sums_scalar(w: &[i16], xpairs: &[i32], pairs: usize, sums: &mut [[i32; BLOCK]; TILE]) {
    for (t, s) in sums.iter_mut().enumerate() {
        s.fill(0);
        for (k, wk) in w.chunks_exact(2 * BLOCK).enumerate() {
            let xp = xpairs[t * pairs + k];
            let (lo, hi) = (xp as i16 as i32, (xp >> 16) as i16 as i32);
            for (acc, wl) in s.iter_mut().zip(wk.chunks_exact(2)) {
                *acc = acc.wrapping_add(lo.wrapping_mul(wl[0] as i32).wrapping_add(hi.wrapping_mul(wl[1] as i32)));
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
mod avx2 {
    use std::arch::x86_64::*;

    use super::{BLOCK, TILE};

    #[target_feature(enable = "avx2")]
    pub(super) unsafe fn block_sums(w: &[i16], xpairs: &[i32], pairs: usize, sums: &mut [[i32; BLOCK]; TILE]) {
        debug_assert!(w.len() == pairs * 2 * BLOCK && xpairs.len() >= TILE * pairs);
        let mut acc = [[_mm256_setzero_si256(); 2]; TILE];
        let wp = w.as_ptr();
        let xp = xpairs.as_ptr();
        for k in 0..pairs {
            let w0 = _mm256_loadu_si256(wp.add(k * 2 * BLOCK) as *const __m256i);
            let w1 = _mm256_loadu_si256(wp.add(k * 2 * BLOCK + BLOCK) as *const __m256i);
            for (t, a) in acc.iter_mut().enumerate() {
                let xb = _mm256_set1_epi32(*xp.add(t * pairs + k));
                a[0] = _mm256_add_epi32(a[0], _mm256_madd_epi16(w0, xb));
                a[1] = _mm256_add_epi32(a[1], _mm256_madd_epi16(w1, xb));
            }
        }
        for (s, a) in sums.iter_mut().zip(&acc) {
            _mm256_storeu_si256(s.as_mut_ptr() as *mut __m256i, a[0]);
            _mm256_storeu_si256(s.as_mut_ptr().add(8) as *mut __m256i, a[1]);
        }
    }
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn depthwise_body(
    geo: &ConvGeometry,
    x: &[i8],
    in_zp: i32,
    w: &[i16],
    rq: &Requant,
    first: usize,
    out: &mut [i8],
    acc: &mut Vec<i32>,
) {
    let c = geo.out_c;
    let zp = in_zp;
    acc.resize(c, 0);
    for (k, px) in out.chunks_exact_mut(c).enumerate() {
        let p = first + k;
        let (oy, ox) = (p / geo.out_w, p % geo.out_w);
        acc.copy_from_slice(&rq.bias);
        for ky in 0..geo.kernel_h {
            let Some(iy) = tap(oy, ky, geo.stride, geo.pad_top, geo.in_h) else { continue };
            for kx in 0..geo.kernel_w {
                let Some(ix) = tap(ox, kx, geo.stride, geo.pad_left, geo.in_w) else { continue };
                let xin = &x[(iy * geo.in_w + ix) * c..][..c];
                let wk = &w[(ky * geo.kernel_w + kx) * c..][..c];
                for ((s, &v), &wv) in acc.iter_mut().zip(xin).zip(wk) {
                    *s = s.wrapping_add((v as i32).wrapping_sub(zp).wrapping_mul(wv as i32));
                }
            }
        }
        rq.apply(acc, &rq.multiplier, px);
    }
}

/// Outputs `[first, first + out.len())` of a fully connected layer;
/// `w_t` is `in x out`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn fully_connected(
    n_out: usize,
    x: &[i8],
    in_zp: i32,
    w_t: &[i16],
    rq: &Requant,
    first: usize,
    out: &mut [i8],
    acc: &mut Vec<i32>,
) {
    let cols = first..first + out.len();
    let zp = in_zp as i16;
    acc.clear();
    acc.extend_from_slice(&rq.bias[cols.clone()]);
    for (&v, wrow) in x.iter().zip(w_t.chunks_exact(n_out)) {
        mac_row(acc, (v as i16).wrapping_sub(zp), &wrow[cols.clone()]);
    }
    rq.apply(acc, &rq.multiplier[cols], out);
}

#[inline(always)]
fn mac_row(acc: &mut [i32], a: i16, wrow: &[i16]) {
    for (s, &wv) in acc.iter_mut().zip(wrow) {
        *s = s.wrapping_add(a.wrapping_mul(wv) as i32);
    }
}

pub(crate) fn relu6_table(input: QuantParams, output: QuantParams) -> [i8; 256] {
    let mut lut = [0i8; 256];
    for (i, slot) in lut.iter_mut().enumerate() {
        let q = i as i32 - 128;
        let real = input.scale * (q - input.zero_point) as f32;
        *slot = quantize(real.clamp(0.0, 6.0), output);
    }
    lut
}

pub(crate) fn lookup(lut: &[i8; 256], x: &[i8], out: &mut [i8]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o = lut[(v as u8 ^ 0x80) as usize];
    }
}

pub(crate) fn add(a: &[i8], qa: QuantParams, b: &[i8], qb: QuantParams, qo: QuantParams, out: &mut [i8]) {
    for ((o, &u), &v) in out.iter_mut().zip(a).zip(b) {
        let real = qa.scale * (u as i32).wrapping_sub(qa.zero_point) as f32
            + qb.scale * (v as i32).wrapping_sub(qb.zero_point) as f32;
        *o = quantize(real, qo);
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn global_avg_pool(
    c: usize,
    pixels: usize,
    x: &[i8],
    qi: QuantParams,
    qo: QuantParams,
    first: usize,
    out: &mut [i8],
    acc: &mut Vec<i32>,
) {
    acc.clear();
    acc.resize(out.len(), 0);
    for px in x.chunks_exact(c) {
        for (s, &v) in acc.iter_mut().zip(&px[first..]) {
            *s = s.wrapping_add((v as i32).wrapping_sub(qi.zero_point));
        }
    }
    let n = pixels as f32;
    for (o, &s) in out.iter_mut().zip(acc.iter()) {
        *o = quantize(qi.scale * s as f32 / n, qo);
    }
}

pub(crate) fn quantize_into(x: &[f32], q: QuantParams, out: &mut [i8]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o = quantize(v, q);
    }
}
