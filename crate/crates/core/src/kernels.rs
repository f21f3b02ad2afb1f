//! Single-item convolution kernels on raw slices.
//!
//! All kernels accumulate with `mul_add` in a fixed order that does not depend
//! on the SIMD path selected at runtime, so every dispatch target produces
//! bit-identical results.

use std::sync::OnceLock;

/// Output channels processed together by the correlation kernel.
const OB: usize = 8;
/// Output channels processed together by the weight-gradient kernel.
const GB: usize = 4;
/// Lane count of the weight-gradient partial sums.
const LANES: usize = 8;
/// Image rows reduced together by the weight-gradient kernel; partial sums
/// are added into the result once per tile.
const ROW_TILE: usize = 4;

/// Weights repacked as `[oc_block][ic][ky][kx][OB]`, zero-padded to a whole
/// number of output blocks.
pub(crate) struct PackedWeights {
    data: Vec<f64>,
    oc: usize,
    ic: usize,
    ks: usize,
}

impl PackedWeights {
    /// `w` laid out as `(oc, ic, ks, ks)`.
    pub(crate) fn pack(w: &[f64], oc: usize, ic: usize, ks: usize) -> Self {
        Self::pack_with(oc, ic, ks, |o, i, ky, kx| {
            w[((o * ic + i) * ks + ky) * ks + kx]
        })
    }

    /// Packs the spatially flipped, channel-transposed kernel used to
    /// propagate gradients back to the input: the result maps `oc` channels
    /// to `ic` channels.
    pub(crate) fn pack_adjoint(w: &[f64], oc: usize, ic: usize, ks: usize) -> Self {
        Self::pack_with(ic, oc, ks, |i, o, ky, kx| {
            w[((o * ic + i) * ks + (ks - 1 - ky)) * ks + (ks - 1 - kx)]
        })
    }

    fn pack_with(
        oc: usize,
        ic: usize,
        ks: usize,
        get: impl Fn(usize, usize, usize, usize) -> f64,
    ) -> Self {
        let blocks = oc.div_ceil(OB);
        let mut data = vec![0.0; blocks * ic * ks * ks * OB];
        for o in 0..oc {
            let (b, lane) = (o / OB, o % OB);
            for i in 0..ic {
                for ky in 0..ks {
                    for kx in 0..ks {
                        data[(((b * ic + i) * ks + ky) * ks + kx) * OB + lane] = get(o, i, ky, kx);
                    }
                }
            }
        }
        Self { data, oc, ic, ks }
    }

    pub(crate) fn out_channels(&self) -> usize {
        self.oc
    }
}

type CorrelateFn = fn(&[f64], usize, usize, &PackedWeights, &mut [f64]);
type WeightGradFn = fn(&[f64], &[f64], usize, usize, usize, usize, usize, &mut [f64]);

struct Dispatch {
    correlate: CorrelateFn,
    weight_grad: WeightGradFn,
}

fn dispatch() -> &'static Dispatch {
    static D: OnceLock<Dispatch> = OnceLock::new();
    D.get_or_init(|| {
        #[cfg(target_arch = "x86_64")]
        {
            if std::is_x86_feature_detected!("avx512f") && std::is_x86_feature_detected!("fma") {
                return Dispatch {
                    correlate: x86::correlate_avx512,
                    weight_grad: x86::weight_grad_avx512,
                };
            }
            if std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma") {
                return Dispatch {
                    correlate: x86::correlate_avx2,
                    weight_grad: x86::weight_grad_avx2,
                };
            }
        }
        Dispatch {
            correlate: correlate_impl::<4>,
            weight_grad: weight_grad_impl,
        }
    })
}

/// `out[o][y][x] = Σ_{i,ky,kx} w[o][i][ky][kx] · xp[i][y+ky][x+kx]`.
///
/// `xp` is the input padded by `ks / 2` on every side, shape
/// `(ic, h + ks - 1, w + ks - 1)`; `out` has shape `(oc, h, w)` and is
/// overwritten.
pub(crate) fn correlate(xp: &[f64], h: usize, w: usize, pw: &PackedWeights, out: &mut [f64]) {
    debug_assert_eq!(xp.len(), pw.ic * (h + pw.ks - 1) * (w + pw.ks - 1));
    debug_assert_eq!(out.len(), pw.oc * h * w);
    (dispatch().correlate)(xp, h, w, pw, out)
}

/// `dw[o][i][ky][kx] += Σ_{y,x} g[o][y][x] · xp[i][y+ky][x+kx]`.
///
/// `g` has shape `(oc, h, w)`, `xp` shape `(ic, h + ks - 1, w + ks - 1)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn weight_grad(
    xp: &[f64],
    g: &[f64],
    oc: usize,
    ic: usize,
    h: usize,
    w: usize,
    ks: usize,
    dw: &mut [f64],
) {
    debug_assert_eq!(xp.len(), ic * (h + ks - 1) * (w + ks - 1));
    debug_assert_eq!(g.len(), oc * h * w);
    debug_assert_eq!(dw.len(), oc * ic * ks * ks);
    (dispatch().weight_grad)(xp, g, oc, ic, h, w, ks, dw)
}

#[cfg(target_arch = "x86_64")]
mod x86 {
    use super::*;

    use std::arch::x86_64::*;

    /// 16-pixel by 8-channel register tile; pixels past the last full tile
    /// fall back to the scalar tail of `correlate_impl`.
    #[target_feature(enable = "avx512f,avx2,fma")]
    unsafe fn correlate_avx512_inner(
        xp: &[f64],
        h: usize,
        w: usize,
        pw: &PackedWeights,
        out: &mut [f64],
    ) {
        const XB: usize = 16;
        let (oc, ic, ks) = (pw.oc, pw.ic, pw.ks);
        let hp = h + ks - 1;
        let wp = w + ks - 1;
        let block_len = ic * ks * ks * OB;
        let full = w / XB * XB;
        for (b, wblk) in pw.data.chunks_exact(block_len).enumerate() {
            let lanes = (oc - b * OB).min(OB);
            for y in 0..h {
                for x0 in (0..full).step_by(XB) {
                    let mut acc = [[_mm512_setzero_pd(); 2]; OB];
                    for i in 0..ic {
                        for ky in 0..ks {
                            let row = &xp[(i * hp + y + ky) * wp + x0..][..ks - 1 + XB];
                            let wrow = &wblk[(i * ks + ky) * ks * OB..][..ks * OB];
                            for kx in 0..ks {
                                // SAFETY: `row` holds ks - 1 + XB elements, so
                                // both 8-wide loads at kx and kx + 8 are in bounds.
                                let v0 = _mm512_loadu_pd(row.as_ptr().add(kx));
                                let v1 = _mm512_loadu_pd(row.as_ptr().add(kx + 8));
                                let wv = &wrow[kx * OB..kx * OB + OB];
                                for o in 0..OB {
                                    let wb = _mm512_set1_pd(wv[o]);
                                    acc[o][0] = _mm512_fmadd_pd(wb, v0, acc[o][0]);
                                    acc[o][1] = _mm512_fmadd_pd(wb, v1, acc[o][1]);
                                }
                            }
                        }
                    }
                    for (o, a) in acc.iter().enumerate().take(lanes) {
                        let dst = &mut out[((b * OB + o) * h + y) * w + x0..][..XB];
                        _mm512_storeu_pd(dst.as_mut_ptr(), a[0]);
                        _mm512_storeu_pd(dst.as_mut_ptr().add(8), a[1]);
                    }
                }
                correlate_tail(xp, y, full, h, w, pw, b, wblk, lanes, hp, wp, out);
            }
        }
    }

    #[target_feature(enable = "avx2,fma")]
    unsafe fn correlate_avx2_inner(
        xp: &[f64],
        h: usize,
        w: usize,
        pw: &PackedWeights,
        out: &mut [f64],
    ) {
        correlate_impl::<4>(xp, h, w, pw, out)
    }

    const GB512: usize = 8;

    #[target_feature(enable = "avx512f,avx2,fma")]
    #[allow(clippy::too_many_arguments)]
    unsafe fn weight_grad_avx512_inner(
        xp: &[f64],
        g: &[f64],
        oc: usize,
        ic: usize,
        h: usize,
        w: usize,
        ks: usize,
        dw: &mut [f64],
    ) {
        let hp = h + ks - 1;
        let wp = w + ks - 1;
        let plane = h * w;
        let blocks = oc.div_ceil(GB512);
        let mut gpad = vec![0.0; blocks * GB512 * plane];
        gpad[..g.len()].copy_from_slice(g);
        // Interleave each block as [y][chunk][channel][lane] so one x-chunk of
        // all GB512 channels is contiguous; planar reads at a power-of-two
        // stride alias in L1.
        let chunks = w / LANES;
        let mut inter = vec![0.0; GB512 * h * chunks * LANES];
        for b in 0..blocks {
            let gb = &gpad[b * GB512 * plane..(b + 1) * GB512 * plane];
            for y in 0..h {
                for c in 0..chunks {
                    for o in 0..GB512 {
                        let dst = ((y * chunks + c) * GB512 + o) * LANES;
                        inter[dst..dst + LANES]
                            .copy_from_slice(&gb[o * plane + y * w + c * LANES..][..LANES]);
                    }
                }
            }
            let gi = &inter[..];
            for y0 in (0..h).step_by(ROW_TILE) {
                let rows = y0..(y0 + ROW_TILE).min(h);
                for i in 0..ic {
                    for ky in 0..ks {
                        let mut kx = 0;
                        while kx < ks {
                            let kb = (ks - kx).min(3);
                            let mut sums = [[0.0; GB512]; 3];
                            match kb {
                                1 => wgrad_block512::<1>(
                                    xp,
                                    gb,
                                    gi,
                                    i,
                                    ky,
                                    kx,
                                    rows.clone(),
                                    w,
                                    hp,
                                    wp,
                                    &mut sums,
                                ),
                                2 => wgrad_block512::<2>(
                                    xp,
                                    gb,
                                    gi,
                                    i,
                                    ky,
                                    kx,
                                    rows.clone(),
                                    w,
                                    hp,
                                    wp,
                                    &mut sums,
                                ),
                                _ => wgrad_block512::<3>(
                                    xp,
                                    gb,
                                    gi,
                                    i,
                                    ky,
                                    kx,
                                    rows.clone(),
                                    w,
                                    hp,
                                    wp,
                                    &mut sums,
                                ),
                            }
                            for (j, s) in sums.iter().enumerate().take(kb) {
                                for (o, &v) in s.iter().enumerate() {
                                    let oo = b * GB512 + o;
                                    if oo < oc {
                                        dw[((oo * ic + i) * ks + ky) * ks + kx + j] += v;
                                    }
                                }
                            }
                            kx += kb;
                        }
                    }
                }
            }
        }
    }

    /// Vector form of `wgrad_block`: one 8-lane accumulator per (tap, channel),
    /// reduced in lane order so results match the portable path bit for bit.
    #[target_feature(enable = "avx512f,avx2,fma")]
    #[inline]
    #[allow(clippy::too_many_arguments)]
    unsafe fn wgrad_block512<const KB: usize>(
        xp: &[f64],
        gb: &[f64],
        gi: &[f64],
        i: usize,
        ky: usize,
        kx: usize,
        rows: std::ops::Range<usize>,
        w: usize,
        hp: usize,
        wp: usize,
        sums: &mut [[f64; GB512]; 3],
    ) {
        let plane = gb.len() / GB512;
        let chunks = w / LANES;
        let full = chunks * LANES;
        let mut acc = [[_mm512_setzero_pd(); GB512]; KB];
        let mut tail = [[0.0f64; GB512]; KB];
        for y in rows {
            let xrow = &xp[(i * hp + y + ky) * wp + kx..][..w + KB - 1];
            for c in 0..chunks {
                let x0 = c * LANES;
                let src = &gi[(y * chunks + c) * GB512 * LANES..][..GB512 * LANES];
                let mut gv = [_mm512_setzero_pd(); GB512];
                for (o, v) in gv.iter_mut().enumerate() {
                    *v = _mm512_loadu_pd(src.as_ptr().add(o * LANES));
                }
                for j in 0..KB {
                    let src = &xrow[x0 + j..x0 + j + LANES];
                    let xv = _mm512_loadu_pd(src.as_ptr());
                    for o in 0..GB512 {
                        acc[j][o] = _mm512_fmadd_pd(gv[o], xv, acc[j][o]);
                    }
                }
            }
            for x in full..w {
                for j in 0..KB {
                    for o in 0..GB512 {
                        tail[j][o] = gb[o * plane + y * w + x].mul_add(xrow[x + j], tail[j][o]);
                    }
                }
            }
        }
        for j in 0..KB {
            for o in 0..GB512 {
                let mut lanes = [0.0f64; LANES];
                _mm512_storeu_pd(lanes.as_mut_ptr(), acc[j][o]);
                let mut s = 0.0;
                for l in lanes {
                    s += l;
                }
                sums[j][o] = s + tail[j][o];
            }
        }
    }

    #[target_feature(enable = "avx2,fma")]
    #[allow(clippy::too_many_arguments)]
    unsafe fn weight_grad_avx2_inner(
        xp: &[f64],
        g: &[f64],
        oc: usize,
        ic: usize,
        h: usize,
        w: usize,
        ks: usize,
        dw: &mut [f64],
    ) {
        weight_grad_impl(xp, g, oc, ic, h, w, ks, dw)
    }

    // SAFETY (all four wrappers): only installed by `dispatch` after the
    // corresponding CPU features were detected at runtime.
    pub(super) fn correlate_avx512(
        xp: &[f64],
        h: usize,
        w: usize,
        pw: &PackedWeights,
        out: &mut [f64],
    ) {
        unsafe { correlate_avx512_inner(xp, h, w, pw, out) }
    }

    pub(super) fn correlate_avx2(
        xp: &[f64],
        h: usize,
        w: usize,
        pw: &PackedWeights,
        out: &mut [f64],
    ) {
        unsafe { correlate_avx2_inner(xp, h, w, pw, out) }
    }

    #[allow(clippy::too_many_arguments)]
    pub(super) fn weight_grad_avx512(
        xp: &[f64],
        g: &[f64],
        oc: usize,
        ic: usize,
        h: usize,
        w: usize,
        ks: usize,
        dw: &mut [f64],
    ) {
        unsafe { weight_grad_avx512_inner(xp, g, oc, ic, h, w, ks, dw) }
    }

    #[allow(clippy::too_many_arguments)]
    pub(super) fn weight_grad_avx2(
        xp: &[f64],
        g: &[f64],
        oc: usize,
        ic: usize,
        h: usize,
        w: usize,
        ks: usize,
        dw: &mut [f64],
    ) {
        unsafe { weight_grad_avx2_inner(xp, g, oc, ic, h, w, ks, dw) }
    }
}

#[inline(always)]
fn correlate_impl<const XB: usize>(
    xp: &[f64],
    h: usize,
    w: usize,
    pw: &PackedWeights,
    out: &mut [f64],
) {
    let (oc, ic, ks) = (pw.oc, pw.ic, pw.ks);
    let hp = h + ks - 1;
    let wp = w + ks - 1;
    let block_len = ic * ks * ks * OB;
    for (b, wblk) in pw.data.chunks_exact(block_len).enumerate() {
        let lanes = (oc - b * OB).min(OB);
        for y in 0..h {
            let mut x0 = 0;
            while x0 + XB <= w {
                let mut acc = [[0.0f64; XB]; OB];
                for i in 0..ic {
                    for ky in 0..ks {
                        let row = &xp[(i * hp + y + ky) * wp + x0..][..ks - 1 + XB];
                        let wrow = &wblk[(i * ks + ky) * ks * OB..][..ks * OB];
                        for kx in 0..ks {
                            let v: &[f64; XB] = row[kx..kx + XB].try_into().unwrap();
                            let wv: &[f64; OB] = wrow[kx * OB..kx * OB + OB].try_into().unwrap();
                            for o in 0..OB {
                                for p in 0..XB {
                                    acc[o][p] = wv[o].mul_add(v[p], acc[o][p]);
                                }
                            }
                        }
                    }
                }
                for (o, a) in acc.iter().enumerate().take(lanes) {
                    let oo = b * OB + o;
                    out[(oo * h + y) * w + x0..][..XB].copy_from_slice(a);
                }
                x0 += XB;
            }
            correlate_tail(xp, y, x0, h, w, pw, b, wblk, lanes, hp, wp, out);
        }
    }
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn correlate_tail(
    xp: &[f64],
    y: usize,
    from: usize,
    h: usize,
    w: usize,
    pw: &PackedWeights,
    b: usize,
    wblk: &[f64],
    lanes: usize,
    hp: usize,
    wp: usize,
    out: &mut [f64],
) {
    let (ic, ks) = (pw.ic, pw.ks);
    for x in from..w {
        let mut acc = [0.0f64; OB];
        for i in 0..ic {
            for ky in 0..ks {
                let row = &xp[(i * hp + y + ky) * wp + x..][..ks];
                let wrow = &wblk[(i * ks + ky) * ks * OB..][..ks * OB];
                for kx in 0..ks {
                    for o in 0..OB {
                        acc[o] = wrow[kx * OB + o].mul_add(row[kx], acc[o]);
                    }
                }
            }
        }
        for (o, &a) in acc.iter().enumerate().take(lanes) {
            out[((b * OB + o) * h + y) * w + x] = a;
        }
    }
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn weight_grad_impl(
    xp: &[f64],
    g: &[f64],
    oc: usize,
    ic: usize,
    h: usize,
    w: usize,
    ks: usize,
    dw: &mut [f64],
) {
    let hp = h + ks - 1;
    let wp = w + ks - 1;
    let plane = h * w;
    // Zero-pad the channel count so every block reads GB planes.
    let blocks = oc.div_ceil(GB);
    let mut gpad = vec![0.0; blocks * GB * plane];
    gpad[..g.len()].copy_from_slice(g);

    for b in 0..blocks {
        let gb = &gpad[b * GB * plane..(b + 1) * GB * plane];
        for y0 in (0..h).step_by(ROW_TILE) {
            let rows = y0..(y0 + ROW_TILE).min(h);
            for i in 0..ic {
                for ky in 0..ks {
                    let mut kx = 0;
                    while kx < ks {
                        let kb = (ks - kx).min(3);
                        let sums: [[f64; GB]; 3] = match kb {
                            1 => pad3(wgrad_block::<1>(
                                xp,
                                gb,
                                i,
                                ky,
                                kx,
                                rows.clone(),
                                w,
                                hp,
                                wp,
                                plane,
                            )),
                            2 => pad3(wgrad_block::<2>(
                                xp,
                                gb,
                                i,
                                ky,
                                kx,
                                rows.clone(),
                                w,
                                hp,
                                wp,
                                plane,
                            )),
                            _ => {
                                wgrad_block::<3>(xp, gb, i, ky, kx, rows.clone(), w, hp, wp, plane)
                            }
                        };
                        for (j, s) in sums.iter().enumerate().take(kb) {
                            for (o, &v) in s.iter().enumerate() {
                                let oo = b * GB + o;
                                if oo < oc {
                                    dw[((oo * ic + i) * ks + ky) * ks + kx + j] += v;
                                }
                            }
                        }
                        kx += kb;
                    }
                }
            }
        }
    }
}

#[inline(always)]
fn pad3<const KB: usize>(s: [[f64; GB]; KB]) -> [[f64; GB]; 3] {
    let mut out = [[0.0; GB]; 3];
    out[..KB].copy_from_slice(&s);
    out
}

/// Sums `g[o][y][x] · xp[i][y+ky][x+kx+j]` over `rows` for `GB` output
/// channels and `KB` consecutive horizontal taps starting at `kx`.
///
/// Each sum is accumulated in `LANES` partials over full chunks, reduced in
/// lane order, then the scalar tail is added.
#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn wgrad_block<const KB: usize>(
    xp: &[f64],
    gb: &[f64],
    i: usize,
    ky: usize,
    kx: usize,
    rows: std::ops::Range<usize>,
    w: usize,
    hp: usize,
    wp: usize,
    plane: usize,
) -> [[f64; GB]; KB] {
    let mut acc = [[[0.0f64; LANES]; GB]; KB];
    let mut tail = [[0.0f64; GB]; KB];
    for y in rows {
        let xrow = &xp[(i * hp + y + ky) * wp + kx..][..w + KB - 1];
        let mut x0 = 0;
        while x0 + LANES <= w {
            let mut gv = [[0.0f64; LANES]; GB];
            for (o, v) in gv.iter_mut().enumerate() {
                v.copy_from_slice(&gb[o * plane + y * w + x0..][..LANES]);
            }
            for j in 0..KB {
                let xv: &[f64; LANES] = xrow[x0 + j..x0 + j + LANES].try_into().unwrap();
                for o in 0..GB {
                    for l in 0..LANES {
                        acc[j][o][l] = gv[o][l].mul_add(xv[l], acc[j][o][l]);
                    }
                }
            }
            x0 += LANES;
        }
        for x in x0..w {
            for j in 0..KB {
                for o in 0..GB {
                    tail[j][o] = gb[o * plane + y * w + x].mul_add(xrow[x + j], tail[j][o]);
                }
            }
        }
    }
    let mut out = [[0.0; GB]; KB];
    for j in 0..KB {
        for o in 0..GB {
            let mut s = 0.0;
            for l in 0..LANES {
                s += acc[j][o][l];
            }
            out[j][o] = s + tail[j][o];
        }
    }
    out
}

/// Sum of `m` over every `(2k+1)²` window, with zeros outside the image.
/// Exact for 0/1 masks.
pub(crate) fn box_sum(m: &[f64], h: usize, w: usize, k: usize) -> Vec<f64> {
    let mut rows = vec![0.0; h * w];
    for y in 0..h {
        let src = &m[y * w..(y + 1) * w];
        for x in 0..w {
            let lo = x.saturating_sub(k);
            let hi = (x + k).min(w - 1);
            rows[y * w + x] = src[lo..=hi].iter().sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let lo = y.saturating_sub(k);
        let hi = (y + k).min(h - 1);
        for yy in lo..=hi {
            for x in 0..w {
                out[y * w + x] += rows[yy * w + x];
            }
        }
    }
    out
}

/// Copies a `(c, h, w)` block into a zero-initialized `(c, h+2k, w+2k)` buffer.
pub(crate) fn pad_item(src: &[f64], c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let hp = h + 2 * k;
    let wp = w + 2 * k;
    let mut out = vec![0.0; c * hp * wp];
    for ch in 0..c {
        for y in 0..h {
            let s = (ch * h + y) * w;
            let d = (ch * hp + y + k) * wp + k;
            out[d..d + w].copy_from_slice(&src[s..s + w]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn naive_correlate(
        x: &[f64],
        w: &[f64],
        oc: usize,
        ic: usize,
        h: usize,
        wd: usize,
        ks: usize,
    ) -> Vec<f64> {
        let k = ks as isize / 2;
        let mut out = vec![0.0; oc * h * wd];
        for o in 0..oc {
            for y in 0..h as isize {
                for xx in 0..wd as isize {
                    let mut s = 0.0;
                    for i in 0..ic {
                        for dy in -k..=k {
                            for dx in -k..=k {
                                let (sy, sx) = (y + dy, xx + dx);
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                    continue;
                                }
                                let wi = ((o * ic + i) * ks + (dy + k) as usize) * ks
                                    + (dx + k) as usize;
                                s += w[wi] * x[(i * h + sy as usize) * wd + sx as usize];
                            }
                        }
                    }
                    out[(o * h + y as usize) * wd + xx as usize] = s;
                }
            }
        }
        out
    }

    #[test]
    fn correlate_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(oc, ic, h, w, ks) in &[
            (3, 2, 5, 7, 3),
            (9, 1, 4, 19, 5),
            (1, 16, 3, 33, 1),
            (16, 3, 2, 16, 7),
        ] {
            let x = rand_vec(&mut rng, ic * h * w);
            let wt = rand_vec(&mut rng, oc * ic * ks * ks);
            let xp = pad_item(&x, ic, h, w, ks / 2);
            let mut out = vec![0.0; oc * h * w];
            correlate(&xp, h, w, &PackedWeights::pack(&wt, oc, ic, ks), &mut out);
            let want = naive_correlate(&x, &wt, oc, ic, h, w, ks);
            for (a, b) in out.iter().zip(&want) {
                assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn dispatch_paths_agree_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (oc, ic, h, w, ks) = (5, 3, 6, 37, 3);
        let x = rand_vec(&mut rng, ic * h * w);
        let wt = rand_vec(&mut rng, oc * ic * ks * ks);
        let g = rand_vec(&mut rng, oc * h * w);
        let xp = pad_item(&x, ic, h, w, ks / 2);
        let pw = PackedWeights::pack(&wt, oc, ic, ks);

        let mut base = vec![0.0; oc * h * w];
        correlate_impl::<4>(&xp, h, w, &pw, &mut base);
        let mut base_dw = vec![0.0; oc * ic * ks * ks];
        weight_grad_impl(&xp, &g, oc, ic, h, w, ks, &mut base_dw);

        let mut out = vec![0.0; oc * h * w];
        correlate(&xp, h, w, &pw, &mut out);
        assert_eq!(out, base);
        let mut wide = vec![0.0; oc * h * w];
        correlate_impl::<8>(&xp, h, w, &pw, &mut wide);
        assert_eq!(wide, base);
        let mut dw = vec![0.0; oc * ic * ks * ks];
        weight_grad(&xp, &g, oc, ic, h, w, ks, &mut dw);
        assert_eq!(dw, base_dw);
    }

    #[test]
    fn weight_grad_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(oc, ic, h, w, ks) in &[(3, 2, 5, 11, 3), (1, 1, 4, 8, 5), (6, 2, 3, 20, 7)] {
            let x = rand_vec(&mut rng, ic * h * w);
            let g = rand_vec(&mut rng, oc * h * w);
            let xp = pad_item(&x, ic, h, w, ks / 2);
            let mut dw = vec![0.0; oc * ic * ks * ks];
            weight_grad(&xp, &g, oc, ic, h, w, ks, &mut dw);
            let (hp, wp) = (h + ks - 1, w + ks - 1);
            for o in 0..oc {
                for i in 0..ic {
                    for ky in 0..ks {
                        for kx in 0..ks {
                            let mut s = 0.0;
                            for y in 0..h {
                                for xx in 0..w {
                                    s += g[(o * h + y) * w + xx]
                                        * xp[(i * hp + y + ky) * wp + xx + kx];
                                }
                            }
                            let a = dw[((o * ic + i) * ks + ky) * ks + kx];
                            assert!((a - s).abs() <= 1e-12 * (1.0 + s.abs()), "{a} vs {s}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn box_sum_counts_window() {
        let m = [1.0, 0.0, 0.0, 0.0, 0.0, 1.0];
        assert_eq!(box_sum(&m, 2, 3, 1), vec![1.0, 2.0, 1.0, 1.0, 2.0, 1.0]);
        assert_eq!(box_sum(&m, 2, 3, 0), m.to_vec());
    }
}
