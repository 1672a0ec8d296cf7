//! Forward and backward compute kernels on raw row-major buffers.
//!
//! Shapes are validated by the tape before a kernel runs. Work is split so
//! that every output element has one fixed summation order, which keeps
//! results reproducible bit for bit regardless of thread count.

use std::borrow::Cow;

use super::Real;
use crate::parallel;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    /// Out-of-range taps read zero.
    Zeros,
    /// Out-of-range taps read the nearest edge element.
    Replicate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    Avg,
    Max,
}

/// `(extent + 2·padding − k) / stride + 1`, or `None` when the kernel does not fit.
pub fn conv_out_extent(extent: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = extent + 2 * padding;
    (padded >= k && stride > 0).then(|| (padded - k) / stride + 1)
}

/// Materialize a padded copy of `x: [planes, h, w]`.
fn pad_planes<T: Real>(x: &[T], planes: usize, h: usize, w: usize, pad: usize, mode: PadMode) -> Vec<T> {
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut out = vec![T::zero(); planes * hp * wp];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * hp * wp..(p + 1) * hp * wp];
        match mode {
            PadMode::Zeros => {
                for y in 0..h {
                    dst[(y + pad) * wp + pad..(y + pad) * wp + pad + w].copy_from_slice(&src[y * w..(y + 1) * w]);
                }
            }
            PadMode::Replicate => {
                for yp in 0..hp {
                    let y = yp.saturating_sub(pad).min(h - 1);
                    for xp in 0..wp {
                        let xx = xp.saturating_sub(pad).min(w - 1);
                        dst[yp * wp + xp] = src[y * w + xx];
                    }
                }
            }
        }
    }
    out
}

/// Fold a padded gradient back onto the unpadded planes (adjoint of [`pad_planes`]).
fn unpad_planes<T: Real>(g: &[T], planes: usize, h: usize, w: usize, pad: usize, mode: PadMode) -> Vec<T> {
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut out = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &g[p * hp * wp..(p + 1) * hp * wp];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        match mode {
            PadMode::Zeros => {
                for y in 0..h {
                    dst[y * w..(y + 1) * w].copy_from_slice(&src[(y + pad) * wp + pad..(y + pad) * wp + pad + w]);
                }
            }
            PadMode::Replicate => {
                for yp in 0..hp {
                    let y = yp.saturating_sub(pad).min(h - 1);
                    for xp in 0..wp {
                        let xx = xp.saturating_sub(pad).min(w - 1);
                        dst[y * w + xx] += src[yp * wp + xp];
                    }
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub mode: PadMode,
}

impl Conv2dGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            conv_out_extent(self.h, self.k, self.stride, self.padding).expect("validated"),
            conv_out_extent(self.w, self.k, self.stride, self.padding).expect("validated"),
        )
    }

    fn padded_hw(&self) -> (usize, usize) {
        (self.h + 2 * self.padding, self.w + 2 * self.padding)
    }
}

fn padded_input<'a, T: Real>(x: &'a [T], g: &Conv2dGeom) -> Cow<'a, [T]> {
    if g.padding == 0 {
        Cow::Borrowed(x)
    } else {
        Cow::Owned(pad_planes(x, g.n * g.cin, g.h, g.w, g.padding, g.mode))
    }
}

/// Accumulate the correlation of one padded input plane with one `k × k`
/// kernel into an output plane.
fn correlate_plane<T: Real>(out: &mut [T], xplane: &[T], wk: &[T], k: usize, s: usize, (oh, ow): (usize, usize), wp: usize) {
    if k == 1 && s == 1 && wp == ow {
        let w0 = wk[0];
        for (o, &a) in out.iter_mut().zip(&xplane[..oh * ow]) {
            *o += w0 * a;
        }
        return;
    }
    for oy in 0..oh {
        let orow = &mut out[oy * ow..(oy + 1) * ow];
        for ky in 0..k {
            let wr = &wk[ky * k..(ky + 1) * k];
            let row = &xplane[(oy * s + ky) * wp..];
            if s == 1 && k == 3 {
                let (w0, w1, w2) = (wr[0], wr[1], wr[2]);
                for (((o, &a), &b), &c) in orow.iter_mut().zip(&row[..ow]).zip(&row[1..ow + 1]).zip(&row[2..ow + 2]) {
                    *o += w0 * a + w1 * b + w2 * c;
                }
            } else if s == 1 {
                for (kx, &wv) in wr.iter().enumerate() {
                    for (o, &a) in orow.iter_mut().zip(&row[kx..kx + ow]) {
                        *o += wv * a;
                    }
                }
            } else {
                for (kx, &wv) in wr.iter().enumerate() {
                    for (ox, o) in orow.iter_mut().enumerate() {
                        *o += wv * row[ox * s + kx];
                    }
                }
            }
        }
    }
}

/// Cross-correlation. Each output element sums over `ci`, then kernel rows,
/// then kernel columns, and finally adds the bias.
pub fn conv2d_forward<T: Real>(x: &[T], weight: &[T], bias: Option<&[T]>, g: &Conv2dGeom) -> Vec<T> {
    let (oh, ow) = g.out_hw();
    let (hp, wp) = g.padded_hw();
    let xp = padded_input(x, g);
    let (cin, cout, k) = (g.cin, g.cout, g.k);
    let mut out = vec![T::zero(); g.n * cout * oh * ow];
    parallel::for_each_chunk(&mut out, oh * ow, |idx, plane| {
        let (ni, co) = (idx / cout, idx % cout);
        for ci in 0..cin {
            let xplane = &xp[(ni * cin + ci) * hp * wp..(ni * cin + ci + 1) * hp * wp];
            let wk = &weight[(co * cin + ci) * k * k..(co * cin + ci + 1) * k * k];
            correlate_plane(plane, xplane, wk, k, g.stride, (oh, ow), wp);
        }
        if let Some(b) = bias {
            let bv = b[co];
            plane.iter_mut().for_each(|o| *o += bv);
        }
    });
    out
}

const LANES: usize = 8;

/// Accumulate `a · b` into independent lanes so the loop vectorizes with a
/// fixed summation order.
#[inline]
fn dot_lanes<T: Real>(lanes: &mut [T; LANES], a: &[T], b: &[T]) {
    let (ac, bc) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let (ar, br) = (ac.remainder(), bc.remainder());
    for (x, y) in ac.zip(bc) {
        for l in 0..LANES {
            lanes[l] += x[l] * y[l];
        }
    }
    for (l, (&x, &y)) in ar.iter().zip(br).enumerate() {
        lanes[l] += x * y;
    }
}

pub struct Conv2dGrads<T> {
    pub input: Vec<T>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

/// Gradient with respect to the padded input. For stride 1 this is the full
/// correlation of the output gradient with the flipped, transposed kernel.
fn conv2d_input_grad<T: Real>(weight: &[T], gout: &[T], g: &Conv2dGeom) -> Vec<T> {
    let (oh, ow) = g.out_hw();
    let (hp, wp) = g.padded_hw();
    let (n, cin, cout, k, s) = (g.n, g.cin, g.cout, g.k, g.stride);
    if s == 1 {
        let flipped: Vec<T> = (0..cin * cout * k * k)
            .map(|i| {
                let (ci, co, ky, kx) = (i / (cout * k * k), i / (k * k) % cout, i / k % k, i % k);
                weight[((co * cin + ci) * k + (k - 1 - ky)) * k + (k - 1 - kx)]
            })
            .collect();
        let geom = Conv2dGeom {
            n,
            cin: cout,
            h: oh,
            w: ow,
            cout: cin,
            k,
            stride: 1,
            padding: k - 1,
            mode: PadMode::Zeros,
        };
        return conv2d_forward(gout, &flipped, None, &geom);
    }
    let mut gxp = vec![T::zero(); n * cin * hp * wp];
    parallel::for_each_chunk(&mut gxp, hp * wp, |idx, plane| {
        let (ni, ci) = (idx / cin, idx % cin);
        for co in 0..cout {
            let gplane = &gout[(ni * cout + co) * oh * ow..(ni * cout + co + 1) * oh * ow];
            let wbase = (co * cin + ci) * k * k;
            for ky in 0..k {
                for kx in 0..k {
                    let wv = weight[wbase + ky * k + kx];
                    for oy in 0..oh {
                        let grow = &gplane[oy * ow..(oy + 1) * ow];
                        let prow = &mut plane[(oy * s + ky) * wp + kx..];
                        for (ox, &gv) in grow.iter().enumerate() {
                            prow[ox * s] += wv * gv;
                        }
                    }
                }
            }
        }
    });
    gxp
}

pub fn conv2d_backward<T: Real>(x: &[T], weight: &[T], gout: &[T], g: &Conv2dGeom, need_input: bool) -> Conv2dGrads<T> {
    let (oh, ow) = g.out_hw();
    let (hp, wp) = g.padded_hw();
    let xp = padded_input(x, g);
    let (n, cin, cout, k, s) = (g.n, g.cin, g.cout, g.k, g.stride);

    let input = if need_input {
        let gxp = conv2d_input_grad(weight, gout, g);
        if g.padding == 0 {
            gxp
        } else {
            unpad_planes(&gxp, n * cin, g.h, g.w, g.padding, g.mode)
        }
    } else {
        Vec::new()
    };

    let mut gw = vec![T::zero(); cout * cin * k * k];
    parallel::for_each_chunk(&mut gw, cin * k * k, |co, wslice| {
        for ci in 0..cin {
            for ky in 0..k {
                for kx in 0..k {
                    let mut lanes = [T::zero(); LANES];
                    for ni in 0..n {
                        let gplane = &gout[(ni * cout + co) * oh * ow..(ni * cout + co + 1) * oh * ow];
                        let xplane = &xp[(ni * cin + ci) * hp * wp..];
                        for oy in 0..oh {
                            let row = &xplane[(oy * s + ky) * wp + kx..];
                            let grow = &gplane[oy * ow..(oy + 1) * ow];
                            if s == 1 {
                                dot_lanes(&mut lanes, grow, &row[..ow]);
                            } else {
                                for (ox, &gv) in grow.iter().enumerate() {
                                    lanes[ox % LANES] += gv * row[ox * s];
                                }
                            }
                        }
                    }
                    wslice[(ci * k + ky) * k + kx] = lanes.iter().copied().sum();
                }
            }
        }
    });

    let mut gb = vec![T::zero(); cout];
    for (co, b) in gb.iter_mut().enumerate() {
        for ni in 0..n {
            for &gv in &gout[(ni * cout + co) * oh * ow..(ni * cout + co + 1) * oh * ow] {
                *b += gv;
            }
        }
    }

    Conv2dGrads {
        input,
        weight: gw,
        bias: gb,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv1dGeom {
    pub n: usize,
    pub cin: usize,
    pub len: usize,
    pub cout: usize,
    pub k: usize,
    pub padding: usize,
}

impl Conv1dGeom {
    pub fn out_len(&self) -> usize {
        self.len + 2 * self.padding + 1 - self.k
    }
}

/// 1-D cross-correlation with zero padding; sums over `(ci, j)` then adds bias.
pub fn conv1d_forward<T: Real>(x: &[T], weight: &[T], bias: Option<&[T]>, g: &Conv1dGeom) -> Vec<T> {
    let lo = g.out_len();
    let mut out = vec![T::zero(); g.n * g.cout * lo];
    for ni in 0..g.n {
        for co in 0..g.cout {
            for o in 0..lo {
                let mut acc = T::zero();
                for ci in 0..g.cin {
                    for j in 0..g.k {
                        let pos = o + j;
                        if pos < g.padding || pos - g.padding >= g.len {
                            continue;
                        }
                        acc += weight[(co * g.cin + ci) * g.k + j] * x[(ni * g.cin + ci) * g.len + pos - g.padding];
                    }
                }
                if let Some(b) = bias {
                    acc += b[co];
                }
                out[(ni * g.cout + co) * lo + o] = acc;
            }
        }
    }
    out
}

pub fn conv1d_backward<T: Real>(x: &[T], weight: &[T], gout: &[T], g: &Conv1dGeom) -> (Vec<T>, Vec<T>, Vec<T>) {
    let lo = g.out_len();
    let mut gx = vec![T::zero(); x.len()];
    let mut gw = vec![T::zero(); weight.len()];
    let mut gb = vec![T::zero(); g.cout];
    for ni in 0..g.n {
        for co in 0..g.cout {
            for o in 0..lo {
                let gv = gout[(ni * g.cout + co) * lo + o];
                gb[co] += gv;
                for ci in 0..g.cin {
                    for j in 0..g.k {
                        let pos = o + j;
                        if pos < g.padding || pos - g.padding >= g.len {
                            continue;
                        }
                        let xi = (ni * g.cin + ci) * g.len + pos - g.padding;
                        let wi = (co * g.cin + ci) * g.k + j;
                        gx[xi] += weight[wi] * gv;
                        gw[wi] += x[xi] * gv;
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

/// Global pooling over the spatial extent of `[n, c, hw]` → `[n, c]`.
/// Max mode also returns the flat spatial argmax (first occurrence).
pub fn global_pool_spatial<T: Real>(x: &[T], nc: usize, hw: usize, mode: PoolMode) -> (Vec<T>, Vec<u32>) {
    let mut out = Vec::with_capacity(nc);
    let mut arg = Vec::new();
    let scale = T::one() / T::lit(hw as f64);
    for p in 0..nc {
        let plane = &x[p * hw..(p + 1) * hw];
        match mode {
            PoolMode::Avg => out.push(plane.iter().fold(T::zero(), |a, &v| a + v) * scale),
            PoolMode::Max => {
                let (i, v) = argmax(plane);
                out.push(v);
                arg.push(i as u32);
            }
        }
    }
    (out, arg)
}

fn argmax<T: Real>(v: &[T]) -> (usize, T) {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    (best, v[best])
}

/// Pooling across channels of `[n, c, hw]` → `[n, 1, hw]`.
pub fn channel_pool<T: Real>(x: &[T], n: usize, c: usize, hw: usize, mode: PoolMode) -> (Vec<T>, Vec<u32>) {
    let mut out = vec![T::zero(); n * hw];
    let mut arg = if mode == PoolMode::Max { vec![0u32; n * hw] } else { Vec::new() };
    let scale = T::one() / T::lit(c as f64);
    for ni in 0..n {
        for i in 0..hw {
            let at = |ch: usize| x[(ni * c + ch) * hw + i];
            match mode {
                PoolMode::Avg => {
                    let mut acc = T::zero();
                    for ch in 0..c {
                        acc += at(ch);
                    }
                    out[ni * hw + i] = acc * scale;
                }
                PoolMode::Max => {
                    let mut best = 0;
                    for ch in 1..c {
                        if at(ch) > at(best) {
                            best = ch;
                        }
                    }
                    out[ni * hw + i] = at(best);
                    arg[ni * hw + i] = best as u32;
                }
            }
        }
    }
    (out, arg)
}

/// 2x2 window, stride 2 pooling of `[planes, h, w]`; max mode records the
/// flat input index of the first maximum in row-major window order.
pub fn pool2x2<T: Real>(x: &[T], planes: usize, h: usize, w: usize, mode: PoolMode) -> (Vec<T>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![T::zero(); planes * oh * ow];
    let mut arg = if mode == PoolMode::Max { vec![0u32; out.len()] } else { Vec::new() };
    let quarter = T::lit(0.25);
    for p in 0..planes {
        for oy in 0..oh {
            for ox in 0..ow {
                let base = p * h * w + 2 * oy * w + 2 * ox;
                let idx = [base, base + 1, base + w, base + w + 1];
                let o = (p * oh + oy) * ow + ox;
                match mode {
                    PoolMode::Avg => out[o] = (x[idx[0]] + x[idx[1]] + x[idx[2]] + x[idx[3]]) * quarter,
                    PoolMode::Max => {
                        let mut best = idx[0];
                        for &i in &idx[1..] {
                            if x[i] > x[best] {
                                best = i;
                            }
                        }
                        out[o] = x[best];
                        arg[o] = best as u32;
                    }
                }
            }
        }
    }
    (out, arg)
}

/// Source taps and weights for one axis of ×2 bilinear upsampling with
/// half-pixel centers (align-corners false, edge-clamped).
pub fn bilinear_taps(extent: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..2 * extent)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(extent - 1);
            let i1 = (i0 + 1).min(extent - 1);
            let l1 = src - i0 as f64;
            (i0, i1, 1.0 - l1, l1)
        })
        .collect()
}

pub fn upsample2x<T: Real>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let ty = bilinear_taps(h);
    let tx = bilinear_taps(w);
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); planes * oh * ow];
    parallel::for_each_chunk(&mut out, oh * ow, |p, plane| {
        let src = &x[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            let (wy0, wy1) = (T::lit(wy0), T::lit(wy1));
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let (wx0, wx1) = (T::lit(wx0), T::lit(wx1));
                let top = wx0 * src[y0 * w + x0] + wx1 * src[y0 * w + x1];
                let bot = wx0 * src[y1 * w + x0] + wx1 * src[y1 * w + x1];
                plane[oy * ow + ox] = wy0 * top + wy1 * bot;
            }
        }
    });
    out
}

pub fn upsample2x_backward<T: Real>(gout: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let ty = bilinear_taps(h);
    let tx = bilinear_taps(w);
    let (oh, ow) = (2 * h, 2 * w);
    let mut gx = vec![T::zero(); planes * h * w];
    parallel::for_each_chunk(&mut gx, h * w, |p, plane| {
        let g = &gout[p * oh * ow..(p + 1) * oh * ow];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            let (wy0, wy1) = (T::lit(wy0), T::lit(wy1));
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let (wx0, wx1) = (T::lit(wx0), T::lit(wx1));
                let gv = g[oy * ow + ox];
                plane[y0 * w + x0] += wy0 * wx0 * gv;
                plane[y0 * w + x1] += wy0 * wx1 * gv;
                plane[y1 * w + x0] += wy1 * wx0 * gv;
                plane[y1 * w + x1] += wy1 * wx1 * gv;
            }
        }
    });
    gx
}

#[inline]
pub fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// First component of the two-way softmax `(e^a, e^b) / (e^a + e^b)`,
/// evaluated after subtracting `max(a, b)`.
#[inline]
pub fn softmax_pair_first<T: Real>(a: T, b: T) -> T {
    let m = a.max(b);
    let (ea, eb) = ((a - m).exp(), (b - m).exp());
    ea / (ea + eb)
}

/// Saved statistics of a group normalization forward pass.
#[derive(Debug, Clone)]
pub struct GroupNormStats<T> {
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

pub const GROUP_NORM_EPS: f64 = 1e-5;

/// Normalize `[n, c, hw]` over groups of `group_size` consecutive channels,
/// then apply the per-channel affine `gamma·x̂ + beta`.
pub fn group_norm<T: Real>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    n: usize,
    c: usize,
    hw: usize,
    group_size: usize,
) -> (Vec<T>, GroupNormStats<T>) {
    let groups = c / group_size;
    let m = group_size * hw;
    let inv_m = T::one() / T::lit(m as f64);
    let eps = T::lit(GROUP_NORM_EPS);
    let mut out = vec![T::zero(); x.len()];
    let mut stats = GroupNormStats {
        mean: Vec::with_capacity(n * groups),
        rstd: Vec::with_capacity(n * groups),
    };
    for ni in 0..n {
        for gi in 0..groups {
            let start = (ni * c + gi * group_size) * hw;
            let seg = &x[start..start + m];
            let mean = seg.iter().fold(T::zero(), |a, &v| a + v) * inv_m;
            let var = seg.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) * inv_m;
            let rstd = T::one() / (var + eps).sqrt();
            for j in 0..group_size {
                let ch = gi * group_size + j;
                let (gm, bt) = (gamma[ch], beta[ch]);
                for i in 0..hw {
                    let idx = start + j * hw + i;
                    out[idx] = gm * ((x[idx] - mean) * rstd) + bt;
                }
            }
            stats.mean.push(mean);
            stats.rstd.push(rstd);
        }
    }
    (out, stats)
}

#[allow(clippy::too_many_arguments)]
pub fn group_norm_backward<T: Real>(
    x: &[T],
    gamma: &[T],
    gout: &[T],
    stats: &GroupNormStats<T>,
    n: usize,
    c: usize,
    hw: usize,
    group_size: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let groups = c / group_size;
    let m = T::lit((group_size * hw) as f64);
    let mut gx = vec![T::zero(); x.len()];
    let mut ggamma = vec![T::zero(); c];
    let mut gbeta = vec![T::zero(); c];
    for ni in 0..n {
        for gi in 0..groups {
            let si = ni * groups + gi;
            let (mean, rstd) = (stats.mean[si], stats.rstd[si]);
            let start = (ni * c + gi * group_size) * hw;
            let mut sum_dxhat = T::zero();
            let mut sum_dxhat_xhat = T::zero();
            for j in 0..group_size {
                let ch = gi * group_size + j;
                for i in 0..hw {
                    let idx = start + j * hw + i;
                    let xhat = (x[idx] - mean) * rstd;
                    let g = gout[idx];
                    ggamma[ch] += g * xhat;
                    gbeta[ch] += g;
                    let dxhat = g * gamma[ch];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                }
            }
            for j in 0..group_size {
                let ch = gi * group_size + j;
                for i in 0..hw {
                    let idx = start + j * hw + i;
                    let xhat = (x[idx] - mean) * rstd;
                    let dxhat = gout[idx] * gamma[ch];
                    gx[idx] = rstd / m * (m * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
                }
            }
        }
    }
    (gx, ggamma, gbeta)
}

pub const PROB_CLAMP: f64 = 1e-7;
pub const DICE_EPS: f64 = 1.0;

/// Mean binary cross-entropy plus soft dice loss over all elements.
/// Returns `(loss, bce, dice)`.
pub fn bce_dice<T: Real>(pred: &[T], target: &[T]) -> (T, T, T) {
    let lo = T::lit(PROB_CLAMP);
    let hi = T::one() - lo;
    let eps = T::lit(DICE_EPS);
    let mut bce = T::zero();
    let (mut inter, mut sum_p, mut sum_g) = (T::zero(), T::zero(), T::zero());
    for (&p, &g) in pred.iter().zip(target) {
        let pc = p.max(lo).min(hi);
        bce += -(g * pc.ln() + (T::one() - g) * (T::one() - pc).ln());
        inter += p * g;
        sum_p += p;
        sum_g += g;
    }
    let bce = bce / T::lit(pred.len() as f64);
    let two = T::lit(2.0);
    let dice = T::one() - (two * inter + eps) / (sum_p + sum_g + eps);
    (bce + dice, bce, dice)
}

pub fn bce_dice_backward<T: Real>(pred: &[T], target: &[T], gout: T) -> Vec<T> {
    let lo = T::lit(PROB_CLAMP);
    let hi = T::one() - lo;
    let eps = T::lit(DICE_EPS);
    let two = T::lit(2.0);
    let (mut inter, mut sum_p, mut sum_g) = (T::zero(), T::zero(), T::zero());
    for (&p, &g) in pred.iter().zip(target) {
        inter += p * g;
        sum_p += p;
        sum_g += g;
    }
    let denom = sum_p + sum_g + eps;
    let numer = two * inter + eps;
    let inv_m = T::one() / T::lit(pred.len() as f64);
    pred.iter()
        .zip(target)
        .map(|(&p, &g)| {
            let d_bce = if p > lo && p < hi {
                (-g / p + (T::one() - g) / (T::one() - p)) * inv_m
            } else {
                T::zero()
            };
            let d_dice = -(two * g * denom - numer) / (denom * denom);
            (d_bce + d_dice) * gout
        })
        .collect()
}
