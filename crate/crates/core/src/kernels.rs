//! Forward and backward loops for the spatial operators.
//!
//! All reductions run in a fixed nested order (batch, out-channel,
//! in-channel, kernel row, kernel column, output row, output column), so
//! results are bit-reproducible for identical inputs.

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub oh: usize,
    pub ow: usize,
}

/// `floor((size + 2·pad − k) / stride) + 1`, or `None` when the kernel does
/// not fit.
pub fn out_extent(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    if stride == 0 || padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

impl ConvGeom {
    pub fn new(
        input: [usize; 4],
        weight: [usize; 4],
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Self> {
        let [n, cin, h, w] = input;
        let [cout, cin_g, kh, kw] = weight;
        if groups == 0 || cin % groups != 0 || cout % groups != 0 {
            return Err(Error::invalid(format!(
                "conv2d: groups {groups} must divide input channels {cin} and output channels {cout}"
            )));
        }
        if cin_g != cin / groups || kh != kw {
            return Err(Error::shape("conv2d", &input, &weight));
        }
        let oh = out_extent(h, kh, stride, pad).ok_or_else(|| Error::shape("conv2d", &input, &weight))?;
        let ow = out_extent(w, kw, stride, pad).ok_or_else(|| Error::shape("conv2d", &input, &weight))?;
        Ok(Self {
            n,
            cin,
            h,
            w,
            cout,
            k: kh,
            stride,
            pad,
            groups,
            oh,
            ow,
        })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.n, self.cout, self.oh, self.ow]
    }

    /// Multiply-accumulates for one forward pass.
    pub fn macs(&self) -> u64 {
        (self.n * self.cout * self.oh * self.ow * (self.cin / self.groups) * self.k * self.k) as u64
    }

    /// Output positions `o` for which `o·stride + offset − pad` lies inside `[0, len)`.
    #[inline]
    fn valid_range(&self, offset: usize, len: usize, out: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let shift = offset as isize - self.pad as isize;
        // smallest o with o*s + shift >= 0
        let lo = if shift >= 0 { 0 } else { ((-shift) + s - 1) / s };
        // largest o with o*s + shift <= len-1
        let hi_num = len as isize - 1 - shift;
        let hi = if hi_num < 0 { -1 } else { hi_num / s };
        let hi = hi.min(out as isize - 1);
        if hi < lo {
            (0, 0)
        } else {
            (lo as usize, hi as usize + 1)
        }
    }

    /// Visits every (batch, out-channel, in-channel, kernel tap, output row)
    /// combination in the fixed reduction order.
    fn for_each_tap(&self, mut f: impl FnMut(&Tap)) {
        let cpg_in = self.cin / self.groups;
        let cpg_out = self.cout / self.groups;
        let kk = self.k * self.k;
        for b in 0..self.n {
            for oc in 0..self.cout {
                let g = oc / cpg_out;
                for ci in 0..cpg_in {
                    let ic = g * cpg_in + ci;
                    for kh in 0..self.k {
                        let (oy0, oy1) = self.valid_range(kh, self.h, self.oh);
                        for kw in 0..self.k {
                            let (ox0, ox1) = self.valid_range(kw, self.w, self.ow);
                            if ox0 >= ox1 {
                                continue;
                            }
                            let widx = (oc * cpg_in + ci) * kk + kh * self.k + kw;
                            for oy in oy0..oy1 {
                                let iy = oy * self.stride + kh - self.pad;
                                f(&Tap {
                                    widx,
                                    xrow: ((b * self.cin + ic) * self.h + iy) * self.w,
                                    orow: ((b * self.cout + oc) * self.oh + oy) * self.ow,
                                    ox0,
                                    ox1,
                                    x_first: ox0 * self.stride + kw - self.pad,
                                });
                            }
                        }
                    }
                }
            }
        }
    }
}

/// One kernel tap applied along an output row segment `[ox0, ox1)`. The
/// input column for `ox0` is `x_first`; it advances by the stride.
struct Tap {
    widx: usize,
    xrow: usize,
    orow: usize,
    ox0: usize,
    ox1: usize,
    x_first: usize,
}

pub fn conv2d_forward<T: Real>(x: &[T], wt: &[T], g: &ConvGeom) -> Vec<T> {
    let s = g.stride;
    let mut out = vec![T::zero(); g.n * g.cout * g.oh * g.ow];
    g.for_each_tap(|t| {
        let wv = wt[t.widx];
        let orow = &mut out[t.orow + t.ox0..t.orow + t.ox1];
        for (j, o) in orow.iter_mut().enumerate() {
            *o += wv * x[t.xrow + t.x_first + j * s];
        }
    });
    out
}

/// Returns `(d input, d weight)`.
pub fn conv2d_backward<T: Real>(
    x: &[T],
    wt: &[T],
    dy: &[T],
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let s = g.stride;
    let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
    let mut dw = need_dw.then(|| vec![T::zero(); wt.len()]);
    g.for_each_tap(|t| {
        let dyrow = &dy[t.orow + t.ox0..t.orow + t.ox1];
        if let Some(dx) = dx.as_mut() {
            let wv = wt[t.widx];
            for (j, &d) in dyrow.iter().enumerate() {
                dx[t.xrow + t.x_first + j * s] += wv * d;
            }
        }
        if let Some(dw) = dw.as_mut() {
            let mut acc = T::zero();
            for (j, &d) in dyrow.iter().enumerate() {
                acc += x[t.xrow + t.x_first + j * s] * d;
            }
            dw[t.widx] += acc;
        }
    });
    (dx, dw)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl PoolGeom {
    pub fn new(input: [usize; 4], k: usize, stride: usize, pad: usize) -> Result<Self> {
        let [n, c, h, w] = input;
        if k == 0 || pad >= k {
            return Err(Error::invalid(format!("pool2d: kernel {k} with padding {pad}")));
        }
        let oh = out_extent(h, k, stride, pad).ok_or_else(|| Error::shape("pool2d", &input, &[k, k]))?;
        let ow = out_extent(w, k, stride, pad).ok_or_else(|| Error::shape("pool2d", &input, &[k, k]))?;
        Ok(Self {
            n,
            c,
            h,
            w,
            k,
            stride,
            pad,
            oh,
            ow,
        })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.n, self.c, self.oh, self.ow]
    }

    /// Input window `[y0, y1) × [x0, x1)` of output cell `(oy, ox)`, clipped
    /// to the unpadded input.
    #[inline]
    fn window(&self, oy: usize, ox: usize) -> (usize, usize, usize, usize) {
        let y = (oy * self.stride) as isize - self.pad as isize;
        let x = (ox * self.stride) as isize - self.pad as isize;
        let k = self.k as isize;
        let y0 = y.max(0) as usize;
        let x0 = x.max(0) as usize;
        let y1 = (y + k).min(self.h as isize) as usize;
        let x1 = (x + k).min(self.w as isize) as usize;
        (y0, y1, x0, x1)
    }
}

/// Pooling forward. For max pooling the second vector holds the flat input
/// index chosen for each output (first maximum in row-major order). Average
/// pooling divides by the number of in-bounds cells.
pub fn pool2d_forward<T: Real>(x: &[T], g: &PoolGeom, kind: PoolKind) -> (Vec<T>, Vec<usize>) {
    let mut out = Vec::with_capacity(g.n * g.c * g.oh * g.ow);
    let mut arg = Vec::new();
    for plane in 0..g.n * g.c {
        let base = plane * g.h * g.w;
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let (y0, y1, x0, x1) = g.window(oy, ox);
                match kind {
                    PoolKind::Max => {
                        let mut best = base + y0 * g.w + x0;
                        for yy in y0..y1 {
                            for xx in x0..x1 {
                                let i = base + yy * g.w + xx;
                                if x[i] > x[best] {
                                    best = i;
                                }
                            }
                        }
                        out.push(x[best]);
                        arg.push(best);
                    }
                    PoolKind::Avg => {
                        let mut acc = T::zero();
                        for yy in y0..y1 {
                            for xx in x0..x1 {
                                acc += x[base + yy * g.w + xx];
                            }
                        }
                        out.push(acc / T::from_usize_lossy((y1 - y0) * (x1 - x0)));
                    }
                }
            }
        }
    }
    (out, arg)
}

pub fn pool2d_backward<T: Real>(
    dy: &[T],
    g: &PoolGeom,
    kind: PoolKind,
    argmax: &[usize],
) -> Vec<T> {
    let mut dx = vec![T::zero(); g.n * g.c * g.h * g.w];
    match kind {
        PoolKind::Max => {
            for (&src, &d) in argmax.iter().zip(dy) {
                dx[src] += d;
            }
        }
        PoolKind::Avg => {
            let mut o = 0;
            for plane in 0..g.n * g.c {
                let base = plane * g.h * g.w;
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        let (y0, y1, x0, x1) = g.window(oy, ox);
                        let share = dy[o] / T::from_usize_lossy((y1 - y0) * (x1 - x0));
                        for yy in y0..y1 {
                            for xx in x0..x1 {
                                dx[base + yy * g.w + xx] += share;
                            }
                        }
                        o += 1;
                    }
                }
            }
        }
    }
    dx
}

/// Per-channel mean and biased variance over `(N, H, W)`.
pub fn channel_moments<T: Real>(x: &[T], dims: [usize; 4]) -> (Vec<T>, Vec<T>) {
    let [n, c, h, w] = dims;
    let hw = h * w;
    let count = T::from_usize_lossy(n * hw);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut acc = T::zero();
        for b in 0..n {
            let base = (b * c + ch) * hw;
            for &v in &x[base..base + hw] {
                acc += v;
            }
        }
        let m = acc / count;
        let mut sq = T::zero();
        for b in 0..n {
            let base = (b * c + ch) * hw;
            for &v in &x[base..base + hw] {
                let d = v - m;
                sq += d * d;
            }
        }
        mean[ch] = m;
        var[ch] = sq / count;
    }
    (mean, var)
}
