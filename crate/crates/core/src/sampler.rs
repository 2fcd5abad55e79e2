//! Differentiable bilinear warping: `V(i) = U(i + G(i))`.
//!
//! Offsets are `(row, col)` with rows growing downwards. Source coordinates
//! that fall outside the image are clamped to the border before
//! interpolation; a clamped component contributes no positional gradient.
//! Sampling at integral coordinates reads the source value directly, so a
//! zero field is an exact identity.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Per-pixel displacement field, `[H, W, 2]` with `(row, col)` components.
#[derive(Clone, Debug, PartialEq)]
pub struct WarpField<R> {
    offsets: Tensor<R>,
}

impl<R: Real> WarpField<R> {
    pub fn new(offsets: Tensor<R>) -> Result<Self> {
        let s = offsets.shape();
        if s.len() != 3 || s[2] != 2 {
            return Err(Error::dim("warp field", s, &[0, 0, 2]));
        }
        Ok(WarpField { offsets })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        WarpField {
            offsets: Tensor::zeros(&[h, w, 2]),
        }
    }

    pub fn constant(h: usize, w: usize, dy: R, dx: R) -> Self {
        WarpField {
            offsets: Tensor::from_fn(&[h, w, 2], |i| if i % 2 == 0 { dy } else { dx }),
        }
    }

    pub fn height(&self) -> usize {
        self.offsets.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.offsets.shape()[1]
    }

    /// `(row, col)` offset at a pixel.
    pub fn at(&self, row: usize, col: usize) -> (R, R) {
        let i = (row * self.width() + col) * 2;
        let d = self.offsets.data();
        (d[i], d[i + 1])
    }

    pub fn offsets(&self) -> &Tensor<R> {
        &self.offsets
    }

    pub fn max_abs(&self) -> R {
        self.offsets.max_abs()
    }
}

/// Shapes of a grouped warp: features `[B, H, W, K]`, fields `[B, C, H, W, 2]`
/// where channel `k` follows field `k / (K / C)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WarpGeom {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub channels: usize,
    pub groups: usize,
}

impl WarpGeom {
    pub fn new(u: &[usize], g: &[usize]) -> Result<Self> {
        let ok = u.len() == 4
            && g.len() == 5
            && g[0] == u[0]
            && g[2] == u[1]
            && g[3] == u[2]
            && g[4] == 2
            && g[1] > 0
            && u[3] % g[1] == 0;
        if !ok {
            return Err(Error::dim("bilinear_sample", u, g));
        }
        Ok(WarpGeom {
            batch: u[0],
            h: u[1],
            w: u[2],
            channels: u[3],
            groups: g[1],
        })
    }
}

struct Tap<R> {
    y0: usize,
    y1: usize,
    x0: usize,
    x1: usize,
    fy: R,
    fx: R,
    clamped_y: bool,
    clamped_x: bool,
}

#[inline]
fn axis_tap<R: Real>(pos: R, extent: usize) -> (usize, usize, R, bool) {
    let hi = R::from_usize(extent - 1);
    let clamped = pos < R::zero() || pos > hi;
    let p = pos.max(R::zero()).min(hi);
    let f0 = p.floor();
    let i0 = f0.to_usize().unwrap_or(0).min(extent - 1);
    if i0 + 1 >= extent {
        (i0, i0, R::zero(), clamped)
    } else {
        (i0, i0 + 1, p - f0, clamped)
    }
}

#[inline]
fn tap<R: Real>(row: usize, col: usize, dy: R, dx: R, h: usize, w: usize) -> Tap<R> {
    let (y0, y1, fy, clamped_y) = axis_tap(R::from_usize(row) + dy, h);
    let (x0, x1, fx, clamped_x) = axis_tap(R::from_usize(col) + dx, w);
    Tap {
        y0,
        y1,
        x0,
        x1,
        fy,
        fx,
        clamped_y,
        clamped_x,
    }
}

/// Grouped bilinear warp of `u` (`[B,H,W,K]`) by `field` (`[B,C,H,W,2]`).
pub fn warp_sample<R: Real>(g: &WarpGeom, u: &[R], field: &[R]) -> Vec<R> {
    let (h, w, k) = (g.h, g.w, g.channels);
    let per_group = k / g.groups;
    let mut out = vec![R::zero(); u.len()];
    for b in 0..g.batch {
        let img = &u[b * h * w * k..(b + 1) * h * w * k];
        for c in 0..g.groups {
            for row in 0..h {
                for col in 0..w {
                    let fi = (((b * g.groups + c) * h + row) * w + col) * 2;
                    let t = tap(row, col, field[fi], field[fi + 1], h, w);
                    let base = ((b * h + row) * w + col) * k;
                    let p00 = (t.y0 * w + t.x0) * k;
                    if t.fy == R::zero() && t.fx == R::zero() {
                        for ch in c * per_group..(c + 1) * per_group {
                            out[base + ch] = img[p00 + ch];
                        }
                        continue;
                    }
                    let p01 = (t.y0 * w + t.x1) * k;
                    let p10 = (t.y1 * w + t.x0) * k;
                    let p11 = (t.y1 * w + t.x1) * k;
                    // lerp form: equal corners reproduce their value exactly
                    for ch in c * per_group..(c + 1) * per_group {
                        let (a, b_, c_, d) = (img[p00 + ch], img[p01 + ch], img[p10 + ch], img[p11 + ch]);
                        let top = a + t.fx * (b_ - a);
                        let bot = c_ + t.fx * (d - c_);
                        out[base + ch] = top + t.fy * (bot - top);
                    }
                }
            }
        }
    }
    out
}

/// Returns `(du, dfield)`.
pub fn warp_sample_backward<R: Real>(g: &WarpGeom, u: &[R], field: &[R], dout: &[R]) -> (Vec<R>, Vec<R>) {
    let (h, w, k) = (g.h, g.w, g.channels);
    let per_group = k / g.groups;
    let one = R::one();
    let mut du = vec![R::zero(); u.len()];
    let mut dfield = vec![R::zero(); field.len()];
    for b in 0..g.batch {
        let off = b * h * w * k;
        let img = &u[off..off + h * w * k];
        for c in 0..g.groups {
            for row in 0..h {
                for col in 0..w {
                    let fi = (((b * g.groups + c) * h + row) * w + col) * 2;
                    let t = tap(row, col, field[fi], field[fi + 1], h, w);
                    let base = ((b * h + row) * w + col) * k;
                    let p00 = (t.y0 * w + t.x0) * k;
                    let p01 = (t.y0 * w + t.x1) * k;
                    let p10 = (t.y1 * w + t.x0) * k;
                    let p11 = (t.y1 * w + t.x1) * k;
                    let w00 = (one - t.fy) * (one - t.fx);
                    let w01 = (one - t.fy) * t.fx;
                    let w10 = t.fy * (one - t.fx);
                    let w11 = t.fy * t.fx;
                    let mut gy = R::zero();
                    let mut gx = R::zero();
                    for ch in c * per_group..(c + 1) * per_group {
                        let d = dout[base + ch];
                        du[off + p00 + ch] += w00 * d;
                        du[off + p01 + ch] += w01 * d;
                        du[off + p10 + ch] += w10 * d;
                        du[off + p11 + ch] += w11 * d;
                        let (a, bb, cc, dd) = (img[p00 + ch], img[p01 + ch], img[p10 + ch], img[p11 + ch]);
                        gy += d * ((one - t.fx) * (cc - a) + t.fx * (dd - bb));
                        gx += d * ((one - t.fy) * (bb - a) + t.fy * (dd - cc));
                    }
                    if !t.clamped_y {
                        dfield[fi] = gy;
                    }
                    if !t.clamped_x {
                        dfield[fi + 1] = gx;
                    }
                }
            }
        }
    }
    (du, dfield)
}

/// Warps a single `[H, W]` channel.
pub fn bilinear_sample<R: Real>(u: &Tensor<R>, field: &WarpField<R>) -> Result<Tensor<R>> {
    let s = u.shape();
    if s.len() != 2 || s[0] != field.height() || s[1] != field.width() {
        return Err(Error::dim("bilinear_sample", s, field.offsets.shape()));
    }
    let geom = WarpGeom {
        batch: 1,
        h: s[0],
        w: s[1],
        channels: 1,
        groups: 1,
    };
    Tensor::new(s, warp_sample(&geom, u.data(), field.offsets.data()))
}

/// Gradients of `Σ upstream ⊙ bilinear_sample(u, field)` w.r.t. `u` and the field.
pub fn sample_gradients<R: Real>(
    upstream: &Tensor<R>,
    u: &Tensor<R>,
    field: &WarpField<R>,
) -> Result<(Tensor<R>, WarpField<R>)> {
    let s = u.shape();
    if s.len() != 2 || upstream.shape() != s || s[0] != field.height() || s[1] != field.width() {
        return Err(Error::dim("sample_gradients", s, upstream.shape()));
    }
    let geom = WarpGeom {
        batch: 1,
        h: s[0],
        w: s[1],
        channels: 1,
        groups: 1,
    };
    let (du, dg) = warp_sample_backward(&geom, u.data(), field.offsets.data(), upstream.data());
    Ok((Tensor::new(s, du)?, WarpField::new(Tensor::new(&[s[0], s[1], 2], dg)?)?))
}
