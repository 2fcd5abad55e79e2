//! Batched 2-D cross-correlation, NHWC input, `[kh, kw, Cin, Cout]` weights,
//! zero padding.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 || x[3] != w[2] {
            return Err(Error::dim("conv2d", x, w));
        }
        let (kh, kw) = (w[0], w[1]);
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::config(alloc::format!(
                "conv2d kernel must be odd-sized, got {kh}x{kw}"
            )));
        }
        if stride == 0 {
            return Err(Error::config("conv2d stride must be >= 1"));
        }
        let out = |n: usize, k: usize| -> Result<usize> {
            let span = n + 2 * pad;
            if span < k || (span - k) % stride != 0 {
                return Err(Error::config(alloc::format!(
                    "conv2d output size not integral: extent {n}, kernel {k}, stride {stride}, pad {pad}"
                )));
            }
            Ok((span - k) / stride + 1)
        };
        Ok(ConvGeom {
            batch: x[0],
            h: x[1],
            w: x[2],
            cin: x[3],
            kh,
            kw,
            cout: w[3],
            stride,
            pad,
            ho: out(x[1], kh)?,
            wo: out(x[2], kw)?,
        })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.batch, self.ho, self.wo, self.cout]
    }

    /// Input coordinate touched by output `o` and kernel tap `k`, if inside.
    #[inline]
    fn src(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let p = (o * self.stride + k) as isize - self.pad as isize;
        if p >= 0 && (p as usize) < extent {
            Some(p as usize)
        } else {
            None
        }
    }
}

pub fn conv2d<R: Real>(g: &ConvGeom, x: &[R], w: &[R], b: &[R]) -> Vec<R> {
    let (cin, cout) = (g.cin, g.cout);
    let mut out = vec![R::zero(); g.batch * g.ho * g.wo * cout];
    for n in 0..g.batch {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let o = ((n * g.ho + oy) * g.wo + ox) * cout;
                let orow = &mut out[o..o + cout];
                orow.copy_from_slice(b);
                for ky in 0..g.kh {
                    let Some(iy) = g.src(oy, ky, g.h) else { continue };
                    for kx in 0..g.kw {
                        let Some(ix) = g.src(ox, kx, g.w) else { continue };
                        let xi = ((n * g.h + iy) * g.w + ix) * cin;
                        let wi = (ky * g.kw + kx) * cin * cout;
                        for ci in 0..cin {
                            let xv = x[xi + ci];
                            let wrow = &w[wi + ci * cout..wi + (ci + 1) * cout];
                            for (acc, &wv) in orow.iter_mut().zip(wrow) {
                                *acc += xv * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(dx, dw, db)`.
pub fn conv2d_backward<R: Real>(
    g: &ConvGeom,
    x: &[R],
    w: &[R],
    dout: &[R],
) -> (Vec<R>, Vec<R>, Vec<R>) {
    let (cin, cout) = (g.cin, g.cout);
    let mut dx = vec![R::zero(); x.len()];
    let mut dw = vec![R::zero(); w.len()];
    let mut db = vec![R::zero(); cout];
    for n in 0..g.batch {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let o = ((n * g.ho + oy) * g.wo + ox) * cout;
                let drow = &dout[o..o + cout];
                for (acc, &d) in db.iter_mut().zip(drow) {
                    *acc += d;
                }
                for ky in 0..g.kh {
                    let Some(iy) = g.src(oy, ky, g.h) else { continue };
                    for kx in 0..g.kw {
                        let Some(ix) = g.src(ox, kx, g.w) else { continue };
                        let xi = ((n * g.h + iy) * g.w + ix) * cin;
                        let wi = (ky * g.kw + kx) * cin * cout;
                        for ci in 0..cin {
                            let xv = x[xi + ci];
                            let wrow = &w[wi + ci * cout..wi + (ci + 1) * cout];
                            let dwrow = &mut dw[wi + ci * cout..wi + (ci + 1) * cout];
                            let mut acc = R::zero();
                            for ((gw, &wv), &d) in dwrow.iter_mut().zip(wrow).zip(drow) {
                                *gw += xv * d;
                                acc += wv * d;
                            }
                            dx[xi + ci] += acc;
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_even_kernel_and_fractional_output() {
        assert!(matches!(
            ConvGeom::new(&[1, 4, 4, 1], &[2, 2, 1, 1], 1, 0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            ConvGeom::new(&[1, 4, 4, 1], &[3, 3, 1, 1], 2, 0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            ConvGeom::new(&[1, 4, 4, 2], &[3, 3, 1, 1], 1, 1),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn output_size_formula() {
        let g = ConvGeom::new(&[2, 7, 5, 3], &[3, 3, 3, 4], 2, 1).unwrap();
        assert_eq!(g.out_shape(), [2, 4, 3, 4]);
    }
}
