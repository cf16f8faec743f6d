//! Raw loops behind the differentiable ops. All inputs are pre-validated.

use super::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(cin: usize, cout: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        if stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return None;
        }
        Some(Self {
            cin,
            cout,
            h,
            w,
            k,
            stride,
            pad,
            oh: (h + 2 * pad - k) / stride + 1,
            ow: (w + 2 * pad - k) / stride + 1,
        })
    }

    /// Output columns `ox` whose input column `ox*stride + kx - pad` is inside the image.
    #[inline]
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let lo = if kx >= self.pad {
            0
        } else {
            (self.pad - kx).div_ceil(self.stride)
        };
        let hi = if self.w + self.pad > kx {
            ((self.w + self.pad - kx - 1) / self.stride + 1).min(self.ow)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    #[inline]
    fn in_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky).checked_sub(self.pad)?;
        (iy < self.h).then_some(iy)
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(g: &ConvGeom, x: &[T], wt: &[T], b: &[T]) -> Vec<T> {
    let (k, s, p) = (g.k, g.stride, g.pad);
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    let mut out = vec![T::zero(); g.cout * plane_out];
    for co in 0..g.cout {
        let o = &mut out[co * plane_out..(co + 1) * plane_out];
        o.iter_mut().for_each(|v| *v = b[co]);
        for ci in 0..g.cin {
            let xin = &x[ci * plane_in..(ci + 1) * plane_in];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = wt[((co * g.cin + ci) * k + ky) * k + kx];
                    let (lo, hi) = g.valid_cols(kx);
                    for oy in 0..g.oh {
                        let Some(iy) = g.in_row(oy, ky) else { continue };
                        let orow = &mut o[oy * g.ow..(oy + 1) * g.ow];
                        let irow = &xin[iy * g.w..(iy + 1) * g.w];
                        if s == 1 {
                            let off = kx as isize - p as isize;
                            let src = &irow[(lo as isize + off) as usize..(hi as isize + off) as usize];
                            for (ov, &iv) in orow[lo..hi].iter_mut().zip(src) {
                                *ov = *ov + wv * iv;
                            }
                        } else {
                            for ox in lo..hi {
                                let ix = ox * s + kx - p;
                                orow[ox] = orow[ox] + wv * irow[ix];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(grad_x, grad_w, grad_b)` for upstream gradient `go`.
pub(crate) fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    wt: &[T],
    go: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (k, s, p) = (g.k, g.stride, g.pad);
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    let mut gx = vec![T::zero(); g.cin * plane_in];
    let mut gw = vec![T::zero(); wt.len()];
    let mut gb = vec![T::zero(); g.cout];
    for co in 0..g.cout {
        let gop = &go[co * plane_out..(co + 1) * plane_out];
        gb[co] = gop.iter().copied().sum();
        for ci in 0..g.cin {
            let xin = &x[ci * plane_in..(ci + 1) * plane_in];
            let gxin = &mut gx[ci * plane_in..(ci + 1) * plane_in];
            for ky in 0..k {
                for kx in 0..k {
                    let widx = ((co * g.cin + ci) * k + ky) * k + kx;
                    let wv = wt[widx];
                    let (lo, hi) = g.valid_cols(kx);
                    let mut acc = T::zero();
                    for oy in 0..g.oh {
                        let Some(iy) = g.in_row(oy, ky) else { continue };
                        let grow = &gop[oy * g.ow..(oy + 1) * g.ow];
                        let irow = &xin[iy * g.w..(iy + 1) * g.w];
                        let gxrow = &mut gxin[iy * g.w..(iy + 1) * g.w];
                        if s == 1 {
                            let off = kx as isize - p as isize;
                            let a = (lo as isize + off) as usize;
                            let b = (hi as isize + off) as usize;
                            for ((&gv, &iv), gxv) in
                                grow[lo..hi].iter().zip(&irow[a..b]).zip(&mut gxrow[a..b])
                            {
                                acc = acc + gv * iv;
                                *gxv = *gxv + wv * gv;
                            }
                        } else {
                            for ox in lo..hi {
                                let ix = ox * s + kx - p;
                                acc = acc + grow[ox] * irow[ix];
                                gxrow[ix] = gxrow[ix] + wv * grow[ox];
                            }
                        }
                    }
                    gw[widx] = acc;
                }
            }
        }
    }
    (gx, gw, gb)
}

/// `[m, k] x [k, n]`.
pub(crate) fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            for (o, &bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

pub(crate) fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}
