//! Raw buffer kernels behind the differentiable convolution.

use crate::tensor::Real;

/// Geometry of a zero-padded 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn h_out(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn w_out(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch(&self) -> usize {
        self.c_in * self.k * self.k
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let (ho, wo) = (g.h_out(), g.w_out());
    let mut cols = vec![T::zero(); g.patch() * ho * wo];
    for ci in 0..g.c_in {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * wo + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (ho, wo) = (g.h_out(), g.w_out());
    for ci in 0..g.c_in {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Real>(x: &[T], w: &[T], b: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let hw = g.h_out() * g.w_out();
    let mut out = vec![T::zero(); g.c_out * hw];
    if let Some(b) = b {
        for (co, chunk) in out.chunks_mut(hw).enumerate() {
            chunk.fill(b[co]);
        }
    }
    let beta = if b.is_some() { T::one() } else { T::zero() };
    if g.is_pointwise() {
        T::gemm(g.c_out, g.c_in, hw, w, false, x, false, &mut out, beta);
    } else {
        let cols = im2col(x, g);
        T::gemm(g.c_out, g.patch(), hw, w, false, &cols, false, &mut out, beta);
    }
    out
}

/// Accumulates the input, weight and bias cotangents of `conv2d_forward`.
pub fn conv2d_backward<T: Real>(
    x: &[T],
    w: &[T],
    grad_out: &[T],
    g: &ConvGeom,
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let hw = g.h_out() * g.w_out();
    if let Some(db) = db {
        for (co, chunk) in grad_out.chunks(hw).enumerate() {
            db[co] += chunk.iter().copied().sum::<T>();
        }
    }
    if g.is_pointwise() {
        if let Some(dw) = dw {
            T::gemm(g.c_out, hw, g.c_in, grad_out, false, x, true, dw, T::one());
        }
        if let Some(dx) = dx {
            T::gemm(g.c_in, g.c_out, hw, w, true, grad_out, false, dx, T::one());
        }
        return;
    }
    if let Some(dw) = dw {
        let cols = im2col(x, g);
        T::gemm(g.c_out, hw, g.patch(), grad_out, false, &cols, true, dw, T::one());
    }
    if let Some(dx) = dx {
        let mut dcols = vec![T::zero(); g.patch() * hw];
        T::gemm(g.patch(), g.c_out, hw, w, true, grad_out, false, &mut dcols, T::zero());
        col2im_add(&dcols, g, dx);
    }
}
