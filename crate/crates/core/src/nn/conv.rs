//! im2col / col2im kernels behind the 2-D convolution op.

use rayon::prelude::*;

use crate::tensor::{gemm, MatRef, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub ph: usize,
    pub pw: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    pub fn in_size(&self) -> usize {
        self.c_in * self.h * self.w
    }

    pub fn out_size(&self) -> usize {
        self.c_out * self.out_plane()
    }
}

/// Unfolds one `[c_in, h, w]` image into `[c_in*kh*kw, oh*ow]` columns.
fn im2col<T: Real>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let plane = g.out_plane();
    for c in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.oh {
                    let iy = (oy + ki) as isize - g.ph as isize;
                    let d = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        d.fill(T::zero());
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..][..g.w];
                    for (ox, v) in d.iter_mut().enumerate() {
                        let ix = (ox + kj) as isize - g.pw as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
fn col2im<T: Real>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let plane = g.out_plane();
    dx.fill(T::zero());
    for c in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.oh {
                    let iy = (oy + ki) as isize - g.ph as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut dx[(c * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.ow {
                        let ix = (ox + kj) as isize - g.pw as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn forward<T: Real>(g: &ConvGeom, n: usize, x: &[T], w: &[T], b: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); n * g.out_size()];
    let plane = g.out_plane();
    out.par_chunks_mut(g.out_size())
        .zip(x.par_chunks(g.in_size()))
        .for_each(|(y, xs)| {
            for (co, row) in y.chunks_mut(plane).enumerate() {
                row.fill(b[co]);
            }
            let mut cols = vec![T::zero(); g.patch() * plane];
            im2col(g, xs, &mut cols);
            gemm(
                MatRef::new(w, g.c_out, g.patch()),
                MatRef::new(&cols, g.patch(), plane),
                T::one(),
                y,
            );
        });
    out
}

/// Returns `(dx, dw, db)`; per-sample weight gradients are summed in batch order.
pub(crate) fn backward<T: Real>(
    g: &ConvGeom,
    n: usize,
    x: &[T],
    w: &[T],
    dy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let plane = g.out_plane();
    let mut dx = vec![T::zero(); n * g.in_size()];
    let partials: Vec<(Vec<T>, Vec<T>)> = dx
        .par_chunks_mut(g.in_size())
        .zip(x.par_chunks(g.in_size()))
        .zip(dy.par_chunks(g.out_size()))
        .map(|((dxs, xs), dys)| {
            let mut cols = vec![T::zero(); g.patch() * plane];
            im2col(g, xs, &mut cols);
            let mut dw = vec![T::zero(); g.c_out * g.patch()];
            gemm(
                MatRef::new(dys, g.c_out, plane),
                MatRef::new(&cols, g.patch(), plane).t(),
                T::zero(),
                &mut dw,
            );
            gemm(
                MatRef::new(w, g.c_out, g.patch()).t(),
                MatRef::new(dys, g.c_out, plane),
                T::zero(),
                &mut cols,
            );
            col2im(g, &cols, dxs);
            let db = dys.chunks(plane).map(|r| r.iter().copied().sum()).collect();
            (dw, db)
        })
        .collect();
    let mut dw = vec![T::zero(); g.c_out * g.patch()];
    let mut db = vec![T::zero(); g.c_out];
    for (pw, pb) in partials {
        dw.iter_mut().zip(pw).for_each(|(a, b)| *a += b);
        db.iter_mut().zip(pb).for_each(|(a, b)| *a += b);
    }
    (dx, dw, db)
}
