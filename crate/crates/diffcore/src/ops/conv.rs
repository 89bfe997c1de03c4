//! 3D convolution (cross-correlation) via im2col and GEMM.

use rayon::prelude::*;

use crate::graph::{Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;
use crate::{DiffError, Result};

#[derive(Clone, Copy, Debug)]
struct Geom {
    ci: usize,
    k: usize,
    stride: usize,
    pad: usize,
    din: [usize; 3],
    dout: [usize; 3],
}

impl Geom {
    fn rows(&self) -> usize {
        self.ci * self.k * self.k * self.k
    }
    fn in_vox(&self) -> usize {
        self.din.iter().product()
    }
    fn out_vox(&self) -> usize {
        self.dout.iter().product()
    }
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Source index along one axis, or `None` when it falls in the zero padding.
#[inline]
fn src(o: usize, kk: usize, g: &Geom, n: usize) -> Option<usize> {
    let i = (o * g.stride + kk) as isize - g.pad as isize;
    (i >= 0 && (i as usize) < n).then_some(i as usize)
}

fn im2col<T: Real>(x: &[T], g: &Geom, col: &mut [T]) {
    let [di, hi, wi] = g.din;
    let [do_, ho, wo] = g.dout;
    let nout = g.out_vox();
    let k = g.k;
    for c in 0..g.ci {
        let xc = &x[c * di * hi * wi..(c + 1) * di * hi * wi];
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let r = ((c * k + kz) * k + ky) * k + kx;
                    let row = &mut col[r * nout..(r + 1) * nout];
                    for oz in 0..do_ {
                        let iz = src(oz, kz, g, di);
                        for oy in 0..ho {
                            let dst = &mut row[(oz * ho + oy) * wo..(oz * ho + oy + 1) * wo];
                            let (Some(iz), Some(iy)) = (iz, src(oy, ky, g, hi)) else {
                                dst.fill(T::zero());
                                continue;
                            };
                            let line = &xc[(iz * hi + iy) * wi..(iz * hi + iy + 1) * wi];
                            for (ox, d) in dst.iter_mut().enumerate() {
                                *d = match src(ox, kx, g, wi) {
                                    Some(ix) => line[ix],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(col: &[T], g: &Geom, dx: &mut [T]) {
    let [di, hi, wi] = g.din;
    let [do_, ho, wo] = g.dout;
    let nout = g.out_vox();
    let k = g.k;
    for c in 0..g.ci {
        let xc = &mut dx[c * di * hi * wi..(c + 1) * di * hi * wi];
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let r = ((c * k + kz) * k + ky) * k + kx;
                    let row = &col[r * nout..(r + 1) * nout];
                    for oz in 0..do_ {
                        let Some(iz) = src(oz, kz, g, di) else { continue };
                        for oy in 0..ho {
                            let Some(iy) = src(oy, ky, g, hi) else { continue };
                            let s = &row[(oz * ho + oy) * wo..(oz * ho + oy + 1) * wo];
                            let line = &mut xc[(iz * hi + iy) * wi..(iz * hi + iy + 1) * wi];
                            for (ox, &v) in s.iter().enumerate() {
                                if let Some(ix) = src(ox, kx, g, wi) {
                                    line[ix] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<T: Real> Graph<T> {
    /// Zero-padded 3D cross-correlation.
    ///
    /// `x (n, ci, d, h, w)`, `w (co, ci, k, k, k)`, optional `b (co)`.
    pub fn conv3d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let [n, ci, d, h, wd] = self.value(x).dims5()?;
        let [co, wci, k, k2, k3] = self.value(w).dims5()?;
        if wci != ci || k != k2 || k != k3 || stride == 0 {
            return Err(DiffError::ShapeMismatch(format!(
                "conv3d: input {:?} with kernel {:?}, stride {stride}",
                self.shape(x),
                self.shape(w)
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != [co] {
                return Err(DiffError::ShapeMismatch(format!(
                    "conv3d: bias {:?} for {co} output channels",
                    self.shape(b)
                )));
            }
        }
        let out_dim = |i: usize| -> Result<usize> {
            if i + 2 * pad < k {
                return Err(DiffError::ShapeMismatch(format!(
                    "conv3d: kernel {k} larger than padded input {i}"
                )));
            }
            Ok((i + 2 * pad - k) / stride + 1)
        };
        let g = Geom {
            ci,
            k,
            stride,
            pad,
            din: [d, h, wd],
            dout: [out_dim(d)?, out_dim(h)?, out_dim(wd)?],
        };
        let (nin, nout, rows) = (ci * g.in_vox(), g.out_vox(), g.rows());

        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = b.map(|b| self.value(b).data());
        let mut out = vec![T::zero(); n * co * nout];
        out.par_chunks_mut(co * nout)
            .enumerate()
            .for_each(|(bi, o)| {
                let xb = &xv[bi * nin..(bi + 1) * nin];
                let mut buf;
                let col: &[T] = if g.is_pointwise() {
                    xb
                } else {
                    buf = vec![T::zero(); rows * nout];
                    im2col(xb, &g, &mut buf);
                    &buf
                };
                if let Some(bv) = bv {
                    for (c, oc) in o.chunks_mut(nout).enumerate() {
                        oc.fill(bv[c]);
                    }
                }
                let beta = if bv.is_some() { T::one() } else { T::zero() };
                T::gemm(co, rows, nout, T::one(), wv, rows, 1, col, nout, 1, beta, o, nout, 1);
            });

        let shape = [n, co, g.dout[0], g.dout[1], g.dout[2]];
        let out = Tensor::from_vec(&shape, out)?;
        let inputs: Vec<Var> = match b {
            Some(b) => vec![x, w, b],
            None => vec![x, w],
        };
        Ok(self.push(out, &inputs, move |ctx| {
            let xv = ctx.inputs[0].data();
            let wv = ctx.inputs[1].data();
            let gv = ctx.grad.data();
            let need_x = ctx.needs[0];
            let need_w = ctx.needs[1];

            let mut gx = need_x.then(|| vec![T::zero(); n * nin]);
            let per_item: Vec<Option<Vec<T>>> = (0..n)
                .into_par_iter()
                .map(|bi| {
                    if !need_w {
                        return None;
                    }
                    let xb = &xv[bi * nin..(bi + 1) * nin];
                    let gb = &gv[bi * co * nout..(bi + 1) * co * nout];
                    let mut buf;
                    let col: &[T] = if g.is_pointwise() {
                        xb
                    } else {
                        buf = vec![T::zero(); rows * nout];
                        im2col(xb, &g, &mut buf);
                        &buf
                    };
                    let mut gw = vec![T::zero(); co * rows];
                    // gw (co x rows) = g (co x nout) * col^T (nout x rows)
                    T::gemm(co, nout, rows, T::one(), gb, nout, 1, col, 1, nout, T::zero(), &mut gw, rows, 1);
                    Some(gw)
                })
                .collect();

            if let Some(gx) = gx.as_mut() {
                gx.par_chunks_mut(nin).enumerate().for_each(|(bi, dxb)| {
                    let gb = &gv[bi * co * nout..(bi + 1) * co * nout];
                    if g.is_pointwise() {
                        // dx (ci x nout) = w^T (ci x co) * g (co x nout)
                        T::gemm(ci, co, nout, T::one(), wv, 1, ci, gb, nout, 1, T::zero(), dxb, nout, 1);
                    } else {
                        let mut dcol = vec![T::zero(); rows * nout];
                        T::gemm(rows, co, nout, T::one(), wv, 1, rows, gb, nout, 1, T::zero(), &mut dcol, nout, 1);
                        col2im(&dcol, &g, dxb);
                    }
                });
            }

            let gw = need_w.then(|| {
                let mut acc = vec![T::zero(); co * rows];
                for item in per_item.into_iter().flatten() {
                    for (a, v) in acc.iter_mut().zip(item) {
                        *a += v;
                    }
                }
                Tensor::from_vec(ctx.inputs[1].shape(), acc).unwrap()
            });

            let mut res = vec![
                gx.map(|v| Tensor::from_vec(ctx.inputs[0].shape(), v).unwrap()),
                gw,
            ];
            if ctx.inputs.len() == 3 {
                let gb = ctx.needs[2].then(|| {
                    let mut acc = vec![T::zero(); co];
                    for bi in 0..n {
                        for (c, a) in acc.iter_mut().enumerate() {
                            let off = (bi * co + c) * nout;
                            *a += gv[off..off + nout].iter().copied().sum::<T>();
                        }
                    }
                    Tensor::from_vec(&[co], acc).unwrap()
                });
                res.push(gb);
            }
            res
        }))
    }
}
