//! Trilinear grid sampling and nearest-neighbour upsampling.

use crate::graph::{Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;
use crate::{DiffError, Result};

/// What a trilinear read returns outside the array.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Corners outside the array read as zero.
    Zeros,
    /// Coordinates are clamped to the array bounds.
    Border,
}

/// One of the (up to) eight corners contributing to a trilinear read.
#[derive(Clone, Copy, Debug)]
pub struct Corner<T> {
    /// Flat index into a `d x h x w` array.
    pub index: usize,
    pub weight: T,
    /// Derivative of `weight` with respect to the `(x, y, z)` sample coordinate.
    pub dweight: [T; 3],
}

/// Interpolation stencil at fractional index `p = (x, y, z)` in an array of
/// shape `dims = (d, h, w)`; `x` runs along `w`.
pub fn trilinear_corners<T: Real>(
    dims: [usize; 3],
    p: [T; 3],
    pad: Padding,
) -> ([Corner<T>; 8], usize) {
    // axis order of `p` is (x, y, z); dims are (d, h, w)
    let sizes = [dims[2], dims[1], dims[0]];
    let mut base = [0isize; 3];
    let mut frac = [T::zero(); 3];
    let mut gate = [T::one(); 3];
    for a in 0..3 {
        let n = sizes[a];
        let mut x = p[a];
        if pad == Padding::Border {
            let hi = T::lit((n - 1) as f64);
            if x < T::zero() {
                x = T::zero();
                gate[a] = T::zero();
            } else if x > hi {
                x = hi;
                gate[a] = T::zero();
            }
        }
        let mut i0 = x.floor();
        if pad == Padding::Border && n > 1 && i0.f64() >= (n - 1) as f64 {
            i0 = T::lit((n - 2) as f64);
        }
        base[a] = i0.to_isize().unwrap_or(isize::MIN / 2);
        frac[a] = x - i0;
    }
    let zero = Corner {
        index: 0,
        weight: T::zero(),
        dweight: [T::zero(); 3],
    };
    let mut out = [zero; 8];
    let mut cnt = 0;
    for cz in 0..2 {
        let iz = base[2] + cz;
        if iz < 0 || iz >= sizes[2] as isize {
            continue;
        }
        let (wz, dz) = if cz == 0 {
            (T::one() - frac[2], -T::one())
        } else {
            (frac[2], T::one())
        };
        for cy in 0..2 {
            let iy = base[1] + cy;
            if iy < 0 || iy >= sizes[1] as isize {
                continue;
            }
            let (wy, dy) = if cy == 0 {
                (T::one() - frac[1], -T::one())
            } else {
                (frac[1], T::one())
            };
            for cx in 0..2 {
                let ix = base[0] + cx;
                if ix < 0 || ix >= sizes[0] as isize {
                    continue;
                }
                let (wx, dx) = if cx == 0 {
                    (T::one() - frac[0], -T::one())
                } else {
                    (frac[0], T::one())
                };
                out[cnt] = Corner {
                    index: ((iz as usize) * sizes[1] + iy as usize) * sizes[0] + ix as usize,
                    weight: wx * wy * wz,
                    dweight: [
                        dx * wy * wz * gate[0],
                        wx * dy * wz * gate[1],
                        wx * wy * dz * gate[2],
                    ],
                };
                cnt += 1;
            }
        }
    }
    (out, cnt)
}

/// Trilinear read of `data` (shape `dims = (d, h, w)`) at `p = (x, y, z)`.
/// Returns the value and its gradient with respect to `p`.
pub fn trilinear<T: Real>(
    dims: [usize; 3],
    fetch: impl Fn(usize) -> T,
    p: [T; 3],
    pad: Padding,
) -> (T, [T; 3]) {
    let (corners, cnt) = trilinear_corners(dims, p, pad);
    let mut v = T::zero();
    let mut g = [T::zero(); 3];
    for c in &corners[..cnt] {
        let s = fetch(c.index);
        v += c.weight * s;
        for a in 0..3 {
            g[a] += c.dweight[a] * s;
        }
    }
    (v, g)
}

impl<T: Real> Graph<T> {
    /// Sample `x (n, c, d, h, w)` at `grid (n, 3, d', h', w')`, where the grid
    /// holds fractional array indices with channel order `(x, y, z)` and `x`
    /// runs along `w`. Differentiable with respect to both inputs.
    pub fn grid_sample(&mut self, x: Var, grid: Var, pad: Padding) -> Result<Var> {
        let [n, c, d, h, w] = self.value(x).dims5()?;
        let [gn, gc, od, oh, ow] = self.value(grid).dims5()?;
        if gn != n || gc != 3 {
            return Err(DiffError::ShapeMismatch(format!(
                "grid_sample: input {:?} with grid {:?}",
                self.shape(x),
                self.shape(grid)
            )));
        }
        let dims = [d, h, w];
        let s_in = d * h * w;
        let s_out = od * oh * ow;
        let xv = self.value(x).data();
        let gv = self.value(grid).data();
        let mut out = vec![T::zero(); n * c * s_out];
        for b in 0..n {
            let gb = &gv[b * 3 * s_out..(b + 1) * 3 * s_out];
            for o in 0..s_out {
                let p = [gb[o], gb[s_out + o], gb[2 * s_out + o]];
                let (corners, cnt) = trilinear_corners(dims, p, pad);
                for ch in 0..c {
                    let src = &xv[(b * c + ch) * s_in..(b * c + ch + 1) * s_in];
                    let mut v = T::zero();
                    for k in &corners[..cnt] {
                        v += k.weight * src[k.index];
                    }
                    out[(b * c + ch) * s_out + o] = v;
                }
            }
        }
        let out = Tensor::from_vec(&[n, c, od, oh, ow], out)?;
        Ok(self.push(out, &[x, grid], move |ctx| {
            let xv = ctx.inputs[0].data();
            let gv = ctx.inputs[1].data();
            let dy = ctx.grad.data();
            let mut dx = ctx.needs[0].then(|| vec![T::zero(); n * c * s_in]);
            let mut dg = ctx.needs[1].then(|| vec![T::zero(); n * 3 * s_out]);
            for b in 0..n {
                let gb = &gv[b * 3 * s_out..(b + 1) * 3 * s_out];
                for o in 0..s_out {
                    let p = [gb[o], gb[s_out + o], gb[2 * s_out + o]];
                    let (corners, cnt) = trilinear_corners(dims, p, pad);
                    let mut acc = [T::zero(); 3];
                    for ch in 0..c {
                        let g = dy[(b * c + ch) * s_out + o];
                        if g == T::zero() {
                            continue;
                        }
                        let base = (b * c + ch) * s_in;
                        for k in &corners[..cnt] {
                            if let Some(dx) = dx.as_mut() {
                                dx[base + k.index] += g * k.weight;
                            }
                            let v = xv[base + k.index];
                            for a in 0..3 {
                                acc[a] += g * k.dweight[a] * v;
                            }
                        }
                    }
                    if let Some(dg) = dg.as_mut() {
                        for a in 0..3 {
                            dg[(b * 3 + a) * s_out + o] = acc[a];
                        }
                    }
                }
            }
            vec![
                dx.map(|v| Tensor::from_vec(ctx.inputs[0].shape(), v).unwrap()),
                dg.map(|v| Tensor::from_vec(ctx.inputs[1].shape(), v).unwrap()),
            ]
        }))
    }

    /// Nearest-neighbour upsampling by a factor of two along each spatial axis.
    pub fn upsample_nearest2x(&mut self, x: Var) -> Result<Var> {
        let [n, c, d, h, w] = self.value(x).dims5()?;
        let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); n * c * od * oh * ow];
        for g in 0..n * c {
            let src = &xv[g * d * h * w..(g + 1) * d * h * w];
            let dst = &mut out[g * od * oh * ow..(g + 1) * od * oh * ow];
            for z in 0..od {
                for y in 0..oh {
                    let row = &src[((z / 2) * h + y / 2) * w..((z / 2) * h + y / 2 + 1) * w];
                    let drow = &mut dst[(z * oh + y) * ow..(z * oh + y + 1) * ow];
                    for (x, v) in drow.iter_mut().enumerate() {
                        *v = row[x / 2];
                    }
                }
            }
        }
        let out = Tensor::from_vec(&[n, c, od, oh, ow], out)?;
        Ok(self.push(out, &[x], move |ctx| {
            let dy = ctx.grad.data();
            let mut dx = vec![T::zero(); n * c * d * h * w];
            for g in 0..n * c {
                let src = &dy[g * od * oh * ow..(g + 1) * od * oh * ow];
                let dst = &mut dx[g * d * h * w..(g + 1) * d * h * w];
                for z in 0..od {
                    for y in 0..oh {
                        let row = &src[(z * oh + y) * ow..(z * oh + y + 1) * ow];
                        let off = ((z / 2) * h + y / 2) * w;
                        for (x, &v) in row.iter().enumerate() {
                            dst[off + x / 2] += v;
                        }
                    }
                }
            }
            vec![Some(Tensor::from_vec(ctx.inputs[0].shape(), dx).unwrap())]
        }))
    }
}

/// Identity sampling grid `(n, 3, d, h, w)` holding each voxel's own index.
pub fn identity_grid<T: Real>(n: usize, dims: [usize; 3]) -> Tensor<T> {
    let [d, h, w] = dims;
    let s = d * h * w;
    let mut out = vec![T::zero(); n * 3 * s];
    for b in 0..n {
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let o = (z * h + y) * w + x;
                    out[b * 3 * s + o] = T::lit(x as f64);
                    out[b * 3 * s + s + o] = T::lit(y as f64);
                    out[b * 3 * s + 2 * s + o] = T::lit(z as f64);
                }
            }
        }
    }
    Tensor::from_vec(&[n, 3, d, h, w], out).unwrap()
}
