//! Graph operators specific to patch registration: sampling a volume at
//! world coordinates, per-item linear maps of vector fields, and Jacobian
//! determinants of coordinate fields.

use std::sync::Arc;

use diffcore::ops::{trilinear, Padding};
use diffcore::{Graph, Real, Tensor, Var};
use rayon::prelude::*;

use crate::geometry::{Affine, CoordinateField, Mat3};
use crate::volumes::ImageStack;
use crate::{Error, Result};

/// A volume seen through a world-to-array map, one per batch item.
#[derive(Clone, Debug)]
pub struct SampleSource {
    pub image: Arc<ImageStack>,
    pub world_to_array: Affine,
}

impl SampleSource {
    pub fn new(image: Arc<ImageStack>) -> Self {
        let world_to_array = *image.world_to_array();
        Self {
            image,
            world_to_array,
        }
    }

    /// The same image after moving its content by `t` in world space.
    pub fn transformed(image: Arc<ImageStack>, t: &Affine) -> Result<Self> {
        let world_to_array = image.world_to_array().compose(&t.invert()?);
        Ok(Self {
            image,
            world_to_array,
        })
    }

    /// Value and array-index gradient at world point `x`.
    fn read(&self, x: [f64; 3]) -> (f64, [f64; 3]) {
        let p = self.world_to_array.apply(x);
        let [nx, ny, nz] = self.image.dims();
        let data = self.image.data();
        trilinear([nz, ny, nx], |i| data[i] as f64, p, Padding::Zeros)
    }

    pub fn sample(&self, x: [f64; 3]) -> f64 {
        self.read(x).0
    }
}

fn check_field(shape: &[usize], n: usize, what: &str) -> Result<[usize; 3]> {
    if shape.len() != 5 || shape[0] != n || shape[1] != 3 {
        return Err(Error::ShapeMismatch(format!(
            "{what}: expected ({n}, 3, d, h, w), got {shape:?}"
        )));
    }
    Ok([shape[2], shape[3], shape[4]])
}

/// Batch of coordinate fields as a planar `(n, 3, d, h, w)` tensor.
pub fn coords_tensor<T: Real>(fields: &[CoordinateField]) -> Result<Tensor<T>> {
    let dims = fields
        .first()
        .map(|f| f.dims)
        .ok_or_else(|| Error::ShapeMismatch("empty batch".into()))?;
    let mut data = Vec::with_capacity(fields.len() * 3 * fields[0].len());
    for f in fields {
        if f.dims != dims {
            return Err(Error::ShapeMismatch("coordinate fields differ in shape".into()));
        }
        data.extend(f.planar().into_iter().map(T::lit));
    }
    Ok(Tensor::from_vec(&[fields.len(), 3, dims[2], dims[1], dims[0]], data)?)
}

/// Sample each item's volume at the world coordinates in `coords`
/// `(n, 3, d, h, w)`. Out-of-volume reads are zero. Differentiable with
/// respect to the coordinates.
pub fn sample_volumes<T: Real>(
    g: &mut Graph<T>,
    sources: &[SampleSource],
    coords: Var,
) -> Result<Var> {
    let n = sources.len();
    let [d, h, w] = check_field(g.shape(coords), n, "sample_volumes")?;
    let s = d * h * w;
    let cv = g.value(coords).data();
    let mut values = vec![T::zero(); n * s];
    // array-index gradients are kept for the backward pass
    let mut grads = vec![[0.0f64; 3]; n * s];
    values
        .par_chunks_mut(s)
        .zip(grads.par_chunks_mut(s))
        .enumerate()
        .for_each(|(b, (vals, grs))| {
            let c = &cv[b * 3 * s..(b + 1) * 3 * s];
            for o in 0..s {
                let x = [c[o].f64(), c[s + o].f64(), c[2 * s + o].f64()];
                let (v, gp) = sources[b].read(x);
                vals[o] = T::lit(v);
                grs[o] = gp;
            }
        });
    let lins: Vec<Mat3> = sources.iter().map(|src| src.world_to_array.linear()).collect();
    let out = Tensor::from_vec(&[n, 1, d, h, w], values)?;
    Ok(g.push(out, &[coords], move |ctx| {
        let gy = ctx.grad.data();
        let mut dc = vec![T::zero(); n * 3 * s];
        for b in 0..n {
            let l = &lins[b];
            for o in 0..s {
                let go = gy[b * s + o].f64();
                if go == 0.0 {
                    continue;
                }
                let gp = grads[b * s + o];
                for a in 0..3 {
                    let dx = gp[0] * l[0][a] + gp[1] * l[1][a] + gp[2] * l[2][a];
                    dc[(b * 3 + a) * s + o] = T::lit(go * dx);
                }
            }
        }
        vec![Some(Tensor::from_vec(ctx.inputs[0].shape(), dc).unwrap())]
    }))
}

/// Apply one 3x3 matrix per batch item to a vector field `(n, 3, d, h, w)`.
pub fn map_vectors<T: Real>(g: &mut Graph<T>, x: Var, mats: &[Mat3]) -> Result<Var> {
    let n = mats.len();
    let [d, h, w] = check_field(g.shape(x), n, "map_vectors")?;
    let s = d * h * w;
    let xv = g.value(x).data();
    let mut out = vec![T::zero(); n * 3 * s];
    for (b, m) in mats.iter().enumerate() {
        let src = &xv[b * 3 * s..(b + 1) * 3 * s];
        for r in 0..3 {
            let dst = &mut out[(b * 3 + r) * s..(b * 3 + r + 1) * s];
            for c in 0..3 {
                let k = T::lit(m[r][c]);
                if k == T::zero() {
                    continue;
                }
                for (o, &v) in dst.iter_mut().zip(&src[c * s..(c + 1) * s]) {
                    *o += k * v;
                }
            }
        }
    }
    let mats = mats.to_vec();
    let out = Tensor::from_vec(&[n, 3, d, h, w], out)?;
    Ok(g.push(out, &[x], move |ctx| {
        let gy = ctx.grad.data();
        let mut dx = vec![T::zero(); n * 3 * s];
        for (b, m) in mats.iter().enumerate() {
            for c in 0..3 {
                let dst = &mut dx[(b * 3 + c) * s..(b * 3 + c + 1) * s];
                for r in 0..3 {
                    let k = T::lit(m[r][c]);
                    for (o, &v) in dst.iter_mut().zip(&gy[(b * 3 + r) * s..(b * 3 + r + 1) * s]) {
                        *o += k * v;
                    }
                }
            }
        }
        vec![Some(Tensor::from_vec(ctx.inputs[0].shape(), dx).unwrap())]
    }))
}

/// Finite-difference stencil along one axis: central inside, one-sided on
/// the faces. Returns `(lo, hi, 1/(hi - lo))` indices along the axis.
#[inline]
pub(crate) fn stencil(i: usize, n: usize) -> (usize, usize, f64) {
    if n < 2 {
        (i, i, 0.0)
    } else if i == 0 {
        (0, 1, 1.0)
    } else if i == n - 1 {
        (n - 2, n - 1, 1.0)
    } else {
        (i - 1, i + 1, 0.5)
    }
}

/// Jacobian matrix `F[a][b] = d phi_a / d r_b` of a planar field at voxel
/// `(i, j, k)`, by finite differences over the grid index.
pub(crate) fn jacobian_matrix(phi: &[f64], dims: [usize; 3], i: usize, j: usize, k: usize) -> Mat3 {
    let [nx, ny, nz] = dims;
    let s = nx * ny * nz;
    let at = |c: usize, x: usize, y: usize, z: usize| phi[c * s + x + nx * (y + ny * z)];
    let sx = stencil(i, nx);
    let sy = stencil(j, ny);
    let sz = stencil(k, nz);
    let mut f = [[0.0; 3]; 3];
    for (a, row) in f.iter_mut().enumerate() {
        row[0] = (at(a, sx.1, j, k) - at(a, sx.0, j, k)) * sx.2;
        row[1] = (at(a, i, sy.1, k) - at(a, i, sy.0, k)) * sy.2;
        row[2] = (at(a, i, j, sz.1) - at(a, i, j, sz.0)) * sz.2;
    }
    f
}

fn cofactors(f: &Mat3) -> Mat3 {
    let mut c = [[0.0; 3]; 3];
    for (a, row) in c.iter_mut().enumerate() {
        for (b, v) in row.iter_mut().enumerate() {
            let (a1, a2) = ((a + 1) % 3, (a + 2) % 3);
            let (b1, b2) = ((b + 1) % 3, (b + 2) % 3);
            *v = f[a1][b1] * f[a2][b2] - f[a1][b2] * f[a2][b1];
        }
    }
    c
}

/// Jacobian determinants `(n, 1, d, h, w)` of coordinate fields
/// `phi (n, 3, d, h, w)` with respect to the voxel grid.
pub fn jacobian_det<T: Real>(g: &mut Graph<T>, phi: Var) -> Result<Var> {
    let sh = g.shape(phi).to_vec();
    let n = sh[0];
    let [d, h, w] = check_field(&sh, n, "jacobian_det")?;
    let dims = [w, h, d];
    let s = d * h * w;
    let pv: Vec<f64> = g.value(phi).data().iter().map(|v| v.f64()).collect();
    let mut out = vec![T::zero(); n * s];
    let mut mats = vec![[[0.0; 3]; 3]; n * s];
    for b in 0..n {
        let field = &pv[b * 3 * s..(b + 1) * 3 * s];
        for k in 0..d {
            for j in 0..h {
                for i in 0..w {
                    let o = i + w * (j + h * k);
                    let f = jacobian_matrix(field, dims, i, j, k);
                    out[b * s + o] = T::lit(crate::geometry::det3(&f));
                    mats[b * s + o] = f;
                }
            }
        }
    }
    let out = Tensor::from_vec(&[n, 1, d, h, w], out)?;
    Ok(g.push(out, &[phi], move |ctx| {
        let gy = ctx.grad.data();
        let mut dphi = vec![0.0f64; n * 3 * s];
        for b in 0..n {
            let base = b * 3 * s;
            for k in 0..d {
                for j in 0..h {
                    for i in 0..w {
                        let o = i + w * (j + h * k);
                        let go = gy[b * s + o].f64();
                        if go == 0.0 {
                            continue;
                        }
                        // d det / d F = cofactor matrix
                        let c = cofactors(&mats[b * s + o]);
                        let sx = stencil(i, w);
                        let sy = stencil(j, h);
                        let sz = stencil(k, d);
                        for a in 0..3 {
                            let ch = base + a * s;
                            let gx = go * c[a][0] * sx.2;
                            dphi[ch + sx.1 + w * (j + h * k)] += gx;
                            dphi[ch + sx.0 + w * (j + h * k)] -= gx;
                            let gyv = go * c[a][1] * sy.2;
                            dphi[ch + i + w * (sy.1 + h * k)] += gyv;
                            dphi[ch + i + w * (sy.0 + h * k)] -= gyv;
                            let gz = go * c[a][2] * sz.2;
                            dphi[ch + i + w * (j + h * sz.1)] += gz;
                            dphi[ch + i + w * (j + h * sz.0)] -= gz;
                        }
                    }
                }
            }
        }
        let dphi = dphi.into_iter().map(T::lit).collect();
        vec![Some(Tensor::from_vec(ctx.inputs[0].shape(), dphi).unwrap())]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cofactor_matches_inverse_times_det() {
        let f = [[1.2, 0.1, -0.3], [0.2, 0.9, 0.05], [0.0, -0.4, 1.1]];
        let c = cofactors(&f);
        let det = crate::geometry::det3(&f);
        // F^T-cofactor identity: sum_b F[a][b] C[a'][b] = det * delta
        for a in 0..3 {
            for a2 in 0..3 {
                let v: f64 = (0..3).map(|b| f[a][b] * c[a2][b]).sum();
                let want = if a == a2 { det } else { 0.0 };
                assert!((v - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn stencil_is_one_sided_on_faces() {
        assert_eq!(stencil(0, 5), (0, 1, 1.0));
        assert_eq!(stencil(4, 5), (3, 4, 1.0));
        assert_eq!(stencil(2, 5), (1, 3, 0.5));
    }
}
