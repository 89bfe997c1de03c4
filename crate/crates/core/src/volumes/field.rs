//! Dense displacement fields on a world-referenced grid.

use std::path::Path;

use diffcore::ops::trilinear;
use diffcore::{Graph, Padding, Tensor};

use crate::geometry::{det3, Affine, Vec3};
use crate::volumes::nifti::{read_nifti, write_nifti, NiftiVolume, Payload};
use crate::{Error, Result};

/// Per-node displacement vectors in millimetres. Node `(i, j, k)` sits at
/// world position `affine * (i, j, k)`. Components are stored planar.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField {
    dims: [usize; 3],
    affine: Affine,
    inverse: Affine,
    data: Vec<f64>,
}

impl DisplacementField {
    pub fn zeros(dims: [usize; 3], affine: Affine) -> Result<Self> {
        let n: usize = dims.iter().product();
        Self::new(dims, affine, vec![0.0; 3 * n])
    }

    pub fn new(dims: [usize; 3], affine: Affine, data: Vec<f64>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n == 0 || data.len() != 3 * n {
            return Err(Error::ShapeMismatch(format!(
                "field of {} values on grid {dims:?}",
                data.len()
            )));
        }
        let inverse = affine.invert()?;
        Ok(Self {
            dims,
            affine,
            inverse,
            data,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn affine(&self) -> &Affine {
        &self.affine
    }

    pub fn world_to_grid(&self) -> &Affine {
        &self.inverse
    }

    pub fn nodes(&self) -> usize {
        self.dims.iter().product()
    }

    /// Planar components: all `x`, then `y`, then `z`.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn at(&self, idx: usize) -> Vec3 {
        let n = self.nodes();
        [self.data[idx], self.data[n + idx], self.data[2 * n + idx]]
    }

    #[inline]
    pub fn set(&mut self, idx: usize, v: Vec3) {
        let n = self.nodes();
        self.data[idx] = v[0];
        self.data[n + idx] = v[1];
        self.data[2 * n + idx] = v[2];
    }

    pub fn node_world(&self, idx: usize) -> Vec3 {
        let [nx, ny, _] = self.dims;
        let p = [
            (idx % nx) as f64,
            ((idx / nx) % ny) as f64,
            (idx / (nx * ny)) as f64,
        ];
        self.affine.apply(p)
    }

    /// Linear interpolation at a world point, clamped to the grid border.
    pub fn sample(&self, x: Vec3) -> Vec3 {
        let p = self.inverse.apply(x);
        let [nx, ny, nz] = self.dims;
        let n = self.nodes();
        let mut out = [0.0; 3];
        for (c, o) in out.iter_mut().enumerate() {
            let comp = &self.data[c * n..(c + 1) * n];
            *o = trilinear([nz, ny, nx], |i| comp[i], p, Padding::Border).0;
        }
        out
    }

    /// Resample onto another grid by linear interpolation.
    pub fn resample(&self, dims: [usize; 3], affine: Affine) -> Result<Self> {
        let mut out = Self::zeros(dims, affine)?;
        for idx in 0..out.nodes() {
            let v = self.sample(out.node_world(idx));
            out.set(idx, v);
        }
        Ok(out)
    }

    pub fn add_constant(&mut self, c: Vec3) {
        let n = self.nodes();
        for a in 0..3 {
            self.data[a * n..(a + 1) * n].iter_mut().for_each(|v| *v += c[a]);
        }
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if other.dims != self.dims {
            return Err(Error::ShapeMismatch("adding fields on different grids".into()));
        }
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn max_norm(&self) -> f64 {
        (0..self.nodes())
            .map(|i| crate::geometry::norm(self.at(i)))
            .fold(0.0, f64::max)
    }

    /// Gradient of component `c` along grid axis `a` at node `(i, j, k)`:
    /// central differences inside, one-sided on faces.
    fn diff(&self, c: usize, a: usize, ijk: [usize; 3]) -> f64 {
        let n = self.dims[a];
        if n < 2 {
            return 0.0;
        }
        let comp = &self.data[c * self.nodes()..(c + 1) * self.nodes()];
        let idx = |p: [usize; 3]| p[0] + self.dims[0] * (p[1] + self.dims[1] * p[2]);
        let (mut lo, mut hi) = (ijk, ijk);
        let step = if ijk[a] == 0 {
            hi[a] += 1;
            1.0
        } else if ijk[a] == n - 1 {
            lo[a] -= 1;
            1.0
        } else {
            lo[a] -= 1;
            hi[a] += 1;
            2.0
        };
        (comp[idx(hi)] - comp[idx(lo)]) / step
    }

    /// Jacobian determinant of `x -> x + D(x)` expressed in grid-voxel units,
    /// at every node.
    pub fn jacobian_determinants(&self) -> Vec<f64> {
        let linv = self.inverse.linear();
        let [nx, ny, nz] = self.dims;
        let mut out = Vec::with_capacity(self.nodes());
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let mut g = [[0.0; 3]; 3];
                    for (c, row) in g.iter_mut().enumerate() {
                        for (a, v) in row.iter_mut().enumerate() {
                            *v = self.diff(c, a, [i, j, k]);
                        }
                    }
                    let mut jm = [[0.0; 3]; 3];
                    for r in 0..3 {
                        for a in 0..3 {
                            jm[r][a] = (0..3).map(|c| linv[r][c] * g[c][a]).sum::<f64>()
                                + if r == a { 1.0 } else { 0.0 };
                        }
                    }
                    out.push(det3(&jm));
                }
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let planar: Vec<f32> = self.data.iter().map(|&v| v as f32).collect();
        write_nifti(path, &NiftiVolume::from_vector_field(self.dims, &planar, &self.affine)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let vol = read_nifti(path)?;
        if vol.header.components()? != 3 {
            return Err(Error::Parse("expected a 3-component displacement field".into()));
        }
        let dims = vol.header.dims()?;
        let affine = vol.header.affine()?;
        let Payload::F32(v) = vol.payload else {
            return Err(Error::Parse("displacement fields must be float32".into()));
        };
        Self::new(dims, affine, v.into_iter().map(|x| x as f64).collect())
    }
}

/// Scaling-and-squaring integration of a stationary velocity field given in
/// millimetres on the grid of `template`; returns the displacement in mm.
pub fn integrate_velocity_field(velocity: &DisplacementField, steps: usize) -> Result<DisplacementField> {
    let [nx, ny, nz] = velocity.dims();
    let n = velocity.nodes();
    let linv = velocity.world_to_grid().linear();
    let lin = velocity.affine().linear();
    let to_grid = |v: Vec3| crate::geometry::mat_vec(&linv, v);
    let mut vox = vec![0.0; 3 * n];
    for i in 0..n {
        let g = to_grid(velocity.at(i));
        for a in 0..3 {
            vox[a * n + i] = g[a];
        }
    }
    let mut graph = Graph::<f64>::new();
    let v = graph.constant(Tensor::from_vec(&[1, 3, nz, ny, nx], vox)?);
    let d = graph.integrate_velocity(v, steps)?;
    let dv = graph.value(d).data();
    let mut out = DisplacementField::zeros(velocity.dims(), *velocity.affine())?;
    for i in 0..n {
        let w = crate::geometry::mat_vec(&lin, [dv[i], dv[n + i], dv[2 * n + i]]);
        out.set(i, w);
    }
    Ok(out)
}
