//! Affine algebra, the working canvas and patch transforms.
//!
//! Patches live on a unit grid: voxel `i` of a `P`-voxel patch sits at
//! `(i + 0.5) / P` in `[0, 1]`. A chain `T_ref * T_p0 * ... * T_pt` maps that
//! grid to world millimetres, where `T_ref` maps the normalized canvas cube to
//! world space and every `T_p` acts inside the normalized cube.

use rand::Rng;
use rand_distr::{Distribution, UnitSphere};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

/// 4x4 homogeneous transform with last row `(0, 0, 0, 1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    m: [[f64; 4]; 4],
}

impl Default for Affine {
    fn default() -> Self {
        Self::identity()
    }
}

impl Affine {
    pub fn identity() -> Self {
        Self::from_linear(
            [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            [0.0; 3],
        )
    }

    /// Build from the top three rows; the last row is fixed.
    pub fn from_rows(rows: [[f64; 4]; 3]) -> Self {
        Self {
            m: [rows[0], rows[1], rows[2], [0.0, 0.0, 0.0, 1.0]],
        }
    }

    pub fn from_linear(lin: Mat3, t: Vec3) -> Self {
        let mut rows = [[0.0; 4]; 3];
        for r in 0..3 {
            rows[r][..3].copy_from_slice(&lin[r]);
            rows[r][3] = t[r];
        }
        Self::from_rows(rows)
    }

    pub fn translation(t: Vec3) -> Self {
        let mut a = Self::identity();
        for r in 0..3 {
            a.m[r][3] = t[r];
        }
        a
    }

    pub fn scaling(s: Vec3) -> Self {
        Self::from_linear(
            [[s[0], 0.0, 0.0], [0.0, s[1], 0.0], [0.0, 0.0, s[2]]],
            [0.0; 3],
        )
    }

    pub fn uniform_scaling(s: f64) -> Self {
        Self::scaling([s; 3])
    }

    /// Rotation by `angle` radians about a unit `axis` (Rodrigues).
    pub fn rotation(axis: Vec3, angle: f64) -> Self {
        let n = norm(axis);
        let [x, y, z] = [axis[0] / n, axis[1] / n, axis[2] / n];
        let (s, c) = angle.sin_cos();
        let k = 1.0 - c;
        Self::from_linear(
            [
                [c + x * x * k, x * y * k - z * s, x * z * k + y * s],
                [y * x * k + z * s, c + y * y * k, y * z * k - x * s],
                [z * x * k - y * s, z * y * k + x * s, c + z * z * k],
            ],
            [0.0; 3],
        )
    }

    pub fn matrix(&self) -> &[[f64; 4]; 4] {
        &self.m
    }

    pub fn linear(&self) -> Mat3 {
        let mut l = [[0.0; 3]; 3];
        for r in 0..3 {
            l[r].copy_from_slice(&self.m[r][..3]);
        }
        l
    }

    pub fn translation_part(&self) -> Vec3 {
        [self.m[0][3], self.m[1][3], self.m[2][3]]
    }

    pub fn with_translation(mut self, t: Vec3) -> Self {
        for r in 0..3 {
            self.m[r][3] = t[r];
        }
        self
    }

    /// Same linear part, zero translation.
    pub fn linear_only(&self) -> Self {
        self.with_translation([0.0; 3])
    }

    pub fn det3(&self) -> f64 {
        det3(&self.linear())
    }

    /// `self * other`: apply `other` first.
    pub fn compose(&self, other: &Affine) -> Affine {
        let mut out = [[0.0; 4]; 4];
        for (r, row) in out.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = (0..4).map(|k| self.m[r][k] * other.m[k][c]).sum();
            }
        }
        out[3] = [0.0, 0.0, 0.0, 1.0];
        Affine { m: out }
    }

    pub fn invert(&self) -> Result<Affine> {
        let l = self.linear();
        let det = det3(&l);
        if !det.is_finite() || det.abs() <= 1e-12 {
            return Err(Error::Singular(det));
        }
        let inv = inv3(&l, det);
        let t = self.translation_part();
        let ti = mat_vec(&inv, t);
        Ok(Affine::from_linear(inv, [-ti[0], -ti[1], -ti[2]]))
    }

    pub fn apply(&self, p: Vec3) -> Vec3 {
        let mut out = [0.0; 3];
        for (r, o) in out.iter_mut().enumerate() {
            *o = self.m[r][0] * p[0] + self.m[r][1] * p[1] + self.m[r][2] * p[2] + self.m[r][3];
        }
        out
    }

    pub fn apply_vector(&self, v: Vec3) -> Vec3 {
        mat_vec(&self.linear(), v)
    }

    pub fn max_abs_diff(&self, other: &Affine) -> f64 {
        let mut d: f64 = 0.0;
        for r in 0..4 {
            for c in 0..4 {
                d = d.max((self.m[r][c] - other.m[r][c]).abs());
            }
        }
        d
    }

    pub fn is_finite(&self) -> bool {
        self.m.iter().flatten().all(|v| v.is_finite())
    }
}

pub fn norm(v: Vec3) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

pub fn det3(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

fn inv3(m: &Mat3, det: f64) -> Mat3 {
    let c = |r0: usize, r1: usize, c0: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
    [
        [c(1, 2, 1, 2) / det, -c(0, 2, 1, 2) / det, c(0, 1, 1, 2) / det],
        [-c(1, 2, 0, 2) / det, c(0, 2, 0, 2) / det, -c(0, 1, 0, 2) / det],
        [c(1, 2, 0, 1) / det, -c(0, 2, 0, 1) / det, c(0, 1, 0, 1) / det],
    ]
}

pub fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

/// Axis-aligned world box enclosing the fixed image; the normalized cube
/// `[0, 1]^3` maps onto it through `t_ref`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Canvas {
    pub t_ref: Affine,
    pub origin: Vec3,
    pub extent_mm: Vec3,
}

impl Canvas {
    /// Tight bounding box of the eight corner voxel centres of an array with
    /// `dims = (nx, ny, nz)` under `affine`.
    pub fn enclosing(affine: &Affine, dims: [usize; 3]) -> Result<Canvas> {
        if dims.iter().any(|&n| n < 2) {
            return Err(Error::DegenerateVolume(format!(
                "array dimensions {dims:?} must all be at least 2"
            )));
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for corner in 0..8 {
            let r = [
                if corner & 1 == 0 { 0.0 } else { (dims[0] - 1) as f64 },
                if corner & 2 == 0 { 0.0 } else { (dims[1] - 1) as f64 },
                if corner & 4 == 0 { 0.0 } else { (dims[2] - 1) as f64 },
            ];
            let w = affine.apply(r);
            for a in 0..3 {
                lo[a] = lo[a].min(w[a]);
                hi[a] = hi[a].max(w[a]);
            }
        }
        let extent = [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]];
        if extent.iter().any(|&e| !(e > 0.0)) {
            return Err(Error::DegenerateVolume(format!(
                "canvas extent {extent:?} is not positive"
            )));
        }
        Ok(Canvas {
            t_ref: Affine::translation(lo).compose(&Affine::scaling(extent)),
            origin: lo,
            extent_mm: extent,
        })
    }

    pub fn max_edge(&self) -> f64 {
        self.extent_mm.iter().copied().fold(0.0, f64::max)
    }

    pub fn volume(&self) -> f64 {
        self.extent_mm.iter().product()
    }

    pub fn center(&self) -> Vec3 {
        [
            self.origin[0] + 0.5 * self.extent_mm[0],
            self.origin[1] + 0.5 * self.extent_mm[1],
            self.origin[2] + 0.5 * self.extent_mm[2],
        ]
    }

    pub fn to_normalized(&self, world: Vec3) -> Vec3 {
        [
            (world[0] - self.origin[0]) / self.extent_mm[0],
            (world[1] - self.origin[1]) / self.extent_mm[1],
            (world[2] - self.origin[2]) / self.extent_mm[2],
        ]
    }

    pub fn contains(&self, world: Vec3, tol: f64) -> bool {
        (0..3).all(|a| {
            world[a] >= self.origin[a] - tol && world[a] <= self.origin[a] + self.extent_mm[a] + tol
        })
    }
}

/// Random rotation/scale ranges applied to a transform.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentRange {
    pub max_rotation_deg: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub max_shift_mm: f64,
}

impl AugmentRange {
    pub const NONE: AugmentRange = AugmentRange {
        max_rotation_deg: 0.0,
        scale_min: 1.0,
        scale_max: 1.0,
        max_shift_mm: 0.0,
    };

    pub fn is_none(&self) -> bool {
        *self == Self::NONE
    }

    /// Draw a rotation (uniform axis, uniform angle within range) followed by an
    /// isotropic scale, about the origin.
    pub fn sample_linear<R: Rng>(&self, rng: &mut R) -> Affine {
        let mut out = Affine::identity();
        if self.max_rotation_deg > 0.0 {
            let axis: [f64; 3] = UnitSphere.sample(rng);
            let max = self.max_rotation_deg.to_radians();
            let angle = rng.random_range(-max..=max);
            out = Affine::rotation(axis, angle);
        }
        if self.scale_max > self.scale_min {
            let s = rng.random_range(self.scale_min..=self.scale_max);
            out = out.compose(&Affine::uniform_scaling(s));
        } else if self.scale_min != 1.0 {
            out = out.compose(&Affine::uniform_scaling(self.scale_min));
        }
        out
    }

    pub fn sample_shift<R: Rng>(&self, rng: &mut R) -> Vec3 {
        if self.max_shift_mm <= 0.0 {
            return [0.0; 3];
        }
        let m = self.max_shift_mm;
        [
            rng.random_range(-m..=m),
            rng.random_range(-m..=m),
            rng.random_range(-m..=m),
        ]
    }
}

/// Rotation angle (radians) of the orthogonal part of a rotation-times-scale matrix.
pub fn rotation_angle(lin: &Mat3) -> f64 {
    let s = det3(lin).abs().cbrt();
    let tr = (lin[0][0] + lin[1][1] + lin[2][2]) / s;
    ((tr - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
}

/// First patch transform: maps the unit patch grid into normalized canvas
/// coordinates so the patch is centred at `center` (world mm) with world edge
/// `patch_size * voxel_mm`, then rotated and scaled about its centre.
pub fn initial_patch_transform<R: Rng>(
    canvas: &Canvas,
    center: Vec3,
    voxel_mm: f64,
    patch_size: usize,
    aug: &AugmentRange,
    rng: &mut R,
) -> Affine {
    let edge = voxel_mm * patch_size as f64;
    let world = Affine::translation(center)
        .compose(&aug.sample_linear(rng))
        .compose(&Affine::uniform_scaling(edge))
        .compose(&Affine::translation([-0.5; 3]));
    let to_norm = Affine::scaling([
        1.0 / canvas.extent_mm[0],
        1.0 / canvas.extent_mm[1],
        1.0 / canvas.extent_mm[2],
    ])
    .compose(&Affine::translation([
        -canvas.origin[0],
        -canvas.origin[1],
        -canvas.origin[2],
    ]));
    to_norm.compose(&world)
}

/// Zoom into the unit cube: `r -> zoom * r + shift`, with the shift drawn
/// uniformly so the child cube stays inside the parent.
pub fn nested_patch_transform<R: Rng>(zoom: f64, rng: &mut R) -> Affine {
    let room = (1.0 - zoom).max(0.0);
    let shift = if room > 0.0 {
        [
            rng.random_range(0.0..=room),
            rng.random_range(0.0..=room),
            rng.random_range(0.0..=room),
        ]
    } else {
        [0.0; 3]
    };
    Affine::translation(shift).compose(&Affine::uniform_scaling(zoom))
}

/// Zoom into the centre of the unit cube.
pub fn centered_nested_transform(zoom: f64) -> Affine {
    let s = 0.5 * (1.0 - zoom);
    Affine::translation([s; 3]).compose(&Affine::uniform_scaling(zoom))
}

/// Compose `t_ref * chain[0] * ... * chain[t]`.
pub fn chain_transform(canvas: &Canvas, chain: &[Affine]) -> Affine {
    chain
        .iter()
        .fold(canvas.t_ref, |acc, t| acc.compose(t))
}

/// Linear map from patch-voxel displacements to world millimetres at the
/// last transform of `chain`.
pub fn world_scaler(canvas: &Canvas, chain: &[Affine], patch_size: usize) -> Affine {
    let lin = chain_transform(canvas, chain).linear();
    let p = patch_size as f64;
    let mut out = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            out[r][c] = lin[r][c] / p;
        }
    }
    Affine::from_linear(out, [0.0; 3])
}

/// Cell-centred unit grid coordinate of voxel `i` in a `p`-voxel patch.
#[inline]
pub fn unit_coord(i: usize, p: usize) -> f64 {
    (i as f64 + 0.5) / p as f64
}

/// Field of world coordinates on a patch, stored as `(x, y, z)` per voxel
/// with `x` fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct CoordinateField {
    pub dims: [usize; 3],
    pub coords: Vec<Vec3>,
}

impl CoordinateField {
    /// Image of the `p^3` unit grid under `t`.
    pub fn from_affine(t: &Affine, p: usize) -> Self {
        let mut coords = Vec::with_capacity(p * p * p);
        for k in 0..p {
            for j in 0..p {
                for i in 0..p {
                    coords.push(t.apply([unit_coord(i, p), unit_coord(j, p), unit_coord(k, p)]));
                }
            }
        }
        Self {
            dims: [p, p, p],
            coords,
        }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Channel-planar copy: all `x`, then all `y`, then all `z`.
    pub fn planar(&self) -> Vec<f64> {
        let n = self.coords.len();
        let mut out = vec![0.0; 3 * n];
        for (i, c) in self.coords.iter().enumerate() {
            out[i] = c[0];
            out[n + i] = c[1];
            out[2 * n + i] = c[2];
        }
        out
    }

    pub fn bounding_box(&self) -> (Vec3, Vec3) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for c in &self.coords {
            for a in 0..3 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a]);
            }
        }
        (lo, hi)
    }
}
