//! Volumes with world transforms: I/O, sampling, preprocessing and synthetic data.

mod field;
mod nifti;
mod prep;
mod raw;
mod saliency;
pub mod synth;

pub use field::{integrate_velocity_field, DisplacementField};
pub use nifti::{read_nifti, write_nifti, NiftiHeader, NiftiVolume};
pub use prep::{align_centers, center_at_origin, crop_nonzero, mirror_lr};
pub use raw::{read_raw, write_raw};
pub use saliency::SaliencySampler;

use std::path::Path;

use diffcore::ops::trilinear;
use diffcore::Padding;

use crate::geometry::{Affine, CoordinateField, Vec3};
use crate::{Error, Result};

/// Scalar 3D image with its array-to-world transform.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageStack {
    dims: [usize; 3],
    data: Vec<f32>,
    affine: Affine,
    inverse: Affine,
}

fn check_len(dims: [usize; 3], len: usize) -> Result<()> {
    if dims.iter().product::<usize>() != len || len == 0 {
        return Err(Error::ShapeMismatch(format!(
            "array of {len} values for dimensions {dims:?}"
        )));
    }
    Ok(())
}

impl ImageStack {
    /// `dims = (nx, ny, nz)`; `data` is stored with `x` fastest.
    pub fn new(dims: [usize; 3], data: Vec<f32>, affine: Affine) -> Result<Self> {
        check_len(dims, data.len())?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parse("image contains non-finite intensities".into()));
        }
        let inverse = affine.invert()?;
        Ok(Self {
            dims,
            data,
            affine,
            inverse,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn affine(&self) -> &Affine {
        &self.affine
    }

    pub fn world_to_array(&self) -> &Affine {
        &self.inverse
    }

    pub fn with_affine(&self, affine: Affine) -> Result<Self> {
        Self::new(self.dims, self.data.clone(), affine)
    }

    pub fn with_data(&self, data: Vec<f32>) -> Result<Self> {
        Self::new(self.dims, data, self.affine)
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    /// Length of each array axis in world millimetres.
    pub fn voxel_sizes(&self) -> Vec3 {
        voxel_sizes(&self.affine)
    }

    /// World position of the array centre.
    pub fn world_center(&self) -> Vec3 {
        array_center_world(&self.affine, self.dims)
    }

    /// Trilinear read at fractional array index; zero outside the array.
    pub fn sample_array(&self, p: Vec3) -> f64 {
        let [nx, ny, nz] = self.dims;
        trilinear([nz, ny, nx], |i| self.data[i] as f64, p, Padding::Zeros).0
    }

    pub fn sample_world(&self, x: Vec3) -> f64 {
        self.sample_array(self.inverse.apply(x))
    }

    /// Sample the image at every point of a world coordinate field.
    pub fn extract_patch(&self, field: &CoordinateField) -> Vec<f32> {
        field
            .coords
            .iter()
            .map(|&x| self.sample_world(x) as f32)
            .collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let vol = load_any(path)?;
        vol.into_image()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if is_raw(path) {
            write_raw(path, self.dims, &RawData::F32(self.data.clone()), &self.affine)
        } else {
            let vol = NiftiVolume::from_image(self);
            write_nifti(path, &vol)
        }
    }
}

/// Non-negative integer labels with an array-to-world transform.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVolume {
    dims: [usize; 3],
    data: Vec<u32>,
    affine: Affine,
    inverse: Affine,
}

impl LabelVolume {
    pub fn new(dims: [usize; 3], data: Vec<u32>, affine: Affine) -> Result<Self> {
        check_len(dims, data.len())?;
        let inverse = affine.invert()?;
        Ok(Self {
            dims,
            data,
            affine,
            inverse,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    pub fn affine(&self) -> &Affine {
        &self.affine
    }

    /// Nearest-neighbour read at a world position; 0 outside the array.
    pub fn sample_world(&self, x: Vec3) -> u32 {
        let p = self.inverse.apply(x);
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let r = (p[a] + 0.5).floor();
            if r < 0.0 || r >= self.dims[a] as f64 || !r.is_finite() {
                return 0;
            }
            idx[a] = r as usize;
        }
        self.data[idx[0] + self.dims[0] * (idx[1] + self.dims[1] * idx[2])]
    }

    pub fn label_set(&self) -> std::collections::BTreeSet<u32> {
        self.data.iter().copied().collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        load_any(path)?.into_labels()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if is_raw(path) {
            write_raw(path, self.dims, &RawData::U32(self.data.clone()), &self.affine)
        } else {
            write_nifti(path, &NiftiVolume::from_labels(self))
        }
    }
}

pub fn voxel_sizes(a: &Affine) -> Vec3 {
    let l = a.linear();
    let col = |c: usize| (l[0][c] * l[0][c] + l[1][c] * l[1][c] + l[2][c] * l[2][c]).sqrt();
    [col(0), col(1), col(2)]
}

pub fn array_center_world(a: &Affine, dims: [usize; 3]) -> Vec3 {
    a.apply([
        (dims[0] as f64 - 1.0) / 2.0,
        (dims[1] as f64 - 1.0) / 2.0,
        (dims[2] as f64 - 1.0) / 2.0,
    ])
}

/// Raw voxel payload as read from disk, before interpretation.
#[derive(Clone, Debug, PartialEq)]
pub enum RawData {
    F32(Vec<f32>),
    U32(Vec<u32>),
}

/// A loaded volume of either kind.
#[derive(Clone, Debug)]
pub struct LoadedVolume {
    pub dims: [usize; 3],
    pub data: RawData,
    pub affine: Affine,
}

impl LoadedVolume {
    pub fn into_image(self) -> Result<ImageStack> {
        let data = match self.data {
            RawData::F32(v) => v,
            RawData::U32(v) => v.into_iter().map(|x| x as f32).collect(),
        };
        ImageStack::new(self.dims, data, self.affine)
    }

    pub fn into_labels(self) -> Result<LabelVolume> {
        let data = match self.data {
            RawData::U32(v) => v,
            RawData::F32(v) => v
                .into_iter()
                .map(|x| {
                    if x >= 0.0 && x.fract() == 0.0 && x <= u32::MAX as f32 {
                        Ok(x as u32)
                    } else {
                        Err(Error::Parse(format!("label value {x} is not a non-negative integer")))
                    }
                })
                .collect::<Result<_>>()?,
        };
        LabelVolume::new(self.dims, data, self.affine)
    }
}

fn is_raw(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "json")
}

/// Read a NIfTI (`.nii`) or raw+JSON (`.json` header) volume.
pub fn load_any(path: &Path) -> Result<LoadedVolume> {
    if is_raw(path) {
        read_raw(path)
    } else {
        let vol = read_nifti(path)?;
        vol.into_loaded()
    }
}
