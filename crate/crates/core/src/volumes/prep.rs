//! World-frame preprocessing: centring, mirroring and zero cropping.

use crate::geometry::{Affine, Vec3};
use crate::volumes::ImageStack;
use crate::{Error, Result};

/// Shift the world transform so the array centre sits at the origin.
pub fn center_at_origin(img: &ImageStack) -> Result<ImageStack> {
    let c = img.world_center();
    img.with_affine(Affine::translation([-c[0], -c[1], -c[2]]).compose(img.affine()))
}

/// Translate `moving` so its world centre coincides with that of `fixed`.
/// Returns the translated image and the applied shift.
pub fn align_centers(moving: &ImageStack, fixed: &ImageStack) -> Result<(ImageStack, Vec3)> {
    let cm = moving.world_center();
    let cf = fixed.world_center();
    let shift = [cf[0] - cm[0], cf[1] - cm[1], cf[2] - cm[2]];
    let out = moving.with_affine(Affine::translation(shift).compose(moving.affine()))?;
    Ok((out, shift))
}

/// Mirror the world content about the plane `x = x_center` through the array
/// centre. The array is flipped along the axis that best matches world `x`,
/// so axis-aligned images keep their transform.
pub fn mirror_lr(img: &ImageStack) -> Result<ImageStack> {
    let lin = img.affine().linear();
    let axis = (0..3)
        .max_by(|&a, &b| lin[0][a].abs().total_cmp(&lin[0][b].abs()))
        .unwrap_or(0);
    let [nx, ny, nz] = img.dims();
    let n = img.dims()[axis];
    let mut data = vec![0f32; img.len()];
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let mut src = [i, j, k];
                src[axis] = n - 1 - src[axis];
                data[img.index(i, j, k)] = img.data()[img.index(src[0], src[1], src[2])];
            }
        }
    }
    // Array flip: r_axis -> (n - 1) - r_axis.
    let mut flip = [[0.0; 4]; 3];
    for (a, row) in flip.iter_mut().enumerate() {
        row[a] = if a == axis { -1.0 } else { 1.0 };
    }
    flip[axis][3] = (n - 1) as f64;
    let flip = Affine::from_rows(flip);
    let cx = img.world_center()[0];
    let reflect = Affine::from_rows([
        [-1.0, 0.0, 0.0, 2.0 * cx],
        [0.0, 1.0, 0.0, 0.0],
        [0.0, 0.0, 1.0, 0.0],
    ]);
    ImageStack::new(img.dims(), data, reflect.compose(img.affine()).compose(&flip))
}

/// Crop to the bounding box of non-zero voxels, keeping world positions.
pub fn crop_nonzero(img: &ImageStack) -> Result<ImageStack> {
    let [nx, ny, nz] = img.dims();
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                if img.data()[img.index(i, j, k)] != 0.0 {
                    for (a, v) in [i, j, k].into_iter().enumerate() {
                        lo[a] = lo[a].min(v);
                        hi[a] = hi[a].max(v);
                    }
                }
            }
        }
    }
    if lo[0] == usize::MAX {
        return Err(Error::EmptyImage);
    }
    let dims = [hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1];
    let mut data = Vec::with_capacity(dims.iter().product());
    for k in lo[2]..=hi[2] {
        for j in lo[1]..=hi[1] {
            for i in lo[0]..=hi[0] {
                data.push(img.data()[img.index(i, j, k)]);
            }
        }
    }
    let shift = Affine::translation([lo[0] as f64, lo[1] as f64, lo[2] as f64]);
    ImageStack::new(dims, data, img.affine().compose(&shift))
}
