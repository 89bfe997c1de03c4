//! Scale schedules, nested patch chains and the single-scale block.

use std::path::Path;
use std::sync::Arc;

use diffcore::optim::AdamW;
use diffcore::{Binding, Checkpoint, Graph, Padding, ParamStore, Real, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{
    chain_transform, initial_patch_transform, mat_vec, nested_patch_transform, unit_coord,
    world_scaler, Affine, AugmentRange, Canvas, CoordinateField, Mat3, Vec3,
};
use crate::heads::{BnMode, HeadConfig, HeadKind, HeadOutput};
use crate::ops::{coords_tensor, map_vectors, sample_volumes, SampleSource};
use crate::volumes::ImageStack;
use crate::{Error, Result};

/// Isotropic patch voxel size per scale, coarse to fine, for a constant patch
/// array size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleSchedule {
    pub patch_size: usize,
    pub voxel_mm: Vec<f64>,
    pub head_group: Vec<usize>,
}

/// `floor(t * groups / n)`: consecutive scales share a head.
pub fn default_groups(n_scales: usize, groups: usize) -> Vec<usize> {
    (0..n_scales).map(|t| t * groups / n_scales).collect()
}

impl ScaleSchedule {
    /// Linear voxel sizes from `coarse` to `fine` mm.
    pub fn linear(coarse: f64, fine: f64, n_scales: usize, patch_size: usize) -> Result<Self> {
        if n_scales == 0 || patch_size == 0 {
            return Err(Error::Config("schedule needs at least one scale and a positive patch size".into()));
        }
        if !(fine > 0.0) || !(coarse.is_finite()) {
            return Err(Error::Config(format!("invalid voxel sizes {coarse} .. {fine}")));
        }
        if n_scales > 1 && coarse <= fine {
            return Err(Error::IncompatibleSchedule(format!(
                "coarsest voxel {coarse} mm is not larger than finest {fine} mm"
            )));
        }
        let voxel_mm = (0..n_scales)
            .map(|t| {
                if n_scales == 1 {
                    coarse
                } else {
                    let a = t as f64 / (n_scales - 1) as f64;
                    if t == n_scales - 1 {
                        fine
                    } else {
                        coarse + a * (fine - coarse)
                    }
                }
            })
            .collect();
        Ok(Self {
            patch_size,
            voxel_mm,
            head_group: default_groups(n_scales, 3.min(n_scales)),
        })
    }

    pub fn n_scales(&self) -> usize {
        self.voxel_mm.len()
    }

    pub fn n_groups(&self) -> usize {
        self.head_group.iter().max().map_or(0, |g| g + 1)
    }

    /// Patch world edge at scale `t`.
    pub fn edge_mm(&self, t: usize) -> f64 {
        self.voxel_mm[t] * self.patch_size as f64
    }

    /// Relative size of a child patch at `t` inside its parent at `t - 1`.
    pub fn zoom(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.voxel_mm[t] / self.voxel_mm[t - 1]
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.voxel_mm.is_empty() || self.head_group.len() != self.voxel_mm.len() {
            return Err(Error::IncompatibleSchedule("schedule and head groups differ in length".into()));
        }
        if self.voxel_mm.windows(2).any(|w| !(w[1] < w[0])) || self.voxel_mm.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::IncompatibleSchedule(format!(
                "voxel sizes must be positive and strictly decreasing: {:?}",
                self.voxel_mm
            )));
        }
        Ok(())
    }
}

/// Schedule spanning the largest canvas of `images` at the coarsest scale and
/// the smallest voxel spacing at the finest.
pub fn build_schedule(images: &[ImageStack], n_scales: usize, patch_size: usize) -> Result<ScaleSchedule> {
    if images.is_empty() {
        return Err(Error::Config("schedule needs at least one image".into()));
    }
    let mut edge: f64 = 0.0;
    let mut fine = f64::INFINITY;
    for img in images {
        edge = edge.max(Canvas::enclosing(img.affine(), img.dims())?.max_edge());
        fine = img.voxel_sizes().iter().copied().fold(fine, f64::min);
    }
    ScaleSchedule::linear(edge / patch_size as f64, fine, n_scales, patch_size)
}

/// Head configuration per group and the schedule they serve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub schedule: ScaleSchedule,
    pub heads: Vec<HeadConfig>,
}

impl ModelSpec {
    /// Affine heads for every group but the last, which is dense unless
    /// `affine_only`.
    pub fn new(schedule: ScaleSchedule, affine_widths: &[usize], dense_widths: &[usize], affine_only: bool) -> Result<Self> {
        let groups = schedule.n_groups();
        let p = schedule.patch_size;
        let heads = (0..groups)
            .map(|gid| {
                if gid + 1 == groups && groups > 1 && !affine_only {
                    HeadConfig::dense(gid, p).with_widths(dense_widths.to_vec())
                } else {
                    HeadConfig::affine(gid, p).with_widths(affine_widths.to_vec())
                }
            })
            .collect();
        let spec = Self { schedule, heads };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.heads.len() != self.schedule.n_groups() {
            return Err(Error::IncompatibleSchedule(format!(
                "{} heads for {} groups",
                self.heads.len(),
                self.schedule.n_groups()
            )));
        }
        for (i, h) in self.heads.iter().enumerate() {
            if h.group != i || h.patch_size != self.schedule.patch_size {
                return Err(Error::IncompatibleSchedule(format!("head {i} does not match the schedule")));
            }
            h.validate()?;
        }
        Ok(())
    }

    pub fn head(&self, t: usize) -> &HeadConfig {
        &self.heads[self.schedule.head_group[t]]
    }

    pub fn init<R: Rng>(&self, rng: &mut R) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for h in &self.heads {
            h.init(&mut store, rng)?;
        }
        Ok(store)
    }

    pub fn kinds(&self) -> Vec<HeadKind> {
        self.heads.iter().map(|h| h.kind).collect()
    }
}

const MODEL_KIND: &str = "patchmorph-model";

/// Trained (or freshly initialized) heads together with their layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub store: ParamStore,
}

impl Model {
    pub fn init<R: Rng>(spec: ModelSpec, rng: &mut R) -> Result<Self> {
        let store = spec.init(rng)?;
        Ok(Self { spec, store })
    }

    /// Checkpoint holding the parameters, optional optimizer state and extra
    /// metadata entries.
    pub fn to_checkpoint(&self, optimizer: Option<&AdamW>, extra: serde_json::Map<String, serde_json::Value>) -> Result<Checkpoint> {
        let mut meta = extra;
        meta.insert("kind".into(), MODEL_KIND.into());
        meta.insert("spec".into(), serde_json::to_value(&self.spec)?);
        Ok(Checkpoint::from_state(serde_json::Value::Object(meta), &self.store, optimizer)?)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta.get("kind").and_then(|v| v.as_str()) != Some(MODEL_KIND) {
            return Err(Error::Parse("checkpoint does not hold a registration model".into()));
        }
        let spec: ModelSpec = serde_json::from_value(ck.meta["spec"].clone())?;
        spec.validate()?;
        let store = ck.params();
        for h in &spec.heads {
            if !store.params().any(|(name, _)| name.starts_with(&h.prefix())) {
                return Err(Error::IncompatibleSchedule(format!("checkpoint lacks parameters of head {}", h.group)));
            }
        }
        Ok(Self { spec, store })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Nested patch transforms of one training sample, coarse to fine.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchChain {
    pub canvas: Canvas,
    /// `T_p0` followed by one nested transform per finer scale.
    pub transforms: Vec<Affine>,
}

impl PatchChain {
    /// Start a chain at `center` with the coarsest scale's voxel size.
    pub fn start<R: Rng>(
        canvas: Canvas,
        center: Vec3,
        schedule: &ScaleSchedule,
        aug: &AugmentRange,
        rng: &mut R,
    ) -> Self {
        let t0 = initial_patch_transform(&canvas, center, schedule.voxel_mm[0], schedule.patch_size, aug, rng);
        Self {
            canvas,
            transforms: vec![t0],
        }
    }

    pub fn depth(&self) -> usize {
        self.transforms.len()
    }

    /// Append a random nested transform with the given zoom.
    pub fn descend<R: Rng>(&mut self, zoom: f64, rng: &mut R) -> Affine {
        let tp = nested_patch_transform(zoom, rng);
        self.transforms.push(tp);
        tp
    }

    /// Patch-to-world map at the deepest scale.
    pub fn to_world(&self) -> Affine {
        chain_transform(&self.canvas, &self.transforms)
    }

    pub fn coords(&self, patch_size: usize) -> CoordinateField {
        CoordinateField::from_affine(&self.to_world(), patch_size)
    }

    /// Voxel-to-millimetre map of displacements at the deepest scale.
    pub fn world_scaler(&self, patch_size: usize) -> Mat3 {
        world_scaler(&self.canvas, &self.transforms, patch_size).linear()
    }
}

/// Grid `(n, 3, P, P, P)` of parent patch indices for each child voxel, used
/// to carry a displacement from one scale to the next.
pub fn descend_grid<T: Real>(nested: &[Affine], patch_size: usize) -> Result<Tensor<T>> {
    let p = patch_size;
    let s = p * p * p;
    let pf = p as f64;
    let mut data = vec![T::zero(); nested.len() * 3 * s];
    for (b, tp) in nested.iter().enumerate() {
        for o in 0..s {
            let r = [unit_coord(o % p, p), unit_coord((o / p) % p, p), unit_coord(o / (p * p), p)];
            let q = tp.apply(r);
            for a in 0..3 {
                data[(b * 3 + a) * s + o] = T::lit(pf * q[a] - 0.5);
            }
        }
    }
    Ok(Tensor::from_vec(&[nested.len(), 3, p, p, p], data)?)
}

/// Carry `d_out` of the parent scale into the child patches.
pub fn descend_displacement<T: Real>(g: &mut Graph<T>, d_out: Var, nested: &[Affine], patch_size: usize) -> Result<Var> {
    let grid = g.constant(descend_grid(nested, patch_size)?);
    Ok(g.grid_sample(d_out, grid, Padding::Border)?)
}

/// Fixed and moving sources of one batch, plus per-item patch geometry.
pub struct BlockInput<'a> {
    pub fixed: &'a [SampleSource],
    pub moving: &'a [SampleSource],
    pub coords: &'a [CoordinateField],
    /// Voxel-to-mm displacement map per item.
    pub world_scalers: &'a [Mat3],
}

pub struct BlockOutput<T> {
    pub x_f: Var,
    pub p_f: Var,
    /// `T_w d_local`, the increment in mm.
    pub d_hat: Var,
    pub d_out: Var,
    pub head: HeadOutput<T>,
}

/// Fixed patches sampled at constant coordinates.
pub fn sample_fixed<T: Real>(sources: &[SampleSource], coords: &[CoordinateField]) -> Result<Tensor<T>> {
    let p = coords
        .first()
        .map(|c| c.dims)
        .ok_or_else(|| Error::ShapeMismatch("empty batch".into()))?;
    let mut data = Vec::with_capacity(coords.len() * coords[0].len());
    for (src, c) in sources.iter().zip(coords) {
        data.extend(c.coords.iter().map(|&x| T::lit(src.sample(x))));
    }
    Ok(Tensor::from_vec(&[coords.len(), 1, p[2], p[1], p[0]], data)?)
}

/// One scale: sample the patch pair at `X_f` and `X_f + d_in`, predict the
/// local displacement and return `d_out = T_w d_local + d_in` in mm.
pub fn block_forward<T: Real>(
    g: &mut Graph<T>,
    head: &HeadConfig,
    params: &Binding,
    store: &ParamStore,
    mode: BnMode,
    input: &BlockInput<'_>,
    d_in: Option<Var>,
) -> Result<BlockOutput<T>> {
    let n = input.coords.len();
    if input.fixed.len() != n || input.moving.len() != n || input.world_scalers.len() != n {
        return Err(Error::ShapeMismatch("block inputs disagree on batch size".into()));
    }
    let x_f = g.constant(coords_tensor(input.coords)?);
    let p_f = g.constant(sample_fixed(input.fixed, input.coords)?);
    let x_m = match d_in {
        Some(d) => g.add(x_f, d)?,
        None => x_f,
    };
    let p_m = sample_volumes(g, input.moving, x_m)?;
    let out = head.forward(g, params, store, p_f, p_m, mode)?;
    let d_hat = map_vectors(g, out.d_local, input.world_scalers)?;
    let d_out = match d_in {
        Some(d) => g.add(d_hat, d)?,
        None => d_hat,
    };
    Ok(BlockOutput {
        x_f,
        p_f,
        d_hat,
        d_out,
        head: out,
    })
}

/// Sample sources for the same image shared by `n` items.
pub fn repeat_source(image: &Arc<ImageStack>, n: usize) -> Vec<SampleSource> {
    vec![SampleSource::new(image.clone()); n]
}

/// Express a world displacement in patch voxels.
pub fn to_patch_voxels(world_scaler: &Mat3, d: Vec3) -> Result<Vec3> {
    let inv = Affine::from_linear(*world_scaler, [0.0; 3]).invert()?;
    Ok(mat_vec(&inv.linear(), d))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_follow_thirds() {
        assert_eq!(default_groups(9, 3), vec![0, 0, 0, 1, 1, 1, 2, 2, 2]);
        assert_eq!(default_groups(3, 3), vec![0, 1, 2]);
    }

    #[test]
    fn descend_grid_identity() {
        let grid: Tensor<f64> = descend_grid(&[Affine::identity()], 4).unwrap();
        let d = grid.data();
        assert_eq!(&d[..4], &[0.0, 1.0, 2.0, 3.0]);
    }
}
