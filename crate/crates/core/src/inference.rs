//! Global displacement field assembly from overlapping patch predictions.
//!
//! Scales are processed coarse to fine. At each scale the canvas of the fixed
//! image is covered by axis-aligned patches; every patch reads its incoming
//! displacement from the field accumulated so far, the head predicts an
//! increment, and the increments of all patches covering a grid node are
//! averaged into `D_t`. The result is `D = sum_t D_t`.

use std::collections::VecDeque;
use std::sync::Arc;

use diffcore::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cascade::{block_forward, BlockInput, Model};
use crate::geometry::{Affine, Canvas, CoordinateField, Mat3, Vec3};
use crate::heads::BnMode;
use crate::ops::SampleSource;
use crate::volumes::{align_centers, DisplacementField, ImageStack, LabelVolume, SaliencySampler};
use crate::{Error, Result};

/// Average number of patch predictions per grid node.
pub const TARGET_COVERAGE: usize = 10;

/// How patch positions are chosen within a scale pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Placement {
    /// `TARGET_COVERAGE` randomly offset tilings of the canvas. Every node is
    /// covered exactly `TARGET_COVERAGE` times.
    #[default]
    Stratified,
    /// Patch centres from the fixed-image saliency map, exactly the budget.
    Saliency,
    /// Patch centres uniform over the canvas, exactly the budget.
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegisterOptions {
    pub seed: u64,
    /// Extra passes at the finest scale.
    pub repeat_finest: usize,
    /// Field grid spacing is the patch voxel size divided by this factor.
    pub canvas_scale: f64,
    pub placement: Placement,
    /// Patches per forward pass.
    pub batch_size: usize,
}

impl Default for RegisterOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            repeat_finest: 0,
            canvas_scale: 1.0,
            placement: Placement::Stratified,
            batch_size: 16,
        }
    }
}

impl RegisterOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.canvas_scale > 0.0 && self.canvas_scale.is_finite()) {
            return Err(Error::Config(format!("canvas scale must be positive, got {}", self.canvas_scale)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// Coverage statistics of one scale pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PassStats {
    pub scale: usize,
    pub patches: usize,
    /// `ceil(TARGET_COVERAGE * V_canvas / V_patch)`.
    pub budget: usize,
    pub nodes: usize,
    /// Smallest number of predictions at a node before filling.
    pub min_count: usize,
    /// Fraction of nodes with fewer than `TARGET_COVERAGE` predictions.
    pub frac_below_target: f64,
    /// Fraction of nodes without any prediction, filled from a neighbour.
    pub frac_filled: f64,
}

#[derive(Clone, Debug)]
pub struct Registration {
    /// Displacement from fixed world positions into the original moving image.
    pub field: DisplacementField,
    pub passes: Vec<PassStats>,
}

/// Number of patches of edge `patch_edge` mm giving the target coverage on
/// average.
pub fn patch_budget(canvas: &Canvas, patch_edge: f64) -> usize {
    let ratio = canvas.volume() / patch_edge.powi(3);
    (TARGET_COVERAGE as f64 * ratio).ceil().max(1.0) as usize
}

/// Field grid over `canvas` with spacing close to `spacing`; at least two
/// nodes per axis, end nodes on the canvas faces.
pub fn canvas_grid(canvas: &Canvas, spacing: f64) -> (Affine, [usize; 3]) {
    let mut dims = [0usize; 3];
    let mut step = [0.0; 3];
    for a in 0..3 {
        let e = canvas.extent_mm[a];
        dims[a] = ((e / spacing).round() as usize + 1).max(2);
        step[a] = if e > 0.0 { e / (dims[a] - 1) as f64 } else { spacing };
    }
    let affine = Affine::translation(canvas.origin).compose(&Affine::scaling(step));
    (affine, dims)
}

/// One patch of a pass: its lower corner in world millimetres.
#[derive(Clone, Copy, Debug, PartialEq)]
struct PatchSite {
    corner: Vec3,
}

struct Predictor<'a> {
    model: &'a Model,
    fixed: Arc<ImageStack>,
    moving: Arc<ImageStack>,
    batch_size: usize,
}

impl Predictor<'_> {
    /// Displacement increments `T_w d_local` (mm, planar per patch) for
    /// axis-aligned patches at scale `t`, given the field so far.
    fn predict(&self, t: usize, sites: &[PatchSite], prior: &DisplacementField) -> Result<Vec<Vec<f32>>> {
        let sched = &self.model.spec.schedule;
        let p = sched.patch_size;
        let s = sched.voxel_mm[t];
        let head = self.model.spec.head(t);
        let scaler: Mat3 = [[s, 0.0, 0.0], [0.0, s, 0.0], [0.0, 0.0, s]];
        let vox = p * p * p;
        let mut out = Vec::with_capacity(sites.len());
        for chunk in sites.chunks(self.batch_size) {
            let n = chunk.len();
            let coords: Vec<CoordinateField> = chunk
                .iter()
                .map(|site| {
                    let t_patch = Affine::translation(site.corner).compose(&Affine::scaling([p as f64 * s; 3]));
                    CoordinateField::from_affine(&t_patch, p)
                })
                .collect();
            let mut d_in = vec![0f32; n * 3 * vox];
            for (b, c) in coords.iter().enumerate() {
                for (o, &x) in c.coords.iter().enumerate() {
                    let v = prior.sample(x);
                    for a in 0..3 {
                        d_in[(b * 3 + a) * vox + o] = v[a] as f32;
                    }
                }
            }
            let mut g = Graph::<f32>::new();
            let binding = self.model.store.bind(&mut g, &head.prefix(), false);
            let d_in = g.constant(Tensor::from_vec(&[n, 3, p, p, p], d_in)?);
            let fixed = vec![SampleSource::new(self.fixed.clone()); n];
            let moving = vec![SampleSource::new(self.moving.clone()); n];
            let scalers = vec![scaler; n];
            let input = BlockInput {
                fixed: &fixed,
                moving: &moving,
                coords: &coords,
                world_scalers: &scalers,
            };
            let res = block_forward(&mut g, head, &binding, &self.model.store, BnMode::Eval, &input, Some(d_in))?;
            let d_hat = g.value(res.d_hat).data();
            out.extend(d_hat.chunks(3 * vox).map(|c| c.to_vec()));
        }
        Ok(out)
    }
}

fn clamp_index(v: f64, n: usize) -> usize {
    if v.is_nan() || v < 0.0 {
        0
    } else {
        (v as usize).min(n - 1)
    }
}

/// Average increments of `TARGET_COVERAGE` tilings, each shifted by a
/// uniform random offset of up to one patch edge so seams do not line up.
fn stratified_pass<R: Rng>(
    pred: &Predictor<'_>,
    t: usize,
    canvas: &Canvas,
    grid: &mut DisplacementField,
    prior: &DisplacementField,
    rng: &mut R,
) -> Result<(usize, Vec<usize>)> {
    let sched = &pred.model.spec.schedule;
    let p = sched.patch_size;
    let s = sched.voxel_mm[t];
    let edge = sched.edge_mm(t);
    let vox = p * p * p;
    let mut patches = 0;
    let mut sum = vec![0.0f64; 3 * grid.nodes()];
    for _ in 0..TARGET_COVERAGE {
        let mut offset = [0.0; 3];
        let mut tiles = [0usize; 3];
        for a in 0..3 {
            let u = rng.random_range(0.0..edge);
            offset[a] = canvas.origin[a] - u;
            tiles[a] = ((canvas.extent_mm[a] + u) / edge).floor() as usize + 1;
        }
        let mut sites = Vec::with_capacity(tiles.iter().product());
        for k in 0..tiles[2] {
            for j in 0..tiles[1] {
                for i in 0..tiles[0] {
                    let idx = [i, j, k];
                    sites.push(PatchSite {
                        corner: std::array::from_fn(|a| offset[a] + idx[a] as f64 * edge),
                    });
                }
            }
        }
        patches += sites.len();
        let preds = pred.predict(t, &sites, prior)?;
        let n = grid.nodes();
        for node in 0..n {
            let x = grid.node_world(node);
            let mut tile = [0usize; 3];
            let mut v = [0usize; 3];
            for a in 0..3 {
                tile[a] = clamp_index(((x[a] - offset[a]) / edge).floor(), tiles[a]);
                let corner = offset[a] + tile[a] as f64 * edge;
                v[a] = clamp_index(((x[a] - corner) / s).floor(), p);
            }
            let patch = &preds[tile[0] + tiles[0] * (tile[1] + tiles[1] * tile[2])];
            let o = v[0] + p * (v[1] + p * v[2]);
            for a in 0..3 {
                sum[a * n + node] += patch[a * vox + o] as f64;
            }
        }
    }
    let inv = 1.0 / TARGET_COVERAGE as f64;
    grid.data_mut().iter_mut().zip(&sum).for_each(|(d, s)| *d = s * inv);
    Ok((patches, vec![TARGET_COVERAGE; grid.nodes()]))
}

/// Average increments of `budget` randomly placed patches by nearest-voxel
/// scatter; nodes without predictions are filled afterwards.
#[allow(clippy::too_many_arguments)]
fn scattered_pass<R: Rng>(
    pred: &Predictor<'_>,
    t: usize,
    canvas: &Canvas,
    saliency: Option<&SaliencySampler>,
    budget: usize,
    grid: &mut DisplacementField,
    prior: &DisplacementField,
    rng: &mut R,
) -> Result<(usize, Vec<usize>)> {
    let sched = &pred.model.spec.schedule;
    let p = sched.patch_size;
    let s = sched.voxel_mm[t];
    let edge = sched.edge_mm(t);
    let vox = p * p * p;
    let sites: Vec<PatchSite> = (0..budget)
        .map(|_| {
            let c = match saliency {
                Some(sal) => sal.sample_one(rng),
                None => std::array::from_fn(|a| canvas.origin[a] + rng.random_range(0.0..=canvas.extent_mm[a])),
            };
            PatchSite {
                corner: std::array::from_fn(|a| c[a] - 0.5 * edge),
            }
        })
        .collect();
    let preds = pred.predict(t, &sites, prior)?;
    let n = grid.nodes();
    let [nx, ny, nz] = grid.dims();
    let w2g = *grid.world_to_grid();
    let mut sum = vec![0.0f64; 3 * n];
    let mut count = vec![0usize; n];
    for (site, patch) in sites.iter().zip(&preds) {
        // Grid index range of nodes inside the patch box.
        let lo = w2g.apply(site.corner);
        let hi = w2g.apply(std::array::from_fn(|a| site.corner[a] + edge));
        let range = |a: usize, dim: usize| {
            let a0 = lo[a].min(hi[a]).ceil().max(0.0) as usize;
            let a1 = (lo[a].max(hi[a]).floor().max(-1.0) + 1.0).min(dim as f64) as usize;
            a0..a1.max(a0)
        };
        for k in range(2, nz) {
            for j in range(1, ny) {
                for i in range(0, nx) {
                    let node = i + nx * (j + ny * k);
                    let x = grid.node_world(node);
                    let rel: Vec3 = std::array::from_fn(|a| x[a] - site.corner[a]);
                    if (0..3).any(|a| rel[a] < 0.0 || rel[a] >= edge) {
                        continue;
                    }
                    let v: [usize; 3] = std::array::from_fn(|a| clamp_index((rel[a] / s).floor(), p));
                    let o = v[0] + p * (v[1] + p * v[2]);
                    for a in 0..3 {
                        sum[a * n + node] += patch[a * vox + o] as f64;
                    }
                    count[node] += 1;
                }
            }
        }
    }
    let data = grid.data_mut();
    for node in 0..n {
        if count[node] > 0 {
            for a in 0..3 {
                data[a * n + node] = sum[a * n + node] / count[node] as f64;
            }
        }
    }
    fill_uncovered(grid, &count);
    Ok((budget, count))
}

/// Copy values into nodes with `count == 0` from the nearest covered node, in
/// breadth-first order over the 6-neighbourhood.
pub fn fill_uncovered(field: &mut DisplacementField, count: &[usize]) {
    let n = field.nodes();
    let [nx, ny, nz] = field.dims();
    let mut done: Vec<bool> = count.iter().map(|&c| c > 0).collect();
    if !done.iter().any(|&d| d) {
        return;
    }
    let mut queue: VecDeque<usize> = (0..n).filter(|&i| done[i]).collect();
    while let Some(idx) = queue.pop_front() {
        let (i, j, k) = (idx % nx, (idx / nx) % ny, idx / (nx * ny));
        let v = field.at(idx);
        let mut visit = |q: usize| {
            if !done[q] {
                done[q] = true;
                field.set(q, v);
                queue.push_back(q);
            }
        };
        if i > 0 {
            visit(idx - 1);
        }
        if i + 1 < nx {
            visit(idx + 1);
        }
        if j > 0 {
            visit(idx - nx);
        }
        if j + 1 < ny {
            visit(idx + nx);
        }
        if k > 0 {
            visit(idx - nx * ny);
        }
        if k + 1 < nz {
            visit(idx + nx * ny);
        }
    }
}

/// Scale indices visited by a registration, coarse to fine, with repeats of
/// the finest scale appended.
pub fn pass_scales(n_scales: usize, repeat_finest: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n_scales).collect();
    v.extend(std::iter::repeat_n(n_scales - 1, repeat_finest));
    v
}

fn has_overlap(fixed_canvas: &Canvas, moving: &ImageStack) -> bool {
    let hi: Vec3 = std::array::from_fn(|a| fixed_canvas.origin[a] + fixed_canvas.extent_mm[a]);
    let [nx, ny, nz] = moving.dims();
    let aff = moving.affine();
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                if moving.data()[moving.index(i, j, k)] == 0.0 {
                    continue;
                }
                let x = aff.apply([i as f64, j as f64, k as f64]);
                if (0..3).all(|a| x[a] >= fixed_canvas.origin[a] - 1e-9 && x[a] <= hi[a] + 1e-9) {
                    return true;
                }
            }
        }
    }
    false
}

/// Coarsest patches may not be more than this much smaller than the canvas.
const MAX_CANVAS_TO_PATCH: f64 = 2.0;

/// Register `moving` to `fixed`: the returned field maps fixed world
/// positions `x` to `x + D(x)` in the moving image.
pub fn register(fixed: &ImageStack, moving: &ImageStack, model: &Model, opts: &RegisterOptions) -> Result<Registration> {
    opts.validate()?;
    model.spec.validate()?;
    let sched = &model.spec.schedule;
    let canvas = Canvas::enclosing(fixed.affine(), fixed.dims())?;
    if canvas.max_edge() > MAX_CANVAS_TO_PATCH * sched.edge_mm(0) {
        return Err(Error::IncompatibleSchedule(format!(
            "canvas edge {:.1} mm exceeds the coarsest patch edge {:.1} mm of the model",
            canvas.max_edge(),
            sched.edge_mm(0)
        )));
    }
    let (moved, shift) = align_centers(moving, fixed)?;
    if !has_overlap(&canvas, &moved) {
        return Err(Error::EmptyOverlap);
    }
    let saliency = match opts.placement {
        Placement::Saliency => Some(SaliencySampler::new(fixed)?),
        _ => None,
    };
    let pred = Predictor {
        model,
        fixed: Arc::new(fixed.clone()),
        moving: Arc::new(moved),
        batch_size: opts.batch_size,
    };
    let mut total: Option<DisplacementField> = None;
    let mut passes = Vec::new();
    for (pass, t) in pass_scales(sched.n_scales(), opts.repeat_finest).into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        rng.set_stream(pass as u64);
        let (affine, dims) = canvas_grid(&canvas, sched.voxel_mm[t] / opts.canvas_scale);
        let prior = match &total {
            Some(d) if d.dims() == dims && d.affine() == &affine => d.clone(),
            Some(d) => d.resample(dims, affine)?,
            None => DisplacementField::zeros(dims, affine)?,
        };
        let mut d_t = DisplacementField::zeros(dims, affine)?;
        let budget = patch_budget(&canvas, sched.edge_mm(t));
        let (patches, count) = match opts.placement {
            Placement::Stratified => stratified_pass(&pred, t, &canvas, &mut d_t, &prior, &mut rng)?,
            _ => scattered_pass(&pred, t, &canvas, saliency.as_ref(), budget, &mut d_t, &prior, &mut rng)?,
        };
        let nodes = count.len();
        passes.push(PassStats {
            scale: t,
            patches,
            budget,
            nodes,
            min_count: count.iter().copied().min().unwrap_or(0),
            frac_below_target: count.iter().filter(|&&c| c < TARGET_COVERAGE).count() as f64 / nodes as f64,
            frac_filled: count.iter().filter(|&&c| c == 0).count() as f64 / nodes as f64,
        });
        let mut next = prior;
        next.add_assign(&d_t)?;
        total = Some(next);
    }
    let mut field = total.ok_or_else(|| Error::IncompatibleSchedule("model has no scales".into()))?;
    field.add_constant([-shift[0], -shift[1], -shift[2]]);
    Ok(Registration { field, passes })
}

/// Register in the opposite direction: the field lives on the canvas of
/// `moving` and points into `fixed`.
pub fn invert_direction(fixed: &ImageStack, moving: &ImageStack, model: &Model, opts: &RegisterOptions) -> Result<Registration> {
    register(moving, fixed, model, opts)
}

/// Resample `moving` at `x + d(x)` for every node of the output grid, with
/// linear interpolation.
pub fn warp_image(moving: &ImageStack, d: &DisplacementField, dims: [usize; 3], affine: Affine) -> Result<ImageStack> {
    let out = ImageStack::new(dims, vec![0.0; dims.iter().product()], affine)?;
    let data = warped_positions(d, dims, &affine)
        .map(|y| moving.sample_world(y) as f32)
        .collect();
    out.with_data(data)
}

/// Nearest-neighbour counterpart of [`warp_image`] for label maps.
pub fn warp_labels(moving: &LabelVolume, d: &DisplacementField, dims: [usize; 3], affine: Affine) -> Result<LabelVolume> {
    let data = warped_positions(d, dims, &affine).map(|y| moving.sample_world(y)).collect();
    LabelVolume::new(dims, data, affine)
}

fn warped_positions<'a>(d: &'a DisplacementField, dims: [usize; 3], affine: &'a Affine) -> impl Iterator<Item = Vec3> + 'a {
    let [nx, ny, nz] = dims;
    (0..nx * ny * nz).map(move |idx| {
        let x = affine.apply([(idx % nx) as f64, ((idx / nx) % ny) as f64, (idx / (nx * ny)) as f64]);
        let u = d.sample(x);
        [x[0] + u[0], x[1] + u[1], x[2] + u[2]]
    })
}
