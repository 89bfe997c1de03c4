//! Unsupervised progressive training.
//!
//! Scales are switched on one at a time: the first block of iterations trains
//! scale 0 alone, the next block scales 0 and 1, and so on. Once every scale is
//! active, training continues with a cosine-decaying learning rate. Each
//! iteration draws ordered image pairs and a nested patch chain per sample, and
//! the loss is taken over the finest active scales.

use std::collections::BTreeSet;
use std::sync::Arc;

use diffcore::optim::{clip_grad_norm, AdamW, AdamWConfig};
use diffcore::{Binding, Checkpoint, Graph, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cascade::{
    block_forward, build_schedule, descend_displacement, BlockInput, Model, ModelSpec, PatchChain,
};
use crate::geometry::{chain_transform, world_scaler, Affine, AugmentRange, Canvas, CoordinateField, Mat3};
use crate::heads::{update_running_stats, BnMode};
use crate::losses::{bending_energy, jacobian_hinge, similarity_loss, LossConfig};
use crate::ops::{sample_volumes, SampleSource};
use crate::volumes::{center_at_origin, crop_nonzero, mirror_lr, ImageStack, SaliencySampler};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub n_scales: usize,
    pub patch_size: usize,
    pub pairs_per_iter: usize,
    pub patches_per_pair: usize,
    pub iters_per_new_scale: u64,
    pub final_iters: u64,
    pub lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    /// The loss covers at most this many of the finest active scales.
    pub loss_last_k: usize,
    pub patch_aug: AugmentRange,
    pub moving_aug: AugmentRange,
    pub loss: LossConfig,
    pub affine_widths: Vec<usize>,
    pub dense_widths: Vec<usize>,
    /// Replace the dense head by a third affine head.
    pub affine_only: bool,
    /// Add a left-right mirrored copy of every training image.
    pub mirror: bool,
    pub crop: bool,
    /// Write a checkpoint every this many iterations (0: only the final one).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl TrainConfig {
    /// Full-size schedule and network.
    pub fn full() -> Self {
        Self {
            seed: 0,
            n_scales: 9,
            patch_size: 32,
            pairs_per_iter: 2,
            patches_per_pair: 10,
            iters_per_new_scale: 10_000,
            final_iters: 40_000,
            lr: 1e-3,
            min_lr: 1e-5,
            weight_decay: 1e-4,
            grad_clip: 2.0,
            loss_last_k: 3,
            patch_aug: AugmentRange {
                max_rotation_deg: 15.0,
                scale_min: 0.9,
                scale_max: 1.1,
                max_shift_mm: 0.0,
            },
            moving_aug: AugmentRange {
                max_rotation_deg: 25.0,
                scale_min: 0.8,
                scale_max: 1.2,
                max_shift_mm: 20.0,
            },
            loss: LossConfig::default(),
            affine_widths: vec![16, 32, 64, 64],
            dense_widths: vec![16, 32, 64],
            affine_only: false,
            mirror: true,
            crop: true,
            checkpoint_every: 5_000,
        }
    }

    /// Three scales of 16^3 patches and 1500 iterations, for CPU runs on
    /// small volumes.
    pub fn desk() -> Self {
        Self {
            n_scales: 3,
            patch_size: 16,
            pairs_per_iter: 2,
            patches_per_pair: 4,
            iters_per_new_scale: 300,
            final_iters: 600,
            patch_aug: AugmentRange {
                max_rotation_deg: 10.0,
                scale_min: 0.95,
                scale_max: 1.05,
                max_shift_mm: 0.0,
            },
            moving_aug: AugmentRange {
                max_rotation_deg: 8.0,
                scale_min: 0.95,
                scale_max: 1.05,
                max_shift_mm: 4.0,
            },
            affine_widths: vec![8, 16, 32, 32],
            dense_widths: vec![8, 16, 32],
            mirror: false,
            checkpoint_every: 0,
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.n_scales,
            self.patch_size,
            self.pairs_per_iter,
            self.patches_per_pair,
            self.loss_last_k,
        ];
        if counts.contains(&0) || self.iters_per_new_scale == 0 {
            return Err(Error::Config("counts must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.min_lr >= 0.0) || self.min_lr > self.lr || !(self.grad_clip > 0.0) {
            return Err(Error::Config("invalid learning rate or clipping settings".into()));
        }
        for aug in [&self.patch_aug, &self.moving_aug] {
            if aug.scale_min <= 0.0 || aug.scale_min > aug.scale_max || aug.max_rotation_deg < 0.0 || aug.max_shift_mm < 0.0 {
                return Err(Error::Config(format!("invalid augmentation range {aug:?}")));
            }
        }
        self.loss.validate()
    }

    pub fn curriculum_iters(&self) -> u64 {
        self.n_scales as u64 * self.iters_per_new_scale
    }

    pub fn total_iters(&self) -> u64 {
        self.curriculum_iters() + self.final_iters
    }

    /// Number of scales trained at iteration `iter`.
    pub fn active_scales(&self, iter: u64) -> usize {
        ((iter / self.iters_per_new_scale) as usize + 1).min(self.n_scales)
    }

    /// Constant during the curriculum, then cosine decay to `min_lr`.
    pub fn lr_at(&self, iter: u64) -> f64 {
        let c = self.curriculum_iters();
        if iter < c {
            return self.lr;
        }
        let k = (iter - c) as f64;
        let span = self.final_iters.saturating_sub(1).max(1) as f64;
        let a = (k / span).min(1.0);
        self.min_lr + 0.5 * (self.lr - self.min_lr) * (1.0 + (std::f64::consts::PI * a).cos())
    }
}

/// A preprocessed training image with its sampling helpers.
#[derive(Clone, Debug)]
pub struct TrainImage {
    pub image: Arc<ImageStack>,
    pub canvas: Canvas,
    pub saliency: SaliencySampler,
}

impl TrainImage {
    pub fn new(image: ImageStack) -> Result<Self> {
        Ok(Self {
            canvas: Canvas::enclosing(image.affine(), image.dims())?,
            saliency: SaliencySampler::new(&image)?,
            image: Arc::new(image),
        })
    }
}

/// Crop zero borders, centre at the origin and optionally add mirrored copies.
pub fn prepare_images(images: Vec<ImageStack>, crop: bool, mirror: bool) -> Result<Vec<TrainImage>> {
    if images.len() < 2 {
        return Err(Error::Config(format!("training needs at least 2 images, got {}", images.len())));
    }
    let mut out = Vec::new();
    for img in images {
        let img = if crop { crop_nonzero(&img)? } else { img };
        let img = center_at_origin(&img)?;
        if mirror {
            out.push(TrainImage::new(mirror_lr(&img)?)?);
        }
        out.push(TrainImage::new(img)?);
    }
    Ok(out)
}

/// Moving-image augmentation: rotation and scale about the image centre
/// followed by a shift.
pub fn moving_augmentation<R: Rng>(image: &ImageStack, aug: &AugmentRange, rng: &mut R) -> Affine {
    if aug.is_none() {
        return Affine::identity();
    }
    let c = image.world_center();
    let lin = aug.sample_linear(rng);
    let shift = aug.sample_shift(rng);
    Affine::translation([c[0] + shift[0], c[1] + shift[1], c[2] + shift[2]])
        .compose(&lin)
        .compose(&Affine::translation([-c[0], -c[1], -c[2]]))
}

/// Per-chain inputs of one iteration.
#[derive(Clone, Debug)]
pub struct Sample {
    pub fixed: SampleSource,
    pub moving: SampleSource,
    pub chain: PatchChain,
    pub moving_transform: Affine,
}

/// Draw `pairs` ordered image pairs and `patches` nested chains per pair,
/// descending through `active` scales.
pub fn assemble_batch<R: Rng>(
    images: &[TrainImage],
    spec: &ModelSpec,
    cfg: &TrainConfig,
    active: usize,
    rng: &mut R,
) -> Result<Vec<Sample>> {
    let n = images.len();
    if n < 2 {
        return Err(Error::Config("need two distinct images to form a pair".into()));
    }
    let sched = &spec.schedule;
    let mut out = Vec::with_capacity(cfg.pairs_per_iter * cfg.patches_per_pair);
    for _ in 0..cfg.pairs_per_iter {
        let fi = rng.random_range(0..n);
        let mut mi = rng.random_range(0..n - 1);
        if mi >= fi {
            mi += 1;
        }
        let (f, m) = (&images[fi], &images[mi]);
        for _ in 0..cfg.patches_per_pair {
            let t_m = moving_augmentation(&m.image, &cfg.moving_aug, rng);
            let center = f.saliency.sample_one(rng);
            let mut chain = PatchChain::start(f.canvas, center, sched, &cfg.patch_aug, rng);
            for t in 1..active {
                chain.descend(sched.zoom(t), rng);
            }
            out.push(Sample {
                fixed: SampleSource::new(f.image.clone()),
                moving: SampleSource::transformed(m.image.clone(), &t_m)?,
                chain,
                moving_transform: t_m,
            });
        }
    }
    Ok(out)
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iter: u64,
    pub active_scales: usize,
    pub loss: f64,
    pub global_similarity: f64,
    pub local_similarity: f64,
    pub bending: f64,
    pub hinge: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    /// Gradient norm actually applied.
    pub clipped_norm: f64,
    pub lr: f64,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub optimizer: AdamW,
    /// Iterations completed so far.
    pub iteration: u64,
    images: Vec<TrainImage>,
}

/// Loss of one forward pass over a batch, before the backward pass.
struct Forward {
    g: Graph<f32>,
    loss: Var,
    binding: Binding,
    stats: Vec<(String, diffcore::ops::BatchStats<f32>)>,
    parts: [f64; 4],
    /// Accumulated displacement of the deepest active scale, in mm.
    d_out: Var,
}

impl Trainer {
    /// Fresh model whose schedule is derived from the prepared images.
    pub fn new(config: TrainConfig, images: Vec<TrainImage>) -> Result<Self> {
        config.validate()?;
        let plain: Vec<ImageStack> = images.iter().map(|i| (*i.image).clone()).collect();
        let schedule = build_schedule(&plain, config.n_scales, config.patch_size)?;
        let spec = ModelSpec::new(schedule, &config.affine_widths, &config.dense_widths, config.affine_only)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = Model::init(spec, &mut rng)?;
        let optimizer = AdamW::new(AdamWConfig {
            lr: config.lr,
            weight_decay: config.weight_decay,
            ..AdamWConfig::default()
        });
        Ok(Self {
            config,
            model,
            optimizer,
            iteration: 0,
            images,
        })
    }

    /// Continue from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(ck: &Checkpoint, images: Vec<TrainImage>) -> Result<Self> {
        let model = Model::from_checkpoint(ck)?;
        let config: TrainConfig = serde_json::from_value(
            ck.meta
                .get("train_config")
                .cloned()
                .ok_or_else(|| Error::Parse("checkpoint has no training configuration".into()))?,
        )?;
        config.validate()?;
        let iteration = ck.meta.get("iteration").and_then(|v| v.as_u64()).unwrap_or(0);
        let optimizer = ck
            .optimizer()?
            .ok_or_else(|| Error::Parse("checkpoint has no optimizer state".into()))?;
        Ok(Self {
            config,
            model,
            optimizer,
            iteration,
            images,
        })
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut meta = serde_json::Map::new();
        meta.insert("iteration".into(), self.iteration.into());
        meta.insert("train_config".into(), serde_json::to_value(&self.config)?);
        self.model.to_checkpoint(Some(&self.optimizer), meta)
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.config.total_iters()
    }

    /// Random source of iteration `iter`; independent of how the run was split.
    pub fn iteration_rng(&self, iter: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(iter + 1);
        rng
    }

    /// Head groups serving the first `active` scales.
    fn active_groups(&self, active: usize) -> BTreeSet<usize> {
        self.model.spec.schedule.head_group[..active].iter().copied().collect()
    }

    fn forward(&self, samples: &[Sample], active: usize) -> Result<Forward> {
        let spec = &self.model.spec;
        let sched = &spec.schedule;
        let p = sched.patch_size;
        let cfg = &self.config.loss;
        let mut g = Graph::<f32>::new();
        let mut binding = Binding::default();
        for gid in self.active_groups(active) {
            binding.merge(self.model.store.bind(&mut g, &spec.heads[gid].prefix(), true));
        }
        let fixed: Vec<SampleSource> = samples.iter().map(|s| s.fixed.clone()).collect();
        let moving: Vec<SampleSource> = samples.iter().map(|s| s.moving.clone()).collect();
        let first_loss = active.saturating_sub(self.config.loss_last_k);

        let mut terms = Vec::new();
        let mut stats = Vec::new();
        let mut parts = [0.0; 4];
        let mut d_in = None;
        let mut last = None;
        for t in 0..active {
            let coords: Vec<CoordinateField> = samples
                .iter()
                .map(|s| CoordinateField::from_affine(&chain_transform(&s.chain.canvas, &s.chain.transforms[..=t]), p))
                .collect();
            let scalers: Vec<Mat3> = samples
                .iter()
                .map(|s| world_scaler(&s.chain.canvas, &s.chain.transforms[..=t], p).linear())
                .collect();
            let input = BlockInput {
                fixed: &fixed,
                moving: &moving,
                coords: &coords,
                world_scalers: &scalers,
            };
            let head = spec.head(t);
            let out = block_forward(&mut g, head, &binding, &self.model.store, BnMode::Train, &input, d_in)?;
            stats.extend(out.head.batch_stats);
            if t >= first_loss {
                let s = sched.voxel_mm[t];
                let x_moved = g.add(out.x_f, out.d_out)?;
                let p_moved = sample_volumes(&mut g, &moving, x_moved)?;
                let (sim, sp) = similarity_loss(&mut g, cfg, out.p_f, p_moved)?;
                terms.push((sim, 1.0));
                parts[0] += sp[0];
                parts[1] += sp[1];
                if cfg.bending_weight > 0.0 {
                    let u = g.scale(out.d_out, 1.0 / s);
                    let be = bending_energy(&mut g, u)?;
                    parts[2] += g.value(be).item() as f64;
                    terms.push((be, cfg.bending_weight));
                }
                if cfg.hinge_weight > 0.0 {
                    let phi = g.scale(x_moved, 1.0 / s);
                    let hinge = jacobian_hinge(&mut g, phi, cfg.hinge_threshold, cfg.hinge_scale)?;
                    parts[3] += g.value(hinge).item() as f64;
                    terms.push((hinge, cfg.hinge_weight));
                }
            }
            last = Some(out.d_out);
            if t + 1 < active {
                let nested: Vec<Affine> = samples.iter().map(|s| s.chain.transforms[t + 1]).collect();
                d_in = Some(descend_displacement(&mut g, out.d_out, &nested, p)?);
            }
        }
        let loss = g.weighted_sum(&terms)?;
        Ok(Forward {
            g,
            loss,
            binding,
            stats,
            parts,
            d_out: last.ok_or_else(|| Error::Config("no active scale".into()))?,
        })
    }

    /// Loss and largest accumulated displacement (mm) of a batch drawn for
    /// iteration `iter`, without updating anything.
    pub fn probe(&self, iter: u64) -> Result<(f64, f64)> {
        let active = self.config.active_scales(iter);
        let samples = assemble_batch(&self.images, &self.model.spec, &self.config, active, &mut self.iteration_rng(iter))?;
        let fwd = self.forward(&samples, active)?;
        let d = fwd.g.value(fwd.d_out);
        let [n, _, dd, h, w] = d.dims5()?;
        let s = dd * h * w;
        let data = d.data();
        let mut max = 0.0f64;
        for b in 0..n {
            for o in 0..s {
                let v: f64 = (0..3).map(|a| (data[(b * 3 + a) * s + o] as f64).powi(2)).sum();
                max = max.max(v.sqrt());
            }
        }
        Ok((fwd.g.value(fwd.loss).item() as f64, max))
    }

    /// Run one optimization step and return its log record.
    pub fn step(&mut self) -> Result<StepRecord> {
        let iter = self.iteration;
        let active = self.config.active_scales(iter);
        let mut rng = self.iteration_rng(iter);
        let samples = assemble_batch(&self.images, &self.model.spec, &self.config, active, &mut rng)?;
        let fwd = self.forward(&samples, active)?;
        let loss = fwd.g.value(fwd.loss).item() as f64;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: iter,
                detail: format!(
                    "active scales {active}, similarity ({}, {}), bending {}, hinge {}",
                    fwd.parts[0], fwd.parts[1], fwd.parts[2], fwd.parts[3]
                ),
            });
        }
        let mut grads = fwd.g.backward(fwd.loss);
        let mut named = fwd.binding.gradients(&mut grads);
        let grad_norm = clip_grad_norm(&mut named, self.config.grad_clip);
        let clipped_norm = named
            .values()
            .flat_map(|t| t.data().iter())
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: iter,
                detail: format!("gradient norm {grad_norm} at loss {loss}"),
            });
        }
        let lr = self.config.lr_at(iter);
        self.optimizer.update(&mut self.model.store, &named, lr);
        update_running_stats(&mut self.model.store, &fwd.stats);
        self.iteration += 1;
        Ok(StepRecord {
            iter,
            active_scales: active,
            loss,
            global_similarity: fwd.parts[0],
            local_similarity: fwd.parts[1],
            bending: fwd.parts[2],
            hinge: fwd.parts[3],
            grad_norm,
            clipped_norm,
            lr,
        })
    }

    /// Train until `total_iters`, calling `on_step` after every iteration.
    pub fn run(&mut self, mut on_step: impl FnMut(&Self, &StepRecord) -> Result<()>) -> Result<()> {
        while !self.is_done() {
            let rec = self.step()?;
            on_step(self, &rec)?;
        }
        Ok(())
    }
}
