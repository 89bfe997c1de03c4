//! Synthetic registration data with known diffeomorphic ground truth.
//!
//! A template anatomy (an ellipsoid split into Voronoi regions with distinct
//! intensities and mild texture) is rendered through random smooth warps.
//! Every subject is a warp of the same template, so any pair is registrable.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use serde::{Deserialize, Serialize};

use crate::geometry::{Affine, Vec3};
use crate::volumes::{integrate_velocity_field, DisplacementField, ImageStack, LabelVolume};
use crate::Result;

/// Ranges of the random warps applied to the template.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarpConfig {
    pub max_rotation_deg: f64,
    /// Isotropic log-scale is drawn from `[-ln(1 + s), ln(1 + s)]`.
    pub max_scale: f64,
    pub max_shift_mm: f64,
    /// Peak magnitude of the smooth non-linear velocity, in mm.
    pub nonlinear_mm: f64,
    pub octaves: usize,
    /// Lower bound on the Jacobian determinant of the warp and its inverse.
    pub min_jacobian: f64,
}

impl WarpConfig {
    pub const NONE: WarpConfig = WarpConfig {
        max_rotation_deg: 0.0,
        max_scale: 0.0,
        max_shift_mm: 0.0,
        nonlinear_mm: 0.0,
        octaves: 3,
        min_jacobian: 0.2,
    };
}

impl Default for WarpConfig {
    fn default() -> Self {
        Self {
            max_rotation_deg: 8.0,
            max_scale: 0.06,
            max_shift_mm: 4.0,
            nonlinear_mm: 4.0,
            octaves: 3,
            min_jacobian: 0.2,
        }
    }
}

/// The shared template: smooth intensities and matching labels.
#[derive(Clone, Debug)]
pub struct Anatomy {
    pub image: ImageStack,
    pub labels: LabelVolume,
}

/// One registration case. `true_ddf` satisfies
/// `fixed(x) ~ moving(x + true_ddf(x))` on the fixed grid, and
/// `forward_ddf` is its inverse: `moving(y) = fixed(y + forward_ddf(y))`.
#[derive(Clone, Debug)]
pub struct SynthCase {
    pub fixed: ImageStack,
    pub moving: ImageStack,
    pub fixed_labels: LabelVolume,
    pub moving_labels: LabelVolume,
    pub true_ddf: DisplacementField,
    pub forward_ddf: DisplacementField,
}

/// Centred grid with 1 mm spacing.
pub fn grid_affine(size: usize) -> Affine {
    let c = (size as f64 - 1.0) / 2.0;
    Affine::translation([-c; 3])
}

fn gaussian_blur(data: &mut [f64], n: usize, sigma: f64) {
    let r = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let mut tmp = vec![0.0; data.len()];
    let strides = [1, n, n * n];
    for &stride in &strides {
        for (idx, t) in tmp.iter_mut().enumerate() {
            let pos = (idx / stride % n) as isize;
            let (mut acc, mut wsum) = (0.0, 0.0);
            for (ki, &w) in kernel.iter().enumerate() {
                let q = pos + ki as isize - r;
                if q < 0 || q >= n as isize {
                    continue;
                }
                acc += w * data[(idx as isize + (q - pos) * stride as isize) as usize];
                wsum += w;
            }
            *t = acc / wsum;
        }
        data.copy_from_slice(&tmp);
    }
}

/// Smooth random scalar field on an `n^3` grid: sum of trilinearly
/// upsampled random lattices, halving amplitude per octave.
fn smooth_noise<R: Rng>(n: usize, octaves: usize, rng: &mut R) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out = vec![0.0; n * n * n];
    for o in 0..octaves {
        let m = 3usize << o;
        let lattice: Vec<f64> = (0..m * m * m).map(|_| normal.sample(rng)).collect();
        let amp = 0.5f64.powi(o as i32);
        let scale = (m - 1) as f64 / (n - 1) as f64;
        for k in 0..n {
            for j in 0..n {
                for i in 0..n {
                    let p = [i as f64 * scale, j as f64 * scale, k as f64 * scale];
                    let v = diffcore::ops::trilinear([m, m, m], |q| lattice[q], p, diffcore::Padding::Border).0;
                    out[i + n * (j + n * k)] += amp * v;
                }
            }
        }
    }
    out
}

impl Anatomy {
    pub fn generate(size: usize, n_labels: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_a4a7);
        let n = size;
        let c = (n as f64 - 1.0) / 2.0;
        let semi = [0.40 * n as f64, 0.33 * n as f64, 0.36 * n as f64];
        let wobble = smooth_noise(n, 1, &mut rng);

        let mut seeds: Vec<Vec3> = Vec::with_capacity(n_labels);
        while seeds.len() < n_labels.max(1) {
            let p: [f64; 3] = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            if p.iter().map(|v| v * v).sum::<f64>() <= 0.6 {
                seeds.push([c + p[0] * semi[0], c + p[1] * semi[1], c + p[2] * semi[2]]);
            }
        }
        let mut levels: Vec<f64> = (0..seeds.len())
            .map(|i| 0.3 + 0.7 * (i as f64 + 1.0) / seeds.len() as f64)
            .collect();
        for i in (1..levels.len()).rev() {
            levels.swap(i, rng.random_range(0..=i));
        }
        let texture = smooth_noise(n, 3, &mut rng);

        let mut labels = vec![0u32; n * n * n];
        let mut intensity = vec![0.0f64; n * n * n];
        for k in 0..n {
            for j in 0..n {
                for i in 0..n {
                    let idx = i + n * (j + n * k);
                    let p = [i as f64, j as f64, k as f64];
                    let r2: f64 = (0..3).map(|a| ((p[a] - c) / semi[a]).powi(2)).sum();
                    if r2.sqrt() > 1.0 + 0.06 * wobble[idx] {
                        continue;
                    }
                    let nearest = seeds
                        .iter()
                        .enumerate()
                        .min_by(|a, b| {
                            let da: f64 = (0..3).map(|q| (a.1[q] - p[q]).powi(2)).sum();
                            let db: f64 = (0..3).map(|q| (b.1[q] - p[q]).powi(2)).sum();
                            da.total_cmp(&db)
                        })
                        .map(|(i, _)| i)
                        .unwrap_or(0);
                    labels[idx] = nearest as u32 + 1;
                    intensity[idx] = (levels[nearest] + 0.05 * texture[idx]).max(0.05);
                }
            }
        }
        gaussian_blur(&mut intensity, n, 0.7);
        let affine = grid_affine(n);
        Ok(Anatomy {
            image: ImageStack::new([n; 3], intensity.iter().map(|&v| v as f32).collect(), affine)?,
            labels: LabelVolume::new([n; 3], labels, affine)?,
        })
    }

    /// Render intensities and labels at the template positions `source[i]`.
    fn render(&self, dims: [usize; 3], affine: Affine, source: &[Vec3]) -> Result<(ImageStack, LabelVolume)> {
        let img: Vec<f32> = source.iter().map(|&x| self.image.sample_world(x) as f32).collect();
        let lab: Vec<u32> = source.iter().map(|&x| self.labels.sample_world(x)).collect();
        Ok((ImageStack::new(dims, img, affine)?, LabelVolume::new(dims, lab, affine)?))
    }
}

/// Random stationary velocity (mm) on the template grid: an affine generator
/// plus smooth noise.
fn random_velocity<R: Rng>(size: usize, cfg: &WarpConfig, rng: &mut R) -> Result<DisplacementField> {
    let affine = grid_affine(size);
    let mut v = DisplacementField::zeros([size; 3], affine)?;
    let axis: [f64; 3] = UnitSphere.sample(rng);
    let angle = if cfg.max_rotation_deg > 0.0 {
        rng.random_range(-1.0..1.0) * cfg.max_rotation_deg.to_radians()
    } else {
        0.0
    };
    let log_s = if cfg.max_scale > 0.0 {
        rng.random_range(-1.0..1.0) * (1.0 + cfg.max_scale).ln()
    } else {
        0.0
    };
    let shift: Vec3 = std::array::from_fn(|_| {
        if cfg.max_shift_mm > 0.0 {
            rng.random_range(-cfg.max_shift_mm..cfg.max_shift_mm)
        } else {
            0.0
        }
    });
    let w = [axis[0] * angle, axis[1] * angle, axis[2] * angle];
    let gen = [
        [log_s, -w[2], w[1]],
        [w[2], log_s, -w[0]],
        [-w[1], w[0], log_s],
    ];
    let noise: Vec<Vec<f64>> = (0..3)
        .map(|_| {
            if cfg.nonlinear_mm > 0.0 {
                smooth_noise(size, cfg.octaves, rng)
            } else {
                vec![0.0; size * size * size]
            }
        })
        .collect();
    let peak = (0..size * size * size)
        .map(|i| (noise[0][i].powi(2) + noise[1][i].powi(2) + noise[2][i].powi(2)).sqrt())
        .fold(0.0, f64::max);
    let amp = if peak > 0.0 { cfg.nonlinear_mm / peak } else { 0.0 };
    for idx in 0..v.nodes() {
        let x = v.node_world(idx);
        let lin = crate::geometry::mat_vec(&gen, x);
        v.set(
            idx,
            [
                lin[0] + shift[0] + amp * noise[0][idx],
                lin[1] + shift[1] + amp * noise[1][idx],
                lin[2] + shift[2] + amp * noise[2][idx],
            ],
        );
    }
    Ok(v)
}

fn negate(f: &DisplacementField) -> Result<DisplacementField> {
    DisplacementField::new(f.dims(), *f.affine(), f.data().iter().map(|v| -v).collect())
}

fn scaled(f: &DisplacementField, s: f64) -> Result<DisplacementField> {
    DisplacementField::new(f.dims(), *f.affine(), f.data().iter().map(|v| v * s).collect())
}

fn min_jacobian(f: &DisplacementField) -> f64 {
    f.jacobian_determinants().into_iter().fold(f64::INFINITY, f64::min)
}

/// Forward and inverse displacement of a random diffeomorphic warp, with the
/// velocity shrunk until both maps have Jacobian determinant above the bound.
pub fn random_warp<R: Rng>(
    size: usize,
    cfg: &WarpConfig,
    rng: &mut R,
) -> Result<(DisplacementField, DisplacementField)> {
    let mut v = random_velocity(size, cfg, rng)?;
    loop {
        let fwd = integrate_velocity_field(&v, 7)?;
        let bwd = integrate_velocity_field(&negate(&v)?, 7)?;
        if min_jacobian(&fwd) > cfg.min_jacobian && min_jacobian(&bwd) > cfg.min_jacobian {
            return Ok((fwd, bwd));
        }
        v = scaled(&v, 0.8)?;
    }
}

fn compose_points(base: &[Vec3], warp: Option<&DisplacementField>) -> Vec<Vec3> {
    match warp {
        None => base.to_vec(),
        Some(w) => base
            .iter()
            .map(|&x| {
                let d = w.sample(x);
                [x[0] + d[0], x[1] + d[1], x[2] + d[2]]
            })
            .collect(),
    }
}

fn grid_points(size: usize) -> Vec<Vec3> {
    let a = grid_affine(size);
    let mut out = Vec::with_capacity(size * size * size);
    for k in 0..size {
        for j in 0..size {
            for i in 0..size {
                out.push(a.apply([i as f64, j as f64, k as f64]));
            }
        }
    }
    out
}

/// A subject: the template seen through one random warp.
pub fn synth_subject(anatomy: &Anatomy, seed: u64, cfg: &WarpConfig) -> Result<(ImageStack, LabelVolume)> {
    let size = anatomy.image.dims()[0];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (subject, _) = random_warp(size, cfg, &mut rng)?;
    let src = compose_points(&grid_points(size), Some(&subject));
    anatomy.render([size; 3], grid_affine(size), &src)
}

/// A fixed subject and a moving image related to it by a known warp.
pub fn synth_case_with(
    anatomy: &Anatomy,
    seed: u64,
    subject_cfg: &WarpConfig,
    warp_cfg: &WarpConfig,
) -> Result<SynthCase> {
    let size = anatomy.image.dims()[0];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (subject, _) = random_warp(size, subject_cfg, &mut rng)?;
    let (fwd, bwd) = random_warp(size, warp_cfg, &mut rng)?;
    let grid = grid_points(size);
    // moving(y) = fixed(y + fwd(y)) = template(s(y + fwd(y)))
    let through_warp = compose_points(&grid, Some(&fwd));
    let fixed_src = compose_points(&grid, Some(&subject));
    let moving_src = compose_points(&through_warp, Some(&subject));
    let affine = grid_affine(size);
    let (fixed, fixed_labels) = anatomy.render([size; 3], affine, &fixed_src)?;
    let (moving, moving_labels) = anatomy.render([size; 3], affine, &moving_src)?;
    Ok(SynthCase {
        fixed,
        moving,
        fixed_labels,
        moving_labels,
        true_ddf: bwd,
        forward_ddf: fwd,
    })
}

/// Case from the default template (anatomy seed 0) with default warp ranges.
pub fn synth_case(seed: u64, size: usize, n_labels: usize) -> Result<SynthCase> {
    let anatomy = Anatomy::generate(size, n_labels, 0)?;
    synth_case_with(&anatomy, seed, &WarpConfig::default(), &WarpConfig::default())
}
