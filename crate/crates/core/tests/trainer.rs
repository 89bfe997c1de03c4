use patchmorph::geometry::{rotation_angle, AugmentRange};
use patchmorph::trainer::{assemble_batch, moving_augmentation, prepare_images, TrainConfig, Trainer};
use patchmorph::volumes::synth::{synth_subject, Anatomy, WarpConfig};
use patchmorph::{Checkpoint, Error, ImageStack};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn subjects(size: usize, n: u64) -> Vec<ImageStack> {
    let an = Anatomy::generate(size, 4, 0).unwrap();
    (0..n)
        .map(|s| synth_subject(&an, 100 + s, &WarpConfig::default()).unwrap().0)
        .collect()
}

fn tiny(n_scales: usize) -> TrainConfig {
    let mut c = TrainConfig::desk();
    c.n_scales = n_scales;
    c.iters_per_new_scale = 3;
    c.final_iters = 2;
    c.pairs_per_iter = 1;
    c.patches_per_pair = 2;
    c.affine_widths = vec![2, 4, 4, 4];
    c.dense_widths = vec![2, 4, 4];
    c
}

fn trainer(cfg: TrainConfig, size: usize) -> Trainer {
    let images = prepare_images(subjects(size, 3), cfg.crop, cfg.mirror).unwrap();
    Trainer::new(cfg, images).unwrap()
}

fn bytes(ck: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    ck.write_to(&mut out).unwrap();
    out
}

#[test]
fn full_preset_values() {
    let c = TrainConfig::full();
    assert_eq!(c.pairs_per_iter * c.patches_per_pair, 20);
    assert_eq!(c.iters_per_new_scale, 10_000);
    assert_eq!(c.final_iters, 40_000);
    assert_eq!(c.lr, 1e-3);
    assert_eq!(c.grad_clip, 2.0);
    assert_eq!(c.loss_last_k, 3);
    assert_eq!(c.patch_aug.max_rotation_deg, 15.0);
    assert_eq!((c.patch_aug.scale_min, c.patch_aug.scale_max), (0.9, 1.1));
    assert_eq!(c.moving_aug.max_rotation_deg, 25.0);
    assert_eq!((c.moving_aug.scale_min, c.moving_aug.scale_max), (0.8, 1.2));
    assert_eq!(c.moving_aug.max_shift_mm, 20.0);
    assert!(c.validate().is_ok());
    assert!(TrainConfig::desk().validate().is_ok());
}

#[test]
fn curriculum_adds_one_scale_per_block() {
    let c = TrainConfig::full();
    assert_eq!(c.active_scales(0), 1);
    assert_eq!(c.active_scales(9_999), 1);
    assert_eq!(c.active_scales(10_000), 2);
    assert_eq!(c.active_scales(89_999), 9);
    assert_eq!(c.active_scales(120_000), 9);
    assert_eq!(c.total_iters(), 130_000);
}

#[test]
fn learning_rate_schedule() {
    let c = TrainConfig::full();
    let start = c.curriculum_iters();
    assert_eq!(c.lr_at(0), 1e-3);
    assert_eq!(c.lr_at(start - 1), 1e-3);
    assert!((c.lr_at(start) - 1e-3).abs() < 1e-15);
    assert!((c.lr_at(c.total_iters() - 1) - 1e-5).abs() < 1e-15);
    let mid = start + (c.final_iters - 1) / 2;
    assert!((c.lr_at(mid) - (1e-5 + 0.5 * (1e-3 - 1e-5))).abs() < 1e-7);
    let mut prev = f64::INFINITY;
    for it in (0..c.total_iters()).step_by(997) {
        let lr = c.lr_at(it);
        assert!(lr <= prev);
        prev = lr;
    }
}

#[test]
fn preparation_needs_two_images_and_mirrors() {
    let imgs = subjects(24, 2);
    assert!(matches!(prepare_images(imgs[..1].to_vec(), true, false), Err(Error::Config(_))));
    let prepared = prepare_images(imgs, true, true).unwrap();
    assert_eq!(prepared.len(), 4);
    for p in &prepared {
        assert!(p.image.world_center().iter().all(|v| v.abs() < 1e-9));
    }
}

#[test]
fn batch_chains_follow_active_scales() {
    let cfg = tiny(3);
    let t = trainer(cfg.clone(), 32);
    let images = prepare_images(subjects(32, 3), true, false).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for active in 1..=3 {
        let batch = assemble_batch(&images, &t.model.spec, &cfg, active, &mut rng).unwrap();
        assert_eq!(batch.len(), cfg.pairs_per_iter * cfg.patches_per_pair);
        assert!(batch.iter().all(|s| s.chain.depth() == active));
    }
}

#[test]
fn disabled_augmentation_keeps_patches_axis_aligned() {
    let mut cfg = tiny(2);
    cfg.patch_aug = AugmentRange::NONE;
    cfg.moving_aug = AugmentRange::NONE;
    let t = trainer(cfg.clone(), 32);
    let images = prepare_images(subjects(32, 3), true, false).unwrap();
    let batch = assemble_batch(&images, &t.model.spec, &cfg, 2, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    for s in &batch {
        let lin = s.chain.transforms[0].linear();
        for r in 0..3 {
            for c in 0..3 {
                if r != c {
                    assert_eq!(lin[r][c], 0.0);
                } else {
                    assert!(lin[r][c] > 0.0);
                }
            }
        }
        assert_eq!(s.moving_transform, patchmorph::Affine::identity());
    }
}

#[test]
fn moving_augmentation_angles_stay_within_range() {
    let aug = TrainConfig::full().moving_aug;
    let img = &subjects(24, 1)[0];
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut hist = [0usize; 5];
    for _ in 0..2000 {
        let t = moving_augmentation(img, &aug, &mut rng);
        let deg = rotation_angle(&t.linear()).to_degrees();
        assert!(deg <= 25.0 + 1e-9);
        hist[((deg / 5.0) as usize).min(4)] += 1;
        let c = img.world_center();
        let moved = t.apply(c);
        assert!((0..3).all(|a| (moved[a] - c[a]).abs() <= 20.0 + 1e-9));
    }
    assert!(hist.iter().all(|&n| n > 0), "{hist:?}");
}

#[test]
fn first_block_leaves_finer_heads_untouched() {
    let mut t = trainer(tiny(3), 32);
    let before = t.model.store.clone();
    t.step().unwrap();
    let head0 = t.model.spec.heads[0].prefix();
    let mut changed = 0;
    for (name, value) in t.model.store.params() {
        let old = before.get(name).unwrap();
        if name.starts_with(&head0) {
            changed += usize::from(old != value);
        } else {
            assert_eq!(old, value, "{name} moved while inactive");
        }
    }
    assert!(changed > 0);
    for (name, value) in t.model.store.buffers() {
        if !name.starts_with(&head0) {
            assert_eq!(before.buffer(name).unwrap(), value);
        }
    }
}

#[test]
fn applied_gradient_norm_respects_the_clip() {
    let mut cfg = tiny(2);
    cfg.grad_clip = 1e-3;
    let mut t = trainer(cfg, 32);
    let mut clipped = 0;
    t.run(|tr, rec| {
        assert!(rec.clipped_norm <= tr.config.grad_clip + 1e-6, "{rec:?}");
        clipped += usize::from(rec.grad_norm > tr.config.grad_clip);
        Ok(())
    })
    .unwrap();
    assert!(clipped > 0);
}

#[test]
fn fixed_seed_gives_identical_checkpoints() {
    let mut a = trainer(tiny(2), 32);
    let mut b = trainer(tiny(2), 32);
    a.run(|_, _| Ok(())).unwrap();
    b.run(|_, _| Ok(())).unwrap();
    assert_eq!(a.iteration, 8);
    assert_eq!(bytes(&a.checkpoint().unwrap()), bytes(&b.checkpoint().unwrap()));
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let cfg = tiny(2);
    let mut whole = trainer(cfg.clone(), 32);
    whole.run(|_, _| Ok(())).unwrap();

    let mut first = trainer(cfg, 32);
    for _ in 0..4 {
        first.step().unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("half.pmck");
    first.checkpoint().unwrap().save(&path).unwrap();
    let images = prepare_images(subjects(32, 3), true, false).unwrap();
    let mut second = Trainer::resume(&Checkpoint::load(&path).unwrap(), images).unwrap();
    assert_eq!(second.iteration, 4);
    second.run(|_, _| Ok(())).unwrap();
    assert_eq!(bytes(&whole.checkpoint().unwrap()), bytes(&second.checkpoint().unwrap()));
}

#[test]
fn exploding_run_reports_non_finite_loss() {
    let mut cfg = tiny(1);
    cfg.lr = 1e30;
    cfg.grad_clip = 1e30;
    cfg.final_iters = 10;
    let mut t = trainer(cfg, 32);
    let err = t.run(|_, _| Ok(())).unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { .. }), "{err}");
}

/// Identical moving and fixed images without augmentation start at the
/// similarity optimum and stay there.
#[test]
fn self_registration_stays_near_identity() {
    let mut cfg = tiny(1);
    cfg.iters_per_new_scale = 200;
    cfg.final_iters = 0;
    cfg.patch_aug = AugmentRange::NONE;
    cfg.moving_aug = AugmentRange::NONE;
    let img = subjects(32, 1).remove(0);
    let images = prepare_images(vec![img.clone(), img], true, false).unwrap();
    let mut t = Trainer::new(cfg, images).unwrap();
    let (_, d0) = t.probe(0).unwrap();
    assert_eq!(d0, 0.0);
    let first = t.step().unwrap();
    assert!(first.global_similarity > 1.0 - 1e-6, "{first:?}");
    assert_eq!(first.bending, 0.0);
    assert_eq!(first.hinge, 0.0);
    t.run(|_, _| Ok(())).unwrap();
    assert_eq!(t.iteration, 200);
    let coarse = t.model.spec.schedule.voxel_mm[0];
    for iter in [200, 201, 202] {
        let (_, d) = t.probe(iter).unwrap();
        assert!(d < coarse, "max displacement {d} mm vs voxel {coarse} mm");
    }
}

fn slope(ys: &[f64]) -> f64 {
    let n = ys.len() as f64;
    let mx = (n - 1.0) / 2.0;
    let my = ys.iter().sum::<f64>() / n;
    let num: f64 = ys.iter().enumerate().map(|(i, y)| (i as f64 - mx) * (y - my)).sum();
    let den: f64 = (0..ys.len()).map(|i| (i as f64 - mx).powi(2)).sum();
    num / den
}

#[test]
fn loss_trends_down_over_two_hundred_iterations() {
    let mut cfg = TrainConfig::desk();
    cfg.n_scales = 1;
    cfg.iters_per_new_scale = 200;
    cfg.final_iters = 0;
    let images = prepare_images(subjects(48, 6), true, false).unwrap();
    let mut t = Trainer::new(cfg, images).unwrap();
    let mut losses = Vec::new();
    t.run(|_, rec| {
        losses.push(rec.loss);
        Ok(())
    })
    .unwrap();
    let k = slope(&losses);
    assert!(k < 0.0, "slope {k}");
}
