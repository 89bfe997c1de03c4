use patchmorph::geometry::Affine;
use patchmorph::volumes::synth::{synth_case_with, Anatomy, WarpConfig};
use patchmorph::volumes::{
    align_centers, center_at_origin, crop_nonzero, mirror_lr, DisplacementField, ImageStack, LabelVolume,
    SaliencySampler,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn ramp(dims: [usize; 3], affine: Affine) -> ImageStack {
    let n: usize = dims.iter().product();
    ImageStack::new(dims, (0..n).map(|i| (i % 17) as f32 * 0.25 + 1.0).collect(), affine).unwrap()
}

fn oblique() -> Affine {
    Affine::from_rows([[0.0, -1.5, 0.0, 12.0], [0.9, 0.0, 0.0, -4.0], [0.0, 0.0, 2.0, 7.5]])
}

#[test]
fn nifti_image_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let img = ramp([5, 4, 3], oblique());
    let p = dir.path().join("img.nii");
    img.save(&p).unwrap();
    let back = ImageStack::load(&p).unwrap();
    assert_eq!(back.dims(), img.dims());
    assert_eq!(back.data(), img.data());
    for r in 0..3 {
        for c in 0..4 {
            assert!((back.affine().matrix()[r][c] - img.affine().matrix()[r][c]).abs() < 1e-5);
        }
    }
}

#[test]
fn raw_label_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let data: Vec<u32> = (0..60).map(|i| (i * 7919) % 70_001).collect();
    let lab = LabelVolume::new([5, 4, 3], data, oblique()).unwrap();
    let p = dir.path().join("lab.json");
    lab.save(&p).unwrap();
    assert_eq!(LabelVolume::load(&p).unwrap(), lab);
}

#[test]
fn nifti_labels_keep_ids() {
    let dir = tempfile::tempdir().unwrap();
    let lab = LabelVolume::new([3, 3, 3], (0..27).map(|i| i % 5).collect(), Affine::identity()).unwrap();
    let p = dir.path().join("lab.nii");
    lab.save(&p).unwrap();
    assert_eq!(LabelVolume::load(&p).unwrap().data(), lab.data());
}

#[test]
fn displacement_field_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let dims = [4, 3, 2];
    let data: Vec<f64> = (0..72).map(|i| i as f64 * 0.5 - 9.0).collect();
    let f = DisplacementField::new(dims, Affine::scaling([2.0, 2.0, 3.0]), data).unwrap();
    let p = dir.path().join("ddf.nii");
    f.save(&p).unwrap();
    let back = DisplacementField::load(&p).unwrap();
    assert_eq!(back.dims(), dims);
    assert_eq!(back.data(), f.data());
}

#[test]
fn crop_keeps_world_positions() {
    let mut data = vec![0f32; 6 * 5 * 4];
    let idx = |i: usize, j: usize, k: usize| i + 6 * (j + 5 * k);
    data[idx(2, 1, 1)] = 3.0;
    data[idx(4, 3, 2)] = 5.0;
    let img = ImageStack::new([6, 5, 4], data, oblique()).unwrap();
    let crop = crop_nonzero(&img).unwrap();
    assert_eq!(crop.dims(), [3, 3, 2]);
    let w = img.affine().apply([4.0, 3.0, 2.0]);
    assert!((crop.sample_world(w) - 5.0).abs() < 1e-9);
    assert!(crop_nonzero(&ImageStack::new([2, 2, 2], vec![0.0; 8], Affine::identity()).unwrap()).is_err());
}

#[test]
fn centring_moves_array_centre_to_origin() {
    let c = center_at_origin(&ramp([5, 6, 7], oblique())).unwrap();
    assert!(c.world_center().iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn align_centers_reports_shift() {
    let fixed = ramp([5, 5, 5], Affine::translation([10.0, 0.0, 0.0]));
    let moving = ramp([5, 5, 5], Affine::translation([0.0, 3.0, 0.0]));
    let (moved, shift) = align_centers(&moving, &fixed).unwrap();
    assert_eq!(shift, [10.0, -3.0, 0.0]);
    assert_eq!(moved.world_center(), fixed.world_center());
}

#[test]
fn mirroring_reflects_world_x() {
    let img = ramp([6, 3, 2], Affine::scaling([2.0, 1.0, 1.0]));
    let m = mirror_lr(&img).unwrap();
    let cx = img.world_center()[0];
    for x in [0.0, 2.0, 6.0] {
        let a = img.sample_world([x, 1.0, 1.0]);
        let b = m.sample_world([2.0 * cx - x, 1.0, 1.0]);
        assert!((a - b).abs() < 1e-9);
    }
    assert_eq!(mirror_lr(&m).unwrap().data(), img.data());
}

#[test]
fn saliency_draws_follow_two_to_one_mix() {
    // One bright voxel in an otherwise dark image.
    let mut data = vec![0f32; 1000];
    data[555] = 1.0;
    let img = ImageStack::new([10, 10, 10], data, Affine::identity()).unwrap();
    let s = SaliencySampler::new(&img).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 6000;
    let bright = s
        .sample(n, &mut rng)
        .into_iter()
        .filter(|p| (p[0] - 5.0).abs() <= 0.5 && (p[1] - 5.0).abs() <= 0.5 && (p[2] - 5.0).abs() <= 0.5)
        .count();
    let frac = bright as f64 / n as f64;
    assert!((frac - 2.0 / 3.0).abs() < 0.03, "foreground share {frac}");
}

#[test]
fn zero_amplitude_warp_leaves_moving_equal_to_fixed() {
    let an = Anatomy::generate(24, 4, 1).unwrap();
    let c = synth_case_with(&an, 5, &WarpConfig::default(), &WarpConfig::NONE).unwrap();
    assert_eq!(c.fixed.data(), c.moving.data());
    assert_eq!(c.fixed_labels.data(), c.moving_labels.data());
    assert_eq!(c.true_ddf.max_norm(), 0.0);
}

#[test]
fn different_seeds_give_different_fields() {
    let an = Anatomy::generate(24, 4, 1).unwrap();
    let a = synth_case_with(&an, 1, &WarpConfig::default(), &WarpConfig::default()).unwrap();
    let b = synth_case_with(&an, 2, &WarpConfig::default(), &WarpConfig::default()).unwrap();
    assert_ne!(a.true_ddf.data(), b.true_ddf.data());
    let again = synth_case_with(&an, 1, &WarpConfig::default(), &WarpConfig::default()).unwrap();
    assert_eq!(a.true_ddf.data(), again.true_ddf.data());
}

fn dice_one(a: &[u32], b: &[u32]) -> f64 {
    let labels: std::collections::BTreeSet<u32> = a.iter().chain(b).copied().filter(|&l| l > 0).collect();
    let mut sum = 0.0;
    for &l in &labels {
        let na = a.iter().filter(|&&v| v == l).count();
        let nb = b.iter().filter(|&&v| v == l).count();
        let both = a.iter().zip(b).filter(|(&x, &y)| x == l && y == l).count();
        sum += 2.0 * both as f64 / (na + nb) as f64;
    }
    sum / labels.len() as f64
}

/// Warp the fixed labels through the true field and back by following
/// continuous coordinates: x -> y = x + D(x) -> y + forward(y) ~ x.
#[test]
fn true_field_round_trips_labels() {
    let an = Anatomy::generate(48, 6, 0).unwrap();
    let c = synth_case_with(&an, 11, &WarpConfig::default(), &WarpConfig::default()).unwrap();
    let fl = &c.fixed_labels;
    let [n, _, _] = fl.dims();
    let mut back = Vec::with_capacity(fl.data().len());
    for k in 0..n {
        for j in 0..n {
            for i in 0..n {
                let x = fl.affine().apply([i as f64, j as f64, k as f64]);
                let d = c.true_ddf.sample(x);
                let y = [x[0] + d[0], x[1] + d[1], x[2] + d[2]];
                let f = c.forward_ddf.sample(y);
                back.push(fl.sample_world([y[0] + f[0], y[1] + f[1], y[2] + f[2]]));
            }
        }
    }
    let d = dice_one(fl.data(), &back);
    assert!(d > 0.99, "round-trip Dice {d}");
    assert!(c.true_ddf.max_norm() > 1.0);
}

#[test]
fn labels_cover_most_of_the_foreground() {
    let an = Anatomy::generate(32, 6, 0).unwrap();
    let fg = an.image.data().iter().filter(|&&v| v > 0.0).count();
    let labelled = an.labels.data().iter().filter(|&&v| v > 0).count();
    assert!(labelled as f64 > 0.1 * fg as f64);
    let ids = an.labels.label_set();
    assert!(ids.len() >= 4, "labels {ids:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn resampling_onto_own_grid_is_identity(vals in proptest::collection::vec(-5.0f64..5.0, 3 * 27)) {
        let aff = Affine::from_rows([[1.5, 0.0, 0.0, -2.0], [0.0, 1.0, 0.2, 1.0], [0.0, 0.0, 0.8, 0.0]]);
        let f = DisplacementField::new([3, 3, 3], aff, vals).unwrap();
        let g = f.resample([3, 3, 3], aff).unwrap();
        for (a, b) in f.data().iter().zip(g.data()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn sampling_at_voxel_centres_returns_voxel_values(i in 0usize..5, j in 0usize..4, k in 0usize..3) {
        let img = ramp([5, 4, 3], oblique());
        let w = img.affine().apply([i as f64, j as f64, k as f64]);
        let v = img.data()[img.index(i, j, k)] as f64;
        prop_assert!((img.sample_world(w) - v).abs() < 1e-6);
    }
}
