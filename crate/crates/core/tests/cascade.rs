use std::sync::Arc;

use diffcore::{Graph, Tensor};
use patchmorph::cascade::{
    block_forward, build_schedule, descend_displacement, descend_grid, repeat_source, to_patch_voxels, BlockInput,
    Model, ModelSpec, PatchChain, ScaleSchedule,
};
use patchmorph::geometry::{centered_nested_transform, mat_vec, AugmentRange, Canvas, CoordinateField, Mat3};
use patchmorph::heads::{BnMode, HeadKind};
use patchmorph::ops::sample_volumes;
use patchmorph::volumes::synth::{grid_affine, Anatomy};
use patchmorph::{Affine, ImageStack};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn linear_schedule_endpoints_and_zoom() {
    let s = ScaleSchedule::linear(9.0, 1.0, 5, 32).unwrap();
    assert_eq!(s.voxel_mm, vec![9.0, 7.0, 5.0, 3.0, 1.0]);
    assert_eq!(s.edge_mm(0), 288.0);
    assert_eq!(s.zoom(0), 1.0);
    assert!((s.zoom(4) - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(s.head_group, vec![0, 0, 1, 1, 2]);
    assert!(ScaleSchedule::linear(1.0, 2.0, 3, 32).is_err());
}

#[test]
fn schedule_spans_the_largest_canvas() {
    let a = ImageStack::new([64, 40, 30], vec![1.0; 64 * 40 * 30], Affine::scaling([1.0, 1.5, 2.0])).unwrap();
    let b = ImageStack::new([10, 10, 10], vec![1.0; 1000], Affine::scaling([0.8, 3.0, 3.0])).unwrap();
    let s = build_schedule(&[a, b], 4, 16).unwrap();
    assert!((s.edge_mm(0) - 63.0).abs() < 1e-12);
    assert_eq!(*s.voxel_mm.last().unwrap(), 0.8);
}

#[test]
fn model_spec_places_dense_head_last() {
    let sched = ScaleSchedule::linear(4.0, 1.0, 9, 16).unwrap();
    let spec = ModelSpec::new(sched.clone(), &[2, 2, 2, 2], &[2, 2, 2], false).unwrap();
    assert_eq!(spec.kinds(), vec![HeadKind::Affine, HeadKind::Affine, HeadKind::Dense]);
    let spec = ModelSpec::new(sched, &[2, 2, 2, 2], &[2, 2, 2], true).unwrap();
    assert_eq!(spec.kinds(), vec![HeadKind::Affine; 3]);
}

#[test]
fn model_checkpoint_round_trip() {
    let sched = ScaleSchedule::linear(4.0, 1.0, 3, 16).unwrap();
    let spec = ModelSpec::new(sched, &[2, 2, 2, 2], &[2, 2, 2], false).unwrap();
    let model = Model::init(spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.pmck");
    model.to_checkpoint(None, Default::default()).unwrap().save(&path).unwrap();
    assert_eq!(Model::load(&path).unwrap(), model);
}

#[test]
fn descending_carries_linear_fields_exactly() {
    let p = 8;
    let nested = centered_nested_transform(0.5);
    // Parent displacement d(q) = A q + c over parent voxel indices q.
    let a = [[0.1, 0.0, 0.2], [0.0, -0.3, 0.0], [0.05, 0.0, 0.1]];
    let c = [1.0, 2.0, -1.0];
    let s = p * p * p;
    let parent = Tensor::from_fn(&[1, 3, p, p, p], |idx| {
        let (ch, o) = (idx / s, idx % s);
        let q = [(o % p) as f64, ((o / p) % p) as f64, (o / (p * p)) as f64];
        mat_vec(&a, q)[ch] + c[ch]
    });
    let grid = descend_grid::<f64>(&[nested], p).unwrap();
    let mut g = Graph::<f64>::new();
    let d = g.constant(parent);
    let child = descend_displacement(&mut g, d, &[nested], p).unwrap();
    let out = g.value(child).data();
    for o in 0..s {
        let q = [grid.data()[o], grid.data()[s + o], grid.data()[2 * s + o]];
        let want = mat_vec(&a, q);
        for ch in 0..3 {
            assert!((out[ch * s + o] - want[ch] - c[ch]).abs() < 1e-12);
        }
    }
}

fn anatomy_image() -> Arc<ImageStack> {
    let an = Anatomy::generate(32, 4, 0).unwrap();
    Arc::new(an.image)
}

/// Freshly initialized heads never move anything, however deep the chain.
#[test]
fn identity_cascade_keeps_fixed_coordinates() {
    let image = anatomy_image();
    let canvas = Canvas::enclosing(&grid_affine(32), [32; 3]).unwrap();
    let p = 16;
    let sched = ScaleSchedule::linear(canvas.max_edge() / p as f64, 0.6, 9, p).unwrap();
    let spec = ModelSpec::new(sched.clone(), &[2, 2, 2, 2], &[2, 2, 2], false).unwrap();
    let model = Model::init(spec, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let aug = AugmentRange {
        max_rotation_deg: 15.0,
        scale_min: 0.9,
        scale_max: 1.1,
        max_shift_mm: 0.0,
    };
    let mut chains: Vec<PatchChain> = (0..2)
        .map(|_| PatchChain::start(canvas, canvas.center(), &sched, &aug, &mut rng))
        .collect();
    let fixed = repeat_source(&image, 2);
    let moving = repeat_source(&image, 2);

    let mut g = Graph::<f64>::new();
    let binding = model.store.bind(&mut g, "", false);
    let mut d_in = None;
    for t in 0..9 {
        if t > 0 {
            let nested: Vec<Affine> = chains.iter_mut().map(|c| c.descend(sched.zoom(t), &mut rng)).collect();
            d_in = Some(descend_displacement(&mut g, d_in.unwrap(), &nested, p).unwrap());
        }
        let coords: Vec<CoordinateField> = chains.iter().map(|c| c.coords(p)).collect();
        let scalers: Vec<Mat3> = chains.iter().map(|c| c.world_scaler(p)).collect();
        let input = BlockInput {
            fixed: &fixed,
            moving: &moving,
            coords: &coords,
            world_scalers: &scalers,
        };
        let out = block_forward(&mut g, model.spec.head(t), &binding, &model.store, BnMode::Train, &input, d_in)
            .unwrap();
        let x_moved = g.add(out.x_f, out.d_out).unwrap();
        assert_eq!(g.value(x_moved).data(), g.value(out.x_f).data(), "scale {t}");
        let p_moved = sample_volumes(&mut g, &moving, x_moved).unwrap();
        let diff = g
            .value(p_moved)
            .data()
            .iter()
            .zip(g.value(out.p_f).data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-9, "scale {t}: {diff}");
        d_in = Some(out.d_out);
    }
    assert_eq!(chains[0].depth(), 9);
}

#[test]
fn chain_edge_follows_schedule() {
    let canvas = Canvas::enclosing(&Affine::scaling([1.0, 2.0, 0.5]), [50, 30, 80]).unwrap();
    let sched = ScaleSchedule::linear(5.0, 1.0, 3, 16).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut chain = PatchChain::start(canvas, canvas.center(), &sched, &AugmentRange::NONE, &mut rng);
    for t in 0..3 {
        if t > 0 {
            chain.descend(sched.zoom(t), &mut rng);
        }
        let w = chain.to_world();
        let edge = patchmorph::geometry::norm(w.apply_vector([1.0, 0.0, 0.0]));
        assert!((edge - sched.edge_mm(t)).abs() < 1e-9, "scale {t}: {edge}");
        let ws = chain.world_scaler(16);
        assert!((ws[1][1] - sched.voxel_mm[t]).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn patch_voxels_invert_world_scaler(seed in 0u64..1000, d in proptest::array::uniform3(-20.0f64..20.0)) {
        let canvas = Canvas::enclosing(&Affine::identity(), [40, 40, 40]).unwrap();
        let sched = ScaleSchedule::linear(3.0, 1.0, 2, 16).unwrap();
        let aug = AugmentRange { max_rotation_deg: 25.0, scale_min: 0.8, scale_max: 1.2, max_shift_mm: 0.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let chain = PatchChain::start(canvas, canvas.center(), &sched, &aug, &mut rng);
        let ws = chain.world_scaler(16);
        let v = to_patch_voxels(&ws, d).unwrap();
        let back = mat_vec(&ws, v);
        for a in 0..3 {
            prop_assert!((back[a] - d[a]).abs() < 1e-9);
        }
    }
}
