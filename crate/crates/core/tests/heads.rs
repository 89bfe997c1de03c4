use diffcore::gradcheck::GradCheck;
use diffcore::{Graph, ParamStore, Tensor};
use patchmorph::heads::{affine_displacement, update_running_stats, BnMode, HeadConfig, BN_MOMENTUM};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(0.0..1.0))
}

fn init(head: &HeadConfig, seed: u64) -> ParamStore {
    let mut store = ParamStore::new();
    head.init(&mut store, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    store
}

fn predict(head: &HeadConfig, store: &ParamStore, mode: BnMode, n: usize) -> Tensor<f64> {
    let p = head.patch_size;
    let mut g = Graph::<f64>::new();
    let binding = store.bind(&mut g, "", false);
    let f = g.constant(random(&[n, 1, p, p, p], 1));
    let m = g.constant(random(&[n, 1, p, p, p], 2));
    let out = head.forward(&mut g, &binding, store, f, m, mode).unwrap();
    g.value(out.d_local).clone()
}

#[test]
fn fresh_heads_predict_zero_displacement() {
    let heads = [
        HeadConfig::affine(0, 16).with_widths(vec![2, 4, 4, 4]),
        HeadConfig::dense(1, 8).with_widths(vec![2, 4, 4]),
    ];
    for head in &heads {
        let store = init(head, 3);
        for mode in [BnMode::Train, BnMode::Eval] {
            let d = predict(head, &store, mode, 2);
            let p = head.patch_size;
            assert_eq!(d.shape(), &[2, 3, p, p, p]);
            assert!(d.max_abs() < 1e-12, "{:?} {mode:?}: {}", head.kind, d.max_abs());
        }
    }
}

#[test]
fn identity_map_gives_zero_displacement() {
    let mut g = Graph::<f64>::new();
    let mut eye = vec![0.0; 32];
    for b in 0..2 {
        for a in 0..4 {
            eye[b * 16 + a * 5] = 1.0;
        }
    }
    let t = g.constant(Tensor::from_vec(&[2, 4, 4], eye).unwrap());
    let d = affine_displacement(&mut g, t, 4).unwrap();
    assert!(g.value(d).max_abs() < 1e-12);
}

#[test]
fn translation_column_moves_by_a_tenth_of_the_patch() {
    let p = 8;
    let tau = [2.0, -1.0, 0.5];
    let mut m = vec![0.0; 16];
    for a in 0..3 {
        m[a * 5] = 1.0;
        m[a * 4 + 3] = tau[a];
    }
    let mut g = Graph::<f64>::new();
    let t = g.constant(Tensor::from_vec(&[1, 4, 4], m).unwrap());
    let d = affine_displacement(&mut g, t, p).unwrap();
    let s = p * p * p;
    for (a, &ta) in tau.iter().enumerate() {
        for &v in &g.value(d).data()[a * s..(a + 1) * s] {
            assert!((v - p as f64 * 0.1 * ta).abs() < 1e-12);
        }
    }
}

#[test]
fn scaling_about_patch_centre() {
    let p = 4;
    let k = 1.2;
    let mut m = vec![0.0; 16];
    for a in 0..3 {
        m[a * 5] = k;
    }
    let mut g = Graph::<f64>::new();
    let t = g.constant(Tensor::from_vec(&[1, 4, 4], m).unwrap());
    let d = affine_displacement(&mut g, t, p).unwrap();
    // Voxel i sits at (i + 0.5) / p; displacement is p (k - 1)(r - 0.5).
    for i in 0..p {
        let r = (i as f64 + 0.5) / p as f64;
        let want = p as f64 * (k - 1.0) * (r - 0.5);
        assert!((g.value(d).data()[i] - want).abs() < 1e-12);
    }
}

#[test]
fn affine_displacement_gradient() {
    let t = random(&[2, 4, 4], 5);
    let (worst, bad) = GradCheck::default()
        .run(&[t], |g, v| {
            affine_displacement(g, v[0], 4).map_err(|e| diffcore::DiffError::Invalid(e.to_string()))
        })
        .unwrap();
    assert!(bad.is_empty(), "worst {worst:e}");
}

fn perturb_outputs(head: &HeadConfig, store: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = store
        .params()
        .map(|(n, _)| n.clone())
        .filter(|n| n.starts_with(&head.prefix()) && n.contains("out/"))
        .collect();
    for name in names {
        let t = store.get_mut(&name).unwrap();
        for v in t.data_mut() {
            *v = rng.random_range(-0.05..0.05);
        }
    }
}

#[test]
fn head_gradients_reach_both_patches() {
    let head = HeadConfig::dense(0, 8).with_widths(vec![2, 2, 2]);
    let mut store = init(&head, 7);
    perturb_outputs(&head, &mut store, 8);
    let f = random(&[1, 1, 8, 8, 8], 9);
    let m = random(&[1, 1, 8, 8, 8], 10);
    let check = GradCheck {
        step: 1e-6,
        probes: 12,
        tolerance: 1e-2,
        seed: 1,
    };
    let (worst, bad) = check
        .run(&[f, m], |g, v| {
            let binding = store.bind(g, "", false);
            head.forward(g, &binding, &store, v[0], v[1], BnMode::Eval)
                .map(|o| o.d_local)
                .map_err(|e| diffcore::DiffError::Invalid(e.to_string()))
        })
        .unwrap();
    assert!(bad.is_empty(), "worst {worst:e}: {bad:?}");
}

#[test]
fn perturbed_affine_head_moves() {
    let head = HeadConfig::affine(0, 16).with_widths(vec![2, 2, 2, 2]);
    let mut store = init(&head, 11);
    perturb_outputs(&head, &mut store, 12);
    let d = predict(&head, &store, BnMode::Train, 2);
    assert!(d.max_abs() > 1e-4 && d.all_finite());
}

#[test]
fn running_statistics_use_momentum() {
    let head = HeadConfig::dense(0, 8).with_widths(vec![2, 2, 2]);
    let mut store = init(&head, 13);
    let p = head.patch_size;
    let mut g = Graph::<f32>::new();
    let binding = store.bind(&mut g, "", true);
    let f = g.constant(random(&[2, 1, p, p, p], 14).cast());
    let m = g.constant(random(&[2, 1, p, p, p], 15).cast());
    let out = head.forward(&mut g, &binding, &store, f, m, BnMode::Train).unwrap();
    assert!(!out.batch_stats.is_empty());
    let (name, st) = &out.batch_stats[0];
    let mean0 = store.buffer(&format!("{name}/mean")).unwrap().data().to_vec();
    let var0 = store.buffer(&format!("{name}/var")).unwrap().data().to_vec();
    update_running_stats(&mut store, &out.batch_stats);
    let mean1 = store.buffer(&format!("{name}/mean")).unwrap().data();
    let var1 = store.buffer(&format!("{name}/var")).unwrap().data();
    for c in 0..mean0.len() {
        let want = (1.0 - BN_MOMENTUM) * mean0[c] + BN_MOMENTUM * st.mean[c];
        assert!((mean1[c] - want).abs() < 1e-6);
        let want = (1.0 - BN_MOMENTUM) * var0[c] + BN_MOMENTUM * st.var[c];
        assert!((var1[c] - want).abs() < 1e-6);
    }
}

#[test]
fn mismatched_patches_are_rejected() {
    let head = HeadConfig::dense(0, 8).with_widths(vec![2, 2, 2]);
    let store = init(&head, 16);
    let mut g = Graph::<f64>::new();
    let binding = store.bind(&mut g, "", false);
    let f = g.constant(random(&[1, 1, 8, 8, 8], 1));
    let m = g.constant(random(&[1, 1, 4, 4, 4], 2));
    assert!(head.forward(&mut g, &binding, &store, f, m, BnMode::Eval).is_err());
}
