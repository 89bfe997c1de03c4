use diffcore::gradcheck::GradCheck;
use diffcore::{Graph, NormMode, Padding, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn check<F>(name: &str, inputs: &[Tensor<f64>], f: F)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let (worst, bad) = GradCheck::default().run(inputs, f).unwrap();
    assert!(bad.is_empty(), "{name}: worst rel err {worst:e}, mismatches {bad:?}");
}

#[test]
fn grad_elementwise() {
    let a = random(&[2, 3, 4], 1, -1.0, 1.0);
    let b = random(&[2, 3, 4], 2, -1.0, 1.0);
    check("add", &[a.clone(), b.clone()], |g, v| g.add(v[0], v[1]));
    check("sub", &[a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]));
    check("mul", &[a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]));
    check("scale", &[a.clone()], |g, v| Ok(g.scale(v[0], -2.5)));
    check("add_scalar", &[a.clone()], |g, v| Ok(g.add_scalar(v[0], 0.3)));
    check("sum", &[a.clone()], |g, v| Ok(g.sum(v[0])));
    check("mean", &[a.clone()], |g, v| Ok(g.mean(v[0])));
    check("reshape", &[a.clone()], |g, v| g.reshape(v[0], &[6, 4]));
    // Keep samples away from the kink.
    let away = a.map(|x| if x.abs() < 0.05 { x + 0.1 } else { x });
    check("leaky_relu", &[away], |g, v| Ok(g.leaky_relu(v[0], 0.01)));
    let s1 = Tensor::scalar(0.7);
    let s2 = Tensor::scalar(-1.3);
    check("weighted_sum", &[s1, s2], |g, v| g.weighted_sum(&[(v[0], 0.5), (v[1], 2.0)]));
}

#[test]
fn grad_channel_ops() {
    let a = random(&[2, 2, 3, 3, 3], 3, -1.0, 1.0);
    let b = random(&[2, 3, 3, 3, 3], 4, -1.0, 1.0);
    check("concat_channels", &[a.clone(), b], |g, v| g.concat_channels(&[v[0], v[1]]));
    check("mean_spatial", &[a], |g, v| g.mean_spatial(v[0]));
    let x = random(&[3, 5], 5, -1.0, 1.0);
    let w = random(&[4, 5], 6, -1.0, 1.0);
    let b = random(&[4], 7, -1.0, 1.0);
    check("linear", &[x, w, b], |g, v| g.linear(v[0], v[1], v[2]));
}

#[test]
fn grad_conv3d() {
    let x = random(&[2, 2, 5, 5, 5], 8, -1.0, 1.0);
    let w = random(&[3, 2, 3, 3, 3], 9, -1.0, 1.0);
    let b = random(&[3], 10, -1.0, 1.0);
    check("conv3d s1", &[x.clone(), w.clone(), b.clone()], |g, v| {
        g.conv3d(v[0], v[1], Some(v[2]), 1, 1)
    });
    check("conv3d s2", &[x.clone(), w, b], |g, v| g.conv3d(v[0], v[1], Some(v[2]), 2, 1));
    let w1 = random(&[3, 2, 1, 1, 1], 11, -1.0, 1.0);
    check("conv3d 1x1", &[x, w1], |g, v| g.conv3d(v[0], v[1], None, 1, 0));
}

#[test]
fn grad_norms() {
    let x = random(&[2, 3, 3, 3, 3], 12, -1.0, 1.0);
    let gamma = random(&[3], 13, 0.5, 1.5);
    let beta = random(&[3], 14, -1.0, 1.0);
    check("instance_norm", &[x.clone()], |g, v| g.instance_norm(v[0], 1e-5));
    check("batch_norm train", &[x.clone(), gamma.clone(), beta.clone()], |g, v| {
        Ok(g.batch_norm(v[0], v[1], v[2], 1e-5, NormMode::Train)?.0)
    });
    let (mean, var) = (vec![0.1, -0.2, 0.3], vec![0.5, 1.0, 2.0]);
    check("batch_norm eval", &[x, gamma, beta], |g, v| {
        let mode = NormMode::Eval { mean: &mean, var: &var };
        Ok(g.batch_norm(v[0], v[1], v[2], 1e-5, mode)?.0)
    });
}

#[test]
fn grad_upsample() {
    let x = random(&[1, 2, 2, 3, 2], 15, -1.0, 1.0);
    check("upsample", &[x], |g, v| g.upsample_nearest2x(v[0]));
}

#[test]
fn grad_grid_sample() {
    let x = random(&[1, 2, 4, 5, 6], 16, -1.0, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    // Keep sample points off integer lattice planes where the stencil switches.
    let grid = Tensor::from_fn(&[1, 3, 2, 3, 3], |i| {
        let n = [6.0, 5.0, 4.0][i / 18];
        let v: f64 = rng.random_range(-0.8..n - 0.2);
        let f = v - v.floor();
        if f < 0.05 || f > 0.95 {
            v + 0.3
        } else {
            v
        }
    });
    for pad in [Padding::Zeros, Padding::Border] {
        check("grid_sample", &[x.clone(), grid.clone()], |g, v| g.grid_sample(v[0], v[1], pad));
    }
}

#[test]
fn grad_linalg() {
    let a = random(&[2, 4, 3], 18, -1.0, 1.0);
    let b = random(&[2, 3, 5], 19, -1.0, 1.0);
    check("bmm", &[a, b], |g, v| g.bmm(v[0], v[1]));
    let p = random(&[2, 12], 20, -0.5, 0.5);
    check("affine_rows", &[p.clone()], |g, v| g.affine_rows(v[0]));
    check("matrix_exp", &[p], |g, v| {
        let m = g.affine_rows(v[0])?;
        g.matrix_exp_approx(m, 10)
    });
    let sq = random(&[1, 3, 3], 21, -1.0, 1.0);
    check("add_eye", &[sq], |g, v| g.add_eye(v[0], 2.0));
}

#[test]
fn grad_integrate_velocity() {
    let v = random(&[1, 3, 4, 4, 4], 22, -0.4, 0.4);
    check("integrate_velocity", &[v], |g, v| g.integrate_velocity(v[0], 3));
}

#[test]
fn checker_flags_wrong_backward() {
    let x = random(&[5], 23, 0.5, 1.0);
    let (_, bad) = GradCheck::default()
        .run(&[x], |g, v| {
            let sq = g.value(v[0]).map(|a| a * a);
            // Deliberately off by a factor of two.
            Ok(g.push(sq, &[v[0]], |ctx| vec![Some(ctx.grad.zip_map(ctx.inputs[0], |g, x| g * x))]))
        })
        .unwrap();
    assert_eq!(bad.len(), 5);
}
