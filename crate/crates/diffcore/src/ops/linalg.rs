//! Small batched matrix algebra and flow-field integration.

use crate::graph::{Graph, Var};
use crate::ops::resample::{identity_grid, Padding};
use crate::real::Real;
use crate::tensor::Tensor;
use crate::{DiffError, Result};

impl<T: Real> Graph<T> {
    /// Batched matrix product `(n, r, k) x (n, k, c) -> (n, r, c)`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(DiffError::ShapeMismatch(format!("bmm: {sa:?} x {sb:?}")));
        }
        let (n, r, k, c) = (sa[0], sa[1], sa[2], sb[2]);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![T::zero(); n * r * c];
        for i in 0..n {
            T::gemm(
                r,
                k,
                c,
                T::one(),
                &av[i * r * k..],
                k,
                1,
                &bv[i * k * c..],
                c,
                1,
                T::zero(),
                &mut out[i * r * c..(i + 1) * r * c],
                c,
                1,
            );
        }
        let out = Tensor::from_vec(&[n, r, c], out)?;
        Ok(self.push(out, &[a, b], move |ctx| {
            let av = ctx.inputs[0].data();
            let bv = ctx.inputs[1].data();
            let g = ctx.grad.data();
            let da = ctx.needs[0].then(|| {
                let mut da = vec![T::zero(); n * r * k];
                for i in 0..n {
                    // da = g (r x c) * b^T (c x k)
                    T::gemm(r, c, k, T::one(), &g[i * r * c..], c, 1, &bv[i * k * c..], 1, c, T::zero(), &mut da[i * r * k..(i + 1) * r * k], k, 1);
                }
                Tensor::from_vec(&[n, r, k], da).unwrap()
            });
            let db = ctx.needs[1].then(|| {
                let mut db = vec![T::zero(); n * k * c];
                for i in 0..n {
                    // db = a^T (k x r) * g (r x c)
                    T::gemm(k, r, c, T::one(), &av[i * r * k..], 1, k, &g[i * r * c..], c, 1, T::zero(), &mut db[i * k * c..(i + 1) * k * c], c, 1);
                }
                Tensor::from_vec(&[n, k, c], db).unwrap()
            });
            vec![da, db]
        }))
    }

    /// `a + s * I` for a batch of square matrices `(n, m, m)`.
    pub fn add_eye(&mut self, a: Var, s: f64) -> Result<Var> {
        let sh = self.shape(a).to_vec();
        if sh.len() != 3 || sh[1] != sh[2] {
            return Err(DiffError::ShapeMismatch(format!("add_eye: {sh:?}")));
        }
        let m = sh[1];
        let s = T::lit(s);
        let mut out = self.value(a).clone();
        for i in 0..sh[0] {
            for j in 0..m {
                out.data_mut()[i * m * m + j * m + j] += s;
            }
        }
        Ok(self.push(out, &[a], |ctx| vec![Some(ctx.grad.clone())]))
    }

    /// Arrange 12 parameters per item as the top three rows of a 4x4 matrix
    /// whose last row is zero: `(n, 12) -> (n, 4, 4)`.
    pub fn affine_rows(&mut self, p: Var) -> Result<Var> {
        let sh = self.shape(p).to_vec();
        if sh.len() != 2 || sh[1] != 12 {
            return Err(DiffError::ShapeMismatch(format!("affine_rows: {sh:?}")));
        }
        let n = sh[0];
        let pv = self.value(p).data();
        let mut out = vec![T::zero(); n * 16];
        for i in 0..n {
            out[i * 16..i * 16 + 12].copy_from_slice(&pv[i * 12..(i + 1) * 12]);
        }
        let out = Tensor::from_vec(&[n, 4, 4], out)?;
        Ok(self.push(out, &[p], move |ctx| {
            let g = ctx.grad.data();
            let mut dp = vec![T::zero(); n * 12];
            for i in 0..n {
                dp[i * 12..(i + 1) * 12].copy_from_slice(&g[i * 16..i * 16 + 12]);
            }
            vec![Some(Tensor::from_vec(&[n, 12], dp).unwrap())]
        }))
    }

    /// Matrix exponential via `(A / k + I)^k` for a batch of square matrices.
    pub fn matrix_exp_approx(&mut self, a: Var, k: usize) -> Result<Var> {
        if k == 0 {
            return Err(DiffError::Invalid("matrix_exp_approx needs k >= 1".into()));
        }
        let scaled = self.scale(a, 1.0 / k as f64);
        let base = self.add_eye(scaled, 1.0)?;
        let mut acc = base;
        for _ in 1..k {
            acc = self.bmm(acc, base)?;
        }
        Ok(acc)
    }

    /// Scaling and squaring: turn a stationary velocity `v (n, 3, d, h, w)` in
    /// voxel units into a displacement by scaling with `2^-steps` and composing
    /// the field with itself `steps` times.
    pub fn integrate_velocity(&mut self, v: Var, steps: usize) -> Result<Var> {
        let [n, c, d, h, w] = self.value(v).dims5()?;
        if c != 3 {
            return Err(DiffError::ShapeMismatch(format!(
                "integrate_velocity expects 3 channels, got {c}"
            )));
        }
        let id = self.constant(identity_grid(n, [d, h, w]));
        let mut disp = self.scale(v, 0.5f64.powi(steps as i32));
        for _ in 0..steps {
            let grid = self.add(disp, id)?;
            let warped = self.grid_sample(disp, grid, Padding::Border)?;
            disp = self.add(disp, warped)?;
        }
        Ok(disp)
    }
}
