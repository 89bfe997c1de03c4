//! Batch and instance normalization over `(n, c, d, h, w)` tensors.

use crate::graph::{Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;
use crate::{DiffError, Result};

/// Statistics of a training-mode batch norm, for updating running averages.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance.
    pub var: Vec<T>,
}

#[derive(Clone, Copy, Debug)]
pub enum NormMode<'a, T> {
    /// Normalize with the statistics of the current batch.
    Train,
    /// Normalize with frozen running statistics.
    Eval { mean: &'a [T], var: &'a [T] },
}

/// Flat indices of one channel across the whole batch.
fn channel_iter(n: usize, c: usize, s: usize, ch: usize) -> impl Iterator<Item = usize> {
    (0..n).flat_map(move |b| {
        let off = (b * c + ch) * s;
        off..off + s
    })
}

impl<T: Real> Graph<T> {
    /// Per-sample, per-channel standardization without learned parameters.
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let [n, c, d, h, w] = self.value(x).dims5()?;
        let s = d * h * w;
        let eps = T::lit(eps);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); n * c];
        let m = T::lit(s as f64);
        for g in 0..n * c {
            let xs = &xv[g * s..(g + 1) * s];
            let mean = xs.iter().copied().sum::<T>() / m;
            let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / m;
            let inv = T::one() / (var + eps).sqrt();
            inv_std[g] = inv;
            for (o, &v) in out[g * s..(g + 1) * s].iter_mut().zip(xs) {
                *o = (v - mean) * inv;
            }
        }
        let out = Tensor::from_vec(&[n, c, d, h, w], out)?;
        Ok(self.push(out, &[x], move |ctx| {
            let y = ctx.output.data();
            let dy = ctx.grad.data();
            let mut dx = vec![T::zero(); y.len()];
            for g in 0..n * c {
                let r = g * s..(g + 1) * s;
                let sum_dy: T = dy[r.clone()].iter().copied().sum();
                let sum_dy_y: T = dy[r.clone()]
                    .iter()
                    .zip(&y[r.clone()])
                    .map(|(&a, &b)| a * b)
                    .sum();
                let k = inv_std[g] / m;
                for i in r {
                    dx[i] = k * (m * dy[i] - sum_dy - y[i] * sum_dy_y);
                }
            }
            vec![Some(Tensor::from_vec(ctx.inputs[0].shape(), dx).unwrap())]
        }))
    }

    /// Per-channel normalization with learned scale `gamma` and shift `beta`.
    ///
    /// In training mode the batch statistics are returned so the caller can
    /// update its running averages.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        mode: NormMode<'_, T>,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let [n, c, d, h, w] = self.value(x).dims5()?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(DiffError::ShapeMismatch(format!(
                "batch_norm: {c} channels, gamma {:?}, beta {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let s = d * h * w;
        let cnt = n * s;
        let m = T::lit(cnt as f64);
        let eps = T::lit(eps);
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();

        let mut means = vec![T::zero(); c];
        let mut inv_std = vec![T::zero(); c];
        let mut stats = None;
        match mode {
            NormMode::Train => {
                let mut var_unbiased = vec![T::zero(); c];
                for ch in 0..c {
                    let mean = channel_iter(n, c, s, ch).map(|i| xv[i]).sum::<T>() / m;
                    let ss: T = channel_iter(n, c, s, ch)
                        .map(|i| (xv[i] - mean) * (xv[i] - mean))
                        .sum();
                    means[ch] = mean;
                    inv_std[ch] = T::one() / (ss / m + eps).sqrt();
                    var_unbiased[ch] = if cnt > 1 {
                        ss / T::lit((cnt - 1) as f64)
                    } else {
                        T::zero()
                    };
                }
                stats = Some(BatchStats {
                    mean: means.clone(),
                    var: var_unbiased,
                });
            }
            NormMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(DiffError::ShapeMismatch(
                        "batch_norm: running statistics do not match channels".into(),
                    ));
                }
                for ch in 0..c {
                    means[ch] = mean[ch];
                    inv_std[ch] = T::one() / (var[ch] + eps).sqrt();
                }
            }
        }
        let train = matches!(mode, NormMode::Train);

        // Keep the normalized input for the backward pass.
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for ch in 0..c {
            for i in channel_iter(n, c, s, ch) {
                let v = (xv[i] - means[ch]) * inv_std[ch];
                xhat[i] = v;
                out[i] = v * gv[ch] + bv[ch];
            }
        }
        let out = Tensor::from_vec(&[n, c, d, h, w], out)?;
        let var = self.push(out, &[x, gamma, beta], move |ctx| {
            let dy = ctx.grad.data();
            let gv = ctx.inputs[1].data();
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for ch in 0..c {
                for i in channel_iter(n, c, s, ch) {
                    dgamma[ch] += dy[i] * xhat[i];
                    dbeta[ch] += dy[i];
                }
            }
            let dx = ctx.needs[0].then(|| {
                let mut dx = vec![T::zero(); dy.len()];
                for ch in 0..c {
                    let k = gv[ch] * inv_std[ch];
                    if train {
                        let km = k / m;
                        for i in channel_iter(n, c, s, ch) {
                            dx[i] = km * (m * dy[i] - dbeta[ch] - xhat[i] * dgamma[ch]);
                        }
                    } else {
                        for i in channel_iter(n, c, s, ch) {
                            dx[i] = k * dy[i];
                        }
                    }
                }
                Tensor::from_vec(ctx.inputs[0].shape(), dx).unwrap()
            });
            vec![
                dx,
                Some(Tensor::from_vec(&[c], dgamma).unwrap()),
                Some(Tensor::from_vec(&[c], dbeta).unwrap()),
            ]
        });
        Ok((var, stats))
    }
}
