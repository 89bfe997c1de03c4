//! Finite-difference verification of operator gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, Var};
use crate::tensor::Tensor;
use crate::Result;

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub step: f64,
    pub probes: usize,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-5,
            probes: 20,
            tolerance: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Mismatch {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheck {
    /// Compare the analytic gradient of `f` with central differences.
    ///
    /// `f` builds the output from the given inputs on a fresh graph. The output
    /// is reduced to a scalar with a fixed random projection so every output
    /// element contributes. Up to `probes` coordinates of each input are
    /// checked. Returns the largest relative error seen and any coordinate
    /// above tolerance.
    pub fn run<F>(&self, inputs: &[Tensor<f64>], f: F) -> Result<(f64, Vec<Mismatch>)>
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let eval = |xs: &[Tensor<f64>], proj: Option<&Tensor<f64>>| -> Result<(Graph<f64>, Var, Vec<Var>)> {
            let mut g = Graph::new();
            let vars: Vec<Var> = xs.iter().map(|x| g.param(x.clone())).collect();
            let out = f(&mut g, &vars)?;
            let loss = match proj {
                Some(p) => {
                    let p = g.constant(p.clone());
                    let m = g.mul(out, p)?;
                    g.sum(m)
                }
                None => out,
            };
            Ok((g, loss, vars))
        };

        let (g0, out0, _) = eval(inputs, None)?;
        let proj = Tensor::from_fn(g0.shape(out0), |_| rng.random_range(-1.0..1.0));
        drop(g0);

        let (g, loss, vars) = eval(inputs, Some(&proj))?;
        let grads = g.backward(loss);

        let mut worst = 0.0f64;
        let mut bad = Vec::new();
        for (i, x) in inputs.iter().enumerate() {
            let zero = Tensor::zeros(x.shape());
            let analytic = grads.get(vars[i]).unwrap_or(&zero);
            let picks: Vec<usize> = if x.len() <= self.probes {
                (0..x.len()).collect()
            } else {
                (0..self.probes).map(|_| rng.random_range(0..x.len())).collect()
            };
            for idx in picks {
                let mut shifted = inputs.to_vec();
                shifted[i].data_mut()[idx] += self.step;
                let (gp, lp, _) = eval(&shifted, Some(&proj))?;
                let fp = gp.value(lp).item();
                shifted[i].data_mut()[idx] -= 2.0 * self.step;
                let (gm, lm, _) = eval(&shifted, Some(&proj))?;
                let fm = gm.value(lm).item();
                let numeric = (fp - fm) / (2.0 * self.step);
                let a = analytic.data()[idx];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                // Tiny absolute differences are numerical noise.
                let rel = if (a - numeric).abs() < 1e-7 { 0.0 } else { rel };
                worst = worst.max(rel);
                if rel > self.tolerance {
                    bad.push(Mismatch {
                        input: i,
                        index: idx,
                        analytic: a,
                        numeric,
                    });
                }
            }
        }
        Ok((worst, bad))
    }
}
