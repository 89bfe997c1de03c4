//! Pointwise arithmetic, reductions and reshaping.

use crate::graph::{Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;
use crate::{DiffError, Result};

fn same_shape<T: Real>(g: &Graph<T>, a: Var, b: Var, what: &str) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(DiffError::ShapeMismatch(format!(
            "{what}: {:?} vs {:?}",
            g.shape(a),
            g.shape(b)
        )));
    }
    Ok(())
}

impl<T: Real> Graph<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "add")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(out, &[a, b], |ctx| {
            vec![Some(ctx.grad.clone()), Some(ctx.grad.clone())]
        }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "sub")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(out, &[a, b], |ctx| {
            vec![Some(ctx.grad.clone()), Some(ctx.grad.map(|g| -g))]
        }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "mul")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(out, &[a, b], |ctx| {
            let ga = ctx.needs[0].then(|| ctx.grad.zip_map(ctx.inputs[1], |g, y| g * y));
            let gb = ctx.needs[1].then(|| ctx.grad.zip_map(ctx.inputs[0], |g, x| g * x));
            vec![ga, gb]
        }))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::lit(s);
        let out = self.value(a).map(|x| x * s);
        self.push(out, &[a], move |ctx| {
            vec![Some(ctx.grad.map(|g| g * s))]
        })
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let s = T::lit(s);
        let out = self.value(a).map(|x| x + s);
        self.push(out, &[a], |ctx| vec![Some(ctx.grad.clone())])
    }

    /// `max(x, 0) + slope * min(x, 0)`.
    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let s = T::lit(slope);
        let out = self
            .value(a)
            .map(|x| if x >= T::zero() { x } else { x * s });
        self.push(out, &[a], move |ctx| {
            vec![Some(ctx.grad.zip_map(ctx.inputs[0], |g, x| {
                if x >= T::zero() {
                    g
                } else {
                    g * s
                }
            }))]
        })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, &[a], |ctx| {
            let g = ctx.grad.item();
            vec![Some(Tensor::full(ctx.inputs[0].shape(), g))]
        })
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// `sum_i w_i * x_i` over single-element nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        for &(v, _) in terms {
            if self.value(v).len() != 1 {
                return Err(DiffError::ShapeMismatch(format!(
                    "weighted_sum expects scalars, got {:?}",
                    self.shape(v)
                )));
            }
        }
        let weights: Vec<T> = terms.iter().map(|&(_, w)| T::lit(w)).collect();
        let total = terms
            .iter()
            .zip(&weights)
            .map(|(&(v, _), &w)| self.value(v).item() * w)
            .sum();
        let inputs: Vec<Var> = terms.iter().map(|&(v, _)| v).collect();
        Ok(self.push(
            Tensor::scalar(total),
            &inputs,
            move |ctx| {
                let g = ctx.grad.item();
                ctx.inputs
                    .iter()
                    .zip(&weights)
                    .map(|(x, &w)| Some(Tensor::full(x.shape(), g * w)))
                    .collect()
            },
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(out, &[a], |ctx| {
            vec![Some(
                ctx.grad
                    .clone()
                    .reshape(ctx.inputs[0].shape())
                    .expect("reshape backward"),
            )]
        }))
    }

    /// Concatenate along axis 1 (channels). All other axes must agree.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if first.len() < 2 {
            return Err(DiffError::ShapeMismatch("concat needs rank >= 2".into()));
        }
        let n = first[0];
        let inner: usize = first[2..].iter().product();
        let mut channels = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[0] != n || s[2..] != first[2..] {
                return Err(DiffError::ShapeMismatch(format!(
                    "concat: {:?} vs {:?}",
                    first, s
                )));
            }
            channels.push(s[1]);
        }
        let total_c: usize = channels.iter().sum();
        let mut shape = first.clone();
        shape[1] = total_c;
        let mut out = Vec::with_capacity(n * total_c * inner);
        for b in 0..n {
            for (&p, &c) in parts.iter().zip(&channels) {
                let d = self.value(p).data();
                out.extend_from_slice(&d[b * c * inner..(b + 1) * c * inner]);
            }
        }
        let out = Tensor::from_vec(&shape, out)?;
        Ok(self.push(out, parts, move |ctx| {
            let g = ctx.grad.data();
            let mut parts_out: Vec<Vec<T>> = channels
                .iter()
                .map(|&c| Vec::with_capacity(n * c * inner))
                .collect();
            let mut off = 0;
            for _ in 0..n {
                for (buf, &c) in parts_out.iter_mut().zip(&channels) {
                    buf.extend_from_slice(&g[off..off + c * inner]);
                    off += c * inner;
                }
            }
            parts_out
                .into_iter()
                .zip(&ctx.inputs)
                .map(|(buf, x)| Some(Tensor::from_vec(x.shape(), buf).unwrap()))
                .collect()
        }))
    }

    /// Average over all axes after the first two: `(n, c, ...) -> (n, c)`.
    pub fn mean_spatial(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 3 {
            return Err(DiffError::ShapeMismatch(format!(
                "mean_spatial needs rank >= 3, got {s:?}"
            )));
        }
        let (n, c) = (s[0], s[1]);
        let inner: usize = s[2..].iter().product();
        let inv = T::lit(1.0 / inner as f64);
        let x = self.value(a).data();
        let out: Vec<T> = (0..n * c)
            .map(|i| x[i * inner..(i + 1) * inner].iter().copied().sum::<T>() * inv)
            .collect();
        let out = Tensor::from_vec(&[n, c], out)?;
        Ok(self.push(out, &[a], move |ctx| {
            let g = ctx.grad.data();
            let gx = Tensor::from_fn(ctx.inputs[0].shape(), |i| g[i / inner] * inv);
            vec![Some(gx)]
        }))
    }

    /// Fully connected layer: `x (n, f)`, `w (o, f)`, `b (o)` -> `(n, o)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || bs != [ws[0]] || xs[1] != ws[1] {
            return Err(DiffError::ShapeMismatch(format!(
                "linear: x {xs:?}, w {ws:?}, b {bs:?}"
            )));
        }
        let (n, f, o) = (xs[0], xs[1], ws[0]);
        let mut out = vec![T::zero(); n * o];
        for i in 0..n {
            out[i * o..(i + 1) * o].copy_from_slice(self.value(b).data());
        }
        // out (n x o) += x (n x f) * w^T (f x o)
        T::gemm(
            n,
            f,
            o,
            T::one(),
            self.value(x).data(),
            f,
            1,
            self.value(w).data(),
            1,
            f,
            T::one(),
            &mut out,
            o,
            1,
        );
        let out = Tensor::from_vec(&[n, o], out)?;
        Ok(self.push(out, &[x, w, b], move |ctx| {
            let g = ctx.grad.data();
            let gx = ctx.needs[0].then(|| {
                let mut gx = vec![T::zero(); n * f];
                // gx (n x f) = g (n x o) * w (o x f)
                T::gemm(n, o, f, T::one(), g, o, 1, ctx.inputs[1].data(), f, 1, T::zero(), &mut gx, f, 1);
                Tensor::from_vec(&[n, f], gx).unwrap()
            });
            let gw = ctx.needs[1].then(|| {
                let mut gw = vec![T::zero(); o * f];
                // gw (o x f) = g^T (o x n) * x (n x f)
                T::gemm(o, n, f, T::one(), g, 1, o, ctx.inputs[0].data(), f, 1, T::zero(), &mut gw, f, 1);
                Tensor::from_vec(&[o, f], gw).unwrap()
            });
            let gb = ctx.needs[2].then(|| {
                let mut gb = vec![T::zero(); o];
                for row in g.chunks(o) {
                    for (acc, &v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                Tensor::from_vec(&[o], gb).unwrap()
            });
            vec![gx, gw, gb]
        }))
    }
}
