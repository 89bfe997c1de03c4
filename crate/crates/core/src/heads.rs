//! Displacement-predicting networks.
//!
//! Both heads read a fixed and a moving patch of `P^3` voxels and return a
//! displacement `(n, 3, P, P, P)` in patch-voxel units. The affine head
//! regresses a global affine map through a matrix exponential; the dense head
//! is a small U-Net predicting a stationary velocity that is integrated by
//! scaling and squaring. Both start at the identity: their last layer is
//! zero-initialized.

use diffcore::ops::BatchStats;
use diffcore::{Binding, Graph, NormMode, ParamStore, Real, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::unit_coord;
use crate::{Error, Result};

const BN_EPS: f64 = 1e-5;
const IN_EPS: f64 = 1e-5;
const SLOPE: f64 = 0.01;
/// Momentum of the running batch-norm statistics.
pub const BN_MOMENTUM: f32 = 0.1;
/// Scale applied to the regressed generator before exponentiation.
pub const GENERATOR_SCALE: f64 = 0.25;
/// Weight of the translation column in the displacement layer.
pub const TRANSLATION_FACTOR: f64 = 0.1;
pub const EXP_TERMS: usize = 10;
pub const INTEGRATION_STEPS: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Affine,
    Dense,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub kind: HeadKind,
    pub patch_size: usize,
    /// Affine: stem then three stride-2 stages. Dense: the three U-Net levels.
    pub widths: Vec<usize>,
    pub group: usize,
}

/// Whether batch norm uses batch statistics or frozen running averages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

pub struct HeadOutput<T> {
    pub d_local: Var,
    /// Batch statistics per normalization layer (training mode only).
    pub batch_stats: Vec<(String, BatchStats<T>)>,
}

impl HeadConfig {
    pub fn affine(group: usize, patch_size: usize) -> Self {
        Self {
            kind: HeadKind::Affine,
            patch_size,
            widths: vec![16, 32, 64, 64],
            group,
        }
    }

    pub fn dense(group: usize, patch_size: usize) -> Self {
        Self {
            kind: HeadKind::Dense,
            patch_size,
            widths: vec![16, 32, 64],
            group,
        }
    }

    pub fn with_widths(mut self, widths: Vec<usize>) -> Self {
        self.widths = widths;
        self
    }

    pub fn prefix(&self) -> String {
        format!("head/{}/", self.group)
    }

    pub fn validate(&self) -> Result<()> {
        let (levels, factor) = match self.kind {
            HeadKind::Affine => (4, 8),
            HeadKind::Dense => (3, 4),
        };
        if self.widths.len() != levels || self.widths.contains(&0) {
            return Err(Error::Config(format!(
                "{:?} head needs {levels} positive widths, got {:?}",
                self.kind, self.widths
            )));
        }
        let p = self.patch_size;
        if p % factor != 0 || p / factor < 2 {
            return Err(Error::Config(format!(
                "patch size {p} leaves no 2^3 bottleneck for a {:?} head",
                self.kind
            )));
        }
        Ok(())
    }

    /// Add freshly initialized parameters and running statistics to `store`.
    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        self.validate()?;
        let w = &self.widths;
        let mut b = LayerBuilder {
            store,
            prefix: self.prefix(),
            rng,
        };
        match self.kind {
            HeadKind::Affine => {
                b.conv("stem", 2, w[0], 3);
                for i in 1..4 {
                    b.block(&format!("down{i}"), w[i - 1], w[i], 3);
                    b.block(&format!("conv{i}"), w[i], w[i], 3);
                }
                b.norm("out", w[3]);
                b.zeros("out/linear/w", &[12, w[3]]);
                b.zeros("out/linear/b", &[12]);
            }
            HeadKind::Dense => {
                b.conv("stem", 2, w[0], 3);
                b.block("enc0", w[0], w[0], 3);
                b.block("down1", w[0], w[1], 3);
                b.block("enc1", w[1], w[1], 3);
                b.block("down2", w[1], w[2], 3);
                b.block("enc2", w[2], w[2], 3);
                b.block("up1", w[2] + w[1], w[1], 3);
                b.block("up0", w[1] + w[0], w[0], 3);
                b.norm("out", w[0]);
                b.zeros("out/conv/w", &[3, w[0], 1, 1, 1]);
                b.zeros("out/conv/b", &[3]);
            }
        }
        Ok(())
    }

    /// Predict `d_local` from fixed and moving patches `(n, 1, P, P, P)`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        params: &Binding,
        store: &ParamStore,
        fixed: Var,
        moving: Var,
        mode: BnMode,
    ) -> Result<HeadOutput<T>> {
        let sf = g.shape(fixed).to_vec();
        let p = self.patch_size;
        if sf != g.shape(moving) || sf.len() != 5 || sf[1] != 1 || sf[2..] != [p, p, p] {
            return Err(Error::ShapeMismatch(format!(
                "head expects two (n, 1, {p}, {p}, {p}) patches, got {sf:?} and {:?}",
                g.shape(moving)
            )));
        }
        let nf = g.instance_norm(fixed, IN_EPS)?;
        let nm = g.instance_norm(moving, IN_EPS)?;
        let x = g.concat_channels(&[nf, nm])?;
        let mut net = Net {
            g,
            params,
            store,
            prefix: self.prefix(),
            mode,
            stats: Vec::new(),
        };
        let d_local = match self.kind {
            HeadKind::Affine => {
                let mut h = net.conv("stem", x, 1, 1)?;
                for i in 1..4 {
                    h = net.block(&format!("down{i}"), h, 2)?;
                    h = net.block(&format!("conv{i}"), h, 1)?;
                }
                let h = net.norm_act("out", h)?;
                let pooled = net.g.mean_spatial(h)?;
                let w = net.var("out/linear/w")?;
                let b = net.var("out/linear/b")?;
                let gen = net.g.linear(pooled, w, b)?;
                let gen = net.g.affine_rows(gen)?;
                let gen = net.g.scale(gen, GENERATOR_SCALE);
                let t = net.g.matrix_exp_approx(gen, EXP_TERMS)?;
                affine_displacement(net.g, t, p)?
            }
            HeadKind::Dense => {
                let h = net.conv("stem", x, 1, 1)?;
                let s0 = net.block("enc0", h, 1)?;
                let h = net.block("down1", s0, 2)?;
                let s1 = net.block("enc1", h, 1)?;
                let h = net.block("down2", s1, 2)?;
                let h = net.block("enc2", h, 1)?;
                let h = net.g.upsample_nearest2x(h)?;
                let h = net.g.concat_channels(&[h, s1])?;
                let h = net.block("up1", h, 1)?;
                let h = net.g.upsample_nearest2x(h)?;
                let h = net.g.concat_channels(&[h, s0])?;
                let h = net.block("up0", h, 1)?;
                let h = net.norm_act("out", h)?;
                let v = net.conv("out", h, 1, 0)?;
                net.g.integrate_velocity(v, INTEGRATION_STEPS)?
            }
        };
        Ok(HeadOutput {
            d_local,
            batch_stats: net.stats,
        })
    }
}

/// Fold training-mode batch statistics into the running averages.
pub fn update_running_stats<T: Real>(store: &mut ParamStore, stats: &[(String, BatchStats<T>)]) {
    for (name, st) in stats {
        for (suffix, values) in [("mean", &st.mean), ("var", &st.var)] {
            if let Some(buf) = store.buffer_mut(&format!("{name}/{suffix}")) {
                for (r, v) in buf.data_mut().iter_mut().zip(values.iter()) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v.f64() as f32;
                }
            }
        }
    }
}

struct LayerBuilder<'a, R> {
    store: &'a mut ParamStore,
    prefix: String,
    rng: &'a mut R,
}

impl<R: Rng> LayerBuilder<'_, R> {
    fn conv(&mut self, name: &str, ci: usize, co: usize, k: usize) {
        let fan_in = ci * k * k * k;
        let w = diffcore::init::kaiming_normal(&[co, ci, k, k, k], fan_in, self.rng);
        self.store.insert(format!("{}{name}/conv/w", self.prefix), w);
        self.store
            .insert(format!("{}{name}/conv/b", self.prefix), Tensor::zeros(&[co]));
    }

    fn norm(&mut self, name: &str, c: usize) {
        let p = &self.prefix;
        self.store.insert(format!("{p}{name}/bn/gamma"), Tensor::ones(&[c]));
        self.store.insert(format!("{p}{name}/bn/beta"), Tensor::zeros(&[c]));
        self.store.insert_buffer(format!("{p}{name}/bn/mean"), Tensor::zeros(&[c]));
        self.store.insert_buffer(format!("{p}{name}/bn/var"), Tensor::ones(&[c]));
    }

    fn block(&mut self, name: &str, ci: usize, co: usize, k: usize) {
        self.norm(name, ci);
        self.conv(name, ci, co, k);
    }

    fn zeros(&mut self, name: &str, shape: &[usize]) {
        self.store
            .insert(format!("{}{name}", self.prefix), Tensor::zeros(shape));
    }
}

struct Net<'a, T: Real> {
    g: &'a mut Graph<T>,
    params: &'a Binding,
    store: &'a ParamStore,
    prefix: String,
    mode: BnMode,
    stats: Vec<(String, BatchStats<T>)>,
}

impl<T: Real> Net<'_, T> {
    fn var(&self, name: &str) -> Result<Var> {
        Ok(self.params.var(&format!("{}{name}", self.prefix))?)
    }

    fn conv(&mut self, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
        let w = self.var(&format!("{name}/conv/w"))?;
        let b = self.var(&format!("{name}/conv/b"))?;
        Ok(self.g.conv3d(x, w, Some(b), stride, pad)?)
    }

    fn norm_act(&mut self, name: &str, x: Var) -> Result<Var> {
        let gamma = self.var(&format!("{name}/bn/gamma"))?;
        let beta = self.var(&format!("{name}/bn/beta"))?;
        let key = format!("{}{name}/bn", self.prefix);
        let y = match self.mode {
            BnMode::Train => {
                let (y, st) = self.g.batch_norm(x, gamma, beta, BN_EPS, NormMode::Train)?;
                if let Some(st) = st {
                    self.stats.push((key, st));
                }
                y
            }
            BnMode::Eval => {
                let mean: Vec<T> = self.store.buffer(&format!("{key}/mean"))?.cast::<T>().into_data();
                let var: Vec<T> = self.store.buffer(&format!("{key}/var"))?.cast::<T>().into_data();
                let mode = NormMode::Eval {
                    mean: &mean,
                    var: &var,
                };
                self.g.batch_norm(x, gamma, beta, BN_EPS, mode)?.0
            }
        };
        Ok(self.g.leaky_relu(y, SLOPE))
    }

    /// Pre-activation block: norm, leaky ReLU, 3^3 convolution.
    fn block(&mut self, name: &str, x: Var, stride: usize) -> Result<Var> {
        let h = self.norm_act(name, x)?;
        self.conv(name, h, stride, 1)
    }
}

/// Displacement of the affine map `t (n, 4, 4)` on the unit patch grid, in
/// voxel units: `P * (T3 (r - 0.5) + 0.5 + 0.1 tau - r)`.
pub fn affine_displacement<T: Real>(g: &mut Graph<T>, t: Var, patch_size: usize) -> Result<Var> {
    let sh = g.shape(t).to_vec();
    if sh.len() != 3 || sh[1] != 4 || sh[2] != 4 {
        return Err(Error::ShapeMismatch(format!("affine displacement expects (n, 4, 4), got {sh:?}")));
    }
    let n = sh[0];
    let p = patch_size;
    let s = p * p * p;
    let pf = p as f64;
    let grid: Vec<[f64; 3]> = (0..s)
        .map(|o| [unit_coord(o % p, p), unit_coord((o / p) % p, p), unit_coord(o / (p * p), p)])
        .collect();
    let tv: Vec<f64> = g.value(t).data().iter().map(|v| v.f64()).collect();
    let mut out = vec![T::zero(); n * 3 * s];
    for b in 0..n {
        let m = &tv[b * 16..(b + 1) * 16];
        for (o, r) in grid.iter().enumerate() {
            let c = [r[0] - 0.5, r[1] - 0.5, r[2] - 0.5];
            for a in 0..3 {
                let row = &m[a * 4..a * 4 + 4];
                let v = row[0] * c[0] + row[1] * c[1] + row[2] * c[2] + 0.5
                    + TRANSLATION_FACTOR * row[3]
                    - r[a];
                out[(b * 3 + a) * s + o] = T::lit(pf * v);
            }
        }
    }
    let out = Tensor::from_vec(&[n, 3, p, p, p], out)?;
    Ok(g.push(out, &[t], move |ctx| {
        let gy = ctx.grad.data();
        let mut dt = vec![T::zero(); n * 16];
        for b in 0..n {
            for a in 0..3 {
                let gch = &gy[(b * 3 + a) * s..(b * 3 + a + 1) * s];
                let mut acc = [0.0f64; 4];
                for (o, r) in grid.iter().enumerate() {
                    let go = gch[o].f64() * pf;
                    acc[0] += go * (r[0] - 0.5);
                    acc[1] += go * (r[1] - 0.5);
                    acc[2] += go * (r[2] - 0.5);
                    acc[3] += go * TRANSLATION_FACTOR;
                }
                for (c, v) in acc.iter().enumerate() {
                    dt[b * 16 + a * 4 + c] = T::lit(*v);
                }
            }
        }
        vec![Some(Tensor::from_vec(&[n, 4, 4], dt).unwrap())]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bottleneck_rule() {
        assert!(HeadConfig::affine(0, 16).validate().is_ok());
        assert!(HeadConfig::affine(0, 8).validate().is_err());
        assert!(HeadConfig::dense(0, 8).validate().is_ok());
        assert!(HeadConfig::dense(0, 12).validate().is_ok());
        assert!(HeadConfig::dense(0, 6).validate().is_err());
        assert!(HeadConfig::dense(0, 4).validate().is_err());
    }
}
