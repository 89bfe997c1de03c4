//! Similarity measures and displacement regularizers.
//!
//! Every function takes batched tensors `(n, c, d, h, w)` and returns a scalar
//! averaged over the batch. Internal arithmetic is done in `f64`.

use diffcore::{Graph, Real, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::ops::jacobian_det;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    Ncc,
    Mi,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub similarity: Similarity,
    pub global_weight: f64,
    pub local_weight: f64,
    pub bending_weight: f64,
    pub hinge_weight: f64,
    pub ncc_kernel: usize,
    pub mi_bins: usize,
    /// Parzen kernel width as a fraction of the bin width.
    pub mi_sigma: f64,
    pub mi_subcube: usize,
    pub hinge_threshold: f64,
    pub hinge_scale: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            similarity: Similarity::Ncc,
            global_weight: 1.0,
            local_weight: 1.0,
            bending_weight: 1e-2,
            hinge_weight: 1.0,
            ncc_kernel: 9,
            mi_bins: 32,
            mi_sigma: 1.0,
            mi_subcube: 8,
            hinge_threshold: 0.5,
            hinge_scale: 1000.0,
        }
    }
}

impl LossConfig {
    /// Equal-weight global and local mutual information.
    pub fn mutual_information() -> Self {
        Self {
            similarity: Similarity::Mi,
            global_weight: 0.5,
            local_weight: 0.5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let weights = [
            self.global_weight,
            self.local_weight,
            self.bending_weight,
            self.hinge_weight,
        ];
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if self.ncc_kernel % 2 == 0 {
            return Err(Error::Config("local NCC kernel must be odd".into()));
        }
        if self.mi_bins < 2 || self.mi_subcube == 0 || self.mi_sigma <= 0.0 {
            return Err(Error::Config("invalid mutual information settings".into()));
        }
        Ok(())
    }

    fn mi(&self) -> MiConfig {
        MiConfig {
            bins: self.mi_bins,
            sigma: self.mi_sigma,
        }
    }
}

/// Soft histogram settings for mutual information.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MiConfig {
    pub bins: usize,
    /// Gaussian width in units of the bin width.
    pub sigma: f64,
}

impl Default for MiConfig {
    fn default() -> Self {
        Self { bins: 32, sigma: 1.0 }
    }
}

fn scalar_pair<T: Real>(g: &Graph<T>, a: Var, b: Var) -> Result<(usize, [usize; 3])> {
    let sa = g.shape(a);
    if sa.len() != 5 || sa[1] != 1 || sa != g.shape(b) {
        return Err(Error::ShapeMismatch(format!(
            "similarity expects matching (n, 1, d, h, w) inputs, got {sa:?} and {:?}",
            g.shape(b)
        )));
    }
    Ok((sa[0], [sa[4], sa[3], sa[2]]))
}

fn to_f64<T: Real>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|v| v.f64()).collect()
}

fn from_f64<T: Real>(shape: &[usize], v: Vec<f64>) -> Tensor<T> {
    Tensor::from_vec(shape, v.into_iter().map(T::lit).collect()).unwrap()
}

/// Pearson correlation of each item, averaged over the batch.
pub fn ncc_global<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    const EPS: f64 = 1e-12;
    let (n, dims) = scalar_pair(g, a, b)?;
    let s: usize = dims.iter().product();
    let av = to_f64(g.value(a));
    let bv = to_f64(g.value(b));
    let mut total = 0.0;
    // per item: centred copies, covariance terms
    let mut items = Vec::with_capacity(n);
    for i in 0..n {
        let xa = &av[i * s..(i + 1) * s];
        let xb = &bv[i * s..(i + 1) * s];
        let ma = xa.iter().sum::<f64>() / s as f64;
        let mb = xb.iter().sum::<f64>() / s as f64;
        let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
        for (&x, &y) in xa.iter().zip(xb) {
            sab += (x - ma) * (y - mb);
            saa += (x - ma) * (x - ma);
            sbb += (y - mb) * (y - mb);
        }
        let q = saa * sbb + EPS;
        total += sab / q.sqrt();
        items.push((ma, mb, sab, saa, sbb, q));
    }
    let out = Tensor::scalar(T::lit(total / n as f64));
    Ok(g.push(out, &[a, b], move |ctx| {
        let go = ctx.grad.item().f64() / n as f64;
        let mut da = vec![0.0; n * s];
        let mut db = vec![0.0; n * s];
        for (i, &(ma, mb, sab, saa, sbb, q)) in items.iter().enumerate() {
            let rq = q.sqrt();
            let r = sab / rq;
            for o in i * s..(i + 1) * s {
                let (ca, cb) = (av[o] - ma, bv[o] - mb);
                da[o] = go * (cb / rq - r * ca * sbb / q);
                db[o] = go * (ca / rq - r * cb * saa / q);
            }
        }
        vec![
            Some(from_f64(ctx.inputs[0].shape(), da)),
            Some(from_f64(ctx.inputs[1].shape(), db)),
        ]
    }))
}

/// Sum over the window `[i - r, i + r]^3` clipped to the array, for every voxel.
pub fn box_sum(data: &[f64], dims: [usize; 3], r: usize) -> Vec<f64> {
    let [nx, ny, _] = dims;
    let strides = [1, nx, nx * ny];
    let mut cur = data.to_vec();
    let mut prefix = Vec::new();
    for (axis, &len) in dims.iter().enumerate() {
        let stride = strides[axis];
        let mut next = vec![0.0; cur.len()];
        for start in 0..cur.len() {
            if (start / stride) % len != 0 {
                continue;
            }
            prefix.clear();
            prefix.push(0.0);
            let mut acc = 0.0;
            for t in 0..len {
                acc += cur[start + t * stride];
                prefix.push(acc);
            }
            for t in 0..len {
                let lo = t.saturating_sub(r);
                let hi = (t + r + 1).min(len);
                next[start + t * stride] = prefix[hi] - prefix[lo];
            }
        }
        cur = next;
    }
    cur
}

/// Number of voxels in each clipped window.
fn box_counts(dims: [usize; 3], r: usize) -> Vec<f64> {
    let [nx, ny, nz] = dims;
    let span = |t: usize, len: usize| ((t + r + 1).min(len) - t.saturating_sub(r)) as f64;
    let mut out = Vec::with_capacity(nx * ny * nz);
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                out.push(span(i, nx) * span(j, ny) * span(k, nz));
            }
        }
    }
    out
}

/// Mean windowed correlation over `kernel^3` neighbourhoods (clipped at the
/// patch border). Windows without variance contribute zero.
pub fn ncc_local<T: Real>(g: &mut Graph<T>, a: Var, b: Var, kernel: usize) -> Result<Var> {
    const EPS: f64 = 1e-5;
    if kernel % 2 == 0 {
        return Err(Error::Config("local NCC kernel must be odd".into()));
    }
    let (n, dims) = scalar_pair(g, a, b)?;
    let r = kernel / 2;
    let s: usize = dims.iter().product();
    let av = to_f64(g.value(a));
    let bv = to_f64(g.value(b));
    let counts = box_counts(dims, r);

    // per voxel: mean a, mean b, cross, var b, sqrt(va vb + eps)
    let mut stats = Vec::with_capacity(n);
    let mut total = 0.0;
    for i in 0..n {
        let xa = &av[i * s..(i + 1) * s];
        let xb = &bv[i * s..(i + 1) * s];
        let sa = box_sum(xa, dims, r);
        let sb = box_sum(xb, dims, r);
        let saa = box_sum(&xa.iter().map(|v| v * v).collect::<Vec<_>>(), dims, r);
        let sbb = box_sum(&xb.iter().map(|v| v * v).collect::<Vec<_>>(), dims, r);
        let sab = box_sum(&xa.iter().zip(xb).map(|(x, y)| x * y).collect::<Vec<_>>(), dims, r);
        let mut st = Vec::with_capacity(s);
        for o in 0..s {
            let m = counts[o];
            let (mu_a, mu_b) = (sa[o] / m, sb[o] / m);
            let cross = sab[o] - sa[o] * mu_b;
            let va = (saa[o] - sa[o] * mu_a).max(0.0);
            let vb = (sbb[o] - sb[o] * mu_b).max(0.0);
            let den = (va * vb + EPS).sqrt();
            total += cross / den;
            st.push([mu_a, mu_b, cross, va, vb, den]);
        }
        stats.push(st);
    }
    let out = Tensor::scalar(T::lit(total / (n * s) as f64));
    Ok(g.push(out, &[a, b], move |ctx| {
        let go = ctx.grad.item().f64() / (n * s) as f64;
        let mut da = vec![0.0; n * s];
        let mut db = vec![0.0; n * s];
        for (i, st) in stats.iter().enumerate() {
            // window sums of the per-window coefficients
            let mut alpha = vec![0.0; s];
            let mut alpha_mb = vec![0.0; s];
            let mut alpha_ma = vec![0.0; s];
            let mut beta_a = vec![0.0; s];
            let mut beta_a_ma = vec![0.0; s];
            let mut beta_b = vec![0.0; s];
            let mut beta_b_mb = vec![0.0; s];
            for o in 0..s {
                let [mu_a, mu_b, cross, va, vb, den] = st[o];
                let al = go / den;
                let d3 = den * den * den;
                let ba = go * cross * vb / d3;
                let bb = go * cross * va / d3;
                alpha[o] = al;
                alpha_mb[o] = al * mu_b;
                alpha_ma[o] = al * mu_a;
                beta_a[o] = ba;
                beta_a_ma[o] = ba * mu_a;
                beta_b[o] = bb;
                beta_b_mb[o] = bb * mu_b;
            }
            let [s_al, s_al_mb, s_al_ma, s_ba, s_ba_ma, s_bb, s_bb_mb] =
                [alpha, alpha_mb, alpha_ma, beta_a, beta_a_ma, beta_b, beta_b_mb]
                    .map(|v| box_sum(&v, dims, r));
            for o in 0..s {
                let j = i * s + o;
                da[j] = bv[j] * s_al[o] - s_al_mb[o] - av[j] * s_ba[o] + s_ba_ma[o];
                db[j] = av[j] * s_al[o] - s_al_ma[o] - bv[j] * s_bb[o] + s_bb_mb[o];
            }
        }
        vec![
            Some(from_f64(ctx.inputs[0].shape(), da)),
            Some(from_f64(ctx.inputs[1].shape(), db)),
        ]
    }))
}

/// Per-voxel normalized Parzen weights over bin centres, and the derivative
/// of each weight's exponent with respect to the (rescaled) value.
struct SoftBins {
    weights: Vec<f64>,
    slopes: Vec<f64>,
}

fn soft_bins(values: &[f64], cfg: MiConfig) -> SoftBins {
    let nb = cfg.bins;
    let bw = 1.0 / nb as f64;
    let sigma = cfg.sigma * bw;
    let inv2s2 = 1.0 / (2.0 * sigma * sigma);
    let mut weights = vec![0.0; values.len() * nb];
    let mut slopes = vec![0.0; values.len() * nb];
    for (i, &x) in values.iter().enumerate() {
        let w = &mut weights[i * nb..(i + 1) * nb];
        let e = &mut slopes[i * nb..(i + 1) * nb];
        // subtract the largest exponent for stability
        let mut best = f64::NEG_INFINITY;
        for k in 0..nb {
            let d = x - (k as f64 + 0.5) * bw;
            let z = -d * d * inv2s2;
            w[k] = z;
            e[k] = -2.0 * d * inv2s2;
            best = best.max(z);
        }
        let mut tot = 0.0;
        for v in w.iter_mut() {
            *v = (*v - best).exp();
            tot += *v;
        }
        for v in w.iter_mut() {
            *v /= tot;
        }
    }
    SoftBins { weights, slopes }
}

/// Backward of the per-voxel bin normalization: `dx_i = sum_k gw_ik W_ik (e_ik - sum_m W_im e_im)`.
fn soft_bins_backward(sb: &SoftBins, gw: &[f64], nb: usize, i: usize) -> f64 {
    let w = &sb.weights[i * nb..(i + 1) * nb];
    let e = &sb.slopes[i * nb..(i + 1) * nb];
    let g = &gw[i * nb..(i + 1) * nb];
    let ebar: f64 = w.iter().zip(e).map(|(a, b)| a * b).sum();
    (0..nb).map(|k| g[k] * w[k] * (e[k] - ebar)).sum()
}

/// Min-max rescaling to `[0, 1]`; returns the values and the scale factor.
fn rescale(v: &[f64]) -> (Vec<f64>, f64) {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if span <= 0.0 {
        return (vec![0.5; v.len()], 0.0);
    }
    (v.iter().map(|x| (x - lo) / span).collect(), 1.0 / span)
}

const MI_EPS: f64 = 1e-10;

/// Mutual information of one region and `dMI/dWa`, `dMI/dWb` (scaled by `go`).
fn mi_region(
    wa: &SoftBins,
    wb: &SoftBins,
    idx: &[usize],
    nb: usize,
    go: f64,
    grads: Option<(&mut [f64], &mut [f64])>,
) -> f64 {
    let m = idx.len() as f64;
    let mut joint = vec![0.0; nb * nb];
    for &i in idx {
        let a = &wa.weights[i * nb..(i + 1) * nb];
        let b = &wb.weights[i * nb..(i + 1) * nb];
        for (k, &x) in a.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let row = &mut joint[k * nb..(k + 1) * nb];
            for (r, &y) in row.iter_mut().zip(b) {
                *r += x * y;
            }
        }
    }
    joint.iter_mut().for_each(|p| *p /= m);
    let mut pa = vec![0.0; nb];
    let mut pb = vec![0.0; nb];
    for k in 0..nb {
        for l in 0..nb {
            pa[k] += joint[k * nb + l];
            pb[l] += joint[k * nb + l];
        }
    }
    let plogp = |p: f64| p * (p + MI_EPS).ln();
    let dplogp = |p: f64| (p + MI_EPS).ln() + p / (p + MI_EPS);
    let mi = joint.iter().map(|&p| plogp(p)).sum::<f64>()
        - pa.iter().map(|&p| plogp(p)).sum::<f64>()
        - pb.iter().map(|&p| plogp(p)).sum::<f64>();
    if let Some((ga, gb)) = grads {
        // joint derivative, including the marginals' dependence on the joint
        let da: Vec<f64> = pa.iter().map(|&p| dplogp(p)).collect();
        let db: Vec<f64> = pb.iter().map(|&p| dplogp(p)).collect();
        let mut gj = vec![0.0; nb * nb];
        for k in 0..nb {
            for l in 0..nb {
                gj[k * nb + l] = go * (dplogp(joint[k * nb + l]) - da[k] - db[l]) / m;
            }
        }
        for &i in idx {
            let a = &wa.weights[i * nb..(i + 1) * nb];
            let b = &wb.weights[i * nb..(i + 1) * nb];
            for k in 0..nb {
                let row = &gj[k * nb..(k + 1) * nb];
                ga[i * nb + k] += row.iter().zip(b).map(|(g, y)| g * y).sum::<f64>();
                for l in 0..nb {
                    gb[i * nb + l] += row[l] * a[k];
                }
            }
        }
    }
    mi
}

fn mi_op<T: Real>(g: &mut Graph<T>, a: Var, b: Var, cfg: MiConfig, regions: Vec<Vec<usize>>) -> Result<Var> {
    let (n, dims) = scalar_pair(g, a, b)?;
    let s: usize = dims.iter().product();
    let nb = cfg.bins;
    let av = to_f64(g.value(a));
    let bv = to_f64(g.value(b));
    let mut items = Vec::with_capacity(n);
    let mut total = 0.0;
    for i in 0..n {
        let (ra, ka) = rescale(&av[i * s..(i + 1) * s]);
        let (rb, kb) = rescale(&bv[i * s..(i + 1) * s]);
        let wa = soft_bins(&ra, cfg);
        let wb = soft_bins(&rb, cfg);
        for reg in &regions {
            total += mi_region(&wa, &wb, reg, nb, 0.0, None);
        }
        items.push((wa, wb, ka, kb));
    }
    let denom = (n * regions.len()) as f64;
    let out = Tensor::scalar(T::lit(total / denom));
    Ok(g.push(out, &[a, b], move |ctx| {
        let go = ctx.grad.item().f64() / denom;
        let mut da = vec![0.0; n * s];
        let mut db = vec![0.0; n * s];
        for (i, (wa, wb, ka, kb)) in items.iter().enumerate() {
            let mut ga = vec![0.0; s * nb];
            let mut gb = vec![0.0; s * nb];
            for reg in &regions {
                mi_region(wa, wb, reg, nb, go, Some((&mut ga, &mut gb)));
            }
            for o in 0..s {
                // value rescaling is treated as constant
                da[i * s + o] = ka * soft_bins_backward(wa, &ga, nb, o);
                db[i * s + o] = kb * soft_bins_backward(wb, &gb, nb, o);
            }
        }
        vec![
            Some(from_f64(ctx.inputs[0].shape(), da)),
            Some(from_f64(ctx.inputs[1].shape(), db)),
        ]
    }))
}

/// Mutual information from a soft joint histogram of each whole item.
pub fn mi_global<T: Real>(g: &mut Graph<T>, a: Var, b: Var, cfg: MiConfig) -> Result<Var> {
    let (_, dims) = scalar_pair(g, a, b)?;
    let s: usize = dims.iter().product();
    mi_op(g, a, b, cfg, vec![(0..s).collect()])
}

/// Mutual information averaged over sub-cubes of edge `sub` voxels.
pub fn mi_local<T: Real>(g: &mut Graph<T>, a: Var, b: Var, cfg: MiConfig, sub: usize) -> Result<Var> {
    let (_, dims) = scalar_pair(g, a, b)?;
    if sub == 0 || dims.iter().any(|&d| d % sub != 0) {
        return Err(Error::ShapeMismatch(format!(
            "patch {dims:?} is not divisible into {sub}^3 sub-cubes"
        )));
    }
    let [nx, ny, nz] = dims;
    let mut regions = Vec::new();
    for bz in (0..nz).step_by(sub) {
        for by in (0..ny).step_by(sub) {
            for bx in (0..nx).step_by(sub) {
                let mut reg = Vec::with_capacity(sub * sub * sub);
                for k in bz..bz + sub {
                    for j in by..by + sub {
                        for i in bx..bx + sub {
                            reg.push(i + nx * (j + ny * k));
                        }
                    }
                }
                regions.push(reg);
            }
        }
    }
    mi_op(g, a, b, cfg, regions)
}

/// Second-derivative stencils used by the bending energy: pairs of
/// (offset, coefficient) along with the term's multiplicity.
fn bending_terms(strides: [isize; 3]) -> Vec<(Vec<(isize, f64)>, f64)> {
    let mut terms = Vec::new();
    for &s in &strides {
        terms.push((vec![(s, 1.0), (0, -2.0), (-s, 1.0)], 1.0));
    }
    for (a, b) in [(0, 1), (0, 2), (1, 2)] {
        let (sa, sb) = (strides[a], strides[b]);
        terms.push((
            vec![
                (sa + sb, 0.25),
                (sa - sb, -0.25),
                (-sa + sb, -0.25),
                (-sa - sb, 0.25),
            ],
            2.0,
        ));
    }
    terms
}

/// Mean squared second derivative of a displacement `(n, 3, d, h, w)` over
/// interior voxels: `uxx^2 + uyy^2 + uzz^2 + 2 (uxy^2 + uxz^2 + uyz^2)`,
/// summed over components.
pub fn bending_energy<T: Real>(g: &mut Graph<T>, u: Var) -> Result<Var> {
    let sh = g.shape(u).to_vec();
    if sh.len() != 5 || sh[1] != 3 || sh[2..].iter().any(|&d| d < 3) {
        return Err(Error::ShapeMismatch(format!(
            "bending energy needs (n, 3, d, h, w) with every extent >= 3, got {sh:?}"
        )));
    }
    let (n, d, h, w) = (sh[0], sh[2], sh[3], sh[4]);
    let s = d * h * w;
    let terms = bending_terms([1, w as isize, (w * h) as isize]);
    let interior: Vec<usize> = (1..d - 1)
        .flat_map(|k| (1..h - 1).flat_map(move |j| (1..w - 1).map(move |i| i + w * (j + h * k))))
        .collect();
    let count = (n * interior.len()) as f64;
    let uv = to_f64(g.value(u));
    let mut total = 0.0;
    for ch in 0..n * 3 {
        let f = &uv[ch * s..(ch + 1) * s];
        for &o in &interior {
            for (st, mult) in &terms {
                let v: f64 = st.iter().map(|&(off, c)| c * f[(o as isize + off) as usize]).sum();
                total += mult * v * v;
            }
        }
    }
    let out = Tensor::scalar(T::lit(total / count));
    Ok(g.push(out, &[u], move |ctx| {
        let go = ctx.grad.item().f64() / count;
        let mut du = vec![0.0; n * 3 * s];
        for ch in 0..n * 3 {
            let f = &uv[ch * s..(ch + 1) * s];
            let df = &mut du[ch * s..(ch + 1) * s];
            for &o in &interior {
                for (st, mult) in &terms {
                    let v: f64 = st.iter().map(|&(off, c)| c * f[(o as isize + off) as usize]).sum();
                    let k = go * 2.0 * mult * v;
                    for &(off, c) in st {
                        df[(o as isize + off) as usize] += k * c;
                    }
                }
            }
        }
        vec![Some(from_f64(ctx.inputs[0].shape(), du))]
    }))
}

/// Fold penalty on Jacobian determinants `(n, 1, d, h, w)`: the largest
/// `relu(-scale * (J - threshold))` of each item, averaged over the batch.
pub fn hinge_penalty<T: Real>(g: &mut Graph<T>, jac: Var, threshold: f64, scale: f64) -> Result<Var> {
    let sh = g.shape(jac).to_vec();
    if sh.len() != 5 || sh[1] != 1 {
        return Err(Error::ShapeMismatch(format!("hinge expects (n, 1, d, h, w), got {sh:?}")));
    }
    let n = sh[0];
    let s: usize = sh[2..].iter().product();
    let jv = to_f64(g.value(jac));
    let mut argmax = Vec::with_capacity(n);
    let mut total = 0.0;
    for b in 0..n {
        let mut best = (0.0, None);
        for o in 0..s {
            let v = (-scale * (jv[b * s + o] - threshold)).max(0.0);
            if v > best.0 {
                best = (v, Some(b * s + o));
            }
        }
        total += best.0;
        argmax.push(best.1);
    }
    let out = Tensor::scalar(T::lit(total / n as f64));
    Ok(g.push(out, &[jac], move |ctx| {
        let go = ctx.grad.item().f64() / n as f64;
        let mut dj = vec![0.0; n * s];
        for &o in argmax.iter().flatten() {
            dj[o] = -scale * go;
        }
        vec![Some(from_f64(ctx.inputs[0].shape(), dj))]
    }))
}

/// Hinge prior applied to a coordinate field already expressed in voxel units.
pub fn jacobian_hinge<T: Real>(g: &mut Graph<T>, phi: Var, threshold: f64, scale: f64) -> Result<Var> {
    let jac = jacobian_det(g, phi)?;
    hinge_penalty(g, jac, threshold, scale)
}

/// Weighted similarity term (to be minimized) for a fixed/moved patch batch.
pub fn similarity_loss<T: Real>(g: &mut Graph<T>, cfg: &LossConfig, fixed: Var, moved: Var) -> Result<(Var, [f64; 2])> {
    let (glob, local) = match cfg.similarity {
        Similarity::Ncc => (
            ncc_global(g, fixed, moved)?,
            ncc_local(g, fixed, moved, cfg.ncc_kernel)?,
        ),
        Similarity::Mi => (
            mi_global(g, fixed, moved, cfg.mi())?,
            mi_local(g, fixed, moved, cfg.mi(), cfg.mi_subcube)?,
        ),
    };
    let parts = [g.value(glob).item().f64(), g.value(local).item().f64()];
    let loss = g.weighted_sum(&[(glob, -cfg.global_weight), (local, -cfg.local_weight)])?;
    Ok((loss, parts))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_sum_counts_clipped_windows() {
        let ones = vec![1.0; 5 * 4 * 3];
        let s = box_sum(&ones, [5, 4, 3], 1);
        assert_eq!(s, box_counts([5, 4, 3], 1));
        assert_eq!(s[0], 8.0);
        assert_eq!(s[1 + 5 * (1 + 4)], 27.0);
    }

    #[test]
    fn rescale_handles_constant_input() {
        let (v, k) = rescale(&[3.0; 4]);
        assert_eq!(k, 0.0);
        assert!(v.iter().all(|&x| x == 0.5));
    }
}
