//! Label overlap and deformation quality metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::volumes::{DisplacementField, ImageStack, LabelVolume};
use crate::{Error, Result};

/// Per-label Dice with its summary statistics. Background (label 0) is not
/// scored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceScores {
    pub per_label: BTreeMap<u32, f64>,
    pub avg: f64,
    pub min: f64,
}

/// `2|A ∩ B| / (|A| + |B|)` for every non-zero label present in either volume.
pub fn dice(a: &LabelVolume, b: &LabelVolume) -> Result<DiceScores> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch(format!(
            "label grids {:?} and {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let mut counts: BTreeMap<u32, [usize; 3]> = BTreeMap::new();
    for (&la, &lb) in a.data().iter().zip(b.data()) {
        if la != 0 {
            counts.entry(la).or_default()[0] += 1;
        }
        if lb != 0 {
            counts.entry(lb).or_default()[1] += 1;
        }
        if la != 0 && la == lb {
            counts.entry(la).or_default()[2] += 1;
        }
    }
    let per_label: BTreeMap<u32, f64> = counts
        .into_iter()
        .map(|(l, [na, nb, both])| (l, 2.0 * both as f64 / (na + nb) as f64))
        .collect();
    let (avg, min) = if per_label.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        (
            per_label.values().sum::<f64>() / per_label.len() as f64,
            per_label.values().copied().fold(f64::INFINITY, f64::min),
        )
    };
    Ok(DiceScores { per_label, avg, min })
}

/// Median of a sample; NaN when empty.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JacobianStats {
    /// Percentage of evaluated nodes with determinant `<= 0`.
    pub frac_nonpositive: f64,
    pub median: f64,
    pub nodes: usize,
}

impl JacobianStats {
    pub fn from_determinants(dets: impl IntoIterator<Item = f64>) -> Self {
        let v: Vec<f64> = dets.into_iter().collect();
        let bad = v.iter().filter(|&&d| d <= 0.0 || d.is_nan()).count();
        Self {
            frac_nonpositive: if v.is_empty() { 0.0 } else { 100.0 * bad as f64 / v.len() as f64 },
            median: median(&v),
            nodes: v.len(),
        }
    }
}

/// Foreground of `image` (intensity > 0) at the nodes of `field`, by
/// nearest-neighbour lookup.
pub fn foreground_mask(image: &ImageStack, field: &DisplacementField) -> Vec<bool> {
    let w2a = image.world_to_array();
    let [nx, ny, nz] = image.dims();
    (0..field.nodes())
        .map(|idx| {
            let p = w2a.apply(field.node_world(idx));
            let r: Vec<f64> = p.iter().map(|v| (v + 0.5).floor()).collect();
            if r.iter().zip([nx, ny, nz]).any(|(&v, n)| !(v >= 0.0 && v < n as f64)) {
                return false;
            }
            image.data()[image.index(r[0] as usize, r[1] as usize, r[2] as usize)] > 0.0
        })
        .collect()
}

/// Jacobian determinant statistics of `x -> x + d(x)`, restricted to `mask`
/// when given.
pub fn jacobian_report(d: &DisplacementField, mask: Option<&[bool]>) -> Result<JacobianStats> {
    let dets = d.jacobian_determinants();
    match mask {
        None => Ok(JacobianStats::from_determinants(dets)),
        Some(m) if m.len() == dets.len() => Ok(JacobianStats::from_determinants(
            dets.into_iter().zip(m).filter(|(_, &keep)| keep).map(|(v, _)| v),
        )),
        Some(m) => Err(Error::ShapeMismatch(format!(
            "mask of {} values for {} nodes",
            m.len(),
            dets.len()
        ))),
    }
}

/// `C(x) = d_bwd(x) + d_fwd(x + d_bwd(x))` on the grid of `d_bwd`: the
/// displacement of following the backward field and then the forward one.
pub fn compose(d_fwd: &DisplacementField, d_bwd: &DisplacementField) -> Result<DisplacementField> {
    let mut out = DisplacementField::zeros(d_bwd.dims(), *d_bwd.affine())?;
    for idx in 0..out.nodes() {
        let x = d_bwd.node_world(idx);
        let u = d_bwd.at(idx);
        let v = d_fwd.sample([x[0] + u[0], x[1] + u[1], x[2] + u[2]]);
        out.set(idx, [u[0] + v[0], u[1] + v[1], u[2] + v[2]]);
    }
    Ok(out)
}

/// Jacobian statistics of the composed forward and backward transformation.
pub fn roundtrip(d_fwd: &DisplacementField, d_bwd: &DisplacementField, mask: Option<&[bool]>) -> Result<JacobianStats> {
    jacobian_report(&compose(d_fwd, d_bwd)?, mask)
}

/// Evaluation of one registered pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dice: DiceScores,
    /// Percentage of foreground nodes with `|J| <= 0`.
    pub frac_nonpositive_jacobian: f64,
    pub median_jacobian: f64,
    pub runtime_s: f64,
}

impl MetricReport {
    /// `fixed_labels` against the warped moving labels, with Jacobian
    /// statistics of `d` over the foreground of `fixed`.
    pub fn evaluate(
        fixed: &ImageStack,
        fixed_labels: &LabelVolume,
        warped_labels: &LabelVolume,
        d: &DisplacementField,
        runtime_s: f64,
    ) -> Result<Self> {
        let dice = dice(fixed_labels, warped_labels)?;
        let mask = foreground_mask(fixed, d);
        let jac = jacobian_report(d, Some(&mask))?;
        Ok(Self {
            dice,
            frac_nonpositive_jacobian: jac.frac_nonpositive,
            median_jacobian: jac.median,
            runtime_s,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Affine;

    fn labels(dims: [usize; 3], f: impl Fn(usize, usize, usize) -> u32) -> LabelVolume {
        let mut data = Vec::new();
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    data.push(f(i, j, k));
                }
            }
        }
        LabelVolume::new(dims, data, Affine::identity()).unwrap()
    }

    #[test]
    fn identical_labels_score_one() {
        let a = labels([6, 5, 4], |i, j, _| ((i + j) % 3) as u32);
        let d = dice(&a, &a).unwrap();
        assert_eq!(d.per_label.len(), 2);
        assert!(d.per_label.values().all(|&v| v == 1.0));
        assert_eq!((d.avg, d.min), (1.0, 1.0));
    }

    #[test]
    fn disjoint_and_missing_labels_score_zero() {
        let a = labels([4, 4, 4], |i, _, _| if i < 2 { 1 } else { 0 });
        let b = labels([4, 4, 4], |i, _, _| if i >= 2 { 1 } else { 2 });
        let d = dice(&a, &b).unwrap();
        assert_eq!(d.per_label[&1], 0.0);
        assert_eq!(d.per_label[&2], 0.0);
        assert_eq!(d.min, 0.0);
    }

    #[test]
    fn half_overlapping_cubes() {
        let a = labels([8, 4, 4], |i, _, _| (i < 4) as u32);
        let b = labels([8, 4, 4], |i, _, _| (2 <= i && i < 6) as u32);
        assert_eq!(dice(&a, &b).unwrap().per_label[&1], 0.5);
    }

    #[test]
    fn grids_must_match() {
        let a = labels([4, 4, 4], |_, _, _| 1);
        let b = labels([4, 4, 5], |_, _, _| 1);
        assert!(matches!(dice(&a, &b), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn median_of_even_and_odd_samples() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }

    #[test]
    fn zero_field_has_unit_jacobian() {
        let d = DisplacementField::zeros([5, 5, 5], Affine::scaling([2.0, 2.0, 2.0])).unwrap();
        let r = jacobian_report(&d, None).unwrap();
        assert_eq!((r.frac_nonpositive, r.median, r.nodes), (0.0, 1.0, 125));
    }

    #[test]
    fn mask_restricts_nodes() {
        let d = DisplacementField::zeros([3, 3, 3], Affine::identity()).unwrap();
        let mask: Vec<bool> = (0..27).map(|i| i % 2 == 0).collect();
        assert_eq!(jacobian_report(&d, Some(&mask)).unwrap().nodes, 14);
        assert!(jacobian_report(&d, Some(&mask[..5])).is_err());
    }

    #[test]
    fn opposite_constants_compose_to_identity() {
        let a = Affine::identity();
        let mut fwd = DisplacementField::zeros([4, 4, 4], a).unwrap();
        let mut bwd = fwd.clone();
        fwd.add_constant([1.5, -2.0, 0.25]);
        bwd.add_constant([-1.5, 2.0, -0.25]);
        let c = compose(&fwd, &bwd).unwrap();
        assert!(c.data().iter().all(|v| v.abs() < 1e-12));
        assert_eq!(roundtrip(&fwd, &bwd, None).unwrap().median, 1.0);
    }
}
