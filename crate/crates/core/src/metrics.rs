//! Registration quality: per-label Dice overlap and Jacobian folding.

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;
use crate::volume::{linear_index, DeformationField, LabelMap};
use std::collections::BTreeMap;

/// `2|A∩B| / (|A|+|B|)` for one label, `None` when it is absent from both maps.
pub fn dice_label(a: &LabelMap, b: &LabelMap, label: u16) -> Result<Option<f64>> {
    if a.dims() != b.dims() {
        return shape_err(format!("label maps {:?} and {:?} differ", a.dims(), b.dims()));
    }
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (ia, ib) = (x == label, y == label);
        na += ia as usize;
        nb += ib as usize;
        inter += (ia && ib) as usize;
    }
    if na + nb == 0 {
        return Ok(None);
    }
    Ok(Some(2.0 * inter as f64 / (na + nb) as f64))
}

/// Dice for each requested label.
pub fn dice(a: &LabelMap, b: &LabelMap, labels: &[u16]) -> Result<Vec<(u16, Option<f64>)>> {
    labels.iter().map(|&l| Ok((l, dice_label(a, b, l)?))).collect()
}

/// Non-background labels present in either map.
pub fn foreground_labels(a: &LabelMap, b: &LabelMap) -> Vec<u16> {
    let mut labels = a.labels();
    labels.extend(b.labels());
    labels.sort_unstable();
    labels.dedup();
    labels.retain(|&l| l != 0);
    labels
}

/// Mean Dice over the foreground labels of two maps.
pub fn mean_dice(a: &LabelMap, b: &LabelMap) -> Result<f64> {
    let scores: Vec<f64> = dice(a, b, &foreground_labels(a, b))?.into_iter().filter_map(|(_, d)| d).collect();
    Ok(if scores.is_empty() { f64::NAN } else { scores.iter().sum::<f64>() / scores.len() as f64 })
}

fn axis_derivative(plane: &[f64], dims: [usize; 3], p: [usize; 3], axis: usize) -> f64 {
    let len = dims[axis];
    if len < 2 {
        return 0.0;
    }
    let at = |i: usize| {
        let mut q = p;
        q[axis] = i;
        plane[linear_index(dims, q)]
    };
    let i = p[axis];
    if i == 0 {
        at(1) - at(0)
    } else if i == len - 1 {
        at(i) - at(i - 1)
    } else {
        (at(i + 1) - at(i - 1)) / 2.0
    }
}

/// Per-voxel `det(∂φ/∂p)` for `φ(p) = p + u(p)`, as a `[D, H, W]` tensor.
///
/// Central differences in the interior, one-sided at the faces.
pub fn jacobian_determinant(field: &DeformationField) -> Tensor {
    let dims = field.dims();
    Tensor::from_fn(dims.to_vec(), |idx| {
        let p = [idx[0], idx[1], idx[2]];
        let mut j = [[0.0; 3]; 3];
        for (c, row) in j.iter_mut().enumerate() {
            let plane = field.component(c);
            for (a, entry) in row.iter_mut().enumerate() {
                *entry = axis_derivative(plane, dims, p, a) + if a == c { 1.0 } else { 0.0 };
            }
        }
        j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1]) - j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0])
            + j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0])
    })
}

/// Percentage of voxels whose Jacobian determinant is `<= 0`.
pub fn njd_percent(field: &DeformationField) -> f64 {
    let det = jacobian_determinant(field);
    let folded = det.data().iter().filter(|&&d| d <= 0.0).count();
    100.0 * folded as f64 / det.len() as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub dice_per_label: BTreeMap<u16, f64>,
    /// Labels requested but absent from both maps.
    pub undefined: Vec<u16>,
    pub dice_mean: f64,
    pub njd_percent: f64,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "pair_id,label,dice,njd_percent";

    /// Scores `warped` against `fixed` over their foreground labels.
    pub fn evaluate(fixed: &LabelMap, warped: &LabelMap, field: &DeformationField) -> Result<Self> {
        Self::evaluate_labels(fixed, warped, field, &foreground_labels(fixed, warped))
    }

    pub fn evaluate_labels(fixed: &LabelMap, warped: &LabelMap, field: &DeformationField, labels: &[u16]) -> Result<Self> {
        if field.dims() != fixed.dims() {
            return shape_err(format!("field {:?} does not match labels {:?}", field.dims(), fixed.dims()));
        }
        let mut dice_per_label = BTreeMap::new();
        let mut undefined = Vec::new();
        for (label, d) in dice(fixed, warped, labels)? {
            match d {
                Some(d) => {
                    dice_per_label.insert(label, d);
                }
                None => undefined.push(label),
            }
        }
        let dice_mean = if dice_per_label.is_empty() {
            f64::NAN
        } else {
            dice_per_label.values().sum::<f64>() / dice_per_label.len() as f64
        };
        Ok(Self { dice_per_label, undefined, dice_mean, njd_percent: njd_percent(field) })
    }

    /// One row per defined label followed by a `mean` row.
    pub fn csv_rows(&self, pair_id: &str) -> Vec<String> {
        let mut rows: Vec<String> =
            self.dice_per_label.iter().map(|(l, d)| format!("{pair_id},{l},{d},{}", self.njd_percent)).collect();
        rows.push(format!("{pair_id},mean,{},{}", self.dice_mean, self.njd_percent));
        rows
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(dims: [usize; 3], data: &[u16]) -> LabelMap {
        LabelMap::new(dims, data.to_vec()).unwrap()
    }

    #[test]
    fn dice_examples() {
        let a = labels([1, 1, 4], &[1, 1, 0, 2]);
        assert_eq!(dice_label(&a, &a, 1).unwrap(), Some(1.0));
        assert_eq!(dice_label(&a, &a, 2).unwrap(), Some(1.0));
        let b = labels([1, 1, 4], &[0, 0, 1, 1]);
        let c = labels([1, 1, 4], &[1, 1, 0, 0]);
        assert_eq!(dice_label(&b, &c, 1).unwrap(), Some(0.0));
        let d = labels([1, 1, 4], &[0, 1, 1, 0]);
        assert_eq!(dice_label(&c, &d, 1).unwrap(), Some(0.5));
        assert_eq!(dice_label(&c, &d, 7).unwrap(), None);
    }

    #[test]
    fn undefined_labels_leave_the_mean() {
        let a = labels([1, 2, 2], &[0, 1, 1, 2]);
        let b = labels([1, 2, 2], &[0, 1, 0, 2]);
        let r = MetricReport::evaluate_labels(&a, &b, &DeformationField::zeros([1, 2, 2]), &[1, 2, 9]).unwrap();
        assert_eq!(r.undefined, vec![9]);
        let d1 = 2.0 / 3.0;
        assert!((r.dice_mean - (d1 + 1.0) / 2.0).abs() < 1e-15);
        let rows = r.csv_rows("p0");
        assert_eq!(rows.len(), 3);
        assert!(rows[1].starts_with("p0,2,1,0"));
        assert!(rows[2].starts_with("p0,mean,"));
    }

    #[test]
    fn identity_field_is_unit_and_unfolded() {
        let det = jacobian_determinant(&DeformationField::zeros([4, 3, 5]));
        assert!(det.data().iter().all(|&d| d == 1.0));
        assert_eq!(njd_percent(&DeformationField::zeros([4, 3, 5])), 0.0);
    }

    #[test]
    fn uniform_dilation_and_mirror() {
        let dims = [6, 5, 4];
        let dil = DeformationField::from_fn(dims, |p| p.map(|c| 0.5 * c as f64));
        let det = jacobian_determinant(&dil);
        for &d in det.data() {
            assert!((d - 3.375).abs() < 1e-12);
        }
        let mirror = DeformationField::from_fn(dims, |p| [(dims[0] - 1) as f64 - 2.0 * p[0] as f64, 0.0, 0.0]);
        assert!(jacobian_determinant(&mirror).data().iter().all(|&d| d < 0.0));
        assert_eq!(njd_percent(&mirror), 100.0);
    }

    #[test]
    fn half_folded_field_counts_exactly() {
        let dims = [6, 4, 8];
        let field = DeformationField::from_fn(dims, |p| [if p[2] < 4 { -2.0 * p[0] as f64 } else { 0.0 }, 0.0, 0.0]);
        assert_eq!(njd_percent(&field), 50.0);
    }

    #[test]
    fn folding_is_monotone_in_added_folds() {
        let dims = [6, 4, 8];
        let mut prev = 0.0;
        for cut in 0..=8 {
            let field = DeformationField::from_fn(dims, |p| [if p[2] < cut { -2.0 * p[0] as f64 } else { 0.0 }, 0.0, 0.0]);
            let njd = njd_percent(&field);
            assert!(njd >= prev);
            prev = njd;
        }
        assert_eq!(prev, 100.0);
    }
}
