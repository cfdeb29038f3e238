//! Cable-length residuals, the mean-squared fitness and the accuracy metrics.

use nalgebra::{DMatrix, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{
    end_position_unchecked, error_jacobian, perturbed_links, DeviationLayout, DeviationVector, DhLink, DhTable,
    Identifiability,
};

/// One measured configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    /// Joint readings (rad).
    pub q: Vec<f64>,
    /// Measured anchor-to-end-effector cable length (mm).
    pub length: f64,
}

/// Joint configurations with measured cable lengths and the nominal anchor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasurementSet {
    samples: Vec<Sample>,
    anchor: [f64; 3],
    joints: usize,
}

impl MeasurementSet {
    pub fn new(samples: Vec<Sample>, anchor: [f64; 3], joints: usize) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidDataset("no samples".into()));
        }
        if anchor.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidDataset("anchor is not finite".into()));
        }
        for (i, s) in samples.iter().enumerate() {
            if s.q.len() != joints {
                return Err(Error::InvalidDataset(format!(
                    "sample {} has {} joint values, expected {joints}",
                    i + 1,
                    s.q.len()
                )));
            }
            if s.q.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidDataset(format!("sample {} has a non-finite joint value", i + 1)));
            }
            if !(s.length.is_finite() && s.length > 0.0) {
                return Err(Error::InvalidDataset(format!(
                    "sample {} has cable length {} (must be positive)",
                    i + 1,
                    s.length
                )));
            }
        }
        Ok(Self {
            samples,
            anchor,
            joints,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn anchor(&self) -> Vector3<f64> {
        Vector3::from(self.anchor)
    }

    pub fn joint_count(&self) -> usize {
        self.joints
    }

    /// Samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let samples = indices
            .iter()
            .map(|&i| {
                self.samples
                    .get(i)
                    .cloned()
                    .ok_or_else(|| Error::InvalidDataset(format!("sample index {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(samples, self.anchor, self.joints)
    }
}

/// Accuracy summary of a residual vector.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rmse_mm: f64,
    /// Mean absolute residual. Called "Std" in the usual calibration tables,
    /// but it is the average error, not a standard deviation.
    pub std_mm: f64,
    pub max_mm: f64,
}

/// Euclidean distance between the end-effector and the anchor.
pub fn nominal_cable_length(p: &Vector3<f64>, anchor: &Vector3<f64>) -> f64 {
    (p - anchor).norm()
}

fn check_dims(ms: &MeasurementSet, table: &DhTable, layout: DeviationLayout) -> Result<()> {
    if table.joint_count() != ms.joints {
        return Err(Error::DimensionMismatch {
            expected: ms.joints,
            got: table.joint_count(),
        });
    }
    if layout.joints != ms.joints {
        return Err(Error::DimensionMismatch {
            expected: 4 * ms.joints,
            got: 4 * layout.joints,
        });
    }
    Ok(())
}

/// `L_measured - L_nominal` per sample, in sample order.
pub fn residuals(ms: &MeasurementSet, table: &DhTable, w: &DeviationVector) -> Result<Vec<f64>> {
    check_dims(ms, table, w.layout())?;
    let mut out = Vec::with_capacity(ms.len());
    residuals_into(ms, table.links(), w.layout(), w.as_slice(), &mut out);
    Ok(out)
}

/// Mean squared residual (mm²).
pub fn fitness(ms: &MeasurementSet, table: &DhTable, w: &DeviationVector) -> Result<f64> {
    check_dims(ms, table, w.layout())?;
    Ok(fitness_unchecked(ms, table.links(), w.layout(), w.as_slice()))
}

pub(crate) fn residuals_into(
    ms: &MeasurementSet,
    nominal: &[DhLink],
    layout: DeviationLayout,
    w: &[f64],
    out: &mut Vec<f64>,
) {
    let links = perturbed_links(nominal, layout, w);
    let mut anchor = ms.anchor();
    if layout.anchor {
        let k = 4 * layout.joints;
        anchor += Vector3::new(w[k], w[k + 1], w[k + 2]);
    }
    out.clear();
    out.extend(
        ms.samples
            .iter()
            .map(|s| s.length - nominal_cable_length(&end_position_unchecked(&links, &s.q), &anchor)),
    );
}

pub(crate) fn fitness_unchecked(ms: &MeasurementSet, nominal: &[DhLink], layout: DeviationLayout, w: &[f64]) -> f64 {
    let mut r = Vec::with_capacity(ms.len());
    residuals_into(ms, nominal, layout, w, &mut r);
    r.iter().map(|v| v * v).sum::<f64>() / r.len() as f64
}

/// RMSE, mean absolute error and maximum absolute error of `r`.
pub fn metrics(r: &[f64]) -> Result<Metrics> {
    if r.is_empty() {
        return Err(Error::EmptyResiduals);
    }
    let n = r.len() as f64;
    let (mut sq, mut abs, mut max) = (0.0, 0.0, 0.0f64);
    for v in r {
        sq += v * v;
        abs += v.abs();
        max = max.max(v.abs());
    }
    Ok(Metrics {
        rmse_mm: (sq / n).sqrt(),
        std_mm: abs / n,
        max_mm: max,
    })
}

/// Sensitivity of the residual vector to the deviation coordinates at `w`
/// (n x dim), built from the position Jacobian.
pub fn residual_jacobian(ms: &MeasurementSet, table: &DhTable, w: &DeviationVector) -> Result<DMatrix<f64>> {
    let layout = w.layout();
    check_dims(ms, table, layout)?;
    let actual = DhTable::new(perturbed_links(table.links(), layout, w.as_slice()))?;
    let anchor = ms.anchor() + w.anchor_offset().unwrap_or_else(Vector3::zeros);
    let mut out = DMatrix::zeros(ms.len(), layout.dim());
    for (i, s) in ms.samples.iter().enumerate() {
        let p = end_position_unchecked(actual.links(), &s.q);
        let dist = (p - anchor).norm();
        if dist == 0.0 {
            continue;
        }
        let u = (p - anchor) / dist;
        let jac = error_jacobian(&actual, &s.q, layout)?;
        let row = -(u.transpose() * jac);
        out.row_mut(i).copy_from(&row);
        if layout.anchor {
            let k = 4 * layout.joints;
            for c in 0..3 {
                out[(i, k + c)] = u[c];
            }
        }
    }
    Ok(out)
}

/// Rank of the cable-length residual Jacobian at `w`.
pub fn length_identifiability(
    ms: &MeasurementSet,
    table: &DhTable,
    w: &DeviationVector,
    rel_tol: f64,
) -> Result<Identifiability> {
    Ok(Identifiability::from_matrix(residual_jacobian(ms, table, w)?, rel_tol))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::{Block, DhLink};
    use proptest::prelude::*;

    fn planar2() -> DhTable {
        DhTable::new(vec![DhLink::new(1.0, 0.0, 0.0, 0.0), DhLink::new(1.0, 0.0, 0.0, 0.0)]).unwrap()
    }

    #[test]
    fn cable_length_examples() {
        let o = Vector3::zeros();
        assert_eq!(nominal_cable_length(&o, &o), 0.0);
        assert_eq!(nominal_cable_length(&Vector3::new(3.0, 4.0, 0.0), &o), 5.0);
        let d = nominal_cable_length(&Vector3::new(1.0, 1.0, 1.0), &Vector3::new(2.0, 2.0, 2.0));
        assert!((d - 3f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn single_sample_residual() {
        let ms = MeasurementSet::new(vec![Sample { q: vec![0.0, 0.0], length: 2.5 }], [0.0; 3], 2).unwrap();
        let w = DeviationVector::zeros(DeviationLayout::new(2, false));
        let r = residuals(&ms, &planar2(), &w).unwrap();
        assert_eq!(r.len(), 1);
        assert!((r[0] - 0.5).abs() < 1e-15);
        assert!((fitness(&ms, &planar2(), &w).unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn anchor_offset_shifts_the_anchor() {
        let ms = MeasurementSet::new(vec![Sample { q: vec![0.0, 0.0], length: 3.0 }], [0.0; 3], 2).unwrap();
        let layout = DeviationLayout::new(2, true);
        let mut v = vec![0.0; layout.dim()];
        v[8] = -1.0;
        let w = DeviationVector::from_vec(layout, v).unwrap();
        let r = residuals(&ms, &planar2(), &w).unwrap();
        assert!(r[0].abs() < 1e-15);
    }

    #[test]
    fn fitness_of_three_four() {
        // residuals (3, 4): lengths chosen so that L - L' = 3 and 4.
        let ms = MeasurementSet::new(
            vec![
                Sample { q: vec![0.0, 0.0], length: 5.0 },
                Sample { q: vec![0.0, 0.0], length: 6.0 },
            ],
            [0.0; 3],
            2,
        )
        .unwrap();
        let w = DeviationVector::zeros(DeviationLayout::new(2, false));
        assert_eq!(residuals(&ms, &planar2(), &w).unwrap(), vec![3.0, 4.0]);
        assert_eq!(fitness(&ms, &planar2(), &w).unwrap(), 12.5);
    }

    #[test]
    fn metrics_examples() {
        let m = metrics(&[3.0, -4.0]).unwrap();
        assert_eq!(m.max_mm, 4.0);
        assert_eq!(m.std_mm, 3.5);
        assert!((m.rmse_mm - 12.5f64.sqrt()).abs() < 1e-15);
        let m = metrics(&[-0.7; 9]).unwrap();
        assert!((m.rmse_mm - 0.7).abs() < 1e-15 && (m.std_mm - 0.7).abs() < 1e-15 && m.max_mm == 0.7);
        assert!(matches!(metrics(&[]), Err(Error::EmptyResiduals)));
    }

    #[test]
    fn measurement_set_validation() {
        let ok = Sample { q: vec![0.0, 0.0], length: 1.0 };
        assert!(MeasurementSet::new(vec![], [0.0; 3], 2).is_err());
        assert!(MeasurementSet::new(vec![Sample { q: vec![0.0], length: 1.0 }], [0.0; 3], 2).is_err());
        assert!(MeasurementSet::new(vec![Sample { q: vec![0.0, 0.0], length: 0.0 }], [0.0; 3], 2).is_err());
        assert!(MeasurementSet::new(vec![Sample { q: vec![0.0, 0.0], length: f64::NAN }], [0.0; 3], 2).is_err());
        assert!(MeasurementSet::new(vec![ok.clone()], [f64::NAN, 0.0, 0.0], 2).is_err());
        let ms = MeasurementSet::new(vec![ok], [0.0; 3], 2).unwrap();
        assert!(ms.subset(&[1]).is_err());
        let bad = DeviationVector::zeros(DeviationLayout::new(3, false));
        assert!(residuals(&ms, &planar2(), &bad).is_err());
    }

    #[test]
    fn residual_jacobian_matches_differences() {
        let table = DhTable::parse(include_str!("../../../data/demo6r.dh"), "demo").unwrap();
        let samples = (0..12)
            .map(|k| Sample {
                q: (0..6).map(|j| ((k * 5 + j * 11) as f64 * 0.29).sin()).collect(),
                length: 800.0,
            })
            .collect();
        let ms = MeasurementSet::new(samples, [600.0, -400.0, 200.0], 6).unwrap();
        let layout = DeviationLayout::new(6, true);
        let w0 = DeviationVector::zeros(layout);
        let jac = residual_jacobian(&ms, &table, &w0).unwrap();
        let r0 = residuals(&ms, &table, &w0).unwrap();
        let mut v = vec![0.0; layout.dim()];
        let col = layout.index(Block::Theta, 1);
        v[col] = 1e-6;
        let r1 = residuals(&ms, &table, &DeviationVector::from_vec(layout, v).unwrap()).unwrap();
        for i in 0..ms.len() {
            assert!(((r1[i] - r0[i]) / 1e-6 - jac[(i, col)]).abs() < 1e-3);
        }
        let id = length_identifiability(&ms, &table, &w0, 1e-9).unwrap();
        assert_eq!(id.dim, 27);
        assert!(id.rank <= 12);
    }

    proptest! {
        #[test]
        fn mean_abs_never_exceeds_rmse(r in prop::collection::vec(-1e3f64..1e3, 1..60)) {
            let m = metrics(&r).unwrap();
            prop_assert!(m.std_mm <= m.rmse_mm * (1.0 + 1e-12));
            prop_assert!(m.rmse_mm <= m.max_mm * (1.0 + 1e-12));
            prop_assert!(m.std_mm >= 0.0);
        }

        #[test]
        fn metrics_ignore_sample_order(mut r in prop::collection::vec(-50f64..50.0, 2..40), k in 0usize..40) {
            let a = metrics(&r).unwrap();
            let len = r.len();
            r.rotate_left(k % len);
            r.reverse();
            let b = metrics(&r).unwrap();
            prop_assert!((a.rmse_mm - b.rmse_mm).abs() <= 1e-12 * a.rmse_mm.max(1.0));
            prop_assert!((a.std_mm - b.std_mm).abs() <= 1e-12 * a.std_mm.max(1.0));
            prop_assert_eq!(a.max_mm, b.max_mm);
        }
    }
}
