//! Standard Denavit-Hartenberg forward kinematics and the first-order
//! position error model.
//!
//! Lengths are millimetres and angles radians throughout. A joint reading
//! `q_i` is added to the stored `theta_offset_i` before the link transform
//! is formed, so one [`DhTable`] serves every robot configuration.

use std::fmt::Write as _;
use std::ops::Mul;
use std::path::Path;

use nalgebra::{DMatrix, Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Finite-difference step used by [`error_jacobian`] (rad or mm).
pub const JACOBIAN_STEP: f64 = 1e-6;

/// Parameters of a single link at a particular joint angle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinkParams {
    pub a: f64,
    pub d: f64,
    pub theta: f64,
    pub alpha: f64,
}

impl LinkParams {
    pub fn new(a: f64, d: f64, theta: f64, alpha: f64) -> Self {
        Self { a, d, theta, alpha }
    }

    fn is_finite(&self) -> bool {
        self.a.is_finite() && self.d.is_finite() && self.theta.is_finite() && self.alpha.is_finite()
    }
}

/// Homogeneous 4x4 rigid transform, translation in mm.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transform(Matrix4<f64>);

impl Transform {
    pub fn identity() -> Self {
        Transform(Matrix4::identity())
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.0
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.0.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        Vector3::new(self.0[(0, 3)], self.0[(1, 3)], self.0[(2, 3)])
    }

    /// Largest entry of `|R Rᵀ - I|`.
    pub fn orthonormality_error(&self) -> f64 {
        let r = self.rotation();
        (r * r.transpose() - Matrix3::identity()).abs().max()
    }
}

impl Mul for Transform {
    type Output = Transform;

    fn mul(self, rhs: Transform) -> Transform {
        let mut m = self.0 * rhs.0;
        // Keep the homogeneous row exact under accumulated products.
        m[(3, 0)] = 0.0;
        m[(3, 1)] = 0.0;
        m[(3, 2)] = 0.0;
        m[(3, 3)] = 1.0;
        Transform(m)
    }
}

/// One row of a DH table.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DhLink {
    pub a: f64,
    pub d: f64,
    pub theta_offset: f64,
    pub alpha: f64,
}

impl DhLink {
    pub fn new(a: f64, d: f64, theta_offset: f64, alpha: f64) -> Self {
        Self {
            a,
            d,
            theta_offset,
            alpha,
        }
    }

    fn at(&self, q: f64) -> LinkParams {
        LinkParams::new(self.a, self.d, self.theta_offset + q, self.alpha)
    }
}

/// Nominal kinematic model: an ordered, non-empty list of DH links.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<DhLink>", into = "Vec<DhLink>")]
pub struct DhTable {
    links: Vec<DhLink>,
}

impl TryFrom<Vec<DhLink>> for DhTable {
    type Error = Error;

    fn try_from(links: Vec<DhLink>) -> Result<Self> {
        DhTable::new(links)
    }
}

impl From<DhTable> for Vec<DhLink> {
    fn from(t: DhTable) -> Self {
        t.links
    }
}

impl DhTable {
    pub fn new(links: Vec<DhLink>) -> Result<Self> {
        if links.is_empty() {
            return Err(Error::InvalidParameter("DH table has no links".into()));
        }
        for (i, l) in links.iter().enumerate() {
            if !(l.a.is_finite() && l.d.is_finite() && l.theta_offset.is_finite() && l.alpha.is_finite()) {
                return Err(Error::InvalidParameter(format!("link {} has a non-finite entry", i + 1)));
            }
        }
        Ok(Self { links })
    }

    pub fn joint_count(&self) -> usize {
        self.links.len()
    }

    pub fn links(&self) -> &[DhLink] {
        &self.links
    }

    /// Parse the plain-text table format: one `a d theta_offset alpha` row
    /// per joint, separated by whitespace and/or commas, `#` starts a comment.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut links = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line
                .split(|c: char| c == ',' || c.is_whitespace())
                .filter(|s| !s.is_empty())
                .collect();
            if fields.len() != 4 {
                return Err(Error::parse(
                    origin,
                    lineno + 1,
                    format!("expected 4 numbers (a d theta_offset alpha), found {}", fields.len()),
                ));
            }
            let mut v = [0.0; 4];
            for (slot, f) in v.iter_mut().zip(&fields) {
                *slot = f
                    .parse::<f64>()
                    .map_err(|e| Error::parse(origin, lineno + 1, format!("`{f}`: {e}")))?;
                if !slot.is_finite() {
                    return Err(Error::parse(origin, lineno + 1, format!("`{f}` is not finite")));
                }
            }
            links.push(DhLink::new(v[0], v[1], v[2], v[3]));
        }
        if links.is_empty() {
            return Err(Error::parse(origin, 0, "no DH rows found"));
        }
        DhTable::new(links)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Render in the file format; numbers use shortest round-trip decimals.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# a(mm) d(mm) theta_offset(rad) alpha(rad)\n");
        for l in &self.links {
            let _ = writeln!(out, "{} {} {} {}", l.a, l.d, l.theta_offset, l.alpha);
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

/// Which parameter of a joint a deviation coordinate perturbs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Block {
    Alpha,
    A,
    D,
    Theta,
}

impl Block {
    pub const ALL: [Block; 4] = [Block::Alpha, Block::A, Block::D, Block::Theta];

    fn ordinal(self) -> usize {
        match self {
            Block::Alpha => 0,
            Block::A => 1,
            Block::D => 2,
            Block::Theta => 3,
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Block::Alpha => "dalpha",
            Block::A => "da",
            Block::D => "dd",
            Block::Theta => "dtheta",
        }
    }
}

/// Shape of a deviation vector: `4 * joints` kinematic coordinates in block
/// order `(dalpha | da | dd | dtheta)`, then optionally a 3-vector anchor offset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviationLayout {
    pub joints: usize,
    pub anchor: bool,
}

impl DeviationLayout {
    pub fn new(joints: usize, anchor: bool) -> Self {
        Self { joints, anchor }
    }

    pub fn dim(&self) -> usize {
        4 * self.joints + if self.anchor { 3 } else { 0 }
    }

    pub fn index(&self, block: Block, joint: usize) -> usize {
        debug_assert!(joint < self.joints);
        block.ordinal() * self.joints + joint
    }

    /// Block of coordinate `i`, or `None` for anchor coordinates.
    pub fn block_of(&self, i: usize) -> Option<Block> {
        let b = i / self.joints.max(1);
        Block::ALL.get(b).copied().filter(|_| i < 4 * self.joints)
    }

    pub fn labels(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.dim());
        for b in Block::ALL {
            for j in 0..self.joints {
                out.push(format!("{}{}", b.symbol(), j + 1));
            }
        }
        if self.anchor {
            out.extend(["anchor_x", "anchor_y", "anchor_z"].map(String::from));
        }
        out
    }
}

/// Stacked kinematic parameter deviations, the quantity being identified.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviationVector {
    layout: DeviationLayout,
    values: Vec<f64>,
}

impl DeviationVector {
    pub fn zeros(layout: DeviationLayout) -> Self {
        Self {
            layout,
            values: vec![0.0; layout.dim()],
        }
    }

    pub fn from_vec(layout: DeviationLayout, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.dim() {
            return Err(Error::DimensionMismatch {
                expected: layout.dim(),
                got: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!("deviation entry {i} is not finite")));
        }
        Ok(Self { layout, values })
    }

    pub fn layout(&self) -> DeviationLayout {
        self.layout
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, block: Block, joint: usize) -> f64 {
        self.values[self.layout.index(block, joint)]
    }

    pub fn anchor_offset(&self) -> Option<Vector3<f64>> {
        self.layout.anchor.then(|| {
            let k = 4 * self.layout.joints;
            Vector3::new(self.values[k], self.values[k + 1], self.values[k + 2])
        })
    }

    pub fn neg(&self) -> Self {
        Self {
            layout: self.layout,
            values: self.values.iter().map(|v| -v).collect(),
        }
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// The DH link matrix `Rz(theta) Tz(d) Tx(a) Rx(alpha)`.
pub fn link_transform(p: &LinkParams) -> Result<Transform> {
    if !p.is_finite() {
        return Err(Error::InvalidParameter(format!("non-finite link parameters {p:?}")));
    }
    Ok(link_matrix(p))
}

fn link_matrix(p: &LinkParams) -> Transform {
    let (st, ct) = p.theta.sin_cos();
    let (sa, ca) = p.alpha.sin_cos();
    #[rustfmt::skip]
    let m = Matrix4::new(
        ct, -st * ca,  st * sa, p.a * ct,
        st,  ct * ca, -ct * sa, p.a * st,
        0.0,      sa,       ca,      p.d,
        0.0,     0.0,      0.0,      1.0,
    );
    Transform(m)
}

fn check_joints(table: &DhTable, q: &[f64]) -> Result<()> {
    if q.len() != table.joint_count() {
        return Err(Error::DimensionMismatch {
            expected: table.joint_count(),
            got: q.len(),
        });
    }
    if q.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("non-finite joint angle".into()));
    }
    Ok(())
}

/// Base-to-flange transform, the ordered product of the link matrices.
pub fn forward_kinematics(table: &DhTable, q: &[f64]) -> Result<Transform> {
    check_joints(table, q)?;
    Ok(table
        .links
        .iter()
        .zip(q)
        .fold(Transform::identity(), |acc, (l, &qi)| acc * link_matrix(&l.at(qi))))
}

/// End-effector position in the base frame.
pub fn end_position(table: &DhTable, q: &[f64]) -> Result<Vector3<f64>> {
    check_joints(table, q)?;
    Ok(end_position_unchecked(&table.links, q))
}

// Hot path for fitness evaluation: only the translation column is carried.
pub(crate) fn end_position_unchecked(links: &[DhLink], q: &[f64]) -> Vector3<f64> {
    let mut rot = Matrix3::identity();
    let mut pos = Vector3::zeros();
    for (l, &qi) in links.iter().zip(q) {
        let (st, ct) = (l.theta_offset + qi).sin_cos();
        let (sa, ca) = l.alpha.sin_cos();
        let local_p = Vector3::new(l.a * ct, l.a * st, l.d);
        #[rustfmt::skip]
        let local_r = Matrix3::new(
            ct, -st * ca,  st * sa,
            st,  ct * ca, -ct * sa,
            0.0,      sa,       ca,
        );
        pos += rot * local_p;
        rot *= local_r;
    }
    pos
}

/// Add a deviation to the nominal table. Anchor coordinates are ignored.
pub fn apply_deviation(table: &DhTable, w: &DeviationVector) -> Result<DhTable> {
    if w.layout.joints != table.joint_count() {
        return Err(Error::DimensionMismatch {
            expected: 4 * table.joint_count(),
            got: 4 * w.layout.joints,
        });
    }
    Ok(DhTable {
        links: perturbed_links(&table.links, w.layout, &w.values),
    })
}

pub(crate) fn perturbed_links(links: &[DhLink], layout: DeviationLayout, w: &[f64]) -> Vec<DhLink> {
    links
        .iter()
        .enumerate()
        .map(|(j, l)| DhLink {
            a: l.a + w[layout.index(Block::A, j)],
            d: l.d + w[layout.index(Block::D, j)],
            theta_offset: l.theta_offset + w[layout.index(Block::Theta, j)],
            alpha: l.alpha + w[layout.index(Block::Alpha, j)],
        })
        .collect()
}

/// Position error Jacobian `J` (3 x layout.dim()) with
/// `P(w_N + w) - P(w_N) ≈ J w`, by central differences with step
/// [`JACOBIAN_STEP`]. Anchor columns are zero since the anchor does not move
/// the end-effector.
pub fn error_jacobian(table: &DhTable, q: &[f64], layout: DeviationLayout) -> Result<DMatrix<f64>> {
    check_joints(table, q)?;
    if layout.joints != table.joint_count() {
        return Err(Error::DimensionMismatch {
            expected: table.joint_count(),
            got: layout.joints,
        });
    }
    let h = JACOBIAN_STEP;
    let mut jac = DMatrix::zeros(3, layout.dim());
    let mut w = vec![0.0; layout.dim()];
    for col in 0..4 * layout.joints {
        w[col] = h;
        let plus = end_position_unchecked(&perturbed_links(&table.links, layout, &w), q);
        w[col] = -h;
        let minus = end_position_unchecked(&perturbed_links(&table.links, layout, &w), q);
        w[col] = 0.0;
        jac.set_column(col, &((plus - minus) / (2.0 * h)));
    }
    Ok(jac)
}

/// Rank summary of a stacked Jacobian.
#[derive(Clone, Debug, Serialize)]
pub struct Identifiability {
    /// Singular values in descending order.
    pub singular_values: Vec<f64>,
    /// Count of singular values above `rel_tol * largest`.
    pub rank: usize,
    pub dim: usize,
}

impl Identifiability {
    pub fn from_matrix(m: DMatrix<f64>, rel_tol: f64) -> Self {
        let dim = m.ncols();
        let mut sv: Vec<f64> = m.singular_values().iter().copied().collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        let top = sv.first().copied().unwrap_or(0.0);
        let rank = sv.iter().filter(|&&s| s > rel_tol * top).count();
        Self {
            singular_values: sv,
            rank,
            dim,
        }
    }
}

/// Identifiability of the deviation coordinates from full position
/// measurements at the configurations `qs` (stacked 3n x dim Jacobian).
pub fn position_identifiability(
    table: &DhTable,
    qs: &[Vec<f64>],
    layout: DeviationLayout,
    rel_tol: f64,
) -> Result<Identifiability> {
    let mut stacked = DMatrix::zeros(3 * qs.len(), layout.dim());
    for (i, q) in qs.iter().enumerate() {
        let j = error_jacobian(table, q, layout)?;
        stacked.view_mut((3 * i, 0), (3, layout.dim())).copy_from(&j);
    }
    Ok(Identifiability::from_matrix(stacked, rel_tol))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

    fn planar2() -> DhTable {
        DhTable::new(vec![DhLink::new(1.0, 0.0, 0.0, 0.0), DhLink::new(1.0, 0.0, 0.0, 0.0)]).unwrap()
    }

    fn assert_mat(t: &Transform, rows: [[f64; 4]; 4], tol: f64) {
        for (r, row) in rows.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                assert!((t.matrix()[(r, c)] - v).abs() <= tol, "({r},{c}) {} vs {v}", t.matrix()[(r, c)]);
            }
        }
    }

    #[test]
    fn link_transform_examples() {
        let id = link_transform(&LinkParams::new(0.0, 0.0, 0.0, 0.0)).unwrap();
        assert_eq!(id, Transform::identity());

        let t = link_transform(&LinkParams::new(1.0, 0.0, FRAC_PI_2, 0.0)).unwrap();
        assert_mat(
            &t,
            [[0., -1., 0., 0.], [1., 0., 0., 1.], [0., 0., 1., 0.], [0., 0., 0., 1.]],
            1e-15,
        );

        let t = link_transform(&LinkParams::new(0.0, 2.0, 0.0, FRAC_PI_2)).unwrap();
        assert_mat(
            &t,
            [[1., 0., 0., 0.], [0., 0., -1., 0.], [0., 1., 0., 2.], [0., 0., 0., 1.]],
            1e-15,
        );
    }

    #[test]
    fn link_transform_rejects_nan() {
        assert!(matches!(
            link_transform(&LinkParams::new(f64::NAN, 0.0, 0.0, 0.0)),
            Err(Error::InvalidParameter(_))
        ));
        assert!(link_transform(&LinkParams::new(0.0, 0.0, f64::INFINITY, 0.0)).is_err());
    }

    #[test]
    fn planar_forward_kinematics() {
        let t = planar2();
        let p = forward_kinematics(&t, &[0.0, 0.0]).unwrap().translation();
        assert!((p - Vector3::new(2.0, 0.0, 0.0)).norm() <= 1e-12);
        let p = forward_kinematics(&t, &[FRAC_PI_2, 0.0]).unwrap().translation();
        assert!((p - Vector3::new(0.0, 2.0, 0.0)).norm() <= 1e-12);
        let p = forward_kinematics(&t, &[FRAC_PI_2, -FRAC_PI_2]).unwrap().translation();
        assert!((p - Vector3::new(1.0, 1.0, 0.0)).norm() <= 1e-12);
    }

    #[test]
    fn end_position_examples() {
        let zero = DhTable::new(vec![DhLink::new(0.0, 0.0, 0.0, 0.0); 3]).unwrap();
        assert_eq!(end_position(&zero, &[0.3, -1.0, 2.0]).unwrap(), Vector3::zeros());
        let t = planar2();
        let p = end_position(&t, &[FRAC_PI_4, 0.0]).unwrap();
        let s = 2f64.sqrt();
        assert!((p - Vector3::new(s, s, 0.0)).norm() <= 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let t = planar2();
        assert!(matches!(
            forward_kinematics(&t, &[0.0]),
            Err(Error::DimensionMismatch { expected: 2, got: 1 })
        ));
        let w = DeviationVector::zeros(DeviationLayout::new(3, false));
        assert!(apply_deviation(&t, &w).is_err());
    }

    #[test]
    fn fast_path_matches_matrix_product() {
        let t = DhTable::parse(include_str!("../../../data/demo6r.dh"), "demo").unwrap();
        let q = [0.3, -0.2, 0.5, 1.0, -0.7, 2.0];
        let a = forward_kinematics(&t, &q).unwrap().translation();
        let b = end_position(&t, &q).unwrap();
        assert!((a - b).norm() <= 1e-10);
    }

    #[test]
    fn apply_deviation_examples() {
        let t = planar2();
        let layout = DeviationLayout::new(2, false);
        assert_eq!(apply_deviation(&t, &DeviationVector::zeros(layout)).unwrap(), t);

        let mut v = vec![0.0; 8];
        v[layout.index(Block::A, 0)] = 0.5;
        let w = DeviationVector::from_vec(layout, v).unwrap();
        let moved = apply_deviation(&t, &w).unwrap();
        assert_eq!(moved.links()[0].a, 1.5);
        assert_eq!(moved.links()[1].a, 1.0);
        assert_eq!(t.links()[0].a, 1.0);
    }

    #[test]
    fn base_offset_column_is_z() {
        let t = DhTable::new(vec![
            DhLink::new(100.0, 50.0, 0.2, 0.0),
            DhLink::new(200.0, 10.0, 0.0, 1.0),
            DhLink::new(30.0, 80.0, 0.0, -0.4),
        ])
        .unwrap();
        let layout = DeviationLayout::new(3, false);
        let j = error_jacobian(&t, &[0.4, -0.3, 1.2], layout).unwrap();
        let col = j.column(layout.index(Block::D, 0));
        assert!((col - Vector3::new(0.0, 0.0, 1.0)).norm() < 1e-8);
    }

    #[test]
    fn jacobian_depends_on_configuration() {
        let t = DhTable::parse(include_str!("../../../data/demo6r.dh"), "demo").unwrap();
        let layout = DeviationLayout::new(6, false);
        let a = error_jacobian(&t, &[0.0; 6], layout).unwrap();
        let b = error_jacobian(&t, &[0.5, 0.1, -0.3, 0.2, 0.9, -1.0], layout).unwrap();
        assert!((a - b).abs().max() > 1e-3);
    }

    #[test]
    fn anchor_columns_are_zero() {
        let t = planar2();
        let layout = DeviationLayout::new(2, true);
        let j = error_jacobian(&t, &[0.1, 0.2], layout).unwrap();
        assert_eq!(j.ncols(), 11);
        for c in 8..11 {
            assert_eq!(j.column(c).norm(), 0.0);
        }
    }

    #[test]
    fn table_text_roundtrip() {
        let t = DhTable::new(vec![
            DhLink::new(0.1 + 0.2, -PI, 1e-17, 123456.789),
            DhLink::new(270.0, 0.0, -FRAC_PI_2, 0.0),
        ])
        .unwrap();
        assert_eq!(DhTable::parse(&t.to_text(), "rt").unwrap(), t);
    }

    #[test]
    fn table_parse_accepts_commas_and_comments() {
        let t = DhTable::parse("# header\n1,2, 3 4 # trailing\n\n5 6 7 8\n", "x").unwrap();
        assert_eq!(t.joint_count(), 2);
        assert_eq!(t.links()[0], DhLink::new(1.0, 2.0, 3.0, 4.0));
        assert!(DhTable::parse("1 2 3\n", "x").is_err());
        assert!(DhTable::parse("# nothing\n", "x").is_err());
        assert!(DhTable::parse("1 2 three 4\n", "x").is_err());
    }

    #[test]
    fn layout_labels_follow_block_order() {
        let l = DeviationLayout::new(2, true);
        assert_eq!(
            l.labels(),
            ["dalpha1", "dalpha2", "da1", "da2", "dd1", "dd2", "dtheta1", "dtheta2", "anchor_x", "anchor_y", "anchor_z"]
        );
        assert_eq!(l.block_of(3), Some(Block::A));
        assert_eq!(l.block_of(8), None);
    }

    #[test]
    fn demo_table_position_rank() {
        // alpha of the last joint never moves the flange origin.
        let t = DhTable::parse(include_str!("../../../data/demo6r.dh"), "demo").unwrap();
        let qs: Vec<Vec<f64>> = (0..30)
            .map(|k| (0..6).map(|j| ((k * 7 + j * 3) as f64 * 0.37).sin()).collect())
            .collect();
        let id = position_identifiability(&t, &qs, DeviationLayout::new(6, false), 1e-9).unwrap();
        assert!(id.rank < 24);
        assert!(id.rank >= 18, "rank {}", id.rank);
    }
}
