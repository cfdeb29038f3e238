//! Numeric self-checks run by `armcal check`.
//!
//! Each check compares a library routine against an independent oracle and
//! reports the worst error seen. They are cheap enough to run before every
//! experiment.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::kinematics::{
    apply_deviation, end_position, Block, error_jacobian, forward_kinematics, link_transform, DeviationLayout, DeviationVector,
    DhLink, DhTable, LinkParams,
};
use crate::optimizer::{cubic_fit, cubic_minimum};
use crate::particle_filter::{normalize_weights, ParticleEnsemble};

#[derive(Clone, Debug, Serialize)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    /// Worst observed value of the checked quantity.
    pub max_error: f64,
    pub tolerance: f64,
    /// `max_error` must stay below `tolerance` unless this is set, in which
    /// case it must stay above.
    pub lower_bound: bool,
}

impl CheckOutcome {
    fn upper(name: &'static str, max_error: f64, tolerance: f64) -> Self {
        Self {
            name,
            passed: max_error <= tolerance,
            max_error,
            tolerance,
            lower_bound: false,
        }
    }

    fn lower(name: &'static str, value: f64, tolerance: f64) -> Self {
        Self {
            name,
            passed: value >= tolerance,
            max_error: value,
            tolerance,
            lower_bound: true,
        }
    }
}

const TRIALS: usize = 100;

/// Run every check. Kinematic checks use `table`, or a built-in planar
/// 3R arm when `None`.
pub fn run_checks(table: Option<&DhTable>, seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let planar = planar_table(&[300.0, 200.0, 100.0])?;
    let table = table.unwrap_or(&planar);
    Ok(vec![
        planar_fk(&mut rng)?,
        orthonormality(&mut rng)?,
        jacobian_vs_difference(table, &mut rng)?,
        jacobian_quadratic_order(table, &mut rng)?,
        cubic_recovery(&mut rng)?,
        cubic_minimum_vs_grid(&mut rng)?,
        weight_normalization(&mut rng)?,
    ])
}

fn planar_table(lengths: &[f64]) -> Result<DhTable> {
    DhTable::new(lengths.iter().map(|&a| DhLink::new(a, 0.0, 0.0, 0.0)).collect())
}

fn random_q<R: Rng>(joints: usize, rng: &mut R) -> Vec<f64> {
    (0..joints).map(|_| rng.random_range(-PI..PI)).collect()
}

/// Planar arm against the closed-form sum of link vectors.
fn planar_fk<R: Rng>(rng: &mut R) -> Result<CheckOutcome> {
    let lengths = [300.0, 200.0, 100.0];
    let table = planar_table(&lengths)?;
    let mut worst: f64 = 0.0;
    for _ in 0..TRIALS {
        let q = random_q(3, rng);
        let p = end_position(&table, &q)?;
        let (mut x, mut y, mut phi) = (0.0, 0.0, 0.0);
        for (a, qi) in lengths.iter().zip(&q) {
            phi += qi;
            x += a * phi.cos();
            y += a * phi.sin();
        }
        worst = worst.max((p.x - x).abs()).max((p.y - y).abs()).max(p.z.abs());
    }
    Ok(CheckOutcome::upper("planar_fk", worst, 1e-9))
}

fn orthonormality<R: Rng>(rng: &mut R) -> Result<CheckOutcome> {
    let mut worst: f64 = 0.0;
    for _ in 0..10 * TRIALS {
        let p = LinkParams::new(
            rng.random_range(-1e3..1e3),
            rng.random_range(-1e3..1e3),
            rng.random_range(-10.0..10.0),
            rng.random_range(-10.0..10.0),
        );
        worst = worst.max(link_transform(&p)?.orthonormality_error());
    }
    let six = planar_table(&[1.0; 6])?;
    for _ in 0..TRIALS {
        worst = worst.max(forward_kinematics(&six, &random_q(6, rng))?.orthonormality_error());
    }
    Ok(CheckOutcome::upper("rotation_orthonormality", worst, 1e-9))
}

/// `error_jacobian` against central differences taken through the public
/// `apply_deviation` path with a different step.
fn jacobian_vs_difference<R: Rng>(table: &DhTable, rng: &mut R) -> Result<CheckOutcome> {
    let layout = DeviationLayout::new(table.joint_count(), false);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let q = random_q(table.joint_count(), rng);
        let jac = error_jacobian(table, &q, layout)?;
        for col in 0..layout.dim() {
            let mut w = vec![0.0; layout.dim()];
            w[col] = h;
            let plus = end_position(&apply_deviation(table, &DeviationVector::from_vec(layout, w.clone())?)?, &q)?;
            w[col] = -h;
            let minus = end_position(&apply_deviation(table, &DeviationVector::from_vec(layout, w)?)?, &q)?;
            let oracle = (plus - minus) / (2.0 * h);
            worst = worst.max((jac.column(col) - oracle).amax());
        }
    }
    Ok(CheckOutcome::upper("jacobian_vs_difference", worst, 1e-5))
}

/// Halving a deviation must shrink the linearisation error about four
/// times. Reports the smallest observed ratio.
fn jacobian_quadratic_order<R: Rng>(table: &DhTable, rng: &mut R) -> Result<CheckOutcome> {
    let layout = DeviationLayout::new(table.joint_count(), false);
    let mut worst = f64::INFINITY;
    for _ in 0..20 {
        let q = random_q(table.joint_count(), rng);
        let jac = error_jacobian(table, &q, layout)?;
        let p0 = end_position(table, &q)?;
        let dir: Vec<f64> = (0..layout.dim())
            .map(|i| {
                let scale = match layout.block_of(i) {
                    Some(Block::A | Block::D) => 1.0,
                    _ => 0.01,
                };
                scale * rng.random_range(-1.0..1.0)
            })
            .collect();
        let lin_err = |eps: f64| -> Result<f64> {
            let w: Vec<f64> = dir.iter().map(|v| eps * v).collect();
            let p = end_position(&apply_deviation(table, &DeviationVector::from_vec(layout, w.clone())?)?, &q)?;
            let jw = &jac * nalgebra::DVector::from_vec(w);
            Ok(((p - p0) - nalgebra::Vector3::new(jw[0], jw[1], jw[2])).norm())
        };
        let (e1, e2) = (lin_err(1.0)?, lin_err(0.5)?);
        worst = worst.min(e1 / e2);
    }
    Ok(CheckOutcome::lower("jacobian_quadratic_order", worst, 3.5))
}

fn random_cubic<R: Rng>(rng: &mut R) -> [f64; 4] {
    [
        rng.random_range(-5.0..5.0),
        rng.random_range(-5.0..5.0),
        rng.random_range(-5.0..5.0),
        rng.random_range(-5.0..5.0),
    ]
}

fn eval_cubic(c: &[f64; 4], w: f64) -> f64 {
    c[0] + w * (c[1] + w * (c[2] + w * c[3]))
}

/// Exact cubics sampled at three points plus the slope at the first.
fn cubic_recovery<R: Rng>(rng: &mut R) -> Result<CheckOutcome> {
    let mut worst: f64 = 0.0;
    for _ in 0..TRIALS {
        let c = random_cubic(rng);
        let w1 = rng.random_range(-2.0..2.0);
        let w2 = w1 + rng.random_range(0.5..2.0);
        let w3 = w1 - rng.random_range(0.5..2.0);
        let slope = c[1] + w1 * (2.0 * c[2] + 3.0 * c[3] * w1);
        let fit = cubic_fit(w1, w2, w3, eval_cubic(&c, w1), eval_cubic(&c, w2), eval_cubic(&c, w3), slope)?;
        for (got, want) in [fit.c0, fit.c1, fit.c2, fit.c3].iter().zip(&c) {
            worst = worst.max((got - want).abs());
        }
    }
    Ok(CheckOutcome::upper("cubic_recovery", worst, 1e-8))
}

/// The returned root against a dense grid search for the local minimum
/// nearest to it.
fn cubic_minimum_vs_grid<R: Rng>(rng: &mut R) -> Result<CheckOutcome> {
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    while checked < TRIALS {
        let c = random_cubic(rng);
        let fit = cubic_fit(0.0, 1.0, -1.0, c[0], eval_cubic(&c, 1.0), eval_cubic(&c, -1.0), c[1])?;
        let Some(w) = cubic_minimum(&fit) else { continue };
        if w.abs() > 10.0 {
            continue;
        }
        // Golden-section refinement of a coarse grid minimum around `w`.
        let f = |x: f64| eval_cubic(&c, x);
        let n = 2000;
        let (lo, hi) = (w - 1.0, w + 1.0);
        let best = (0..=n)
            .map(|k| lo + (hi - lo) * k as f64 / n as f64)
            .min_by(|a, b| f(*a).total_cmp(&f(*b)))
            .expect("non-empty grid");
        let step = (hi - lo) / n as f64;
        let (mut a, mut b) = (best - step, best + step);
        let g = (5f64.sqrt() - 1.0) / 2.0;
        while b - a > 1e-10 {
            let x1 = b - g * (b - a);
            let x2 = a + g * (b - a);
            if f(x1) < f(x2) {
                b = x2;
            } else {
                a = x1;
            }
        }
        // Interior minima only; the grid edge is not a stationary point.
        if (best - lo).abs() < step || (hi - best).abs() < step {
            continue;
        }
        worst = worst.max((0.5 * (a + b) - w).abs());
        checked += 1;
    }
    Ok(CheckOutcome::upper("cubic_minimum_vs_grid", worst, 1e-6))
}

fn weight_normalization<R: Rng>(rng: &mut R) -> Result<CheckOutcome> {
    let mut worst: f64 = 0.0;
    for _ in 0..TRIALS {
        let n = rng.random_range(1..1000);
        let mut ens = ParticleEnsemble {
            particles: vec![Vec::new(); n],
            weights: (0..n).map(|_| rng.random_range(0.0..1e3)).collect(),
        };
        ens.weights[0] += 1e-3;
        normalize_weights(&mut ens)?;
        worst = worst.max((ens.weights.iter().sum::<f64>() - 1.0).abs());
    }
    Ok(CheckOutcome::upper("weight_normalization", worst, 1e-9))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simdata::demo_table;

    #[test]
    fn all_checks_pass_on_builtin_and_demo_tables() {
        for table in [None, Some(demo_table())] {
            for c in run_checks(table.as_ref(), 7).unwrap() {
                assert!(c.passed, "{c:?}");
            }
        }
    }
}
