//! Cubic interpolation through three function values and one derivative.

use serde::Serialize;

use crate::error::{Error, Result};

/// `g(w) = c0 + c1 w + c2 w² + c3 w³` plus the intermediates of the
/// closed-form solve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CubicFit {
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub beta: f64,
    pub chi: f64,
    pub kappa: f64,
    pub phi: f64,
}

impl CubicFit {
    pub fn value(&self, w: f64) -> f64 {
        self.c0 + w * (self.c1 + w * (self.c2 + w * self.c3))
    }

    pub fn slope(&self, w: f64) -> f64 {
        self.c1 + w * (2.0 * self.c2 + 3.0 * self.c3 * w)
    }

    pub fn curvature(&self, w: f64) -> f64 {
        2.0 * self.c2 + 6.0 * self.c3 * w
    }
}

/// Fit the cubic matching `g(w1)=f1, g(w2)=f2, g(w3)=f3, g'(w1)=f1p`.
///
/// `beta` and `chi` are the derivative-corrected divided differences towards
/// `w2` and `w3`; `kappa = 2 w1 + w2` and `phi = 2 w1 + w3` are written in the
/// rational form below so the coefficients read `c3 = (beta - chi) / (kappa - phi)`.
pub fn cubic_fit(w1: f64, w2: f64, w3: f64, f1: f64, f2: f64, f3: f64, f1p: f64) -> Result<CubicFit> {
    if ![w1, w2, w3, f1, f2, f3, f1p].iter().all(|v| v.is_finite()) {
        return Err(Error::DegenerateFit("non-finite input"));
    }
    if w1 == w2 || w1 == w3 || w2 == w3 {
        return Err(Error::DegenerateFit("coincident interpolation points"));
    }
    let d12 = w1 - w2;
    let d13 = w1 - w3;
    let beta = (f2 - f1 + f1p * d12) / (d12 * d12);
    let chi = (f3 - f1 + f1p * d13) / (d13 * d13);
    let kappa = (2.0 * w1 * w1 - w2 * (w1 + w2)) / d12;
    let phi = (2.0 * w1 * w1 - w3 * (w1 + w3)) / d13;
    if kappa == phi {
        return Err(Error::DegenerateFit("singular coefficient system"));
    }
    let c3 = (beta - chi) / (kappa - phi);
    let c2 = beta - kappa * c3;
    let c1 = f1p - 2.0 * c2 * w1 - 3.0 * c3 * w1 * w1;
    let c0 = f1 - w1 * (c1 + w1 * (c2 + w1 * c3));
    let fit = CubicFit {
        c0,
        c1,
        c2,
        c3,
        beta,
        chi,
        kappa,
        phi,
    };
    if [c0, c1, c2, c3].iter().all(|v| v.is_finite()) {
        Ok(fit)
    } else {
        Err(Error::DegenerateFit("coefficient overflow"))
    }
}

/// Local minimiser of the fitted cubic: the stationary point with positive
/// curvature. Falls back to the parabola vertex when `c3` is negligible.
/// `None` when no local minimum exists.
pub fn cubic_minimum(fit: &CubicFit) -> Option<f64> {
    let CubicFit { c1, c2, c3, .. } = *fit;
    let scale = c1.abs().max(c2.abs());
    if c3.abs() <= 1e-12 * scale || c3 == 0.0 {
        return (c2 > 0.0).then(|| -c1 / (2.0 * c2));
    }
    let disc = c2 * c2 - 3.0 * c1 * c3;
    if !(disc > 0.0) {
        return None;
    }
    // The '+' root has g'' = 2 sqrt(disc) > 0. Pick the cancellation-free form.
    let root = disc.sqrt();
    let w = if c2 >= 0.0 {
        -c1 / (c2 + root)
    } else {
        (root - c2) / (3.0 * c3)
    };
    w.is_finite().then_some(w)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent oracle: solve the 4x4 interpolation system by Gaussian
    /// elimination with partial pivoting.
    fn solve_system(w1: f64, w2: f64, w3: f64, f: [f64; 4]) -> [f64; 4] {
        let mut a = [
            [1.0, w1, w1 * w1, w1 * w1 * w1, f[0]],
            [1.0, w2, w2 * w2, w2 * w2 * w2, f[1]],
            [1.0, w3, w3 * w3, w3 * w3 * w3, f[2]],
            [0.0, 1.0, 2.0 * w1, 3.0 * w1 * w1, f[3]],
        ];
        for col in 0..4 {
            let piv = (col..4).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
            a.swap(col, piv);
            for r in 0..4 {
                if r != col {
                    let k = a[r][col] / a[col][col];
                    for c in col..5 {
                        a[r][c] -= k * a[col][c];
                    }
                }
            }
        }
        [a[0][4] / a[0][0], a[1][4] / a[1][1], a[2][4] / a[2][2], a[3][4] / a[3][3]]
    }

    #[test]
    fn worked_example_intermediates() {
        let fit = cubic_fit(0.0, 2.0, 3.0, 0.0, 2.0, 18.0, -3.0).unwrap();
        assert_eq!((fit.beta, fit.chi, fit.kappa, fit.phi), (2.0, 3.0, 2.0, 3.0));
        assert_eq!((fit.c3, fit.c2, fit.c1, fit.c0), (1.0, 0.0, -3.0, 0.0));
        let oracle = solve_system(0.0, 2.0, 3.0, [0.0, 2.0, 18.0, -3.0]);
        for (got, want) in [fit.c0, fit.c1, fit.c2, fit.c3].iter().zip(oracle) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_linear_solve_off_origin() {
        let (w1, w2, w3) = (1.3, -0.4, 2.9);
        let f = [0.7, -2.0, 5.5, 1.1];
        let fit = cubic_fit(w1, w2, w3, f[0], f[1], f[2], f[3]).unwrap();
        let oracle = solve_system(w1, w2, w3, f);
        for (got, want) in [fit.c0, fit.c1, fit.c2, fit.c3].iter().zip(oracle) {
            assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        }
        assert!((fit.value(w2) - f[1]).abs() < 1e-10);
        assert!((fit.value(w3) - f[2]).abs() < 1e-10);
        assert!((fit.slope(w1) - f[3]).abs() < 1e-12);
    }

    #[test]
    fn quadratic_data_has_no_cubic_term() {
        // g = 2 - w + 4 w²
        let g = |w: f64| 2.0 - w + 4.0 * w * w;
        let fit = cubic_fit(0.5, 1.5, -0.75, g(0.5), g(1.5), g(-0.75), -1.0 + 8.0 * 0.5).unwrap();
        assert!(fit.c3.abs() <= 1e-8 * 4.0);
        assert!((cubic_minimum(&fit).unwrap() - 0.125).abs() < 1e-9);
    }

    #[test]
    fn degenerate_inputs() {
        assert!(matches!(cubic_fit(1.0, 1.0, 2.0, 0.0, 0.0, 0.0, 0.0), Err(Error::DegenerateFit(_))));
        assert!(cubic_fit(1.0, 2.0, 1.0, 0.0, 0.0, 0.0, 0.0).is_err());
        assert!(cubic_fit(0.0, 2.0, 2.0, 0.0, 0.0, 0.0, 0.0).is_err());
        assert!(cubic_fit(0.0, 1.0, 2.0, f64::NAN, 0.0, 0.0, 0.0).is_err());
    }

    fn coeffs(c0: f64, c1: f64, c2: f64, c3: f64) -> CubicFit {
        CubicFit {
            c0,
            c1,
            c2,
            c3,
            beta: 0.0,
            chi: 0.0,
            kappa: 0.0,
            phi: 0.0,
        }
    }

    #[test]
    fn minimum_examples() {
        assert!((cubic_minimum(&coeffs(0.0, -3.0, 0.0, 1.0)).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cubic_minimum(&coeffs(5.0, 0.0, 1.0, 0.0)), Some(0.0));
        assert_eq!(cubic_minimum(&coeffs(0.0, 3.0, 0.0, 1.0)), None);
        // concave parabola, no minimum
        assert_eq!(cubic_minimum(&coeffs(0.0, 1.0, -1.0, 0.0)), None);
        // inflection only
        assert_eq!(cubic_minimum(&coeffs(0.0, 0.0, 0.0, 1.0)), None);
    }

    #[test]
    fn minimum_has_positive_curvature() {
        for &(c1, c2, c3) in &[(-1.0, 2.0, -0.3), (4.0, -3.0, 0.5), (-2.0, -1.0, 1.0), (0.1, 0.5, -2.0)] {
            let fit = coeffs(0.0, c1, c2, c3);
            let w = cubic_minimum(&fit).unwrap();
            assert!(fit.slope(w).abs() < 1e-12);
            assert!(fit.curvature(w) > 0.0);
        }
    }
}
