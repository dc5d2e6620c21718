use nalgebra::{DMatrix, DVector};

use super::linalg::{linear_solve, LinearSystem};
use super::norm_inf;
use crate::error::{Error, Result};

pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITER: usize = 50;
const MAX_HALVINGS: usize = 20;

/// Root-finding problem `residual(x) = 0` with an explicit Jacobian.
pub struct NewtonProblem<F, J> {
    pub residual: F,
    pub jacobian: J,
    pub initial_guess: Vec<f64>,
    pub tol: f64,
    pub max_iter: usize,
}

impl<F, J> NewtonProblem<F, J>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
    J: Fn(&[f64]) -> Result<DMatrix<f64>>,
{
    pub fn new(residual: F, jacobian: J, initial_guess: Vec<f64>) -> Self {
        Self {
            residual,
            jacobian,
            initial_guess,
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
        }
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn with_max_iter(mut self, max_iter: usize) -> Self {
        self.max_iter = max_iter;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NewtonSolution {
    pub x: Vec<f64>,
    /// Number of Newton steps taken (0 when the initial guess already satisfies `tol`).
    pub iterations: usize,
    pub residual_norm: f64,
}

/// Damped Newton: a step is halved (up to 20 times) until the residual
/// max-norm strictly decreases.
pub fn newton_solve<F, J>(p: &NewtonProblem<F, J>) -> Result<NewtonSolution>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
    J: Fn(&[f64]) -> Result<DMatrix<f64>>,
{
    if !(p.tol > 0.0) || p.max_iter == 0 {
        return Err(Error::InvalidInput("Newton needs tol > 0 and max_iter >= 1".into()));
    }
    let mut x = p.initial_guess.clone();
    let mut r = (p.residual)(&x)?;
    if r.len() != x.len() {
        return Err(Error::DimensionMismatch(format!(
            "residual has {} components for {} unknowns",
            r.len(),
            x.len()
        )));
    }
    let mut rn = norm_inf(&r);
    if rn <= p.tol {
        return Ok(NewtonSolution {
            x,
            iterations: 0,
            residual_norm: rn,
        });
    }
    for iter in 1..=p.max_iter {
        let jac = (p.jacobian)(&x)?;
        let rhs = DVector::from_iterator(r.len(), r.iter().map(|v| -v));
        let step = linear_solve(&LinearSystem::new(jac, rhs)?)?;
        let mut lambda = 1.0;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let trial: Vec<f64> = x.iter().zip(step.iter()).map(|(a, s)| a + lambda * s).collect();
            if let Ok(rt) = (p.residual)(&trial) {
                let n = norm_inf(&rt);
                if n.is_finite() && n < rn {
                    accepted = Some((trial, rt, n));
                    break;
                }
            }
            lambda *= 0.5;
        }
        let Some((xt, rt, n)) = accepted else {
            return Err(Error::NoConvergence {
                iterations: iter,
                residual: rn,
            });
        };
        x = xt;
        r = rt;
        rn = n;
        if rn <= p.tol {
            return Ok(NewtonSolution {
                x,
                iterations: iter,
                residual_norm: rn,
            });
        }
    }
    Err(Error::NoConvergence {
        iterations: p.max_iter,
        residual: rn,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar<F: Fn(f64) -> f64, D: Fn(f64) -> f64>(f: F, d: D, x0: f64) -> Result<NewtonSolution> {
        let p = NewtonProblem::new(
            |x: &[f64]| Ok(vec![f(x[0])]),
            |x: &[f64]| Ok(DMatrix::from_element(1, 1, d(x[0]))),
            vec![x0],
        );
        newton_solve(&p)
    }

    fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(lo) * f(mid) <= 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn affine_residual_takes_one_step() {
        let v = 2.0;
        let s = scalar(|w| w + v * v, |_| 1.0, 0.0).unwrap();
        assert_eq!(s.iterations, 1);
        assert_eq!(s.x[0], -4.0);
    }

    #[test]
    fn cube_root_matches_bisection() {
        let oracle = bisect(|w| w * w * w - 8.0, 0.0, 3.0);
        let s = scalar(|w| w * w * w - 8.0, |w| 3.0 * w * w, 3.0).unwrap();
        assert!((s.x[0] - oracle).abs() < 1e-10);
    }

    #[test]
    fn no_real_root_fails() {
        let err = scalar(|w| w * w + 1.0, |w| 2.0 * w, 0.0).unwrap_err();
        assert!(
            matches!(err, Error::SingularMatrix { .. } | Error::NoConvergence { .. }),
            "{err:?}"
        );
    }

    #[test]
    fn no_real_root_from_nonzero_guess_fails() {
        let err = scalar(|w| w * w + 1.0, |w| 2.0 * w, 0.3).unwrap_err();
        assert!(
            matches!(err, Error::SingularMatrix { .. } | Error::NoConvergence { .. }),
            "{err:?}"
        );
    }

    #[test]
    fn converged_guess_takes_zero_steps() {
        let s = scalar(|w| w - 1.0, |_| 1.0, 1.0).unwrap();
        assert_eq!(s.iterations, 0);
    }

    #[test]
    fn damping_rescues_overshoot() {
        // atan has a basin of convergence |x0| < 1.39 for plain Newton
        let s = scalar(f64::atan, |w| 1.0 / (1.0 + w * w), 3.0).unwrap();
        assert!(s.x[0].abs() < 1e-10);
    }

    #[test]
    fn two_dimensional_affine_system() {
        let p = NewtonProblem::new(
            |x: &[f64]| Ok(vec![2.0 * x[0] + x[1] - 3.0, x[0] - x[1]]),
            |_: &[f64]| Ok(DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, -1.0])),
            vec![10.0, -7.0],
        );
        let s = newton_solve(&p).unwrap();
        assert_eq!(s.iterations, 1);
        assert!((s.x[0] - 1.0).abs() < 1e-12 && (s.x[1] - 1.0).abs() < 1e-12);
    }
}
