use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Solves are rejected when the 1-norm condition estimate exceeds this.
pub const DEFAULT_CONDITION_BOUND: f64 = 1e12;

/// A pivot is treated as zero when it falls below this fraction of its row scale.
pub const PIVOT_RELATIVE_THRESHOLD: f64 = 1e-13;

/// A square system `matrix · x = rhs`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSystem {
    pub matrix: DMatrix<f64>,
    pub rhs: DVector<f64>,
}

impl LinearSystem {
    pub fn new(matrix: DMatrix<f64>, rhs: DVector<f64>) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::DimensionMismatch(format!(
                "matrix is {}x{}, expected square",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        if matrix.nrows() != rhs.len() {
            return Err(Error::DimensionMismatch(format!(
                "matrix has {} rows but rhs has {} entries",
                matrix.nrows(),
                rhs.len()
            )));
        }
        Ok(Self { matrix, rhs })
    }
}

/// LU factorisation with scaled partial pivoting, `P·A = L·U` stored in place.
#[derive(Debug, Clone)]
pub struct LuFactors {
    lu: DMatrix<f64>,
    perm: Vec<usize>,
    swaps: usize,
}

impl LuFactors {
    pub fn factor(a: &DMatrix<f64>) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::DimensionMismatch("LU of a non-square matrix".into()));
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("matrix has non-finite entries".into()));
        }
        let k = a.nrows();
        let mut lu = a.clone();
        let mut perm: Vec<usize> = (0..k).collect();
        let scale: Vec<f64> = (0..k)
            .map(|i| (0..k).fold(0.0_f64, |acc, j| acc.max(a[(i, j)].abs())))
            .collect();
        let mut swaps = 0;
        for col in 0..k {
            let mut best = col;
            let mut best_ratio = -1.0;
            for row in col..k {
                let s = scale[perm[row]];
                let ratio = if s > 0.0 { lu[(row, col)].abs() / s } else { 0.0 };
                if ratio > best_ratio {
                    best_ratio = ratio;
                    best = row;
                }
            }
            if best != col {
                lu.swap_rows(best, col);
                perm.swap(best, col);
                swaps += 1;
            }
            let pivot = lu[(col, col)];
            let threshold = PIVOT_RELATIVE_THRESHOLD * scale[perm[col]];
            if pivot == 0.0 || pivot.abs() < threshold {
                return Err(Error::SingularMatrix {
                    column: col,
                    pivot: pivot.abs(),
                    threshold,
                });
            }
            for row in (col + 1)..k {
                let factor = lu[(row, col)] / pivot;
                lu[(row, col)] = factor;
                for j in (col + 1)..k {
                    let u = lu[(col, j)];
                    lu[(row, j)] -= factor * u;
                }
            }
        }
        Ok(Self { lu, perm, swaps })
    }

    pub fn dim(&self) -> usize {
        self.lu.nrows()
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let k = self.dim();
        let mut x = DVector::from_fn(k, |i, _| b[self.perm[i]]);
        for i in 0..k {
            for j in 0..i {
                x[i] -= self.lu[(i, j)] * x[j];
            }
        }
        for i in (0..k).rev() {
            for j in (i + 1)..k {
                x[i] -= self.lu[(i, j)] * x[j];
            }
            x[i] /= self.lu[(i, i)];
        }
        x
    }

    pub fn determinant(&self) -> f64 {
        let sign = if self.swaps.is_multiple_of(2) { 1.0 } else { -1.0 };
        sign * self.lu.diagonal().iter().product::<f64>()
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        let k = self.dim();
        let mut inv = DMatrix::zeros(k, k);
        for j in 0..k {
            let col = self.solve(&DVector::from_fn(k, |i, _| if i == j { 1.0 } else { 0.0 }));
            inv.set_column(j, &col);
        }
        inv
    }
}

fn norm1(a: &DMatrix<f64>) -> f64 {
    a.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// 1-norm condition number `‖A‖₁·‖A⁻¹‖₁`; infinite when the matrix is singular.
pub fn condition_estimate(a: &DMatrix<f64>) -> f64 {
    match LuFactors::factor(a) {
        Ok(lu) => norm1(a) * norm1(&lu.inverse()),
        Err(_) => f64::INFINITY,
    }
}

/// Solves with the default condition bound.
pub fn linear_solve(sys: &LinearSystem) -> Result<DVector<f64>> {
    linear_solve_with_bound(sys, DEFAULT_CONDITION_BOUND)
}

pub fn linear_solve_with_bound(sys: &LinearSystem, cond_bound: f64) -> Result<DVector<f64>> {
    let lu = LuFactors::factor(&sys.matrix)?;
    let estimate = norm1(&sys.matrix) * norm1(&lu.inverse());
    if estimate > cond_bound {
        return Err(Error::IllConditioned {
            estimate,
            bound: cond_bound,
        });
    }
    let mut x = lu.solve(&sys.rhs);
    // one step of iterative refinement
    let r = &sys.rhs - &sys.matrix * &x;
    x += lu.solve(&r);
    Ok(x)
}
