//! Small dense helpers shared by the fitting and decoding code.

use nalgebra::{DMatrix, DVector};

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Largest absolute asymmetry relative to the largest absolute entry.
pub fn relative_asymmetry(m: &DMatrix<f64>) -> f64 {
    let scale = m.amax();
    if scale == 0.0 {
        return 0.0;
    }
    let n = m.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst / scale
}

/// Inverse of a symmetric positive definite matrix through its Cholesky factor.
pub fn spd_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if m.nrows() == 0 {
        return Some(DMatrix::zeros(0, 0));
    }
    let chol = m.clone().cholesky()?;
    Some(symmetrize(&chol.inverse()))
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    symmetrize(m)
        .symmetric_eigenvalues()
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Relative Frobenius distance `|a - b| / |b|`.
pub fn rel_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let denom = b.norm();
    if denom == 0.0 {
        return a.norm();
    }
    (a - b).norm() / denom
}

/// Accumulates the normal equations of an intercept-plus-slopes regression.
#[derive(Debug, Clone)]
pub struct NormalEquations {
    xtx: DMatrix<f64>,
    xty: DVector<f64>,
    yy: f64,
    ysum: f64,
    n: usize,
}

/// Solution of a least-squares fit with an intercept column.
#[derive(Debug, Clone)]
pub struct LinearFit {
    pub intercept: f64,
    pub coeff: Vec<f64>,
    /// Mean squared residual (divisor n).
    pub mse: f64,
    pub r_squared: f64,
    pub n: usize,
    /// `(X'X)^{-1}` including the intercept row/column, for standard errors.
    pub xtx_inv: DMatrix<f64>,
}

impl NormalEquations {
    pub fn new(p: usize) -> Self {
        NormalEquations {
            xtx: DMatrix::zeros(p + 1, p + 1),
            xty: DVector::zeros(p + 1),
            yy: 0.0,
            ysum: 0.0,
            n: 0,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn push(&mut self, x: &[f64], y: f64) {
        let d = x.len() + 1;
        debug_assert_eq!(d, self.xtx.nrows());
        self.xtx[(0, 0)] += 1.0;
        self.xty[0] += y;
        for i in 1..d {
            let xi = x[i - 1];
            self.xtx[(i, 0)] += xi;
            self.xty[i] += xi * y;
            for j in 1..=i {
                self.xtx[(i, j)] += xi * x[j - 1];
            }
        }
        self.yy += y * y;
        self.ysum += y;
        self.n += 1;
    }

    /// Solves the system; `None` when the design is rank deficient.
    pub fn solve(&self) -> Option<LinearFit> {
        let d = self.xtx.nrows();
        if self.n < d {
            return None;
        }
        let mut xtx = self.xtx.clone();
        for i in 0..d {
            for j in (i + 1)..d {
                xtx[(i, j)] = xtx[(j, i)];
            }
        }
        // Scale to unit diagonal before factoring so the rank test is unit free.
        let scale: Vec<f64> = (0..d).map(|i| xtx[(i, i)].sqrt()).collect();
        if scale.iter().any(|s| !(*s > 0.0)) {
            return None;
        }
        let mut scaled = xtx.clone();
        for i in 0..d {
            for j in 0..d {
                scaled[(i, j)] /= scale[i] * scale[j];
            }
        }
        let eig_min = min_eigenvalue(&scaled);
        if !(eig_min > 1e-12) {
            return None;
        }
        let chol = scaled.cholesky()?;
        let mut inv = chol.inverse();
        for i in 0..d {
            for j in 0..d {
                inv[(i, j)] /= scale[i] * scale[j];
            }
        }
        let beta = &inv * &self.xty;
        let n = self.n as f64;
        // Residual sum of squares from the normal equations.
        let rss = (self.yy - beta.dot(&self.xty)).max(0.0);
        let tss = (self.yy - self.ysum * self.ysum / n).max(0.0);
        let r_squared = if tss > 0.0 { 1.0 - rss / tss } else { 0.0 };
        Some(LinearFit {
            intercept: beta[0],
            coeff: beta.iter().skip(1).cloned().collect(),
            mse: rss / n,
            r_squared,
            n: self.n,
            xtx_inv: symmetrize(&inv),
        })
    }
}

impl LinearFit {
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.intercept + self.coeff.iter().zip(x).map(|(c, v)| c * v).sum::<f64>()
    }

    /// Standard errors of the slope coefficients (unbiased residual variance).
    pub fn slope_standard_errors(&self) -> Vec<f64> {
        let dof = (self.n as f64 - self.xtx_inv.nrows() as f64).max(1.0);
        let sigma2 = self.mse * self.n as f64 / dof;
        (1..self.xtx_inv.nrows())
            .map(|i| (sigma2 * self.xtx_inv[(i, i)]).sqrt())
            .collect()
    }
}
