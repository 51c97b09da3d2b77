//! Piecewise-constant-in-time coefficient paths `A(t)` and their exact
//! running integrals `B(s,t) = ∫_s^t A(τ) dτ`.
//!
//! A path stores breakpoints `τ_0 < … < τ_m` and one symmetric matrix per
//! interval; it is extended constantly outside the breakpoint range and is
//! right-continuous at every breakpoint. Ellipticity `ν|ξ|² ≤ (Aξ,ξ) ≤ ν⁻¹|ξ|²`
//! is validated once, at construction, on the eigenvalues of every stored
//! matrix.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PathError {
    #[error("matrix on interval {interval} is not symmetric (|A[{i}][{j}] - A[{j}][{i}]| = {diff:e})")]
    NonSymmetric {
        interval: usize,
        i: usize,
        j: usize,
        diff: f64,
    },
    #[error("ellipticity violated on interval {interval}: eigenvalue {eigenvalue} outside [{lo}, {hi}]")]
    EllipticityViolated {
        interval: usize,
        eigenvalue: f64,
        lo: f64,
        hi: f64,
    },
    #[error("breakpoints must be strictly increasing")]
    NonMonotoneBreakpoints,
    #[error("expected {expected} matrices for {breakpoints} breakpoints, got {got}")]
    CountMismatch {
        breakpoints: usize,
        expected: usize,
        got: usize,
    },
    #[error("ellipticity constant nu must lie in (0, 1], got {0}")]
    InvalidNu(f64),
    #[error("matrix on interval {interval} has {got} entries, expected {expected} (dim {dim})")]
    BadMatrixShape {
        interval: usize,
        dim: usize,
        expected: usize,
        got: usize,
    },
    #[error("empty time span: t = {t} <= s = {s}")]
    EmptySpan { s: f64, t: f64 },
}

/// Validated coefficient path: symmetric matrices with spectrum in `[ν, ν⁻¹]`
/// on strictly increasing intervals. Immutable after construction, so shared
/// read access from any number of workers is safe.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientPath {
    breakpoints: Vec<f64>,
    matrices: Vec<DMatrix<f64>>,
    nu: f64,
    dim: usize,
}

/// JSON description of a path: matrices are row-major flat arrays.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PathSpec {
    pub dim: usize,
    pub nu: f64,
    pub breakpoints: Vec<f64>,
    pub matrices: Vec<Vec<f64>>,
}

impl CoefficientPath {
    /// Build and validate a path. `matrices[k]` acts on `[breakpoints[k], breakpoints[k+1])`.
    pub fn new(
        breakpoints: Vec<f64>,
        matrices: Vec<DMatrix<f64>>,
        nu: f64,
        dim: usize,
    ) -> Result<Self, PathError> {
        if breakpoints.len() < 2 || matrices.len() + 1 != breakpoints.len() {
            return Err(PathError::CountMismatch {
                breakpoints: breakpoints.len(),
                expected: breakpoints.len().saturating_sub(1),
                got: matrices.len(),
            });
        }
        if !(nu > 0.0 && nu <= 1.0) {
            return Err(PathError::InvalidNu(nu));
        }
        if !breakpoints.windows(2).all(|w| w[0] < w[1]) {
            return Err(PathError::NonMonotoneBreakpoints);
        }
        // Eigenvalue checks get a tiny relative slack so that matrices sitting
        // exactly on the spectral boundary (e.g. diag(nu, 1/nu)) validate.
        let hi = 1.0 / nu;
        let slack = 1e-12 * hi.max(1.0);
        for (k, m) in matrices.iter().enumerate() {
            if m.nrows() != dim || m.ncols() != dim {
                return Err(PathError::BadMatrixShape {
                    interval: k,
                    dim,
                    expected: dim * dim,
                    got: m.nrows() * m.ncols(),
                });
            }
            for i in 0..dim {
                for j in (i + 1)..dim {
                    let diff = (m[(i, j)] - m[(j, i)]).abs();
                    if diff != 0.0 {
                        return Err(PathError::NonSymmetric {
                            interval: k,
                            i,
                            j,
                            diff,
                        });
                    }
                }
            }
            let eigs = m.clone().symmetric_eigen().eigenvalues;
            for &lambda in eigs.iter() {
                if lambda < nu - slack || lambda > hi + slack {
                    return Err(PathError::EllipticityViolated {
                        interval: k,
                        eigenvalue: lambda,
                        lo: nu,
                        hi,
                    });
                }
            }
        }
        Ok(Self {
            breakpoints,
            matrices,
            nu,
            dim,
        })
    }

    /// Constant-in-time path on a unit interval.
    pub fn constant(matrix: DMatrix<f64>, nu: f64) -> Result<Self, PathError> {
        let dim = matrix.nrows();
        Self::new(vec![0.0, 1.0], vec![matrix], nu, dim)
    }

    pub fn from_spec(spec: &PathSpec) -> Result<Self, PathError> {
        let mut mats = Vec::with_capacity(spec.matrices.len());
        for (k, flat) in spec.matrices.iter().enumerate() {
            if flat.len() != spec.dim * spec.dim {
                return Err(PathError::BadMatrixShape {
                    interval: k,
                    dim: spec.dim,
                    expected: spec.dim * spec.dim,
                    got: flat.len(),
                });
            }
            mats.push(DMatrix::from_row_slice(spec.dim, spec.dim, flat));
        }
        Self::new(spec.breakpoints.clone(), mats, spec.nu, spec.dim)
    }

    pub fn to_spec(&self) -> PathSpec {
        PathSpec {
            dim: self.dim,
            nu: self.nu,
            breakpoints: self.breakpoints.clone(),
            matrices: self
                .matrices
                .iter()
                .map(|m| {
                    let mut flat = Vec::with_capacity(self.dim * self.dim);
                    for i in 0..self.dim {
                        for j in 0..self.dim {
                            flat.push(m[(i, j)]);
                        }
                    }
                    flat
                })
                .collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    /// The matrix acting at time `t`: right-continuous at breakpoints,
    /// constant extension outside the breakpoint range.
    pub fn evaluate(&self, t: f64) -> &DMatrix<f64> {
        let m = self.matrices.len();
        if t < self.breakpoints[0] {
            return &self.matrices[0];
        }
        if t >= self.breakpoints[m] {
            return &self.matrices[m - 1];
        }
        // partition_point returns the first index with bp > t; the interval
        // starting at the previous breakpoint owns t (right-continuity).
        let idx = self.breakpoints.partition_point(|&bp| bp <= t);
        &self.matrices[idx - 1]
    }

    /// Exact `∫_s^t A(τ) dτ` as a piecewise sum of interval overlaps.
    pub fn integrate(&self, s: f64, t: f64) -> Result<AccumulatedMatrix, PathError> {
        if !(t > s) {
            return Err(PathError::EmptySpan { s, t });
        }
        let mut b = DMatrix::<f64>::zeros(self.dim, self.dim);
        let first = self.breakpoints[0];
        let last = *self.breakpoints.last().unwrap();
        // Constant extension below the first breakpoint.
        let pre = (t.min(first) - s).max(0.0);
        if pre > 0.0 {
            b += &self.matrices[0] * pre;
        }
        for (k, w) in self.breakpoints.windows(2).enumerate() {
            let overlap = (t.min(w[1]) - s.max(w[0])).max(0.0);
            if overlap > 0.0 {
                b += &self.matrices[k] * overlap;
            }
        }
        // Constant extension above the last breakpoint.
        let post = (t - s.max(last)).max(0.0);
        if post > 0.0 {
            b += self.matrices.last().unwrap() * post;
        }
        Ok(AccumulatedMatrix::new(b, s, t))
    }

    /// True iff every stored matrix has zero cross terms with the last
    /// coordinate, i.e. `A_{in}(t) = 0` for all `i < n` and all `t`. In this
    /// class the operator is invariant under `x_n ↦ −x_n` and the method of
    /// images is exact.
    pub fn is_reflection_symmetric(&self) -> bool {
        let n = self.dim;
        if n == 1 {
            return true;
        }
        self.matrices
            .iter()
            .all(|m| (0..n - 1).all(|i| m[(i, n - 1)] == 0.0))
    }

    /// Is `t` within a small relative window of a stored breakpoint?
    pub fn is_breakpoint(&self, t: f64) -> bool {
        let scale = self
            .breakpoints
            .iter()
            .fold(1.0_f64, |acc, &b| acc.max(b.abs()));
        self.breakpoints
            .iter()
            .any(|&b| (t - b).abs() <= 1e-14 * scale)
    }

    /// The path of the leading `(n−1)×(n−1)` block, acting tangentially.
    pub fn tangential_block(&self) -> Result<Self, PathError> {
        assert!(self.dim >= 2, "tangential block needs dim >= 2");
        let nd = self.dim - 1;
        let mats = self
            .matrices
            .iter()
            .map(|m| m.view((0, 0), (nd, nd)).into_owned())
            .collect();
        Self::new(self.breakpoints.clone(), mats, self.nu, nd)
    }
}

/// `B = ∫_s^t A(τ) dτ` with its Cholesky-derived inverse and determinant.
/// Symmetric positive definite whenever `t > s`, with spectrum in
/// `[ν(t−s), ν⁻¹(t−s)]`.
#[derive(Debug, Clone)]
pub struct AccumulatedMatrix {
    b: DMatrix<f64>,
    inv: DMatrix<f64>,
    det: f64,
    span: (f64, f64),
}

impl AccumulatedMatrix {
    fn new(b: DMatrix<f64>, s: f64, t: f64) -> Self {
        let chol = b
            .clone()
            .cholesky()
            .expect("accumulated matrix must be positive definite for t > s");
        let det = chol.determinant();
        let inv = chol.inverse();
        Self {
            b,
            inv,
            det,
            span: (s, t),
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn inverse(&self) -> &DMatrix<f64> {
        &self.inv
    }

    pub fn determinant(&self) -> f64 {
        self.det
    }

    pub fn span(&self) -> (f64, f64) {
        self.span
    }

    pub fn elapsed(&self) -> f64 {
        self.span.1 - self.span.0
    }

    /// Quadratic form `(B^{-1} z, z)`.
    pub fn inv_quad_form(&self, z: &DVector<f64>) -> f64 {
        (&self.inv * z).dot(z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn ident(n: usize) -> DMatrix<f64> {
        DMatrix::identity(n, n)
    }

    /// Closed-form eigenvalues of a symmetric 2x2 matrix, used as the
    /// independent oracle for the ellipticity check.
    fn eig2(a: f64, b: f64, c: f64) -> (f64, f64) {
        let m = 0.5 * (a + c);
        let r = (0.25 * (a - c) * (a - c) + b * b).sqrt();
        (m - r, m + r)
    }

    #[test]
    fn identity_path_is_valid() {
        let p = CoefficientPath::new(vec![0.0, 1.0], vec![ident(2)], 1.0, 2).unwrap();
        assert_eq!(p.dim(), 2);
        assert!(p.is_reflection_symmetric());
    }

    #[test]
    fn ellipticity_boundary_is_inclusive() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.5]);
        assert!(CoefficientPath::new(vec![0.0, 1.0], vec![m.clone()], 0.5, 2).is_ok());
        let err = CoefficientPath::new(vec![0.0, 1.0], vec![m], 0.6, 2).unwrap_err();
        match err {
            PathError::EllipticityViolated { eigenvalue, .. } => {
                assert!(eigenvalue == 2.0 || eigenvalue == 0.5)
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn near_singular_matrix_accepted_at_matching_nu() {
        // Oracle: eigenvalues of [[1, 0.99], [0.99, 1]] are 1 ± 0.99.
        let (lo, hi) = eig2(1.0, 0.99, 1.0);
        assert_relative_eq!(lo, 0.01, max_relative = 1e-12);
        assert_relative_eq!(hi, 1.99, max_relative = 1e-12);
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.99, 0.99, 1.0]);
        assert!(CoefficientPath::new(vec![0.0, 1.0], vec![m], 0.01, 2).is_ok());
    }

    #[test]
    fn rejects_non_symmetric_and_non_monotone() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        assert!(matches!(
            CoefficientPath::new(vec![0.0, 1.0], vec![m], 1.0, 2),
            Err(PathError::NonSymmetric { interval: 0, .. })
        ));
        assert!(matches!(
            CoefficientPath::new(vec![0.0, 0.0], vec![ident(2)], 1.0, 2),
            Err(PathError::NonMonotoneBreakpoints)
        ));
    }

    fn two_interval_path() -> CoefficientPath {
        CoefficientPath::new(
            vec![0.0, 1.0, 2.0],
            vec![ident(2) * 2.0, ident(2) * 0.5],
            0.5,
            2,
        )
        .unwrap()
    }

    #[test]
    fn evaluate_conventions() {
        let p = two_interval_path();
        assert_eq!(p.evaluate(0.5)[(0, 0)], 2.0);
        // Right-continuity at the interior breakpoint.
        assert_eq!(p.evaluate(1.0)[(0, 0)], 0.5);
        // Constant extension on both sides.
        assert_eq!(p.evaluate(-3.0)[(0, 0)], 2.0);
        assert_eq!(p.evaluate(5.0)[(0, 0)], 0.5);
    }

    #[test]
    fn integrate_exact_piecewise_sum() {
        let p = CoefficientPath::new(
            vec![0.0, 0.5, 1.0],
            vec![ident(1) * 2.0, ident(1) * 0.5],
            0.5,
            1,
        )
        .unwrap();
        let b = p.integrate(0.0, 1.0).unwrap();
        // 0.5 * 2 + 0.5 * 0.5 = 1.25, no quadrature error
        assert_eq!(b.matrix()[(0, 0)], 1.25);
        assert!(matches!(
            p.integrate(1.0, 1.0),
            Err(PathError::EmptySpan { .. })
        ));
    }

    #[test]
    fn integrate_additivity() {
        let p = two_interval_path();
        let whole = p.integrate(0.0, 2.0).unwrap();
        let a = p.integrate(0.0, 1.0).unwrap();
        let b = p.integrate(1.0, 2.0).unwrap();
        let sum = a.matrix() + b.matrix();
        for i in 0..2 {
            for j in 0..2 {
                assert_relative_eq!(whole.matrix()[(i, j)], sum[(i, j)], max_relative = 1e-14);
            }
        }
    }

    #[test]
    fn spectral_sandwich_on_random_spans() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let p = CoefficientPath::new(
            vec![0.0, 0.3, 1.1, 2.0],
            vec![
                DMatrix::from_row_slice(2, 2, &[1.5, 0.2, 0.2, 0.8]),
                ident(2) * 0.6,
                DMatrix::from_row_slice(2, 2, &[1.0, -0.3, -0.3, 1.0]),
            ],
            0.5,
            2,
        )
        .unwrap();
        for _ in 0..100 {
            let s: f64 = rng.random_range(-1.0..2.5);
            let dt: f64 = rng.random_range(1e-6..3.0);
            let b = p.integrate(s, s + dt).unwrap();
            let eigs = b.matrix().clone().symmetric_eigen().eigenvalues;
            let (lo, hi) = (
                eigs.iter().cloned().fold(f64::INFINITY, f64::min),
                eigs.iter().cloned().fold(0.0, f64::max),
            );
            assert!(lo / dt >= p.nu() - 1e-12, "lo {} dt {}", lo, dt);
            assert!(hi / dt <= 1.0 / p.nu() + 1e-12, "hi {} dt {}", hi, dt);
        }
    }

    #[test]
    fn integral_derivative_matches_evaluate() {
        // d/dt integrate(s, t) = evaluate(t) away from breakpoints.
        let p = two_interval_path();
        for &t in &[0.4, 0.7, 1.3, 1.9] {
            let h = 1e-6;
            let hi = p.integrate(0.0, t + h).unwrap();
            let lo = p.integrate(0.0, t - h).unwrap();
            let fd = (hi.matrix() - lo.matrix()) / (2.0 * h);
            let a = p.evaluate(t);
            for i in 0..2 {
                for j in 0..2 {
                    assert!((fd[(i, j)] - a[(i, j)]).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn reflection_symmetry_detection() {
        let diag = CoefficientPath::new(
            vec![0.0, 1.0],
            vec![DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.5])],
            0.5,
            2,
        )
        .unwrap();
        assert!(diag.is_reflection_symmetric());

        let cross = CoefficientPath::new(
            vec![0.0, 1.0],
            vec![DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.1, 1.0])],
            0.5,
            2,
        )
        .unwrap();
        assert!(!cross.is_reflection_symmetric());

        // Full tangential block is fine as long as cross terms with x_n vanish.
        let block = CoefficientPath::new(
            vec![0.0, 1.0],
            vec![DMatrix::from_row_slice(
                3,
                3,
                &[1.0, 0.3, 0.0, 0.3, 1.0, 0.0, 0.0, 0.0, 0.9],
            )],
            0.5,
            3,
        )
        .unwrap();
        assert!(block.is_reflection_symmetric());
    }

    #[test]
    fn json_loader_reports_first_violation() {
        let txt = r#"{ "dim": 2, "nu": 0.5, "breakpoints": [0.0, 1.0],
                       "matrices": [[1.0, 0.2, 0.3, 1.0]] }"#;
        let spec: PathSpec = serde_json::from_str(txt).unwrap();
        assert!(matches!(
            CoefficientPath::from_spec(&spec),
            Err(PathError::NonSymmetric { .. })
        ));

        let good = r#"{ "dim": 2, "nu": 0.5, "breakpoints": [0.0, 0.5, 1.0],
                        "matrices": [[2.0, 0.0, 0.0, 0.5], [1.0, 0.0, 0.0, 1.0]] }"#;
        let spec: PathSpec = serde_json::from_str(good).unwrap();
        let path = CoefficientPath::from_spec(&spec).unwrap();
        assert_eq!(path.to_spec().matrices.len(), 2);
    }
}
