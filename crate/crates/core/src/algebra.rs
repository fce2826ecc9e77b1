//! Linear and nonlinear solves for implicit time steps and their adjoints.
//!
//! The central object is the shifted Jacobian `a*M - J`. Implicit theta steps
//! solve with it, adjoint steps solve with its transpose, and both directions
//! must come from the same factorization so that discrete duality holds to
//! rounding.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Dense systems up to this size are factorized with LU; anything larger
/// (or anything assembled from triplets) goes through GMRES.
pub const DENSE_LU_MAX: usize = 2048;

#[derive(Debug, Error)]
pub enum AlgebraError {
    #[error("singular matrix: negligible pivot at row {row}")]
    SingularMatrix { row: usize },
    #[error("linear solve stalled: residual {residual:.3e} after {iterations} iterations")]
    LinearNoConvergence { residual: f64, iterations: usize },
    #[error("newton did not converge after {iterations} iterations (residual {residual:.3e})")]
    NewtonNoConvergence {
        iterations: usize,
        residual: f64,
        last_iterate: DVector<f64>,
    },
    #[error("newton line search failed at iteration {iteration} (residual {residual:.3e})")]
    LineSearchFailed {
        iteration: usize,
        residual: f64,
        last_iterate: DVector<f64>,
    },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Mass matrix of the DAE. May be singular for true DAEs.
#[derive(Debug, Clone)]
pub enum MassMatrix {
    Identity,
    Dense(DMatrix<f64>),
    Sparse(Csr),
}

impl MassMatrix {
    pub fn is_identity(&self) -> bool {
        matches!(self, MassMatrix::Identity)
    }

    pub fn matvec(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            MassMatrix::Identity => x.clone(),
            MassMatrix::Dense(m) => m * x,
            MassMatrix::Sparse(m) => m.matvec(x),
        }
    }

    pub fn matvec_transpose(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            MassMatrix::Identity => x.clone(),
            MassMatrix::Dense(m) => m.transpose() * x,
            MassMatrix::Sparse(m) => m.matvec_transpose(x),
        }
    }
}

/// Jacobian as returned by user callbacks: dense, or sparse triplets.
/// The solver layer normalizes; the theta adjoint needs transposes of the
/// same matrices, which both forms support directly.
#[derive(Debug, Clone)]
pub enum MatrixData {
    Dense(DMatrix<f64>),
    Sparse(SparseTriplets),
}

impl MatrixData {
    pub fn nrows(&self) -> usize {
        match self {
            MatrixData::Dense(m) => m.nrows(),
            MatrixData::Sparse(t) => t.nrows,
        }
    }

    pub fn ncols(&self) -> usize {
        match self {
            MatrixData::Dense(m) => m.ncols(),
            MatrixData::Sparse(t) => t.ncols,
        }
    }

    pub fn is_sparse(&self) -> bool {
        matches!(self, MatrixData::Sparse(_))
    }

    pub fn matvec(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            MatrixData::Dense(m) => m * x,
            MatrixData::Sparse(t) => t.to_csr().matvec(x),
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            MatrixData::Dense(m) => m.clone(),
            MatrixData::Sparse(t) => {
                let mut m = DMatrix::zeros(t.nrows, t.ncols);
                for &(i, j, v) in &t.entries {
                    m[(i, j)] += v;
                }
                m
            }
        }
    }
}

/// Triplet-form sparse matrix; duplicates are summed on assembly.
#[derive(Debug, Clone, Default)]
pub struct SparseTriplets {
    pub nrows: usize,
    pub ncols: usize,
    pub entries: Vec<(usize, usize, f64)>,
}

impl SparseTriplets {
    pub fn new(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, row: usize, col: usize, value: f64) {
        debug_assert!(row < self.nrows && col < self.ncols);
        self.entries.push((row, col, value));
    }

    pub fn to_csr(&self) -> Csr {
        Csr::from_triplets(self.nrows, self.ncols, &self.entries)
    }
}

/// Compressed sparse row matrix with forward and transpose products.
#[derive(Debug, Clone)]
pub struct Csr {
    pub nrows: usize,
    pub ncols: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl Csr {
    pub fn from_triplets(nrows: usize, ncols: usize, entries: &[(usize, usize, f64)]) -> Self {
        let mut counts = vec![0usize; nrows + 1];
        for &(i, _, _) in entries {
            counts[i + 1] += 1;
        }
        for i in 0..nrows {
            counts[i + 1] += counts[i];
        }
        let mut col_idx = vec![0usize; entries.len()];
        let mut values = vec![0.0; entries.len()];
        let mut cursor = counts.clone();
        for &(i, j, v) in entries {
            let k = cursor[i];
            col_idx[k] = j;
            values[k] = v;
            cursor[i] += 1;
        }
        // sort each row by column and merge duplicates
        let mut row_ptr = vec![0usize; nrows + 1];
        let mut out_cols = Vec::with_capacity(entries.len());
        let mut out_vals = Vec::with_capacity(entries.len());
        for i in 0..nrows {
            let lo = counts[i];
            let hi = counts[i + 1];
            let mut row: Vec<(usize, f64)> = (lo..hi).map(|k| (col_idx[k], values[k])).collect();
            row.sort_unstable_by_key(|e| e.0);
            for (j, v) in row {
                if let Some(last) = out_cols.last() {
                    if *last == j && out_cols.len() > row_ptr[i] {
                        let n = out_vals.len();
                        out_vals[n - 1] += v;
                        continue;
                    }
                }
                out_cols.push(j);
                out_vals.push(v);
            }
            row_ptr[i + 1] = out_cols.len();
        }
        Csr {
            nrows,
            ncols,
            row_ptr,
            col_idx: out_cols,
            values: out_vals,
        }
    }

    pub fn identity(n: usize) -> Self {
        Csr {
            nrows: n,
            ncols: n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn matvec(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut y = DVector::zeros(self.nrows);
        for i in 0..self.nrows {
            let mut acc = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += self.values[k] * x[self.col_idx[k]];
            }
            y[i] = acc;
        }
        y
    }

    pub fn matvec_transpose(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut y = DVector::zeros(self.ncols);
        for i in 0..self.nrows {
            let xi = x[i];
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                y[self.col_idx[k]] += self.values[k] * xi;
            }
        }
        y
    }
}

/// LU factorization with partial pivoting, solving both `A x = b` and
/// `A^T x = b` from the one factorization.
#[derive(Debug, Clone)]
pub struct DenseLu {
    lu: DMatrix<f64>,
    pivots: Vec<usize>,
}

impl DenseLu {
    pub fn factorize(mut a: DMatrix<f64>) -> Result<Self, AlgebraError> {
        let n = a.nrows();
        assert_eq!(n, a.ncols(), "LU requires a square matrix");
        let mut pivots = vec![0usize; n];
        for k in 0..n {
            let mut p = k;
            let mut best = a[(k, k)].abs();
            for i in (k + 1)..n {
                let v = a[(i, k)].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if best < f64::MIN_POSITIVE {
                return Err(AlgebraError::SingularMatrix { row: k });
            }
            pivots[k] = p;
            if p != k {
                a.swap_rows(k, p);
            }
            let akk = a[(k, k)];
            for i in (k + 1)..n {
                let lik = a[(i, k)] / akk;
                a[(i, k)] = lik;
                if lik != 0.0 {
                    for j in (k + 1)..n {
                        a[(i, j)] -= lik * a[(k, j)];
                    }
                }
            }
        }
        Ok(DenseLu { lu: a, pivots })
    }

    /// Solve `A x = b`.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let n = self.lu.nrows();
        let mut x = b.clone();
        for k in 0..n {
            x.swap_rows(k, self.pivots[k]);
        }
        // L y = P b, unit lower triangular
        for i in 1..n {
            let mut acc = x[i];
            for j in 0..i {
                acc -= self.lu[(i, j)] * x[j];
            }
            x[i] = acc;
        }
        // U x = y
        for i in (0..n).rev() {
            let mut acc = x[i];
            for j in (i + 1)..n {
                acc -= self.lu[(i, j)] * x[j];
            }
            x[i] = acc / self.lu[(i, i)];
        }
        x
    }

    /// Solve `A^T x = b` with the same factors: `A^T = U^T L^T P`.
    pub fn solve_transpose(&self, b: &DVector<f64>) -> DVector<f64> {
        let n = self.lu.nrows();
        let mut x = b.clone();
        // U^T w = b, lower triangular with diagonal of U
        for i in 0..n {
            let mut acc = x[i];
            for j in 0..i {
                acc -= self.lu[(j, i)] * x[j];
            }
            x[i] = acc / self.lu[(i, i)];
        }
        // L^T v = w, unit upper triangular
        for i in (0..n).rev() {
            let mut acc = x[i];
            for j in (i + 1)..n {
                acc -= self.lu[(j, i)] * x[j];
            }
            x[i] = acc;
        }
        // x = P^T v: undo the row swaps in reverse order
        for k in (0..n).rev() {
            x.swap_rows(k, self.pivots[k]);
        }
        x
    }
}

/// Options for the iterative (GMRES) and direct linear paths.
#[derive(Debug, Clone)]
pub struct LinearOpts {
    pub rtol: f64,
    pub atol: f64,
    pub restart: usize,
    pub max_iters: usize,
    pub dense_lu_max: usize,
}

impl Default for LinearOpts {
    fn default() -> Self {
        Self {
            rtol: 1e-12,
            atol: 1e-14,
            restart: 60,
            max_iters: 2000,
            dense_lu_max: DENSE_LU_MAX,
        }
    }
}

/// Restarted GMRES on a matrix-free operator. Returns the iterate once
/// `||r|| <= max(rtol*||b||, atol)`.
pub fn gmres<F>(
    apply: F,
    b: &DVector<f64>,
    opts: &LinearOpts,
) -> Result<(DVector<f64>, usize), AlgebraError>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let n = b.len();
    let bnorm = b.norm();
    let target = (opts.rtol * bnorm).max(opts.atol);
    let mut x = DVector::zeros(n);
    if bnorm <= opts.atol {
        return Ok((x, 0));
    }
    let m = opts.restart.min(n).max(1);
    let mut total_iters = 0usize;
    let mut residual = bnorm;

    while total_iters < opts.max_iters {
        let r = b - apply(&x);
        residual = r.norm();
        if residual <= target {
            return Ok((x, total_iters));
        }
        let mut v: Vec<DVector<f64>> = Vec::with_capacity(m + 1);
        v.push(&r / residual);
        let mut h = DMatrix::<f64>::zeros(m + 1, m);
        let mut cs = vec![0.0f64; m];
        let mut sn = vec![0.0f64; m];
        let mut g = DVector::<f64>::zeros(m + 1);
        g[0] = residual;
        let mut k_used = 0usize;

        for k in 0..m {
            total_iters += 1;
            let mut w = apply(&v[k]);
            for i in 0..=k {
                let hik = w.dot(&v[i]);
                h[(i, k)] = hik;
                w.axpy(-hik, &v[i], 1.0);
            }
            let hkk = w.norm();
            h[(k + 1, k)] = hkk;
            // apply stored Givens rotations to the new column
            for i in 0..k {
                let t = cs[i] * h[(i, k)] + sn[i] * h[(i + 1, k)];
                h[(i + 1, k)] = -sn[i] * h[(i, k)] + cs[i] * h[(i + 1, k)];
                h[(i, k)] = t;
            }
            let denom = (h[(k, k)] * h[(k, k)] + hkk * hkk).sqrt();
            if denom < f64::MIN_POSITIVE {
                k_used = k;
                break;
            }
            cs[k] = h[(k, k)] / denom;
            sn[k] = hkk / denom;
            h[(k, k)] = denom;
            g[k + 1] = -sn[k] * g[k];
            g[k] *= cs[k];
            k_used = k + 1;
            residual = g[k + 1].abs();
            if residual <= target || hkk < f64::MIN_POSITIVE {
                break;
            }
            v.push(&w / hkk);
            if total_iters >= opts.max_iters {
                break;
            }
        }

        // back substitution for the Krylov coefficients
        if k_used > 0 {
            let mut y = vec![0.0f64; k_used];
            for i in (0..k_used).rev() {
                let mut acc = g[i];
                for j in (i + 1)..k_used {
                    acc -= h[(i, j)] * y[j];
                }
                y[i] = acc / h[(i, i)];
            }
            for i in 0..k_used {
                x.axpy(y[i], &v[i], 1.0);
            }
        }
        if residual <= target {
            return Ok((x, total_iters));
        }
    }
    Err(AlgebraError::LinearNoConvergence {
        residual,
        iterations: total_iters,
    })
}

/// The shifted Jacobian `shift*M - J`. Implicit theta steps and their
/// adjoints solve with this operator (forward and transposed).
pub struct ShiftedJacobian<'a> {
    pub shift: f64,
    pub mass: &'a MassMatrix,
    pub jac: &'a MatrixData,
}

impl<'a> ShiftedJacobian<'a> {
    pub fn new(shift: f64, mass: &'a MassMatrix, jac: &'a MatrixData) -> Self {
        Self { shift, mass, jac }
    }

    fn dim(&self) -> usize {
        self.jac.nrows()
    }

    fn assemble_dense(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut a = self.jac.to_dense();
        a.neg_mut();
        match self.mass {
            MassMatrix::Identity => {
                for i in 0..n {
                    a[(i, i)] += self.shift;
                }
            }
            MassMatrix::Dense(m) => a += m * self.shift,
            MassMatrix::Sparse(m) => {
                for i in 0..m.nrows {
                    for k in m.row_ptr[i]..m.row_ptr[i + 1] {
                        a[(i, m.col_idx[k])] += self.shift * m.values[k];
                    }
                }
            }
        }
        a
    }

    fn assemble_csr(&self) -> Csr {
        let n = self.dim();
        let mut trips = Vec::new();
        match self.jac {
            MatrixData::Sparse(t) => {
                trips.reserve(t.entries.len() + n);
                for &(i, j, v) in &t.entries {
                    trips.push((i, j, -v));
                }
            }
            MatrixData::Dense(m) => {
                for i in 0..n {
                    for j in 0..n {
                        let v = m[(i, j)];
                        if v != 0.0 {
                            trips.push((i, j, -v));
                        }
                    }
                }
            }
        }
        match self.mass {
            MassMatrix::Identity => {
                for i in 0..n {
                    trips.push((i, i, self.shift));
                }
            }
            MassMatrix::Dense(m) => {
                for i in 0..n {
                    for j in 0..n {
                        let v = m[(i, j)];
                        if v != 0.0 {
                            trips.push((i, j, self.shift * v));
                        }
                    }
                }
            }
            MassMatrix::Sparse(m) => {
                for i in 0..m.nrows {
                    for k in m.row_ptr[i]..m.row_ptr[i + 1] {
                        trips.push((i, m.col_idx[k], self.shift * m.values[k]));
                    }
                }
            }
        }
        Csr::from_triplets(n, n, &trips)
    }

    /// Build a solver for this operator. Dense Jacobians at moderate size get
    /// an LU factorization; sparse ones get GMRES on the assembled CSR.
    pub fn factorize(&self, opts: &LinearOpts) -> Result<Factorized, AlgebraError> {
        self.factorize_scaled(1.0, opts)
    }

    /// Factorize `scale * (shift*M - J)`. Implicit theta steps use this with
    /// `shift = 1/(h*theta)` and `scale = h*theta` so the factorized operator
    /// is exactly the Newton matrix `M - h*theta*J`.
    pub fn factorize_scaled(
        &self,
        scale: f64,
        opts: &LinearOpts,
    ) -> Result<Factorized, AlgebraError> {
        let n = self.dim();
        if !self.jac.is_sparse() && n <= opts.dense_lu_max {
            let mut a = self.assemble_dense();
            if scale != 1.0 {
                a *= scale;
            }
            let lu = DenseLu::factorize(a)?;
            Ok(Factorized::Direct(lu))
        } else {
            let mut matrix = self.assemble_csr();
            if scale != 1.0 {
                for v in &mut matrix.values {
                    *v *= scale;
                }
            }
            Ok(Factorized::Iterative {
                matrix,
                opts: opts.clone(),
            })
        }
    }
}

/// A ready-to-use solver for a shifted Jacobian, forward and transposed.
pub enum Factorized {
    Direct(DenseLu),
    Iterative { matrix: Csr, opts: LinearOpts },
}

impl Factorized {
    pub fn solve(&self, b: &DVector<f64>) -> Result<DVector<f64>, AlgebraError> {
        match self {
            Factorized::Direct(lu) => Ok(lu.solve(b)),
            Factorized::Iterative { matrix, opts } => {
                gmres(|x| matrix.matvec(x), b, opts).map(|(x, _)| x)
            }
        }
    }

    pub fn solve_transpose(&self, b: &DVector<f64>) -> Result<DVector<f64>, AlgebraError> {
        match self {
            Factorized::Direct(lu) => Ok(lu.solve_transpose(b)),
            Factorized::Iterative { matrix, opts } => {
                gmres(|x| matrix.matvec_transpose(x), b, opts).map(|(x, _)| x)
            }
        }
    }
}

/// Solve `A x = b` (or `A^T x = b`) for a shifted Jacobian in one call.
pub fn linear_solve(
    a: &ShiftedJacobian,
    b: &DVector<f64>,
    transpose: bool,
    opts: &LinearOpts,
) -> Result<DVector<f64>, AlgebraError> {
    let f = a.factorize(opts)?;
    if transpose {
        f.solve_transpose(b)
    } else {
        f.solve(b)
    }
}

#[derive(Debug, Clone)]
pub struct NewtonOpts {
    pub atol: f64,
    pub rtol: f64,
    pub max_iters: usize,
    pub armijo_c1: f64,
    pub backtrack_factor: f64,
    pub max_backtracks: usize,
}

impl Default for NewtonOpts {
    fn default() -> Self {
        Self {
            atol: 1e-10,
            rtol: 1e-8,
            max_iters: 30,
            armijo_c1: 1e-4,
            backtrack_factor: 0.5,
            max_backtracks: 40,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct NewtonStats {
    pub iterations: usize,
    pub linear_solves: usize,
    pub residual_norm: f64,
}

/// Newton's method with backtracking line search on the residual merit
/// `phi = ||R||^2 / 2`. The `jacobian` closure returns a solver for the
/// current iterate's Newton matrix.
pub fn newton_solve<R, J>(
    residual: R,
    mut jacobian: J,
    guess: DVector<f64>,
    opts: &NewtonOpts,
) -> Result<(DVector<f64>, NewtonStats), AlgebraError>
where
    R: Fn(&DVector<f64>) -> DVector<f64>,
    J: FnMut(&DVector<f64>) -> Result<Factorized, AlgebraError>,
{
    let mut x = guess;
    let mut r = residual(&x);
    let r0_norm = r.norm();
    let tol = opts.atol + opts.rtol * r0_norm;
    let mut stats = NewtonStats {
        residual_norm: r0_norm,
        ..Default::default()
    };

    for iter in 0..opts.max_iters {
        if stats.residual_norm <= tol || !stats.residual_norm.is_finite() {
            break;
        }
        let fac = jacobian(&x)?;
        let neg_r = -&r;
        let d = fac.solve(&neg_r)?;
        stats.linear_solves += 1;

        let phi = 0.5 * stats.residual_norm * stats.residual_norm;
        let mut alpha = 1.0f64;
        let mut accepted = false;
        for _ in 0..=opts.max_backtracks {
            let trial = &x + &d * alpha;
            let rt = residual(&trial);
            let phi_t = 0.5 * rt.norm_squared();
            // exact Newton direction gives directional derivative -2*phi
            if phi_t.is_finite() && phi_t <= phi * (1.0 - 2.0 * opts.armijo_c1 * alpha) {
                x = trial;
                r = rt;
                stats.residual_norm = r.norm();
                accepted = true;
                break;
            }
            alpha *= opts.backtrack_factor;
        }
        stats.iterations = iter + 1;
        if !accepted {
            return Err(AlgebraError::LineSearchFailed {
                iteration: iter + 1,
                residual: stats.residual_norm,
                last_iterate: x,
            });
        }
    }

    if stats.residual_norm <= tol && stats.residual_norm.is_finite() {
        Ok((x, stats))
    } else {
        Err(AlgebraError::NewtonNoConvergence {
            iterations: stats.iterations,
            residual: stats.residual_norm,
            last_iterate: x,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};

    fn dense_shift<'a>(
        shift: f64,
        mass: &'a MassMatrix,
        jac: &'a MatrixData,
    ) -> ShiftedJacobian<'a> {
        ShiftedJacobian::new(shift, mass, jac)
    }

    #[test]
    fn newton_linear_residual_one_iteration() {
        let res = |x: &DVector<f64>| dvector![x[0] - 1.0];
        let jac = |_: &DVector<f64>| DenseLu::factorize(dmatrix![1.0]).map(Factorized::Direct);
        let (x, stats) = newton_solve(res, jac, dvector![0.0], &NewtonOpts::default()).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-14);
        assert_eq!(stats.iterations, 1);
    }

    #[test]
    fn newton_quadratic_known_root() {
        let res = |x: &DVector<f64>| dvector![x[0] * x[0] - 4.0];
        let jac =
            |x: &DVector<f64>| DenseLu::factorize(dmatrix![2.0 * x[0]]).map(Factorized::Direct);
        let opts = NewtonOpts {
            rtol: 1e-14,
            atol: 1e-14,
            ..Default::default()
        };
        let (x, _) = newton_solve(res, jac, dvector![3.0], &opts).unwrap();
        assert!((x[0] - 2.0).abs() < 1e-12);
    }

    /// Bisection oracle for scalar root finding; independent of Newton.
    fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
        assert!(f(lo) * f(hi) < 0.0);
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
    fn newton_backward_euler_cubic_matches_bisection() {
        // backward-Euler residual for u' = -u^3, u_n = 1, h = 0.1
        let res = |x: &DVector<f64>| dvector![x[0] + 0.1 * x[0].powi(3) - 1.0];
        let jac = |x: &DVector<f64>| {
            DenseLu::factorize(dmatrix![1.0 + 0.3 * x[0] * x[0]]).map(Factorized::Direct)
        };
        let opts = NewtonOpts {
            rtol: 1e-14,
            atol: 1e-14,
            ..Default::default()
        };
        let (x, _) = newton_solve(res, jac, dvector![1.0], &opts).unwrap();
        let oracle = bisect(|x| x + 0.1 * x * x * x - 1.0, 0.0, 1.0);
        assert!((x[0] - oracle).abs() < 1e-12);
        assert!((x[0] - 0.921698).abs() < 5e-5);
    }

    #[test]
    fn newton_quadratic_convergence_rate() {
        // residual r(x) = x^2 + x - 6 has root 2; track error decay
        let mut errors = Vec::new();
        let res = |x: &DVector<f64>| dvector![x[0] * x[0] + x[0] - 6.0];
        let mut x = dvector![4.0];
        for _ in 0..6 {
            let r = res(&x);
            if r[0].abs() < 1e-15 {
                break;
            }
            let j = 2.0 * x[0] + 1.0;
            x[0] -= r[0] / j;
            errors.push((x[0] - 2.0f64).abs());
        }
        // quadratic: e_{k+1} ~ C e_k^2, so e3 / e2^2 ~ e2 / e1^2
        let ratio1 = errors[1] / errors[0].powi(2);
        let ratio2 = errors[2] / errors[1].powi(2);
        assert!(
            (ratio1 / ratio2 - 1.0).abs() < 0.5,
            "not quadratic: {errors:?}"
        );
    }

    #[test]
    fn newton_divergence_reports_last_iterate() {
        // no real root: x^2 + 1 = 0
        let res = |x: &DVector<f64>| dvector![x[0] * x[0] + 1.0];
        let jac = |x: &DVector<f64>| {
            DenseLu::factorize(dmatrix![(2.0 * x[0]).max(0.1)]).map(Factorized::Direct)
        };
        let opts = NewtonOpts {
            max_iters: 8,
            ..Default::default()
        };
        match newton_solve(res, jac, dvector![2.0], &opts) {
            Err(AlgebraError::NewtonNoConvergence { last_iterate, .. })
            | Err(AlgebraError::LineSearchFailed { last_iterate, .. }) => {
                assert!(last_iterate[0].is_finite());
            }
            other => panic!("expected nonconvergence, got {other:?}"),
        }
    }

    #[test]
    fn linear_solve_identity() {
        let mass = MassMatrix::Identity;
        let jac = MatrixData::Dense(DMatrix::zeros(3, 3));
        let a = dense_shift(1.0, &mass, &jac);
        let b = dvector![1.0, -2.0, 3.0];
        let x = linear_solve(&a, &b, false, &LinearOpts::default()).unwrap();
        assert_eq!(x, b);
    }

    #[test]
    fn linear_solve_dense_2x2_hand_inverse() {
        // A = [[2, 1], [1, 3]] as shift*M - J with shift=0, J = -A
        let mass = MassMatrix::Identity;
        let jac = MatrixData::Dense(dmatrix![-2.0, -1.0; -1.0, -3.0]);
        let a = dense_shift(0.0, &mass, &jac);
        let b = dvector![1.0, 2.0];
        // inverse of A is 1/5 [[3, -1], [-1, 2]]
        let expect = dvector![(3.0 - 2.0) / 5.0, (-1.0 + 4.0) / 5.0];
        let x = linear_solve(&a, &b, false, &LinearOpts::default()).unwrap();
        assert!((x - &expect).norm() < 1e-14);
        let xt = linear_solve(&a, &b, true, &LinearOpts::default()).unwrap();
        // A is symmetric here so transpose solve must agree
        assert!((xt - expect).norm() < 1e-14);
    }

    #[test]
    fn transpose_solve_matches_explicit_transpose() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let n = 6;
            let mut a = DMatrix::<f64>::zeros(n, n);
            for i in 0..n {
                for j in 0..n {
                    a[(i, j)] = rng.gen_range(-1.0..1.0);
                }
                a[(i, i)] += 3.0; // keep well conditioned
            }
            let b = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
            let lu = DenseLu::factorize(a.clone()).unwrap();
            let xt = lu.solve_transpose(&b);
            let lu_t = DenseLu::factorize(a.transpose()).unwrap();
            let expect = lu_t.solve(&b);
            assert!(
                (&xt - &expect).norm() <= 1e-12 * expect.norm().max(1.0),
                "transpose mismatch"
            );
            // residual checks for both directions
            let x = lu.solve(&b);
            assert!((&a * &x - &b).norm() <= 1e-11 * b.norm());
            assert!((a.transpose() * &xt - &b).norm() <= 1e-11 * b.norm());
        }
    }

    #[test]
    fn gmres_sparse_forward_and_transpose_residuals() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        // diffusion-like sparse system: I - 0.1 * tridiagonal
        let n = 128;
        let mut t = SparseTriplets::new(n, n);
        for i in 0..n {
            t.push(i, i, -2.1);
            t.push(i, (i + 1) % n, 1.0);
            t.push(i, (i + n - 1) % n, 0.9); // slightly nonsymmetric
        }
        let mass = MassMatrix::Identity;
        let jac = MatrixData::Sparse(t);
        let a = ShiftedJacobian::new(1.0, &mass, &jac);
        let b = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let opts = LinearOpts::default();
        let x = linear_solve(&a, &b, false, &opts).unwrap();
        let xt = linear_solve(&a, &b, true, &opts).unwrap();
        let dense = a.assemble_dense();
        assert!((&dense * &x - &b).norm() < 1e-10 * b.norm());
        assert!((dense.transpose() * &xt - &b).norm() < 1e-10 * b.norm());
    }

    #[test]
    fn singular_matrix_reports_pivot() {
        let a = dmatrix![1.0, 2.0; 2.0, 4.0];
        match DenseLu::factorize(a) {
            Err(AlgebraError::SingularMatrix { row }) => assert_eq!(row, 1),
            other => panic!("expected singular error, got {other:?}"),
        }
    }

    #[test]
    fn csr_duplicate_triplets_are_summed() {
        let t = vec![(0, 0, 1.0), (0, 0, 2.0), (1, 1, 5.0)];
        let m = Csr::from_triplets(2, 2, &t);
        let x = dvector![1.0, 1.0];
        let y = m.matvec(&x);
        assert_eq!(y, dvector![3.0, 5.0]);
    }

    proptest::proptest! {
        /// For any assembled system and right-hand side, solve-then-multiply
        /// residuals stay bounded by the solver tolerance, forward and
        /// transposed, for both the direct and iterative paths.
        #[test]
        fn prop_solve_residual_bounded(
            seed in 0u64..500,
            n in 2usize..12,
            shift in 0.5f64..4.0,
        ) {
            use rand::prelude::*;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let jac = DMatrix::<f64>::from_fn(n, n, |_, _| rng.gen_range(-0.5..0.5));
            let b = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
            let mass = MassMatrix::Identity;
            // diagonally dominated by the shift, so both paths converge
            for sparse in [false, true] {
                let data = if sparse {
                    let mut t = SparseTriplets::new(n, n);
                    for i in 0..n {
                        for j in 0..n {
                            if jac[(i, j)] != 0.0 {
                                t.push(i, j, jac[(i, j)]);
                            }
                        }
                    }
                    MatrixData::Sparse(t)
                } else {
                    MatrixData::Dense(jac.clone())
                };
                let a = ShiftedJacobian::new(shift, &mass, &data);
                let opts = LinearOpts::default();
                let x = linear_solve(&a, &b, false, &opts).unwrap();
                let xt = linear_solve(&a, &b, true, &opts).unwrap();
                let dense = a.assemble_dense();
                let r = (&dense * &x - &b).norm();
                let rt = (dense.transpose() * &xt - &b).norm();
                let bound = 1e-10 * b.norm().max(1.0);
                proptest::prop_assert!(r <= bound, "forward residual {} (sparse={})", r, sparse);
                proptest::prop_assert!(rt <= bound, "transpose residual {} (sparse={})", rt, sparse);
            }
        }
    }
}
