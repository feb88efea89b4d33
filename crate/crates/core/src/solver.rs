//! Sparse matrices and linear solves.
//!
//! [`SparseMatrix`] is a plain CSR container used throughout assembly. Direct
//! solves go through `faer`'s sparse Cholesky and LU factorizations; every
//! solve checks its residual afterwards and reports it in a [`SolveReport`].

use faer::linalg::solvers::Solve;
use faer::sparse::{SparseColMat, Triplet};
use faer::{Mat, Par, Side};
use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{invalid, Error, Result};

/// Compressed sparse row matrix with sorted, duplicate-free column indices.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    nrows: usize,
    ncols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

/// Accumulates `(row, col, value)` entries; duplicates are summed on build.
#[derive(Debug, Clone)]
pub struct TripletBuilder {
    nrows: usize,
    ncols: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl TripletBuilder {
    pub fn new(nrows: usize, ncols: usize) -> Self {
        TripletBuilder { nrows, ncols, entries: Vec::new() }
    }

    pub fn with_capacity(nrows: usize, ncols: usize, capacity: usize) -> Self {
        TripletBuilder { nrows, ncols, entries: Vec::with_capacity(capacity) }
    }

    #[inline]
    pub fn push(&mut self, row: usize, col: usize, value: f64) {
        debug_assert!(row < self.nrows && col < self.ncols);
        self.entries.push((row, col, value));
    }

    pub fn build(self) -> SparseMatrix {
        SparseMatrix::from_triplets(self.nrows, self.ncols, self.entries)
    }
}

impl SparseMatrix {
    pub fn from_triplets(nrows: usize, ncols: usize, mut entries: Vec<(usize, usize, f64)>) -> Self {
        entries.sort_unstable_by_key(|&(r, c, _)| (r, c));
        let mut indptr = vec![0; nrows + 1];
        let mut indices = Vec::with_capacity(entries.len());
        let mut values: Vec<f64> = Vec::with_capacity(entries.len());
        let mut last = None;
        for (r, c, v) in entries {
            assert!(r < nrows && c < ncols, "entry ({r}, {c}) outside {nrows}x{ncols}");
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                indices.push(c);
                values.push(v);
                indptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for r in 0..nrows {
            indptr[r + 1] += indptr[r];
        }
        SparseMatrix { nrows, ncols, indptr, indices, values }
    }

    pub fn identity(n: usize) -> Self {
        SparseMatrix { nrows: n, ncols: n, indptr: (0..=n).collect(), indices: (0..n).collect(), values: vec![1.0; n] }
    }

    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        SparseMatrix { nrows, ncols, indptr: vec![0; nrows + 1], indices: Vec::new(), values: Vec::new() }
    }

    pub fn from_dense(a: &DMatrix<f64>) -> Self {
        let mut entries = Vec::new();
        for i in 0..a.nrows() {
            for j in 0..a.ncols() {
                if a[(i, j)] != 0.0 {
                    entries.push((i, j, a[(i, j)]));
                }
            }
        }
        Self::from_triplets(a.nrows(), a.ncols(), entries)
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Column indices and values of row `i`.
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let r = self.indptr[i]..self.indptr[i + 1];
        (&self.indices[r.clone()], &self.values[r])
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (cols, vals) = self.row(i);
        cols.binary_search(&j).map(|p| vals[p]).unwrap_or(0.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.nrows).flat_map(move |i| {
            let (c, v) = self.row(i);
            c.iter().zip(v).map(move |(&j, &x)| (i, j, x))
        })
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.ncols, "vector length");
        (0..self.nrows)
            .map(|i| {
                let (c, v) = self.row(i);
                c.iter().zip(v).map(|(&j, &a)| a * x[j]).sum()
            })
            .collect()
    }

    /// `A^T x` without forming the transpose.
    pub fn mul_vec_transpose(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.nrows, "vector length");
        let mut y = vec![0.0; self.ncols];
        for (i, j, a) in self.iter() {
            y[j] += a * x[i];
        }
        y
    }

    pub fn transpose(&self) -> SparseMatrix {
        Self::from_triplets(self.ncols, self.nrows, self.iter().map(|(i, j, v)| (j, i, v)).collect())
    }

    /// Sparse product `self * other`.
    pub fn matmul(&self, other: &SparseMatrix) -> SparseMatrix {
        assert_eq!(self.ncols, other.nrows, "inner dimensions");
        let mut indptr = Vec::with_capacity(self.nrows + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        let mut acc = vec![0.0; other.ncols];
        let mut mark = vec![usize::MAX; other.ncols];
        let mut touched = Vec::new();
        indptr.push(0);
        for i in 0..self.nrows {
            let (ca, va) = self.row(i);
            for (&k, &a) in ca.iter().zip(va) {
                let (cb, vb) = other.row(k);
                for (&j, &b) in cb.iter().zip(vb) {
                    if mark[j] != i {
                        mark[j] = i;
                        acc[j] = 0.0;
                        touched.push(j);
                    }
                    acc[j] += a * b;
                }
            }
            touched.sort_unstable();
            for &j in &touched {
                indices.push(j);
                values.push(acc[j]);
            }
            touched.clear();
            indptr.push(indices.len());
        }
        SparseMatrix { nrows: self.nrows, ncols: other.ncols, indptr, indices, values }
    }

    /// `alpha * self + beta * other`.
    pub fn add(&self, alpha: f64, other: &SparseMatrix, beta: f64) -> SparseMatrix {
        assert_eq!((self.nrows, self.ncols), (other.nrows, other.ncols), "shapes");
        let entries = self
            .iter()
            .map(|(i, j, v)| (i, j, alpha * v))
            .chain(other.iter().map(|(i, j, v)| (i, j, beta * v)))
            .collect();
        Self::from_triplets(self.nrows, self.ncols, entries)
    }

    pub fn scale(&self, alpha: f64) -> SparseMatrix {
        let mut m = self.clone();
        m.values.iter_mut().for_each(|v| *v *= alpha);
        m
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Symmetry up to `tol * max|a_ij|`.
    pub fn is_symmetric(&self, tol: f64) -> bool {
        if self.nrows != self.ncols {
            return false;
        }
        let bound = tol * self.max_abs();
        self.iter().all(|(i, j, v)| (v - self.get(j, i)).abs() <= bound)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.nrows, self.ncols);
        for (i, j, v) in self.iter() {
            a[(i, j)] += v;
        }
        a
    }

    fn to_faer(&self) -> Result<SparseColMat<usize, f64>> {
        let triplets: Vec<_> = self.iter().map(|(i, j, v)| Triplet::new(i, j, v)).collect();
        SparseColMat::try_new_from_triplets(self.nrows, self.ncols, &triplets)
            .map_err(|e| Error::NumericalFailure(format!("sparse conversion failed: {e:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SolveMethod {
    Cholesky,
    Lu,
    Cg,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveReport {
    pub method: SolveMethod,
    /// Zero for direct solves.
    pub iterations: usize,
    /// `||B x - r|| / ||r||` (absolute if `r = 0`).
    pub residual: f64,
    pub success: bool,
}

pub const DEFAULT_TOLERANCE: f64 = 1e-12;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn relative_residual(a: &SparseMatrix, x: &[f64], r: &[f64]) -> f64 {
    let ax = a.mul_vec(x);
    let res: Vec<f64> = ax.iter().zip(r).map(|(p, q)| p - q).collect();
    let nr = norm(r);
    if nr > 0.0 {
        norm(&res) / nr
    } else {
        norm(&res)
    }
}

fn check_square(a: &SparseMatrix, r: &[f64]) -> Result<()> {
    if a.nrows != a.ncols {
        return invalid(format!("matrix is {}x{}, not square", a.nrows, a.ncols));
    }
    if r.len() != a.nrows {
        return invalid(format!("right-hand side has length {}, expected {}", r.len(), a.nrows));
    }
    Ok(())
}

fn to_mat(r: &[f64]) -> Mat<f64> {
    Mat::from_fn(r.len(), 1, |i, _| r[i])
}

// Round-off in the direct factorizations grows with the condition number, so
// the residual contract for direct methods is relative to a floor that scales
// with it; iterative refinement brings most systems well below `tol`.
fn refine(
    a: &SparseMatrix,
    r: &[f64],
    mut x: Vec<f64>,
    solve: impl Fn(&[f64]) -> Vec<f64>,
) -> Vec<f64> {
    for _ in 0..3 {
        let ax = a.mul_vec(&x);
        let res: Vec<f64> = r.iter().zip(&ax).map(|(p, q)| p - q).collect();
        if norm(&res) <= 1e-15 * norm(r) {
            break;
        }
        let dx = solve(&res);
        if dx.iter().any(|v| !v.is_finite()) {
            break;
        }
        x.iter_mut().zip(&dx).for_each(|(v, d)| *v += d);
    }
    x
}

/// Solves a symmetric positive definite system by sparse Cholesky.
///
/// Fails with [`Error::IndefiniteMatrix`] if the factorization meets a
/// nonpositive pivot, which makes it usable as a definiteness probe.
pub fn solve_spd(a: &SparseMatrix, r: &[f64], tol: f64) -> Result<(Vec<f64>, SolveReport)> {
    check_square(a, r)?;
    if !a.is_symmetric(1e-12) {
        return invalid("solve_spd needs a symmetric matrix");
    }
    faer::set_global_parallelism(Par::Seq);
    if a.nrows == 0 {
        return Ok((Vec::new(), SolveReport { method: SolveMethod::Cholesky, iterations: 0, residual: 0.0, success: true }));
    }
    let fa = a.to_faer()?;
    let llt = fa.sp_cholesky(Side::Lower).map_err(|e| match e {
        faer::sparse::linalg::LltError::Numeric(faer::linalg::cholesky::llt::factor::LltError::NonPositivePivot {
            index,
        }) => Error::IndefiniteMatrix { pivot: index },
        other => Error::NumericalFailure(format!("Cholesky factorization failed: {other:?}")),
    })?;
    let solve = |b: &[f64]| {
        let x = llt.solve(&to_mat(b));
        (0..b.len()).map(|i| x[(i, 0)]).collect::<Vec<f64>>()
    };
    let x = refine(a, r, solve(r), solve);
    finish(a, r, x, SolveMethod::Cholesky, tol)
}

/// Solves a general square system by sparse LU with partial pivoting.
pub fn solve_general(a: &SparseMatrix, r: &[f64], tol: f64) -> Result<(Vec<f64>, SolveReport)> {
    check_square(a, r)?;
    faer::set_global_parallelism(Par::Seq);
    if a.nrows == 0 {
        return Ok((Vec::new(), SolveReport { method: SolveMethod::Lu, iterations: 0, residual: 0.0, success: true }));
    }
    let fa = a.to_faer()?;
    let lu = fa.sp_lu().map_err(|e| Error::SingularSystem(format!("LU factorization failed: {e:?}")))?;
    let solve = |b: &[f64]| {
        let x = lu.solve(&to_mat(b));
        (0..b.len()).map(|i| x[(i, 0)]).collect::<Vec<f64>>()
    };
    let x = solve(r);
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularSystem("LU solve produced non-finite values".into()));
    }
    let x = refine(a, r, x, solve);
    finish(a, r, x, SolveMethod::Lu, tol)
}

/// Symmetric systems: Cholesky first, LU if the matrix turns out indefinite.
pub fn solve_symmetric(a: &SparseMatrix, r: &[f64], tol: f64) -> Result<(Vec<f64>, SolveReport)> {
    match solve_spd(a, r, tol) {
        Err(Error::IndefiniteMatrix { pivot }) => {
            log::info!("matrix is not positive definite (pivot {pivot}); falling back to LU");
            solve_general(a, r, tol)
        }
        other => other,
    }
}

/// Unpreconditioned conjugate gradients, kept as an independent check of the
/// direct solvers.
pub fn solve_cg(a: &SparseMatrix, r: &[f64], tol: f64, max_iter: usize) -> Result<(Vec<f64>, SolveReport)> {
    check_square(a, r)?;
    let n = r.len();
    let mut x = vec![0.0; n];
    let mut res = r.to_vec();
    let mut p = res.clone();
    let mut rr: f64 = res.iter().map(|v| v * v).sum();
    let target = tol * norm(r);
    let mut iterations = 0;
    while rr.sqrt() > target && iterations < max_iter {
        let ap = a.mul_vec(&p);
        let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
        if pap <= 0.0 {
            return Err(Error::IndefiniteMatrix { pivot: iterations });
        }
        let alpha = rr / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            res[i] -= alpha * ap[i];
        }
        let rr_new: f64 = res.iter().map(|v| v * v).sum();
        let beta = rr_new / rr;
        for i in 0..n {
            p[i] = res[i] + beta * p[i];
        }
        rr = rr_new;
        iterations += 1;
    }
    let residual = relative_residual(a, &x, r);
    let success = residual <= tol;
    Ok((x, SolveReport { method: SolveMethod::Cg, iterations, residual, success }))
}

fn finish(a: &SparseMatrix, r: &[f64], x: Vec<f64>, method: SolveMethod, tol: f64) -> Result<(Vec<f64>, SolveReport)> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularSystem(format!("{method:?} solve produced non-finite values")));
    }
    let residual = relative_residual(a, &x, r);
    let success = residual <= tol;
    if !success {
        if residual > 1e-6 {
            return Err(Error::SingularSystem(format!("relative residual {residual:.3e} after {method:?} solve")));
        }
        log::warn!("{method:?} solve reached relative residual {residual:.3e} (tolerance {tol:.1e})");
    }
    Ok((x, SolveReport { method, iterations: 0, residual, success }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_system() {
        let a = SparseMatrix::identity(4);
        let r = vec![1.0, -2.0, 3.0, 0.5];
        let (x, rep) = solve_spd(&a, &r, DEFAULT_TOLERANCE).unwrap();
        assert_eq!(x, r);
        assert!(rep.success);
        assert_eq!(rep.method, SolveMethod::Cholesky);
    }

    #[test]
    fn two_by_two() {
        let a = SparseMatrix::from_triplets(2, 2, vec![(0, 0, 2.0), (0, 1, 1.0), (1, 0, 1.0), (1, 1, 2.0)]);
        for (x, rep) in [
            solve_spd(&a, &[3.0, 3.0], 1e-12).unwrap(),
            solve_general(&a, &[3.0, 3.0], 1e-12).unwrap(),
            solve_cg(&a, &[3.0, 3.0], 1e-12, 10).unwrap(),
        ] {
            assert!((x[0] - 1.0).abs() < 1e-14 && (x[1] - 1.0).abs() < 1e-14);
            assert!(rep.success && rep.residual <= 1e-12);
        }
    }

    #[test]
    fn indefinite_is_reported() {
        let a = SparseMatrix::from_triplets(2, 2, vec![(0, 0, 1.0), (0, 1, 2.0), (1, 0, 2.0), (1, 1, 1.0)]);
        assert!(matches!(solve_spd(&a, &[1.0, 0.0], 1e-12), Err(Error::IndefiniteMatrix { .. })));
        let (x, rep) = solve_symmetric(&a, &[1.0, 0.0], 1e-12).unwrap();
        assert_eq!(rep.method, SolveMethod::Lu);
        assert!((x[0] + 1.0 / 3.0).abs() < 1e-14 && (x[1] - 2.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn singular_is_reported() {
        let a = SparseMatrix::from_triplets(2, 2, vec![(0, 0, 1.0), (0, 1, 1.0), (1, 0, 1.0), (1, 1, 1.0)]);
        assert!(matches!(solve_general(&a, &[1.0, 0.0], 1e-12), Err(Error::SingularSystem(_))));
    }

    #[test]
    fn nonsymmetric_rejected_on_spd_path() {
        let a = SparseMatrix::from_triplets(2, 2, vec![(0, 0, 2.0), (0, 1, 1.0), (1, 1, 2.0)]);
        assert!(matches!(solve_spd(&a, &[1.0, 1.0], 1e-12), Err(Error::InvalidArgument(_))));
        let (x, _) = solve_general(&a, &[3.0, 2.0], 1e-12).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-14 && (x[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn products_and_transpose() {
        let a = SparseMatrix::from_triplets(2, 3, vec![(0, 0, 1.0), (0, 2, 2.0), (1, 1, 3.0), (0, 0, 1.0)]);
        assert_eq!(a.get(0, 0), 2.0);
        assert_eq!(a.nnz(), 3);
        let at = a.transpose();
        let ata = at.matmul(&a);
        assert_eq!(ata.to_dense(), a.to_dense().transpose() * a.to_dense());
        assert_eq!(a.mul_vec_transpose(&[1.0, 1.0]), at.mul_vec(&[1.0, 1.0]));
        assert!(ata.is_symmetric(0.0));
        assert_eq!(a.add(1.0, &a, -1.0).max_abs(), 0.0);
    }

    #[test]
    fn deterministic() {
        let n = 50;
        let mut t = TripletBuilder::new(n, n);
        for i in 0..n {
            t.push(i, i, 4.0);
            if i + 1 < n {
                t.push(i, i + 1, -1.0);
                t.push(i + 1, i, -1.0);
            }
        }
        let a = t.build();
        let r: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let first = solve_spd(&a, &r, 1e-12).unwrap();
        let second = solve_spd(&a, &r, 1e-12).unwrap();
        assert_eq!(first, second);
        let (xc, _) = solve_cg(&a, &r, 1e-13, 200).unwrap();
        assert!(first.0.iter().zip(&xc).all(|(a, b)| (a - b).abs() < 1e-11));
    }
}
