//! Small dense-matrix helpers used throughout the crate.
//!
//! Everything here is a thin convenience over `nalgebra`: block assembly,
//! symmetric eigenvalue bounds, solves with explicit singularity errors, and
//! packing of symmetric matrices into upper-triangle coordinate vectors.

use nalgebra::{DMatrix, DVector};
use rand::RngExt;

use crate::error::{Error, Result};

/// Symmetrize: (M + M^T)/2. Cheap insurance before eigenvalue routines that
/// assume exact symmetry.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// True when `m` is square and symmetric to within `tol` entrywise.
pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    if !m.is_square() {
        return false;
    }
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            if (m[(i, j)] - m[(j, i)]).abs() > tol {
                return false;
            }
        }
    }
    true
}

/// Smallest and largest eigenvalue of a symmetric matrix.
///
/// The input is symmetrized first; use only on matrices that are symmetric
/// up to roundoff. A 0x0 matrix reports `(f64::INFINITY, f64::NEG_INFINITY)`
/// so that "no constraint" compares as trivially satisfied.
pub fn sym_eig_bounds(m: &DMatrix<f64>) -> (f64, f64) {
    if m.nrows() == 0 {
        return (f64::INFINITY, f64::NEG_INFINITY);
    }
    let eig = symmetrize(m).symmetric_eigen();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in eig.eigenvalues.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    (lo, hi)
}

/// Largest eigenvalue of a symmetric matrix.
pub fn lambda_max(m: &DMatrix<f64>) -> f64 {
    sym_eig_bounds(m).1
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn lambda_min(m: &DMatrix<f64>) -> f64 {
    sym_eig_bounds(m).0
}

/// Spectral norm (largest singular value). Empty matrices have norm 0.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    m.clone().svd(false, false).singular_values[0]
}

/// Condition number lambda_max/lambda_min of a symmetric positive definite
/// matrix. Returns infinity when the matrix is not positive definite.
pub fn spd_condition_number(m: &DMatrix<f64>) -> f64 {
    let (lo, hi) = sym_eig_bounds(m);
    if lo <= 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// Solve A X = B for X with an explicit error when A is singular.
pub fn solve(a: &DMatrix<f64>, b: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    if a.nrows() != a.ncols() || a.nrows() != b.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "solve {what}: A is {}x{}, B is {}x{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols()
        )));
    }
    if a.nrows() == 0 {
        return Ok(DMatrix::zeros(0, b.ncols()));
    }
    a.clone()
        .lu()
        .solve(b)
        .ok_or_else(|| Error::SingularMatrix(what.to_string()))
}

/// Invert a square matrix with an explicit error when singular.
pub fn inv(a: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    solve(a, &DMatrix::identity(a.nrows(), a.nrows()), what)
}

/// Assemble a block matrix from a grid of blocks.
///
/// Row heights are taken from the first block of each block-row and column
/// widths from the first block-row; every block must match them. Zero-sized
/// blocks are allowed and simply contribute nothing.
pub fn assemble_blocks(grid: &[&[&DMatrix<f64>]]) -> DMatrix<f64> {
    let row_heights: Vec<usize> = grid.iter().map(|row| row[0].nrows()).collect();
    let col_widths: Vec<usize> = grid
        .first()
        .map(|row| row.iter().map(|b| b.ncols()).collect())
        .unwrap_or_default();
    let total_rows: usize = row_heights.iter().sum();
    let total_cols: usize = col_widths.iter().sum();
    let mut out = DMatrix::zeros(total_rows, total_cols);
    let mut r0 = 0;
    for (bi, row) in grid.iter().enumerate() {
        assert_eq!(
            row.len(),
            col_widths.len(),
            "block grid row {bi} has {} blocks, expected {}",
            row.len(),
            col_widths.len()
        );
        let mut c0 = 0;
        for (bj, block) in row.iter().enumerate() {
            assert_eq!(
                block.nrows(),
                row_heights[bi],
                "block ({bi},{bj}) has {} rows, expected {}",
                block.nrows(),
                row_heights[bi]
            );
            assert_eq!(
                block.ncols(),
                col_widths[bj],
                "block ({bi},{bj}) has {} cols, expected {}",
                block.ncols(),
                col_widths[bj]
            );
            out.view_mut((r0, c0), (block.nrows(), block.ncols()))
                .copy_from(*block);
            c0 += block.ncols();
        }
        r0 += row_heights[bi];
    }
    out
}

/// Stack two matrices side by side.
pub fn hstack(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    assemble_blocks(&[&[a, b]])
}

/// Stack two matrices on top of each other.
pub fn vstack(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    assemble_blocks(&[&[a], &[b]])
}

/// Block-diagonal of two matrices (either may be 0x0).
pub fn block_diag(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let za = DMatrix::zeros(a.nrows(), b.ncols());
    let zb = DMatrix::zeros(b.nrows(), a.ncols());
    assemble_blocks(&[&[a, &za], &[&zb, b]])
}

/// Number of entries in the upper triangle (diagonal included) of an n x n
/// symmetric matrix.
pub fn sym_upper_len(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Pack the upper triangle of a symmetric matrix row-major:
/// (0,0), (0,1), ..., (0,n-1), (1,1), ..., (n-1,n-1).
pub fn sym_pack_upper(m: &DMatrix<f64>) -> Vec<f64> {
    let n = m.nrows();
    let mut out = Vec::with_capacity(sym_upper_len(n));
    for i in 0..n {
        for j in i..n {
            out.push(m[(i, j)]);
        }
    }
    out
}

/// Inverse of [`sym_pack_upper`].
pub fn sym_unpack_upper(n: usize, data: &[f64]) -> DMatrix<f64> {
    assert_eq!(data.len(), sym_upper_len(n), "packed length mismatch");
    let mut m = DMatrix::zeros(n, n);
    let mut k = 0;
    for i in 0..n {
        for j in i..n {
            m[(i, j)] = data[k];
            m[(j, i)] = data[k];
            k += 1;
        }
    }
    m
}

/// Standard-normal sample via the Box-Muller transform.
///
/// Uses two uniform draws per call; simple and plenty for initialization
/// and test fixtures.
pub fn randn<R: RngExt + ?Sized>(rng: &mut R) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>(); // (0, 1], keeps ln finite
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Matrix with i.i.d. N(0, scale^2) entries.
pub fn randn_matrix<R: RngExt + ?Sized>(
    rng: &mut R,
    rows: usize,
    cols: usize,
    scale: f64,
) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| scale * randn(rng))
}

/// Vector with i.i.d. N(0, scale^2) entries.
pub fn randn_vector<R: RngExt + ?Sized>(rng: &mut R, len: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(len, |_, _| scale * randn(rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn eig_bounds_match_hand_computed_spectrum() {
        // Eigenvalues of [[2,1],[1,2]] are 1 and 3.
        let m = dmatrix![2.0, 1.0; 1.0, 2.0];
        let (lo, hi) = sym_eig_bounds(&m);
        assert!((lo - 1.0).abs() < 1e-12, "lambda_min = {lo}");
        assert!((hi - 3.0).abs() < 1e-12, "lambda_max = {hi}");
    }

    #[test]
    fn spectral_norm_of_rank_one_matrix() {
        // ||u v^T|| = |u| |v|; here sqrt(5) * sqrt(2).
        let m = dmatrix![1.0; 2.0] * dmatrix![1.0, 1.0];
        assert!((spectral_norm(&m) - 10f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn block_assembly_places_blocks_where_expected() {
        let a = dmatrix![1.0, 2.0; 3.0, 4.0];
        let b = dmatrix![5.0; 6.0];
        let c = dmatrix![7.0, 8.0];
        let d = dmatrix![9.0];
        let m = assemble_blocks(&[&[&a, &b], &[&c, &d]]);
        let expect = dmatrix![
            1.0, 2.0, 5.0;
            3.0, 4.0, 6.0;
            7.0, 8.0, 9.0
        ];
        assert_eq!(m, expect);
    }

    #[test]
    fn block_assembly_tolerates_empty_blocks() {
        let a = dmatrix![1.0, 2.0; 3.0, 4.0];
        let empty_cols = DMatrix::<f64>::zeros(2, 0);
        let empty_rows = DMatrix::<f64>::zeros(0, 2);
        let empty = DMatrix::<f64>::zeros(0, 0);
        let m = assemble_blocks(&[&[&a, &empty_cols], &[&empty_rows, &empty]]);
        assert_eq!(m, a);
    }

    #[test]
    fn sym_pack_round_trips() {
        let m = dmatrix![1.0, 2.0, 3.0; 2.0, 4.0, 5.0; 3.0, 5.0, 6.0];
        let packed = sym_pack_upper(&m);
        assert_eq!(packed, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(sym_unpack_upper(3, &packed), m);
    }

    #[test]
    fn solve_reports_singularity() {
        let a = dmatrix![1.0, 2.0; 2.0, 4.0];
        let b = DMatrix::identity(2, 2);
        assert!(matches!(
            solve(&a, &b, "test"),
            Err(Error::SingularMatrix(_))
        ));
    }

    #[test]
    fn randn_moments_are_plausible() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = 20_000;
        let samples: Vec<f64> = (0..n).map(|_| randn(&mut rng)).collect();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.03, "sample mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "sample variance {var}");
    }
}
