//! A thin conic-programming layer over the interior-point solver.
//!
//! Every optimization in this crate — feasibility projection, multiplier
//! recentering, certificate search — is an instance of
//!
//!   minimize    (1/2) x' diag(p) x + q' x
//!   subject to  expr_k(x) in K_k,    expr_k(x) = b_k + A_k x,
//!
//! with K a zero cone (equalities), a nonnegative orthant, or a cone of
//! positive semidefinite matrices in scaled-triangle coordinates. Matrix
//! constraints are entered as an affine matrix pencil F0 + sum_i x_i F_i
//! and packed by `svec`, the column-major upper triangle with off-diagonal
//! entries scaled by sqrt(2) so Euclidean inner products of packed vectors
//! equal Frobenius inner products of the matrices they represent.

use std::io::Write;

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;

/// Packed length of an n x n symmetric matrix.
pub fn svec_len(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Scaled column-major upper-triangle packing: for column j and row i <= j
/// the entry is m[i, j], multiplied by sqrt(2) off the diagonal.
pub fn svec(m: &DMatrix<f64>) -> Vec<f64> {
    let n = m.nrows();
    debug_assert_eq!(n, m.ncols(), "svec of a non-square matrix");
    let mut out = Vec::with_capacity(svec_len(n));
    for j in 0..n {
        for i in 0..=j {
            let scale = if i == j { 1.0 } else { std::f64::consts::SQRT_2 };
            out.push(scale * m[(i, j)]);
        }
    }
    out
}

/// Inverse of [`svec`].
pub fn smat(v: &[f64], n: usize) -> DMatrix<f64> {
    assert_eq!(v.len(), svec_len(n), "packed length");
    let mut m = DMatrix::zeros(n, n);
    let mut k = 0;
    for j in 0..n {
        for i in 0..=j {
            let val = if i == j {
                v[k]
            } else {
                v[k] / std::f64::consts::SQRT_2
            };
            m[(i, j)] = val;
            m[(j, i)] = val;
            k += 1;
        }
    }
    m
}

/// Which cone a constraint block lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConeKind {
    /// expr(x) = 0.
    Zero,
    /// expr(x) >= 0 elementwise.
    Nonnegative,
    /// smat(expr(x)) positive semidefinite; the payload is the matrix side.
    PsdTriangle(usize),
}

#[derive(Debug, Clone)]
struct ConeBlock {
    kind: ConeKind,
    rows: usize,
    /// Constant part of the affine expression.
    b: Vec<f64>,
    /// (row, variable, coefficient) entries of the linear part.
    a: Vec<(usize, usize, f64)>,
}

/// The solution of a conic program.
#[derive(Debug, Clone)]
pub struct SdpSolution {
    pub x: DVector<f64>,
    pub objective: f64,
    /// True when the solver met only its reduced-accuracy targets.
    pub reduced_accuracy: bool,
}

/// A conic program under construction.
#[derive(Debug, Clone)]
pub struct ConicProgram {
    num_vars: usize,
    quad_diag: Vec<f64>,
    lin_cost: Vec<f64>,
    blocks: Vec<ConeBlock>,
}

impl ConicProgram {
    pub fn new(num_vars: usize) -> ConicProgram {
        ConicProgram {
            num_vars,
            quad_diag: vec![0.0; num_vars],
            lin_cost: vec![0.0; num_vars],
            blocks: Vec::new(),
        }
    }

    pub fn num_vars(&self) -> usize {
        self.num_vars
    }

    /// Diagonal of the quadratic cost term (1/2) x' diag(p) x.
    pub fn set_quadratic_diag(&mut self, diag: &[f64]) {
        assert_eq!(diag.len(), self.num_vars, "quadratic diagonal length");
        assert!(diag.iter().all(|&d| d >= 0.0), "quadratic cost must be convex");
        self.quad_diag = diag.to_vec();
    }

    pub fn set_linear_cost(&mut self, q: &[f64]) {
        assert_eq!(q.len(), self.num_vars, "linear cost length");
        self.lin_cost = q.to_vec();
    }

    fn push_scalar_row(&mut self, kind: ConeKind, coeffs: &[(usize, f64)], constant: f64) {
        for &(v, _) in coeffs {
            assert!(v < self.num_vars, "variable index out of range");
        }
        self.blocks.push(ConeBlock {
            kind,
            rows: 1,
            b: vec![constant],
            a: coeffs.iter().map(|&(v, c)| (0, v, c)).collect(),
        });
    }

    /// constant + sum coeffs_i x_i = 0.
    pub fn add_zero_row(&mut self, coeffs: &[(usize, f64)], constant: f64) {
        self.push_scalar_row(ConeKind::Zero, coeffs, constant);
    }

    /// constant + sum coeffs_i x_i >= 0.
    pub fn add_nonneg_row(&mut self, coeffs: &[(usize, f64)], constant: f64) {
        self.push_scalar_row(ConeKind::Nonnegative, coeffs, constant);
    }

    /// F0 + sum_i x_{v_i} F_i positive semidefinite. All matrices must be
    /// symmetric and share F0's dimension.
    pub fn add_psd(&mut self, f0: &DMatrix<f64>, terms: &[(usize, &DMatrix<f64>)]) {
        let n = f0.nrows();
        assert!(linalg::is_symmetric(f0, 1e-9), "PSD constant block not symmetric");
        let mut entries = Vec::new();
        for &(v, f) in terms {
            assert!(v < self.num_vars, "variable index out of range");
            assert_eq!(f.nrows(), n, "PSD basis dimension");
            assert!(linalg::is_symmetric(f, 1e-9), "PSD basis block not symmetric");
            for (row, val) in svec(f).into_iter().enumerate() {
                if val != 0.0 {
                    entries.push((row, v, val));
                }
            }
        }
        self.blocks.push(ConeBlock {
            kind: ConeKind::PsdTriangle(n),
            rows: svec_len(n),
            b: svec(f0),
            a: entries,
        });
    }

    fn total_rows(&self) -> usize {
        self.blocks.iter().map(|bl| bl.rows).sum()
    }

    /// Solve with the interior-point method at the given tolerance
    /// (applied to gap and feasibility targets).
    pub fn solve(&self, tol: f64) -> Result<SdpSolution> {
        let n = self.num_vars;
        let m = self.total_rows();

        // Cost: diagonal P in CSC (upper triangle of a diagonal is itself).
        let mut p_colptr = Vec::with_capacity(n + 1);
        let mut p_rows = Vec::new();
        let mut p_vals = Vec::new();
        p_colptr.push(0);
        for (j, &d) in self.quad_diag.iter().enumerate() {
            if d != 0.0 {
                p_rows.push(j);
                p_vals.push(d);
            }
            p_colptr.push(p_rows.len());
        }
        let p = CscMatrix::new(n, n, p_colptr, p_rows, p_vals);

        // Constraints: clarabel wants A x + s = b with s in K, i.e.
        // s = b - A x; our expression is b + A_ours x, so A = -A_ours.
        let mut triplets: Vec<(usize, usize, f64)> = Vec::new();
        let mut b = Vec::with_capacity(m);
        let mut cones = Vec::with_capacity(self.blocks.len());
        let mut offset = 0;
        for bl in &self.blocks {
            for &(r, v, c) in &bl.a {
                triplets.push((offset + r, v, -c));
            }
            b.extend_from_slice(&bl.b);
            cones.push(match bl.kind {
                ConeKind::Zero => SupportedConeT::ZeroConeT(bl.rows),
                ConeKind::Nonnegative => SupportedConeT::NonnegativeConeT(bl.rows),
                ConeKind::PsdTriangle(side) => SupportedConeT::PSDTriangleConeT(side),
            });
            offset += bl.rows;
        }
        triplets.sort_by(|x, y| (x.1, x.0).cmp(&(y.1, y.0)));
        let mut a_colptr = Vec::with_capacity(n + 1);
        let mut a_rows: Vec<usize> = Vec::new();
        let mut a_vals: Vec<f64> = Vec::new();
        a_colptr.push(0);
        let mut it = triplets.into_iter().peekable();
        for col in 0..n {
            while let Some(&(r, c, v)) = it.peek() {
                if c != col {
                    break;
                }
                it.next();
                let dup_in_col = a_rows.len() > a_colptr[col] && a_rows.last() == Some(&r);
                if dup_in_col {
                    *a_vals.last_mut().unwrap() += v;
                } else {
                    a_rows.push(r);
                    a_vals.push(v);
                }
            }
            a_colptr.push(a_rows.len());
        }
        let a = CscMatrix::new(m, n, a_colptr, a_rows, a_vals);

        let settings = DefaultSettingsBuilder::default()
            .verbose(false)
            .tol_gap_abs(tol)
            .tol_gap_rel(tol)
            .tol_feas(tol)
            .build()
            .map_err(|e| Error::SolverFailure(format!("invalid solver settings: {e:?}")))?;
        let mut solver = DefaultSolver::new(&p, &self.lin_cost, &a, &b, &cones, settings)
            .map_err(|e| Error::SolverFailure(format!("solver rejected problem: {e:?}")))?;
        solver.solve();

        let sol = &solver.solution;
        match sol.status {
            SolverStatus::Solved | SolverStatus::AlmostSolved => Ok(SdpSolution {
                x: DVector::from_column_slice(&sol.x),
                objective: sol.obj_val,
                reduced_accuracy: sol.status == SolverStatus::AlmostSolved,
            }),
            SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => Err(
                Error::Infeasible("constraints admit no solution".into()),
            ),
            SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => Err(
                Error::SolverFailure("objective unbounded (dual infeasible)".into()),
            ),
            other => Err(Error::SolverFailure(format!(
                "interior-point solver stopped with status {other:?}"
            ))),
        }
    }

    /// Write the program in a plain triplet text format for offline
    /// inspection: cost entries, then one line per constraint entry.
    pub fn dump_triplets(&self, out: &mut dyn Write) -> std::io::Result<()> {
        writeln!(out, "vars {}", self.num_vars)?;
        for (i, &d) in self.quad_diag.iter().enumerate() {
            if d != 0.0 {
                writeln!(out, "quad {i} {d:.17e}")?;
            }
        }
        for (i, &q) in self.lin_cost.iter().enumerate() {
            if q != 0.0 {
                writeln!(out, "lin {i} {q:.17e}")?;
            }
        }
        for (k, bl) in self.blocks.iter().enumerate() {
            let kind = match bl.kind {
                ConeKind::Zero => "zero".to_string(),
                ConeKind::Nonnegative => "nonneg".to_string(),
                ConeKind::PsdTriangle(nn) => format!("psd {nn}"),
            };
            writeln!(out, "block {k} {kind} rows {}", bl.rows)?;
            for (r, &bv) in bl.b.iter().enumerate() {
                if bv != 0.0 {
                    writeln!(out, "b {r} {bv:.17e}")?;
                }
            }
            for &(r, v, c) in &bl.a {
                writeln!(out, "a {r} {v} {c:.17e}")?;
            }
        }
        Ok(())
    }
}
