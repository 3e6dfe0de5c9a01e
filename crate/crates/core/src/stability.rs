//! Closed-loop assembly and exponential-stability certificates.
//!
//! With the plant and controller both in loop-transformed coordinates, the
//! interconnection collapses to an autonomous implicit system
//!
//!   zeta+ = A zeta + B t,   t = psi(C zeta + D t),
//!
//! where zeta = (x, xi) stacks plant and controller states and
//! psi = (delta_tilde, phi_tilde) stacks their normalized nonlinearities,
//! every channel in sector [-1, 1]. A certificate is a pair (P, Lambda)
//! with P > 0 and Lambda a positive diagonal such that
//!
//!   [ A'PA - rho^2 P   A'PB ]   [ C  D ]' [ L  0 ] [ C  D ]
//!   [ B'PA             B'PB ] + [ 0  I ]  [ 0 -L ] [ 0  I ]  <  0
//!
//! (L = diag(lambda)). Along any trajectory the sector condition makes the
//! multiplier term nonnegative at (v, t), so V(zeta) = zeta' P zeta decays
//! by rho^2 each step, which gives the computable envelope
//! |zeta_k| <= sqrt(cond(P)) rho^k |zeta_0|.

use nalgebra::{DMatrix, DVector};

use crate::activation::{Nonlinearity, SectorSpec};
use crate::error::{Error, Result};
use crate::implicit::{solve_fixed_point_newton, FixedPointOptions};
use crate::linalg;
use crate::plant::PlantSector;
use crate::ren::TransformedRenParams;
use crate::sdp;

/// The autonomous interconnection of a transformed plant and controller.
#[derive(Debug, Clone)]
pub struct ClosedLoop {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
    /// Stacked normalized nonlinearity acting on v = C zeta + D t.
    pub psi: Nonlinearity,
    /// Leading block of zeta belonging to the plant.
    pub n_plant: usize,
    /// Leading block of t belonging to the plant nonlinearity.
    pub n_delta: usize,
}

/// One step of the interconnection.
#[derive(Debug, Clone)]
pub struct ClosedLoopStep {
    pub zeta_next: DVector<f64>,
    pub t_star: DVector<f64>,
}

impl ClosedLoop {
    /// Interconnect a sector plant with a transformed controller. The plant
    /// is loop-transformed here if it still carries its original sector.
    pub fn assemble(plant: &PlantSector, ctrl: &TransformedRenParams) -> Result<ClosedLoop> {
        let p = plant.loop_transformed()?;
        let (n_x, n_u, n_y, n_d) = (p.n_x(), p.n_u(), p.n_y(), p.n_delta());
        let dims = ctrl.dims();
        if dims.n_u != n_u || dims.n_y != n_y {
            return Err(Error::DimensionMismatch(format!(
                "controller ({} inputs, {} outputs) does not fit plant ({} measurements, {} actuators)",
                dims.n_y, dims.n_u, n_y, n_u
            )));
        }
        let (n_xi, n_phi) = (dims.n_xi, dims.n_phi);

        let a = linalg::assemble_blocks(&[
            &[&(&p.a_g + &p.b_g2 * &ctrl.d_k2 * &p.c_g1), &(&p.b_g2 * &ctrl.c_k1)],
            &[&(&ctrl.b_k2 * &p.c_g1), &ctrl.a_k],
        ]);
        let b = linalg::assemble_blocks(&[
            &[&p.b_g1, &(&p.b_g2 * &ctrl.d_k1)],
            &[&DMatrix::zeros(n_xi, n_d), &ctrl.b_k1],
        ]);
        let c = linalg::assemble_blocks(&[
            &[&p.c_g2, &DMatrix::zeros(n_d, n_xi)],
            &[&(&ctrl.d_k4 * &p.c_g1), &ctrl.c_k2],
        ]);
        let d = linalg::block_diag(&p.d_g3, &ctrl.d_k3);
        let psi = p.delta.stack(&ctrl.phi);
        debug_assert_eq!(psi.dim(), n_d + n_phi);

        Ok(ClosedLoop {
            a,
            b,
            c,
            d,
            psi,
            n_plant: n_x,
            n_delta: n_d,
        })
    }

    pub fn n_state(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_nl(&self) -> usize {
        self.psi.dim()
    }

    /// Spectral norm of the implicit feedthrough D; < 1 guarantees the
    /// nonlinearity equation is well posed for every [-1, 1]-sector map.
    pub fn feedthrough_norm(&self) -> f64 {
        linalg::spectral_norm(&self.d)
    }

    /// Split a stacked state into (plant part, controller part).
    pub fn split_state(&self, zeta: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        (
            zeta.rows(0, self.n_plant).into_owned(),
            zeta.rows(self.n_plant, self.n_state() - self.n_plant).into_owned(),
        )
    }

    /// Solve t = psi(C zeta + D t).
    pub fn solve_nonlinearity(
        &self,
        zeta: &DVector<f64>,
        opts: &FixedPointOptions,
    ) -> Result<DVector<f64>> {
        let base = &self.c * zeta;
        let f = |t: &DVector<f64>| self.psi.eval(&(&base + &self.d * t));
        let jac = |t: &DVector<f64>| {
            let dpsi = self.psi.deriv_diag(&(&base + &self.d * t));
            DMatrix::from_fn(t.len(), t.len(), |i, j| dpsi[i] * self.d[(i, j)])
        };
        Ok(solve_fixed_point_newton(f, jac, &DVector::zeros(self.n_nl()), opts)?.value)
    }

    pub fn step(&self, zeta: &DVector<f64>, opts: &FixedPointOptions) -> Result<ClosedLoopStep> {
        let t = self.solve_nonlinearity(zeta, opts)?;
        Ok(ClosedLoopStep {
            zeta_next: &self.a * zeta + &self.b * &t,
            t_star: t,
        })
    }

    /// Roll the loop forward, returning states zeta_0 .. zeta_steps
    /// (steps + 1 entries).
    pub fn simulate(
        &self,
        zeta0: &DVector<f64>,
        steps: usize,
        opts: &FixedPointOptions,
    ) -> Result<Vec<DVector<f64>>> {
        let mut out = Vec::with_capacity(steps + 1);
        out.push(zeta0.clone());
        let mut zeta = zeta0.clone();
        for _ in 0..steps {
            zeta = self.step(&zeta, opts)?.zeta_next;
            out.push(zeta.clone());
        }
        Ok(out)
    }
}

/// The quadratic-constraint matrix of a diagonal sector bound: for every
/// channel, 2 lambda_i (w_i - alpha_i v_i)(beta_i v_i - w_i) >= 0 whenever
/// w = psi(v), summed into the form [v; w]' Q [v; w].
pub fn qc_matrix(sector: &SectorSpec, lambda: &DVector<f64>) -> DMatrix<f64> {
    let m = sector.dim();
    assert_eq!(lambda.len(), m, "multiplier dimension");
    let mut q = DMatrix::zeros(2 * m, 2 * m);
    for i in 0..m {
        let (al, be, la) = (sector.alpha[i], sector.beta[i], lambda[i]);
        q[(i, i)] = -2.0 * al * be * la;
        q[(i, m + i)] = (al + be) * la;
        q[(m + i, i)] = (al + be) * la;
        q[(m + i, m + i)] = -2.0 * la;
    }
    q
}

/// Left-hand side of the certificate inequality; the certificate holds iff
/// this matrix is negative definite.
pub fn lyapunov_lmi_lhs(
    cl: &ClosedLoop,
    p: &DMatrix<f64>,
    lambda: &DVector<f64>,
    rho: f64,
) -> DMatrix<f64> {
    let n = cl.n_state();
    let m = cl.n_nl();
    assert_eq!(p.nrows(), n, "P dimension");
    assert_eq!(lambda.len(), m, "multiplier dimension");
    let pa = p * &cl.a;
    let pb = p * &cl.b;
    let mut lhs = linalg::assemble_blocks(&[
        &[&(cl.a.transpose() * &pa - rho * rho * p), &(cl.a.transpose() * &pb)],
        &[&(cl.b.transpose() * &pa), &(cl.b.transpose() * &pb)],
    ]);
    // Multiplier term for the normalized sector: [C D]' L [C D] - diag(0, L).
    let lam = DMatrix::from_diagonal(lambda);
    let cd = linalg::assemble_blocks(&[&[&cl.c, &cl.d]]);
    lhs += cd.transpose() * &lam * &cd;
    for i in 0..m {
        lhs[(n + i, n + i)] -= lambda[i];
    }
    linalg::symmetrize(&lhs)
}

/// Largest eigenvalue of the certificate inequality's left-hand side;
/// negative means (P, Lambda) certifies decay rate rho.
pub fn check_lyapunov_lmi(
    cl: &ClosedLoop,
    p: &DMatrix<f64>,
    lambda: &DVector<f64>,
    rho: f64,
) -> f64 {
    linalg::lambda_max(&lyapunov_lmi_lhs(cl, p, lambda, rho))
}

/// Worst-case state-norm bound sqrt(cond(P)) rho^k |zeta_0| implied by a
/// valid certificate.
pub fn decay_envelope(p: &DMatrix<f64>, rho: f64, zeta0_norm: f64, k: usize) -> f64 {
    linalg::spd_condition_number(p).sqrt() * rho.powi(k as i32) * zeta0_norm
}

/// Search for a certificate for a fixed closed loop. With the loop matrices
/// frozen, the inequality is affine in (P, Lambda), so the search is a
/// semidefinite feasibility program: find P >= I and lambda >= floor with
/// the left-hand side <= -eps I, minimizing trace(P) + sum(lambda) to keep
/// the certificate well scaled. Because the inequality is homogeneous in
/// (P, Lambda), the eps slack never excludes a strictly certifiable loop —
/// any strictly feasible direction can be scaled up to clear it.
pub fn find_certificate(
    cl: &ClosedLoop,
    rho: f64,
    eps: f64,
    tol: f64,
) -> Result<StabilityCertificate> {
    if !(0.0 < rho && rho < 1.0) {
        return Err(Error::Invalid(format!(
            "decay rate must lie in (0, 1), got {rho}"
        )));
    }
    if eps < 0.0 {
        return Err(Error::Invalid(format!("slack must be nonnegative, got {eps}")));
    }
    let n = cl.n_state();
    let m = cl.n_nl();
    let n_p = sdp::svec_len(n);
    const LAMBDA_FLOOR: f64 = 1e-7;

    let mut prog = sdp::ConicProgram::new(n_p + m);
    // Coefficient matrices come from the (linear) left-hand side evaluated
    // on unit inputs: one symmetric basis matrix per svec(P) coordinate,
    // one unit multiplier per channel.
    let mut lhs_terms: Vec<DMatrix<f64>> = Vec::with_capacity(n_p + m);
    let zero_lambda = DVector::zeros(m);
    for k in 0..n_p {
        let mut e = vec![0.0; n_p];
        e[k] = 1.0;
        let basis = sdp::smat(&e, n);
        lhs_terms.push(lyapunov_lmi_lhs(cl, &basis, &zero_lambda, rho));
    }
    let zero_p = DMatrix::zeros(n, n);
    for i in 0..m {
        let mut lam = DVector::zeros(m);
        lam[i] = 1.0;
        lhs_terms.push(lyapunov_lmi_lhs(cl, &zero_p, &lam, rho));
    }
    // LHS(P, lambda) <= -eps I.
    let neg_terms: Vec<DMatrix<f64>> = lhs_terms.iter().map(|f| -f).collect();
    let refs: Vec<(usize, &DMatrix<f64>)> =
        neg_terms.iter().enumerate().map(|(k, f)| (k, f)).collect();
    let f0 = DMatrix::from_diagonal_element(n + m, n + m, -eps);
    prog.add_psd(&f0, &refs);
    // P >= I.
    let p_terms: Vec<DMatrix<f64>> = (0..n_p)
        .map(|k| {
            let mut e = vec![0.0; n_p];
            e[k] = 1.0;
            sdp::smat(&e, n)
        })
        .collect();
    let p_refs: Vec<(usize, &DMatrix<f64>)> =
        p_terms.iter().enumerate().map(|(k, f)| (k, f)).collect();
    prog.add_psd(&(-DMatrix::identity(n, n)), &p_refs);
    // lambda_i >= floor.
    for i in 0..m {
        prog.add_nonneg_row(&[(n_p + i, 1.0)], -LAMBDA_FLOOR);
    }
    // min trace(P) + sum(lambda): trace picks up the diagonal svec coords.
    let mut cost = vec![0.0; n_p + m];
    let mut idx = 0;
    for j in 0..n {
        for i in 0..=j {
            if i == j {
                cost[idx] = 1.0;
            }
            idx += 1;
        }
    }
    for c in cost.iter_mut().skip(n_p) {
        *c = 1.0;
    }
    prog.set_linear_cost(&cost);

    let sol = prog.solve(tol)?;
    let p = linalg::symmetrize(&sdp::smat(sol.x.as_slice().get(..n_p).unwrap(), n));
    let lambda = DVector::from_iterator(m, sol.x.iter().skip(n_p).copied())
        .map(|l| l.max(LAMBDA_FLOOR));
    let margin = check_lyapunov_lmi(cl, &p, &lambda, rho);
    if margin >= 0.0 {
        return Err(Error::Infeasible(format!(
            "solver returned a point but the inequality margin is {margin:.3e}"
        )));
    }
    let cert = StabilityCertificate {
        p_mat: p,
        lambda_delta: DVector::from_iterator(cl.n_delta, lambda.iter().take(cl.n_delta).copied()),
        lambda_phi: DVector::from_iterator(
            m - cl.n_delta,
            lambda.iter().skip(cl.n_delta).copied(),
        ),
        rho,
        margin,
        u_mat: None,
        v_mat: None,
    };
    cert.validate(cl)?;
    Ok(cert)
}

/// A checkable exponential-stability certificate for a closed loop.
#[derive(Debug, Clone, PartialEq)]
pub struct StabilityCertificate {
    pub p_mat: DMatrix<f64>,
    pub lambda_delta: DVector<f64>,
    pub lambda_phi: DVector<f64>,
    pub rho: f64,
    /// lambda_max of the inequality's left-hand side when the certificate
    /// was issued (negative).
    pub margin: f64,
    /// Coupling factors with U V' = I - X Y, kept by synthesis for
    /// diagnostics; absent on certificates checked directly from (P, Lambda).
    pub u_mat: Option<DMatrix<f64>>,
    pub v_mat: Option<DMatrix<f64>>,
}

impl StabilityCertificate {
    pub fn lambda(&self) -> DVector<f64> {
        let m = self.lambda_delta.len() + self.lambda_phi.len();
        DVector::from_iterator(
            m,
            self.lambda_delta.iter().chain(self.lambda_phi.iter()).copied(),
        )
    }

    pub fn lyapunov(&self, zeta: &DVector<f64>) -> f64 {
        (zeta.transpose() * &self.p_mat * zeta)[(0, 0)]
    }

    pub fn envelope(&self, zeta0_norm: f64, k: usize) -> f64 {
        decay_envelope(&self.p_mat, self.rho, zeta0_norm, k)
    }

    /// Re-derive the certificate's margin against a closed loop from
    /// scratch: P symmetric positive definite, multipliers positive, and
    /// the inequality strictly satisfied. Returns the recomputed margin.
    pub fn validate(&self, cl: &ClosedLoop) -> Result<f64> {
        if !(0.0 < self.rho && self.rho < 1.0) {
            return Err(Error::Invalid(format!(
                "decay rate must lie in (0, 1), got {}",
                self.rho
            )));
        }
        if self.lambda_delta.len() != cl.n_delta
            || self.lambda_phi.len() != cl.n_nl() - cl.n_delta
        {
            return Err(Error::DimensionMismatch(
                "certificate multipliers do not match the closed loop".into(),
            ));
        }
        if !linalg::is_symmetric(&self.p_mat, 1e-9) {
            return Err(Error::Invalid("certificate P is not symmetric".into()));
        }
        let p_min = linalg::lambda_min(&self.p_mat);
        if p_min <= 0.0 {
            return Err(Error::CertificateViolation {
                margin: p_min,
                required: 0.0,
            });
        }
        if self.lambda().iter().any(|&l| l <= 0.0) {
            return Err(Error::Invalid(
                "certificate multipliers must be strictly positive".into(),
            ));
        }
        let margin = check_lyapunov_lmi(cl, &self.p_mat, &self.lambda(), self.rho);
        if margin >= 0.0 {
            return Err(Error::CertificateViolation {
                margin,
                required: 0.0,
            });
        }
        Ok(margin)
    }
}
