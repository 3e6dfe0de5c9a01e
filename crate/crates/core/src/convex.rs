//! The convex reparameterization of controller synthesis.
//!
//! Certifying a controller requires a Lyapunov matrix P and multipliers
//! Lambda that satisfy the stability inequality jointly with the controller
//! weights — a bilinear, nonconvex set. The classical output-feedback
//! change of variables restores convexity: split P as
//!
//!   P = [ X  U ]          P^(-1) = [ Y  V ]
//!       [ U' # ]                   [ V' # ]       (X Y + U V' = I)
//!
//! and trade the controller weights for the lifted unknowns
//!
//!   N      = [X A_G Y  0] + [U  X B_G] [A~_K  B~_K2] [V'     0]
//!            [0        0]   [0  I    ] [C~_K1 D~_K2] [C_G Y  I]
//!   N^_12  = X B_G D~_K1 + U B~_K1
//!   N^_21  = L_phi C~_K2 V' + D^_K4 C_G Y
//!   D^_K3  = L_phi D~_K3,   D^_K4 = L_phi D~_K4,
//!
//! keeping D~_K1 and the multiplier diagonal L_phi themselves. In the
//! variable bundle theta^ = (X, Y, N, L_phi, D~_K1, N^_12, N^_21, D^_K3,
//! D^_K4), the stability inequality — congruence-transformed by
//! diag(Y_1, I, Y_1, I) with Y_1 = [[Y, I], [V', 0]] and Schur-lifted —
//! becomes one affine matrix inequality M(theta^) > 0. Its blocks, with
//! E = [[Y, I], [I, X]] and the plant held in loop-transformed coordinates:
//!
//!          [ rho^2 E   0        (T_a)'    (T_c)' ]
//!   M  =   [ 0         Lambda   (T_b)'    (T_d)' ]
//!          [ T_a       T_b      E         0      ]
//!          [ T_c       T_d      0         Lambda ]
//!
//!   T_a = [ A_G Y + B_G N_21   A_G + B_G N_22 C_G ]
//!         [ N_11               X A_G + N_12 C_G   ]
//!   T_b = [ B~_G1    B_G D~_K1 ]     T_c = [ L_d C~_G2 Y   L_d C~_G2  ]
//!         [ X B~_G1  N^_12     ]           [ N^_21         D^_K4 C_G  ]
//!   T_d = diag(L_d D~_G3, D^_K3),   Lambda = diag(L_d, L_phi),
//!
//! where L_d (the plant-sector multipliers) is held fixed so M stays
//! affine; a separate concave program recenters it. Controller and
//! certificate are recovered from any M(theta^) >= eps I point by
//! inverting the change of variables with the canonical completion U = X,
//! V = X^(-1) - Y.

use nalgebra::{DMatrix, DVector};

use crate::activation::Nonlinearity;
use crate::error::{Error, Result};
use crate::linalg;
use crate::plant::PlantSector;
use crate::ren::{RenDims, TransformedRenParams};
use crate::stability::{check_lyapunov_lmi, ClosedLoop, StabilityCertificate};

/// Problem sizes fixing the shape of the lifted variable bundle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthesisLayout {
    /// Plant states; the recovered controller has this many states too.
    pub n_g: usize,
    /// Controller nonlinearity channels.
    pub n_phi: usize,
    pub n_u: usize,
    pub n_y: usize,
    /// Plant nonlinearity channels.
    pub n_delta: usize,
}

impl SynthesisLayout {
    pub fn for_plant(plant: &PlantSector, n_phi: usize) -> SynthesisLayout {
        SynthesisLayout {
            n_g: plant.n_x(),
            n_phi,
            n_u: plant.n_u(),
            n_y: plant.n_y(),
            n_delta: plant.n_delta(),
        }
    }

    /// Stacked closed-loop state dimension (plant + controller).
    pub fn n_state(&self) -> usize {
        2 * self.n_g
    }

    /// Stacked nonlinearity channels.
    pub fn n_nl(&self) -> usize {
        self.n_delta + self.n_phi
    }

    /// Side length of the affine matrix inequality.
    pub fn lmi_dim(&self) -> usize {
        2 * (self.n_state() + self.n_nl())
    }

    fn n_rows(&self) -> usize {
        self.n_g + self.n_u
    }

    fn n_cols(&self) -> usize {
        self.n_g + self.n_y
    }

    // Packing offsets, in declaration order.
    fn x_off(&self) -> usize {
        0
    }
    fn y_off(&self) -> usize {
        self.x_off() + linalg::sym_upper_len(self.n_g)
    }
    fn n_off(&self) -> usize {
        self.y_off() + linalg::sym_upper_len(self.n_g)
    }
    fn lambda_off(&self) -> usize {
        self.n_off() + self.n_rows() * self.n_cols()
    }
    fn d_k1_off(&self) -> usize {
        self.lambda_off() + self.n_phi
    }
    fn n_hat_12_off(&self) -> usize {
        self.d_k1_off() + self.n_u * self.n_phi
    }
    fn n_hat_21_off(&self) -> usize {
        self.n_hat_12_off() + self.n_g * self.n_phi
    }
    fn d_hat_3_off(&self) -> usize {
        self.n_hat_21_off() + self.n_phi * self.n_g
    }
    fn d_hat_4_off(&self) -> usize {
        self.d_hat_3_off() + self.n_phi * self.n_phi
    }

    /// Total scalar parameters in theta^.
    pub fn num_params(&self) -> usize {
        self.d_hat_4_off() + self.n_phi * self.n_y
    }

    /// Flatten into the canonical packing: symmetric blocks as row-major
    /// upper triangles, full blocks row-major.
    pub fn pack(&self, th: &ThetaHat) -> DVector<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        v.extend(linalg::sym_pack_upper(&th.x));
        v.extend(linalg::sym_pack_upper(&th.y));
        for m in [&th.n] {
            v.extend(m.transpose().as_slice().iter());
        }
        v.extend(th.lambda_phi.iter());
        for m in [&th.d_k1_t, &th.n_hat_12, &th.n_hat_21, &th.d_hat_3, &th.d_hat_4] {
            v.extend(m.transpose().as_slice().iter());
        }
        debug_assert_eq!(v.len(), self.num_params());
        DVector::from_vec(v)
    }

    pub fn unpack(&self, v: &DVector<f64>) -> ThetaHat {
        assert_eq!(v.len(), self.num_params(), "packed parameter length");
        let sym = |off: usize| {
            linalg::sym_unpack_upper(self.n_g, &v.as_slice()[off..off + linalg::sym_upper_len(self.n_g)])
        };
        let full = |off: usize, r: usize, c: usize| {
            DMatrix::from_row_slice(r, c, &v.as_slice()[off..off + r * c])
        };
        ThetaHat {
            x: sym(self.x_off()),
            y: sym(self.y_off()),
            n: full(self.n_off(), self.n_rows(), self.n_cols()),
            lambda_phi: DVector::from_column_slice(
                &v.as_slice()[self.lambda_off()..self.lambda_off() + self.n_phi],
            ),
            d_k1_t: full(self.d_k1_off(), self.n_u, self.n_phi),
            n_hat_12: full(self.n_hat_12_off(), self.n_g, self.n_phi),
            n_hat_21: full(self.n_hat_21_off(), self.n_phi, self.n_g),
            d_hat_3: full(self.d_hat_3_off(), self.n_phi, self.n_phi),
            d_hat_4: full(self.d_hat_4_off(), self.n_phi, self.n_y),
        }
    }

    /// Weights making the packed Euclidean metric agree with the Frobenius
    /// metric on the matrix bundle: packed off-diagonal entries of the
    /// symmetric blocks represent two matrix entries each.
    pub fn frobenius_weights(&self) -> DVector<f64> {
        let mut w = DVector::from_element(self.num_params(), 1.0);
        for off in [self.x_off(), self.y_off()] {
            let mut k = off;
            for i in 0..self.n_g {
                for j in i..self.n_g {
                    w[k] = if i == j { 1.0 } else { 2.0 };
                    k += 1;
                }
            }
        }
        w
    }

    /// Frobenius distance between two parameter bundles.
    pub fn distance(&self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        let w = self.frobenius_weights();
        let mut acc = 0.0;
        for i in 0..self.num_params() {
            acc += w[i] * (a[i] - b[i]).powi(2);
        }
        acc.sqrt()
    }
}

/// The lifted (convex) controller parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaHat {
    pub x: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub n: DMatrix<f64>,
    pub lambda_phi: DVector<f64>,
    pub d_k1_t: DMatrix<f64>,
    pub n_hat_12: DMatrix<f64>,
    pub n_hat_21: DMatrix<f64>,
    pub d_hat_3: DMatrix<f64>,
    pub d_hat_4: DMatrix<f64>,
}

impl ThetaHat {
    /// All-zero bundle (not feasible; a starting shape).
    pub fn zeros(layout: &SynthesisLayout) -> ThetaHat {
        ThetaHat {
            x: DMatrix::zeros(layout.n_g, layout.n_g),
            y: DMatrix::zeros(layout.n_g, layout.n_g),
            n: DMatrix::zeros(layout.n_rows(), layout.n_cols()),
            lambda_phi: DVector::zeros(layout.n_phi),
            d_k1_t: DMatrix::zeros(layout.n_u, layout.n_phi),
            n_hat_12: DMatrix::zeros(layout.n_g, layout.n_phi),
            n_hat_21: DMatrix::zeros(layout.n_phi, layout.n_g),
            d_hat_3: DMatrix::zeros(layout.n_phi, layout.n_phi),
            d_hat_4: DMatrix::zeros(layout.n_phi, layout.n_y),
        }
    }
}

/// The synthesis inequality as an explicit affine pencil
/// M(theta^) = F0 + sum_i theta^_i F_i.
#[derive(Debug, Clone)]
pub struct LmiExpr {
    pub dim: usize,
    pub f0: DMatrix<f64>,
    pub basis: Vec<DMatrix<f64>>,
}

impl LmiExpr {
    pub fn value(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        assert_eq!(theta.len(), self.basis.len(), "parameter count");
        let mut m = self.f0.clone();
        for (i, f) in self.basis.iter().enumerate() {
            if theta[i] != 0.0 {
                m += f * theta[i];
            }
        }
        m
    }
}

/// Evaluate the synthesis inequality at a parameter bundle. The plant is
/// taken in (or transformed into) normalized-sector coordinates; the
/// plant-side multipliers `lambda_delta` are data, not variables.
pub fn assemble_synthesis_lmi(
    plant: &PlantSector,
    th: &ThetaHat,
    rho: f64,
    lambda_delta: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let p = plant.loop_transformed()?;
    let layout = SynthesisLayout::for_plant(&p, th.lambda_phi.len());
    let (n_g, n_d, n_phi) = (layout.n_g, layout.n_delta, layout.n_phi);
    assert_eq!(lambda_delta.len(), n_d, "plant multiplier count");
    let (a_g, b_g, c_g) = (&p.a_g, &p.b_g2, &p.c_g1);

    let n11 = th.n.view((0, 0), (n_g, n_g));
    let n12 = th.n.view((0, n_g), (n_g, layout.n_y));
    let n21 = th.n.view((n_g, 0), (layout.n_u, n_g));
    let n22 = th.n.view((n_g, n_g), (layout.n_u, layout.n_y));

    let e = linalg::assemble_blocks(&[
        &[&th.y, &DMatrix::identity(n_g, n_g)],
        &[&DMatrix::identity(n_g, n_g), &th.x],
    ]);
    let t_a = linalg::assemble_blocks(&[
        &[&(a_g * &th.y + b_g * n21), &(a_g + b_g * n22 * c_g)],
        &[&n11.into_owned(), &(&th.x * a_g + n12 * c_g)],
    ]);
    let lam_d = DMatrix::from_diagonal(lambda_delta);
    let t_b = linalg::assemble_blocks(&[
        &[&p.b_g1, &(b_g * &th.d_k1_t)],
        &[&(&th.x * &p.b_g1), &th.n_hat_12],
    ]);
    let t_c = linalg::assemble_blocks(&[
        &[&(&lam_d * &p.c_g2 * &th.y), &(&lam_d * &p.c_g2)],
        &[&th.n_hat_21, &(&th.d_hat_4 * c_g)],
    ]);
    let t_d = linalg::block_diag(&(&lam_d * &p.d_g3), &th.d_hat_3);
    let lambda = DMatrix::from_diagonal(&DVector::from_iterator(
        n_d + n_phi,
        lambda_delta.iter().chain(th.lambda_phi.iter()).copied(),
    ));

    let (ns, nl) = (layout.n_state(), layout.n_nl());
    let z_s_l = DMatrix::zeros(ns, nl);
    let z_l_s = DMatrix::zeros(nl, ns);
    let rho2_e = rho * rho * &e;
    let t_a_t = t_a.transpose();
    let t_b_t = t_b.transpose();
    let t_c_t = t_c.transpose();
    let t_d_t = t_d.transpose();
    Ok(linalg::assemble_blocks(&[
        &[&rho2_e, &z_s_l, &t_a_t, &t_c_t],
        &[&z_l_s, &lambda, &t_b_t, &t_d_t],
        &[&t_a, &t_b, &e, &z_s_l],
        &[&t_c, &t_d, &z_l_s, &lambda],
    ]))
}

/// Extract the pencil (F0, {F_i}) of the synthesis inequality by probing
/// `assemble_synthesis_lmi` on the coordinate directions. The assembly is
/// affine in theta^, so this is exact up to rounding; affinity itself is
/// checked by tests.
pub fn synthesis_lmi_expr(
    plant: &PlantSector,
    layout: &SynthesisLayout,
    rho: f64,
    lambda_delta: &DVector<f64>,
) -> Result<LmiExpr> {
    let p = plant.loop_transformed()?;
    let zero = layout.unpack(&DVector::zeros(layout.num_params()));
    let f0 = assemble_synthesis_lmi(&p, &zero, rho, lambda_delta)?;
    let mut basis = Vec::with_capacity(layout.num_params());
    let mut probe = DVector::zeros(layout.num_params());
    for i in 0..layout.num_params() {
        probe[i] = 1.0;
        let th = layout.unpack(&probe);
        basis.push(assemble_synthesis_lmi(&p, &th, rho, lambda_delta)? - &f0);
        probe[i] = 0.0;
    }
    Ok(LmiExpr {
        dim: layout.lmi_dim(),
        f0,
        basis,
    })
}

/// Build the lifted bundle from a controller together with the Lyapunov
/// matrix and multipliers that certify it (the forward direction of the
/// change of variables). The controller must have as many states as the
/// plant, and P's off-diagonal block must be invertible.
pub fn theta_hat_from_controller(
    plant: &PlantSector,
    ctrl: &TransformedRenParams,
    p_mat: &DMatrix<f64>,
    lambda_phi: &DVector<f64>,
) -> Result<ThetaHat> {
    let p = plant.loop_transformed()?;
    let n_g = p.n_x();
    let dims = ctrl.dims();
    if dims.n_xi != n_g {
        return Err(Error::DimensionMismatch(format!(
            "lifting requires controller order {} to match the plant order {}",
            dims.n_xi, n_g
        )));
    }
    if p_mat.nrows() != 2 * n_g {
        return Err(Error::DimensionMismatch(
            "Lyapunov matrix must cover the stacked closed-loop state".into(),
        ));
    }
    let x = p_mat.view((0, 0), (n_g, n_g)).into_owned();
    let u = p_mat.view((0, n_g), (n_g, n_g)).into_owned();
    let p_inv = linalg::inv(p_mat, "lifting (P)")?;
    let y = p_inv.view((0, 0), (n_g, n_g)).into_owned();
    let v = p_inv.view((0, n_g), (n_g, n_g)).into_owned();

    let (a_g, b_g, c_g) = (&p.a_g, &p.b_g2, &p.c_g1);
    let theta_block = linalg::assemble_blocks(&[
        &[&ctrl.a_k, &ctrl.b_k2],
        &[&ctrl.c_k1, &ctrl.d_k2],
    ]);
    let left = linalg::assemble_blocks(&[
        &[&u, &(&x * b_g)],
        &[
            &DMatrix::zeros(dims.n_u, n_g),
            &DMatrix::identity(dims.n_u, dims.n_u),
        ],
    ]);
    let right = linalg::assemble_blocks(&[
        &[&v.transpose(), &DMatrix::zeros(n_g, dims.n_y)],
        &[&(c_g * &y), &DMatrix::identity(dims.n_y, dims.n_y)],
    ]);
    let mut n = &left * &theta_block * &right;
    let shift = &x * a_g * &y;
    for i in 0..n_g {
        for j in 0..n_g {
            n[(i, j)] += shift[(i, j)];
        }
    }

    let lam_phi = DMatrix::from_diagonal(lambda_phi);
    let d_hat_4 = &lam_phi * &ctrl.d_k4;
    Ok(ThetaHat {
        n_hat_12: &x * b_g * &ctrl.d_k1 + &u * &ctrl.b_k1,
        n_hat_21: &lam_phi * &ctrl.c_k2 * v.transpose() + &d_hat_4 * c_g * &y,
        d_hat_3: &lam_phi * &ctrl.d_k3,
        d_hat_4,
        d_k1_t: ctrl.d_k1.clone(),
        lambda_phi: lambda_phi.clone(),
        x,
        y,
        n,
    })
}

/// A controller recovered from the lifted parameters, with its certificate.
#[derive(Debug, Clone)]
pub struct RecoveredController {
    pub controller: TransformedRenParams,
    pub certificate: StabilityCertificate,
}

/// Invert the change of variables at a lifted point, reconstructing the
/// controller and its certificate, using the canonical completion U = X,
/// V = X^(-1) - Y (an SVD factorization of I - X Y takes over when that V
/// is ill-conditioned). The certificate's margin is recomputed from
/// scratch against the assembled closed loop; `max_margin` is the largest
/// acceptable value (pass `f64::INFINITY` to skip enforcement).
pub fn recover_controller(
    plant: &PlantSector,
    th: &ThetaHat,
    phi: &Nonlinearity,
    rho: f64,
    lambda_delta: &DVector<f64>,
    max_margin: f64,
) -> Result<RecoveredController> {
    let p = plant.loop_transformed()?;
    let layout = SynthesisLayout::for_plant(&p, th.lambda_phi.len());
    let n_g = layout.n_g;
    if phi.dim() != layout.n_phi {
        return Err(Error::DimensionMismatch(
            "controller nonlinearity does not match the lifted bundle".into(),
        ));
    }
    if th.lambda_phi.iter().any(|&l| l <= 0.0) {
        return Err(Error::Invalid(
            "controller multipliers must be positive to invert the lifting".into(),
        ));
    }
    let (a_g, b_g, c_g) = (&p.a_g, &p.b_g2, &p.c_g1);

    let x_inv = linalg::inv(&th.x, "recovery (X)")?;
    let u = th.x.clone();
    let mut v = &x_inv - &th.y;
    // The completion needs V invertible; on the feasible set V = X^(-1) - Y
    // is negative definite, but near the boundary it can degenerate. An
    // SVD of I - X Y = U V' then supplies a balanced replacement.
    let v_dets_ok = v.clone().lu().is_invertible()
        && linalg::spectral_norm(&linalg::inv(&v, "recovery (V)")?) < 1e8;
    let (u, v) = if v_dets_ok {
        (u, v)
    } else {
        let residual = DMatrix::identity(n_g, n_g) - &th.x * &th.y;
        let svd = residual.svd(true, true);
        let sq = DMatrix::from_diagonal(&svd.singular_values.map(|s| s.max(1e-12).sqrt()));
        let u_new = svd.u.as_ref().expect("svd computed") * &sq;
        v = (&sq * svd.v_t.as_ref().expect("svd computed")).transpose();
        (u_new, v)
    };

    // Lyapunov matrix: Y_1' P Y_1 = E with Y_1 = [[Y, I], [V', 0]].
    let y1 = linalg::assemble_blocks(&[
        &[&th.y, &DMatrix::identity(n_g, n_g)],
        &[&v.transpose(), &DMatrix::zeros(n_g, n_g)],
    ]);
    let e = linalg::assemble_blocks(&[
        &[&th.y, &DMatrix::identity(n_g, n_g)],
        &[&DMatrix::identity(n_g, n_g), &th.x],
    ]);
    let y1_inv = linalg::inv(&y1, "recovery (Y_1)")?;
    let p_mat = linalg::symmetrize(&(y1_inv.transpose() * &e * &y1_inv));

    // Core block: undo N = [[X A_G Y, 0], [0, 0]] + L Theta R.
    let mut n_centered = th.n.clone();
    let shift = &th.x * a_g * &th.y;
    for i in 0..n_g {
        for j in 0..n_g {
            n_centered[(i, j)] -= shift[(i, j)];
        }
    }
    let left = linalg::assemble_blocks(&[
        &[&u, &(&th.x * b_g)],
        &[
            &DMatrix::zeros(layout.n_u, n_g),
            &DMatrix::identity(layout.n_u, layout.n_u),
        ],
    ]);
    let right = linalg::assemble_blocks(&[
        &[&v.transpose(), &DMatrix::zeros(n_g, layout.n_y)],
        &[&(c_g * &th.y), &DMatrix::identity(layout.n_y, layout.n_y)],
    ]);
    let theta_block = linalg::solve(&left, &n_centered, "recovery (left factor)")?
        * linalg::inv(&right, "recovery (right factor)")?;
    let a_k = theta_block.view((0, 0), (n_g, n_g)).into_owned();
    let b_k2 = theta_block.view((0, n_g), (n_g, layout.n_y)).into_owned();
    let c_k1 = theta_block.view((n_g, 0), (layout.n_u, n_g)).into_owned();
    let d_k2 = theta_block
        .view((n_g, n_g), (layout.n_u, layout.n_y))
        .into_owned();

    let b_k1 = linalg::solve(
        &u,
        &(&th.n_hat_12 - &th.x * b_g * &th.d_k1_t),
        "recovery (U)",
    )?;
    let lam_phi_inv = DMatrix::from_diagonal(&th.lambda_phi.map(|l| 1.0 / l));
    let c_k2 = &lam_phi_inv
        * (&th.n_hat_21 - &th.d_hat_4 * c_g * &th.y)
        * linalg::inv(&v.transpose(), "recovery (V')")?;
    let d_k3 = &lam_phi_inv * &th.d_hat_3;
    let d_k4 = &lam_phi_inv * &th.d_hat_4;

    let controller = TransformedRenParams::new(
        a_k,
        b_k1,
        b_k2,
        c_k1,
        th.d_k1_t.clone(),
        d_k2,
        c_k2,
        d_k3,
        d_k4,
        phi.clone(),
    )?;

    let cl = ClosedLoop::assemble(&p, &controller)?;
    let lambda = DVector::from_iterator(
        layout.n_nl(),
        lambda_delta.iter().chain(th.lambda_phi.iter()).copied(),
    );
    let margin = check_lyapunov_lmi(&cl, &p_mat, &lambda, rho);
    if margin > max_margin {
        return Err(Error::CertificateViolation {
            margin,
            required: max_margin,
        });
    }
    Ok(RecoveredController {
        controller,
        certificate: StabilityCertificate {
            p_mat,
            lambda_delta: lambda_delta.clone(),
            lambda_phi: th.lambda_phi.clone(),
            rho,
            margin,
            u_mat: Some(u),
            v_mat: Some(v),
        },
    })
}

/// Dimensions of the recovered controller for a layout.
pub fn recovered_dims(layout: &SynthesisLayout) -> RenDims {
    RenDims {
        n_xi: layout.n_g,
        n_phi: layout.n_phi,
        n_u: layout.n_u,
        n_y: layout.n_y,
    }
}

/// Jacobian of the recovery map: d(packed controller weights)/d(packed
/// theta^), computed from the closed-form matrix differentials of the
/// change-of-variables inversion (canonical completion branch; an error is
/// returned where that branch degenerates and the SVD fallback would kick
/// in, since its differential is not implemented).
pub fn recovery_jacobian(plant: &PlantSector, th: &ThetaHat) -> Result<DMatrix<f64>> {
    let p = plant.loop_transformed()?;
    let layout = SynthesisLayout::for_plant(&p, th.lambda_phi.len());
    let n_g = layout.n_g;
    let (a_g, b_g, c_g) = (&p.a_g, &p.b_g2, &p.c_g1);

    // Recovery intermediates on the canonical-completion branch.
    let x_inv = linalg::inv(&th.x, "recovery Jacobian (X)")?;
    let u = th.x.clone();
    let v = &x_inv - &th.y;
    let v_inv = linalg::inv(&v, "recovery Jacobian (V)")?;
    if linalg::spectral_norm(&v_inv) >= 1e8 {
        return Err(Error::SingularMatrix(
            "recovery Jacobian undefined: completion block V is near-singular".into(),
        ));
    }
    let vt_inv = v_inv.transpose();
    let u_inv = linalg::inv(&u, "recovery Jacobian (U)")?;
    let left = linalg::assemble_blocks(&[
        &[&u, &(&th.x * b_g)],
        &[
            &DMatrix::zeros(layout.n_u, n_g),
            &DMatrix::identity(layout.n_u, layout.n_u),
        ],
    ]);
    let right = linalg::assemble_blocks(&[
        &[&v.transpose(), &DMatrix::zeros(n_g, layout.n_y)],
        &[&(c_g * &th.y), &DMatrix::identity(layout.n_y, layout.n_y)],
    ]);
    let left_inv = linalg::inv(&left, "recovery Jacobian (left factor)")?;
    let right_inv = linalg::inv(&right, "recovery Jacobian (right factor)")?;
    let mut m_centered = th.n.clone();
    let shift = &th.x * a_g * &th.y;
    for i in 0..n_g {
        for j in 0..n_g {
            m_centered[(i, j)] -= shift[(i, j)];
        }
    }
    let theta_block = &left_inv * &m_centered * &right_inv;
    let lam_inv = DMatrix::from_diagonal(&th.lambda_phi.map(|l| 1.0 / l));
    let b_k1 = &u_inv * (&th.n_hat_12 - &th.x * b_g * &th.d_k1_t);
    let h = &th.n_hat_21 - &th.d_hat_4 * c_g * &th.y;
    let c_k2 = &lam_inv * &h * &vt_inv;
    let d_k3 = &lam_inv * &th.d_hat_3;
    let d_k4 = &lam_inv * &th.d_hat_4;

    let dims = recovered_dims(&layout);
    let n_rows = crate::ren::packed_weights_len(dims);
    let n_cols = layout.num_params();
    let mut jac = DMatrix::zeros(n_rows, n_cols);
    let mut probe = DVector::zeros(n_cols);
    for col in 0..n_cols {
        probe[col] = 1.0;
        let d = layout.unpack(&probe); // direction bundle: unpack is linear
        probe[col] = 0.0;

        let dx_inv = -(&x_inv * &d.x * &x_inv);
        let du = d.x.clone();
        let dv = &dx_inv - &d.y;
        let dvt = dv.transpose();
        let d_lam = DMatrix::from_diagonal(&d.lambda_phi);

        let d_left = linalg::assemble_blocks(&[
            &[&du, &(&d.x * b_g)],
            &[
                &DMatrix::zeros(layout.n_u, n_g),
                &DMatrix::zeros(layout.n_u, layout.n_u),
            ],
        ]);
        let d_right = linalg::assemble_blocks(&[
            &[&dvt, &DMatrix::zeros(n_g, layout.n_y)],
            &[&(c_g * &d.y), &DMatrix::zeros(layout.n_y, layout.n_y)],
        ]);
        let mut d_m = d.n.clone();
        let d_shift = &d.x * a_g * &th.y + &th.x * a_g * &d.y;
        for i in 0..n_g {
            for j in 0..n_g {
                d_m[(i, j)] -= d_shift[(i, j)];
            }
        }
        let d_theta = &left_inv * &d_m * &right_inv
            - &left_inv * &d_left * &theta_block
            - &theta_block * &d_right * &right_inv;

        let d_g_blk = &d.n_hat_12 - &d.x * b_g * &th.d_k1_t - &th.x * b_g * &d.d_k1_t;
        let d_b_k1 = &u_inv * (&d_g_blk - &du * &b_k1);
        let d_h = &d.n_hat_21 - &d.d_hat_4 * c_g * &th.y - &th.d_hat_4 * c_g * &d.y;
        let d_c_k2 =
            -(&lam_inv * &d_lam * &c_k2) + &lam_inv * &d_h * &vt_inv - &c_k2 * &dvt * &vt_inv;
        let d_d_k3 = -(&lam_inv * &d_lam * &d_k3) + &lam_inv * &d.d_hat_3;
        let d_d_k4 = -(&lam_inv * &d_lam * &d_k4) + &lam_inv * &d.d_hat_4;

        let d_a_k = d_theta.view((0, 0), (n_g, n_g)).into_owned();
        let d_b_k2 = d_theta.view((0, n_g), (n_g, layout.n_y)).into_owned();
        let d_c_k1 = d_theta.view((n_g, 0), (layout.n_u, n_g)).into_owned();
        let d_d_k2 = d_theta
            .view((n_g, n_g), (layout.n_u, layout.n_y))
            .into_owned();

        let mut row = 0;
        for m in [
            &d_a_k, &d_b_k1, &d_b_k2, &d_c_k1, &d.d_k1_t, &d_d_k2, &d_c_k2, &d_d_k3, &d_d_k4,
        ] {
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    jac[(row, col)] = m[(i, j)];
                    row += 1;
                }
            }
        }
        debug_assert_eq!(row, n_rows);
    }
    Ok(jac)
}
