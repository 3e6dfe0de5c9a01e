//! The recurrent-equilibrium-network (REN) controller.
//!
//! The controller is an LTI core around an implicit elementwise layer:
//!
//!   xi+ = A_K xi + B_K1 w + B_K2 y
//!   u   = C_K1 xi + D_K1 w + D_K2 y
//!   w   = phi(v),  v = C_K2 xi + D_K3 w + D_K4 y
//!
//! with phi sector-bounded in [alpha_phi, beta_phi]. The loop transformation
//! replaces (phi, w) by the normalized pair (phi_tilde, z) with z in sector
//! [-1, 1] and compensates in the nine matrices; training, projection, and
//! certification all live in the transformed coordinates, while the original
//! form exists for interpretability and the round-trip tests. With
//! S = diag((alpha+beta)/2), L = diag((beta-alpha)/2), and
//! M = (I - S D_K3)^(-1):
//!
//!   A~_K  = A_K + B_K1 M S C_K2     B~_K1 = B_K1 M L     B~_K2 = B_K2 + B_K1 M S D_K4
//!   C~_K1 = C_K1 + D_K1 M S C_K2    D~_K1 = D_K1 M L     D~_K2 = D_K2 + D_K1 M S D_K4
//!   C~_K2 = C_K2 + D_K3 M S C_K2    D~_K3 = D_K3 M L     D~_K4 = D_K4 + D_K3 M S D_K4
//!
//! The inverse map is derived by solving these relations backwards (see
//! `inverse_transformed`); it is validated by the round-trip property rather
//! than an external formula.

use nalgebra::{DMatrix, DVector};

use crate::activation::Nonlinearity;
use crate::error::{Error, Result};
use crate::implicit::{solve_fixed_point_newton, FixedPointOptions};
use crate::linalg;

/// Controller dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RenDims {
    pub n_xi: usize,
    pub n_phi: usize,
    pub n_u: usize,
    pub n_y: usize,
}

/// Controller weights in original coordinates (nonlinearity in its native
/// sector).
#[derive(Debug, Clone, PartialEq)]
pub struct RenParams {
    pub a_k: DMatrix<f64>,
    pub b_k1: DMatrix<f64>,
    pub b_k2: DMatrix<f64>,
    pub c_k1: DMatrix<f64>,
    pub d_k1: DMatrix<f64>,
    pub d_k2: DMatrix<f64>,
    pub c_k2: DMatrix<f64>,
    pub d_k3: DMatrix<f64>,
    pub d_k4: DMatrix<f64>,
    pub phi: Nonlinearity,
}

/// Controller weights in loop-transformed coordinates (nonlinearity in
/// sector [-1, 1]). Field names mirror [`RenParams`]; the transformation is
/// carried by the type.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformedRenParams {
    pub a_k: DMatrix<f64>,
    pub b_k1: DMatrix<f64>,
    pub b_k2: DMatrix<f64>,
    pub c_k1: DMatrix<f64>,
    pub d_k1: DMatrix<f64>,
    pub d_k2: DMatrix<f64>,
    pub c_k2: DMatrix<f64>,
    pub d_k3: DMatrix<f64>,
    pub d_k4: DMatrix<f64>,
    pub phi: Nonlinearity,
}

/// Result of one controller step.
#[derive(Debug, Clone)]
pub struct ControllerStep {
    pub xi_next: DVector<f64>,
    pub u: DVector<f64>,
    pub z_star: DVector<f64>,
}

fn check_ren_dims(
    a_k: &DMatrix<f64>,
    b_k1: &DMatrix<f64>,
    b_k2: &DMatrix<f64>,
    c_k1: &DMatrix<f64>,
    d_k1: &DMatrix<f64>,
    d_k2: &DMatrix<f64>,
    c_k2: &DMatrix<f64>,
    d_k3: &DMatrix<f64>,
    d_k4: &DMatrix<f64>,
    phi_dim: usize,
) -> Result<RenDims> {
    let dims = RenDims {
        n_xi: a_k.nrows(),
        n_phi: b_k1.ncols(),
        n_u: c_k1.nrows(),
        n_y: b_k2.ncols(),
    };
    let RenDims { n_xi, n_phi, n_u, n_y } = dims;
    let ok = a_k.ncols() == n_xi
        && b_k1.nrows() == n_xi
        && b_k2.nrows() == n_xi
        && c_k1.ncols() == n_xi
        && d_k1.nrows() == n_u
        && d_k1.ncols() == n_phi
        && d_k2.nrows() == n_u
        && d_k2.ncols() == n_y
        && c_k2.nrows() == n_phi
        && c_k2.ncols() == n_xi
        && d_k3.nrows() == n_phi
        && d_k3.ncols() == n_phi
        && d_k4.nrows() == n_phi
        && d_k4.ncols() == n_y
        && phi_dim == n_phi;
    if !ok {
        return Err(Error::DimensionMismatch(format!(
            "controller blocks inconsistent (n_xi={n_xi}, n_phi={n_phi}, n_u={n_u}, n_y={n_y})"
        )));
    }
    Ok(dims)
}

impl RenParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        a_k: DMatrix<f64>,
        b_k1: DMatrix<f64>,
        b_k2: DMatrix<f64>,
        c_k1: DMatrix<f64>,
        d_k1: DMatrix<f64>,
        d_k2: DMatrix<f64>,
        c_k2: DMatrix<f64>,
        d_k3: DMatrix<f64>,
        d_k4: DMatrix<f64>,
        phi: Nonlinearity,
    ) -> Result<RenParams> {
        check_ren_dims(
            &a_k, &b_k1, &b_k2, &c_k1, &d_k1, &d_k2, &c_k2, &d_k3, &d_k4,
            phi.dim(),
        )?;
        if phi.is_normalized() {
            return Err(Error::Invalid(
                "RenParams holds the original-coordinates controller; \
                 its nonlinearity must not be pre-normalized"
                    .into(),
            ));
        }
        Ok(RenParams {
            a_k,
            b_k1,
            b_k2,
            c_k1,
            d_k1,
            d_k2,
            c_k2,
            d_k3,
            d_k4,
            phi,
        })
    }

    pub fn dims(&self) -> RenDims {
        RenDims {
            n_xi: self.a_k.nrows(),
            n_phi: self.b_k1.ncols(),
            n_u: self.c_k1.nrows(),
            n_y: self.b_k2.ncols(),
        }
    }

    /// Loop-transform into normalized coordinates. Fails when
    /// I - S_phi D_K3 is singular (the implicit layer's sector midpoint
    /// feedback is degenerate).
    pub fn loop_transformed(&self) -> Result<TransformedRenParams> {
        let n_phi = self.dims().n_phi;
        let s = DMatrix::from_diagonal(&self.phi.sector.midpoints());
        let l = DMatrix::from_diagonal(&self.phi.sector.half_widths());
        let eye = DMatrix::identity(n_phi, n_phi);
        // One factorization serves all three v-equation blocks:
        // [C~_K2 | D~_K3 | D~_K4] = (I - D_K3 S)^(-1) [C_K2 | D_K3 L | D_K4].
        let rhs = linalg::assemble_blocks(&[&[&self.c_k2, &(&self.d_k3 * &l), &self.d_k4]]);
        let r = linalg::solve(
            &(&eye - &self.d_k3 * &s),
            &rhs,
            "loop transform (I - D_K3 S_phi)",
        )?;
        let dims = self.dims();
        let c_k2_t = r.columns(0, dims.n_xi).into_owned();
        let d_k3_t = r.columns(dims.n_xi, n_phi).into_owned();
        let d_k4_t = r.columns(dims.n_xi + n_phi, dims.n_y).into_owned();

        let lift = |b: &DMatrix<f64>, d_row: &DMatrix<f64>| {
            // For the state and output rows: X~ = X + (row) S C~/D~ blocks.
            (
                b + d_row * &s * &c_k2_t,
                d_row * (&s * &d_k3_t + &l),
            )
        };
        let (a_k_t, b_k1_t) = lift(&self.a_k, &self.b_k1);
        let b_k2_t = &self.b_k2 + &self.b_k1 * &s * &d_k4_t;
        let (c_k1_t, d_k1_t) = lift(&self.c_k1, &self.d_k1);
        let d_k2_t = &self.d_k2 + &self.d_k1 * &s * &d_k4_t;

        TransformedRenParams::new(
            a_k_t,
            b_k1_t,
            b_k2_t,
            c_k1_t,
            d_k1_t,
            d_k2_t,
            c_k2_t,
            d_k3_t,
            d_k4_t,
            self.phi.normalized()?,
        )
    }

    /// One step of the original-form controller (solves the w-equation).
    /// Exists to witness the equivalence with the transformed form; the
    /// toolkit otherwise always steps the transformed controller.
    pub fn step(
        &self,
        xi: &DVector<f64>,
        y: &DVector<f64>,
        opts: &FixedPointOptions,
    ) -> Result<ControllerStep> {
        let c = &self.c_k2 * xi + &self.d_k4 * y;
        let f = |w: &DVector<f64>| self.phi.eval(&(&c + &self.d_k3 * w));
        let jac = |w: &DVector<f64>| {
            let dphi = self.phi.deriv_diag(&(&c + &self.d_k3 * w));
            DMatrix::from_fn(w.len(), w.len(), |i, j| dphi[i] * self.d_k3[(i, j)])
        };
        let w = solve_fixed_point_newton(f, jac, &DVector::zeros(self.dims().n_phi), opts)?.value;
        Ok(ControllerStep {
            xi_next: &self.a_k * xi + &self.b_k1 * &w + &self.b_k2 * y,
            u: &self.c_k1 * xi + &self.d_k1 * &w + &self.d_k2 * y,
            z_star: w,
        })
    }
}

impl TransformedRenParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        a_k: DMatrix<f64>,
        b_k1: DMatrix<f64>,
        b_k2: DMatrix<f64>,
        c_k1: DMatrix<f64>,
        d_k1: DMatrix<f64>,
        d_k2: DMatrix<f64>,
        c_k2: DMatrix<f64>,
        d_k3: DMatrix<f64>,
        d_k4: DMatrix<f64>,
        phi: Nonlinearity,
    ) -> Result<TransformedRenParams> {
        check_ren_dims(
            &a_k, &b_k1, &b_k2, &c_k1, &d_k1, &d_k2, &c_k2, &d_k3, &d_k4,
            phi.dim(),
        )?;
        for i in 0..phi.dim() {
            if phi.sector.alpha[i] < -1.0 - 1e-12 || phi.sector.beta[i] > 1.0 + 1e-12 {
                return Err(Error::Invalid(format!(
                    "transformed controller requires the nonlinearity inside \
                     the normalized sector [-1, 1]; channel {i} has [{}, {}]",
                    phi.sector.alpha[i], phi.sector.beta[i]
                )));
            }
        }
        Ok(TransformedRenParams {
            a_k,
            b_k1,
            b_k2,
            c_k1,
            d_k1,
            d_k2,
            c_k2,
            d_k3,
            d_k4,
            phi,
        })
    }

    /// All-zero weights with the given dimensions (useful as a neutral
    /// controller and for tests).
    pub fn zeros(dims: RenDims, phi: Nonlinearity) -> Result<TransformedRenParams> {
        let RenDims { n_xi, n_phi, n_u, n_y } = dims;
        TransformedRenParams::new(
            DMatrix::zeros(n_xi, n_xi),
            DMatrix::zeros(n_xi, n_phi),
            DMatrix::zeros(n_xi, n_y),
            DMatrix::zeros(n_u, n_xi),
            DMatrix::zeros(n_u, n_phi),
            DMatrix::zeros(n_u, n_y),
            DMatrix::zeros(n_phi, n_xi),
            DMatrix::zeros(n_phi, n_phi),
            DMatrix::zeros(n_phi, n_y),
            phi,
        )
    }

    pub fn dims(&self) -> RenDims {
        RenDims {
            n_xi: self.a_k.nrows(),
            n_phi: self.b_k1.ncols(),
            n_u: self.c_k1.nrows(),
            n_y: self.b_k2.ncols(),
        }
    }

    /// Invert the loop transformation back to original coordinates, using
    /// the shift/scale stored in the normalized nonlinearity. Derived by
    /// solving the forward relations:
    ///
    ///   G = D~_K3 L^(-1),  M~ = (I + G S)^(-1)
    ///   D_K3 = M~ G,  C_K2 = M~ C~_K2,  D_K4 = M~ D~_K4
    ///   B_K1 = B~_K1 L^(-1) (I - S D_K3),  A_K = A~_K - B~_K1 L^(-1) S C_K2,
    ///   B_K2 = B~_K2 - B~_K1 L^(-1) S D_K4   (and the u-row analogously).
    pub fn inverse_transformed(&self) -> Result<RenParams> {
        let dims = self.dims();
        let n_phi = dims.n_phi;
        let orig_sector = self.phi.original_sector();
        if orig_sector.has_degenerate_channel() {
            return Err(Error::Invalid(
                "inverse loop transform undefined for zero-width sector channels".into(),
            ));
        }
        let s = DMatrix::from_diagonal(&orig_sector.midpoints());
        let l_inv = DMatrix::from_diagonal(&orig_sector.half_widths().map(|x| 1.0 / x));
        let eye = DMatrix::identity(n_phi, n_phi);

        let g = &self.d_k3 * &l_inv;
        let m_tilde = linalg::inv(&(&eye + &g * &s), "inverse loop transform (I + D_K3 L^-1 S)")?;
        let d_k3 = &m_tilde * &g;
        let c_k2 = &m_tilde * &self.c_k2;
        let d_k4 = &m_tilde * &self.d_k4;

        let correction = &eye - &s * &d_k3;
        let h_xi = &self.b_k1 * &l_inv;
        let h_u = &self.d_k1 * &l_inv;

        let phi = Nonlinearity::new(self.phi.activation(), orig_sector)?;
        RenParams::new(
            &self.a_k - &h_xi * &s * &c_k2,
            &h_xi * &correction,
            &self.b_k2 - &h_xi * &s * &d_k4,
            &self.c_k1 - &h_u * &s * &c_k2,
            &h_u * &correction,
            &self.d_k2 - &h_u * &s * &d_k4,
            c_k2,
            d_k3,
            d_k4,
            phi,
        )
    }

    /// Solve the implicit layer z = phi_tilde(C~_K2 xi + D~_K3 z + D~_K4 y)
    /// from the given initial guess.
    pub fn solve_equilibrium_from(
        &self,
        xi: &DVector<f64>,
        y: &DVector<f64>,
        guess: &DVector<f64>,
        opts: &FixedPointOptions,
    ) -> Result<DVector<f64>> {
        let c = &self.c_k2 * xi + &self.d_k4 * y;
        let f = |z: &DVector<f64>| self.phi.eval(&(&c + &self.d_k3 * z));
        let jac = |z: &DVector<f64>| {
            let dphi = self.phi.deriv_diag(&(&c + &self.d_k3 * z));
            DMatrix::from_fn(z.len(), z.len(), |i, j| dphi[i] * self.d_k3[(i, j)])
        };
        Ok(solve_fixed_point_newton(f, jac, guess, opts)?.value)
    }

    /// Solve the implicit layer from a zero guess.
    pub fn solve_equilibrium(
        &self,
        xi: &DVector<f64>,
        y: &DVector<f64>,
        opts: &FixedPointOptions,
    ) -> Result<DVector<f64>> {
        self.solve_equilibrium_from(xi, y, &DVector::zeros(self.dims().n_phi), opts)
    }

    /// One controller step from state xi and measurement y.
    pub fn step(
        &self,
        xi: &DVector<f64>,
        y: &DVector<f64>,
        opts: &FixedPointOptions,
    ) -> Result<ControllerStep> {
        let z = self.solve_equilibrium(xi, y, opts)?;
        Ok(ControllerStep {
            xi_next: &self.a_k * xi + &self.b_k1 * &z + &self.b_k2 * y,
            u: &self.c_k1 * xi + &self.d_k1 * &z + &self.d_k2 * y,
            z_star: z,
        })
    }

    /// Exact sensitivities of the equilibrium z* via the implicit function
    /// theorem at a solved point.
    pub fn equilibrium_jacobian(
        &self,
        xi: &DVector<f64>,
        y: &DVector<f64>,
        z_star: &DVector<f64>,
    ) -> Result<EquilibriumJacobian> {
        let v = &self.c_k2 * xi + &self.d_k3 * z_star + &self.d_k4 * y;
        let dphi = self.phi.deriv_diag(&v);
        let n = self.dims().n_phi;
        // M_z = (I - phi' D~_K3)^(-1) phi'.
        let phi_d3 = DMatrix::from_fn(n, n, |i, j| dphi[i] * self.d_k3[(i, j)]);
        let m_z = linalg::solve(
            &(DMatrix::identity(n, n) - phi_d3),
            &DMatrix::from_diagonal(&dphi),
            "equilibrium Jacobian (I - phi' D_K3)",
        )?;
        Ok(EquilibriumJacobian {
            m_z,
            c_k2: self.c_k2.clone(),
            d_k4: self.d_k4.clone(),
        })
    }

    /// Canonical flattening of the nine weight matrices: row-major, in
    /// declaration order (A, B1, B2, C1, D1, D2, C2, D3, D4).
    pub fn pack_weights(&self) -> DVector<f64> {
        let mut v = Vec::with_capacity(packed_weights_len(self.dims()));
        for m in [
            &self.a_k, &self.b_k1, &self.b_k2, &self.c_k1, &self.d_k1,
            &self.d_k2, &self.c_k2, &self.d_k3, &self.d_k4,
        ] {
            v.extend(m.transpose().as_slice().iter());
        }
        DVector::from_vec(v)
    }

    /// Rebuild a controller from the canonical packing.
    pub fn from_packed_weights(
        dims: RenDims,
        v: &DVector<f64>,
        phi: Nonlinearity,
    ) -> Result<TransformedRenParams> {
        assert_eq!(v.len(), packed_weights_len(dims), "packed weight length");
        let RenDims { n_xi, n_phi, n_u, n_y } = dims;
        let mut off = 0;
        let mut take = |r: usize, c: usize| {
            let m = DMatrix::from_row_slice(r, c, &v.as_slice()[off..off + r * c]);
            off += r * c;
            m
        };
        TransformedRenParams::new(
            take(n_xi, n_xi),
            take(n_xi, n_phi),
            take(n_xi, n_y),
            take(n_u, n_xi),
            take(n_u, n_phi),
            take(n_u, n_y),
            take(n_phi, n_xi),
            take(n_phi, n_phi),
            take(n_phi, n_y),
            phi,
        )
    }

    /// Weighted operator norm |D~_K3| under diag(lambda): the contraction
    /// measure whose being < 1 guarantees a unique equilibrium for every
    /// slope-restricted [-1, 1] nonlinearity.
    pub fn contraction_margin(&self, lambda: &DVector<f64>) -> f64 {
        assert_eq!(lambda.len(), self.dims().n_phi, "multiplier dimension");
        assert!(lambda.iter().all(|&v| v > 0.0), "multipliers must be positive");
        let n = lambda.len();
        let scaled = DMatrix::from_fn(n, n, |i, j| {
            (lambda[i] / lambda[j]).sqrt() * self.d_k3[(i, j)]
        });
        linalg::spectral_norm(&scaled)
    }
}

/// Scalar count of the canonical weight packing for given dimensions.
pub fn packed_weights_len(dims: RenDims) -> usize {
    let RenDims { n_xi, n_phi, n_u, n_y } = dims;
    n_xi * (n_xi + n_phi + n_y) + n_u * (n_xi + n_phi + n_y) + n_phi * (n_xi + n_phi + n_y)
}

/// Sensitivity operator of the solved equilibrium: every requested
/// derivative factors through M_z = (I - phi' D~_K3)^(-1) phi'.
#[derive(Debug, Clone)]
pub struct EquilibriumJacobian {
    pub m_z: DMatrix<f64>,
    c_k2: DMatrix<f64>,
    d_k4: DMatrix<f64>,
}

impl EquilibriumJacobian {
    /// dz*/dxi = M_z C~_K2.
    pub fn wrt_xi(&self) -> DMatrix<f64> {
        &self.m_z * &self.c_k2
    }

    /// dz*/dy = M_z D~_K4.
    pub fn wrt_y(&self) -> DMatrix<f64> {
        &self.m_z * &self.d_k4
    }

    /// Directional derivative of z* for a simultaneous perturbation of the
    /// v-equation data: pass dv = dC~_K2 xi + dD~_K3 z* + dD~_K4 y (plus
    /// C~_K2 dxi + D~_K4 dy terms if states move too).
    pub fn direction(&self, dv: &DVector<f64>) -> DVector<f64> {
        &self.m_z * dv
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation::{Activation, SectorSpec};
    use nalgebra::{dmatrix, dvector};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn opts() -> FixedPointOptions {
        FixedPointOptions::default()
    }

    fn random_ren(rng: &mut ChaCha8Rng, dims: RenDims, phi: Nonlinearity) -> RenParams {
        let RenDims { n_xi, n_phi, n_u, n_y } = dims;
        let mut m = |r: usize, c: usize, s: f64| linalg::randn_matrix(rng, r, c, s);
        // D_K3 kept small so both the w- and z-equations are contractions.
        RenParams::new(
            m(n_xi, n_xi, 0.4),
            m(n_xi, n_phi, 0.5),
            m(n_xi, n_y, 0.5),
            m(n_u, n_xi, 0.5),
            m(n_u, n_phi, 0.5),
            m(n_u, n_y, 0.5),
            m(n_phi, n_xi, 0.5),
            m(n_phi, n_phi, 0.15),
            m(n_phi, n_y, 0.5),
            phi,
        )
        .unwrap()
    }

    #[test]
    fn identity_sector_transform_is_identity_on_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let phi = Nonlinearity::new(
            Activation::Tanh,
            SectorSpec::uniform(3, -1.0, 1.0).unwrap(),
        )
        .unwrap();
        let theta = random_ren(
            &mut rng,
            RenDims { n_xi: 2, n_phi: 3, n_u: 1, n_y: 2 },
            phi,
        );
        let t = theta.loop_transformed().unwrap();
        for (orig, tilde) in [
            (&theta.a_k, &t.a_k),
            (&theta.b_k1, &t.b_k1),
            (&theta.b_k2, &t.b_k2),
            (&theta.c_k1, &t.c_k1),
            (&theta.d_k1, &t.d_k1),
            (&theta.d_k2, &t.d_k2),
            (&theta.c_k2, &t.c_k2),
            (&theta.d_k3, &t.d_k3),
            (&theta.d_k4, &t.d_k4),
        ] {
            assert!((orig - tilde).abs().max() < 1e-14, "identity sector must not move weights");
        }
    }

    #[test]
    fn tanh_sector_with_zero_d_k3_matches_hand_formula() {
        // S = L = I/2 and M = I when D_K3 = 0, so A~_K = A_K + 0.5 B_K1 C_K2.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let phi = Nonlinearity::uniform(Activation::Tanh, 2);
        let mut theta = random_ren(
            &mut rng,
            RenDims { n_xi: 2, n_phi: 2, n_u: 1, n_y: 1 },
            phi,
        );
        theta.d_k3 = DMatrix::zeros(2, 2);
        let t = theta.loop_transformed().unwrap();
        let expect = &theta.a_k + 0.5 * &theta.b_k1 * &theta.c_k2;
        assert!((&t.a_k - expect).abs().max() < 1e-14);
        // B~_K1 = B_K1 L = 0.5 B_K1.
        assert!((&t.b_k1 - 0.5 * &theta.b_k1).abs().max() < 1e-14);
    }

    #[test]
    fn transform_round_trips_on_random_controllers() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for trial in 0..100 {
            let phi = Nonlinearity::uniform(Activation::Tanh, 3);
            let theta = random_ren(
                &mut rng,
                RenDims { n_xi: 2, n_phi: 3, n_u: 2, n_y: 1 },
                phi,
            );
            let back = theta.loop_transformed().unwrap().inverse_transformed().unwrap();
            for (a, b, name) in [
                (&theta.a_k, &back.a_k, "a_k"),
                (&theta.b_k1, &back.b_k1, "b_k1"),
                (&theta.b_k2, &back.b_k2, "b_k2"),
                (&theta.c_k1, &back.c_k1, "c_k1"),
                (&theta.d_k1, &back.d_k1, "d_k1"),
                (&theta.d_k2, &back.d_k2, "d_k2"),
                (&theta.c_k2, &back.c_k2, "c_k2"),
                (&theta.d_k3, &back.d_k3, "d_k3"),
                (&theta.d_k4, &back.d_k4, "d_k4"),
            ] {
                assert!(
                    (a - b).abs().max() <= 1e-10,
                    "round trip failed on {name} at trial {trial}: max err {}",
                    (a - b).abs().max()
                );
            }
        }
    }

    #[test]
    fn reverse_round_trip_from_transformed_side() {
        // theta~ -> theta -> theta~ must also close, exercising the inverse
        // on points not generated by a forward transform.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let phi = Nonlinearity::uniform(Activation::Tanh, 2).normalized().unwrap();
        let mut mats: Vec<DMatrix<f64>> = Vec::new();
        for (r, c) in [(2, 2), (2, 2), (2, 1), (1, 2), (1, 2), (1, 1), (2, 2), (2, 2), (2, 1)] {
            mats.push(linalg::randn_matrix(&mut rng, r, c, 0.3));
        }
        let t = TransformedRenParams::new(
            mats[0].clone(),
            mats[1].clone(),
            mats[2].clone(),
            mats[3].clone(),
            mats[4].clone(),
            mats[5].clone(),
            mats[6].clone(),
            mats[7].clone(),
            mats[8].clone(),
            phi,
        )
        .unwrap();
        let again = t.inverse_transformed().unwrap().loop_transformed().unwrap();
        assert!((&t.a_k - &again.a_k).abs().max() < 1e-10);
        assert!((&t.d_k3 - &again.d_k3).abs().max() < 1e-10);
        assert!((&t.d_k4 - &again.d_k4).abs().max() < 1e-10);
    }

    #[test]
    fn dual_form_rollouts_agree() {
        // Stepping the original controller (w-equation) and the transformed
        // controller (z-equation) from the same measurements must produce
        // identical states and inputs.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let phi = Nonlinearity::uniform(Activation::Tanh, 3);
        let theta = random_ren(
            &mut rng,
            RenDims { n_xi: 2, n_phi: 3, n_u: 1, n_y: 1 },
            phi,
        );
        let t = theta.loop_transformed().unwrap();
        let mut xi_a = DVector::zeros(2);
        let mut xi_b = DVector::zeros(2);
        for k in 0..200 {
            let y = dvector![(0.1 * k as f64).sin() + 0.3 * (0.031 * k as f64).cos()];
            let sa = theta.step(&xi_a, &y, &opts()).unwrap();
            let sb = t.step(&xi_b, &y, &opts()).unwrap();
            assert!(
                (&sa.u - &sb.u).norm() <= 1e-9,
                "inputs diverged at step {k}: {:?} vs {:?}",
                sa.u,
                sb.u
            );
            xi_a = sa.xi_next;
            xi_b = sb.xi_next;
            assert!((&xi_a - &xi_b).norm() <= 1e-9, "states diverged at step {k}");
        }
    }

    #[test]
    fn equilibrium_matches_bisection_on_scalar_layer() {
        // z = phi~(0.5 z + c) with phi~ the normalized tanh; bisection on
        // g(z) = phi~(0.5 z + c) - z is the oracle.
        let phi = Nonlinearity::uniform(Activation::Tanh, 1).normalized().unwrap();
        let t = TransformedRenParams::new(
            dmatrix![0.0],
            dmatrix![0.0],
            dmatrix![0.0],
            dmatrix![0.0],
            dmatrix![0.0],
            dmatrix![0.0],
            dmatrix![1.0],  // c_k2
            dmatrix![0.5],  // d_k3
            dmatrix![1.0],  // d_k4
            phi.clone(),
        )
        .unwrap();
        let (xi, y) = (dvector![0.4], dvector![0.3]);
        let c = 0.4 + 0.3;
        let g = |z: f64| phi.eval(&dvector![0.5 * z + c])[0] - z;
        let (mut lo, mut hi) = (-3.0, 3.0);
        assert!(g(lo) * g(hi) < 0.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if g(lo) * g(mid) <= 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let oracle = 0.5 * (lo + hi);
        let z = t.solve_equilibrium(&xi, &y, &opts().with_tol(1e-12)).unwrap();
        assert!(
            (z[0] - oracle).abs() <= 1e-10,
            "equilibrium {} vs bisection {}",
            z[0],
            oracle
        );
    }

    #[test]
    fn equilibrium_is_guess_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let phi = Nonlinearity::uniform(Activation::Tanh, 3).normalized().unwrap();
        let t = TransformedRenParams::new(
            linalg::randn_matrix(&mut rng, 2, 2, 0.3),
            linalg::randn_matrix(&mut rng, 2, 3, 0.3),
            linalg::randn_matrix(&mut rng, 2, 1, 0.3),
            linalg::randn_matrix(&mut rng, 1, 2, 0.3),
            linalg::randn_matrix(&mut rng, 1, 3, 0.3),
            linalg::randn_matrix(&mut rng, 1, 1, 0.3),
            linalg::randn_matrix(&mut rng, 3, 2, 0.5),
            linalg::randn_matrix(&mut rng, 3, 3, 0.2),
            linalg::randn_matrix(&mut rng, 3, 1, 0.5),
            phi,
        )
        .unwrap();
        let xi = dvector![0.7, -0.4];
        let y = dvector![0.9];
        let tol = 1e-12;
        let o = opts().with_tol(tol);
        let g1 = linalg::randn_vector(&mut rng, 3, 2.0);
        let g2 = linalg::randn_vector(&mut rng, 3, 2.0);
        let z1 = t.solve_equilibrium_from(&xi, &y, &g1, &o).unwrap();
        let z2 = t.solve_equilibrium_from(&xi, &y, &g2, &o).unwrap();
        assert!((&z1 - &z2).norm() <= 10.0 * tol);
    }

    #[test]
    fn zero_controller_steps_to_zero() {
        let phi = Nonlinearity::uniform(Activation::Tanh, 2).normalized().unwrap();
        let t = TransformedRenParams::zeros(
            RenDims { n_xi: 2, n_phi: 2, n_u: 1, n_y: 1 },
            phi,
        )
        .unwrap();
        let s = t.step(&dvector![0.0, 0.0], &dvector![5.0], &opts()).unwrap();
        assert_eq!(s.xi_next.norm(), 0.0);
        assert_eq!(s.u.norm(), 0.0);
        assert_eq!(s.z_star.norm(), 0.0);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..50 {
            let phi = Nonlinearity::uniform(Activation::Tanh, 2).normalized().unwrap();
            let t = TransformedRenParams::new(
                linalg::randn_matrix(&mut rng, 2, 2, 0.3),
                linalg::randn_matrix(&mut rng, 2, 2, 0.3),
                linalg::randn_matrix(&mut rng, 2, 1, 0.3),
                linalg::randn_matrix(&mut rng, 1, 2, 0.3),
                linalg::randn_matrix(&mut rng, 1, 2, 0.3),
                linalg::randn_matrix(&mut rng, 1, 1, 0.3),
                linalg::randn_matrix(&mut rng, 2, 2, 0.6),
                linalg::randn_matrix(&mut rng, 2, 2, 0.25),
                linalg::randn_matrix(&mut rng, 2, 1, 0.6),
                phi,
            )
            .unwrap();
            let xi = linalg::randn_vector(&mut rng, 2, 0.8);
            let y = linalg::randn_vector(&mut rng, 1, 0.8);
            let o = opts().with_tol(1e-13);
            let z = t.solve_equilibrium(&xi, &y, &o).unwrap();
            let jac = t.equilibrium_jacobian(&xi, &y, &z).unwrap();

            let h = 1e-6;
            let dzdxi = jac.wrt_xi();
            for j in 0..2 {
                let mut xp = xi.clone();
                let mut xm = xi.clone();
                xp[j] += h;
                xm[j] -= h;
                let zp = t.solve_equilibrium(&xp, &y, &o).unwrap();
                let zm = t.solve_equilibrium(&xm, &y, &o).unwrap();
                let fd = (&zp - &zm) / (2.0 * h);
                let an = dzdxi.column(j).into_owned();
                let denom = an.norm().max(1e-8);
                assert!(
                    (&fd - &an).norm() / denom <= 1e-5,
                    "trial {trial}: dz/dxi col {j} analytic {:?} vs fd {:?}",
                    an,
                    fd
                );
            }
            let dzdy = jac.wrt_y();
            let mut yp = y.clone();
            let mut ym = y.clone();
            yp[0] += h;
            ym[0] -= h;
            let zp = t.solve_equilibrium(&xi, &yp, &o).unwrap();
            let zm = t.solve_equilibrium(&xi, &ym, &o).unwrap();
            let fd = (&zp - &zm) / (2.0 * h);
            let an = dzdy.column(0).into_owned();
            assert!((&fd - &an).norm() / an.norm().max(1e-8) <= 1e-5);

            // Parameter direction: perturb one entry of D~_K3.
            let mut dd3 = DMatrix::zeros(2, 2);
            dd3[(0, 1)] = 1.0;
            let an = jac.direction(&(&dd3 * &z));
            let mut tp = t.clone();
            tp.d_k3[(0, 1)] += h;
            let mut tm = t.clone();
            tm.d_k3[(0, 1)] -= h;
            let zp = tp.solve_equilibrium(&xi, &y, &o).unwrap();
            let zm = tm.solve_equilibrium(&xi, &y, &o).unwrap();
            let fd = (&zp - &zm) / (2.0 * h);
            assert!(
                (&fd - &an).norm() / an.norm().max(1e-8) <= 1e-5,
                "trial {trial}: parameter direction mismatch"
            );
        }
    }

    #[test]
    fn jacobian_collapses_to_chain_rule_without_feedback() {
        // D~_K3 = 0: dz/dy = phi' D~_K4 with no implicit correction.
        let phi = Nonlinearity::uniform(Activation::Tanh, 2).normalized().unwrap();
        let mut t = TransformedRenParams::zeros(
            RenDims { n_xi: 1, n_phi: 2, n_u: 1, n_y: 2 },
            phi.clone(),
        )
        .unwrap();
        t.d_k4 = dmatrix![1.0, 0.5; -0.3, 0.2];
        let xi = dvector![0.0];
        let y = dvector![0.4, -0.7];
        let z = t.solve_equilibrium(&xi, &y, &opts()).unwrap();
        let jac = t.equilibrium_jacobian(&xi, &y, &z).unwrap();
        let v = &t.d_k4 * &y;
        let dphi = phi.deriv_diag(&v);
        let expect = DMatrix::from_fn(2, 2, |i, j| dphi[i] * t.d_k4[(i, j)]);
        assert!((jac.wrt_y() - expect).abs().max() < 1e-12);
    }

    #[test]
    fn jacobian_geometric_series_in_the_linear_regime() {
        // Normalized relu is the identity for positive inputs, so with all
        // signals positive the Jacobian is exactly (I - D~_K3)^(-1) D~_K4.
        let phi = Nonlinearity::uniform(Activation::Relu, 2).normalized().unwrap();
        let mut t = TransformedRenParams::zeros(
            RenDims { n_xi: 1, n_phi: 2, n_u: 1, n_y: 2 },
            phi,
        )
        .unwrap();
        t.d_k3 = dmatrix![0.3, 0.1; 0.0, 0.4];
        t.d_k4 = dmatrix![1.0, 0.0; 0.0, 1.0];
        let xi = dvector![0.0];
        let y = dvector![2.0, 3.0]; // drives v well into the positive regime
        let z = t.solve_equilibrium(&xi, &y, &opts()).unwrap();
        let jac = t.equilibrium_jacobian(&xi, &y, &z).unwrap();
        let expect = (DMatrix::identity(2, 2) - &t.d_k3)
            .try_inverse()
            .unwrap();
        assert!((jac.wrt_y() - expect).abs().max() < 1e-10);
    }

    #[test]
    fn contraction_margin_hand_checked_values() {
        let phi = Nonlinearity::uniform(Activation::Tanh, 2).normalized().unwrap();
        let mut t = TransformedRenParams::zeros(
            RenDims { n_xi: 1, n_phi: 2, n_u: 1, n_y: 1 },
            phi,
        )
        .unwrap();
        assert_eq!(t.contraction_margin(&dvector![1.0, 1.0]), 0.0);

        t.d_k3 = dmatrix![0.3, 0.0; 0.0, 0.3];
        for lam in [dvector![1.0, 1.0], dvector![2.0, 0.5], dvector![7.0, 0.1]] {
            assert!(
                (t.contraction_margin(&lam) - 0.3).abs() < 1e-12,
                "scalar multiples of I are similarity invariant"
            );
        }

        // Lambda = diag(1,4), D = [[0,1],[0,0]]: scaled matrix [[0, 1/2],[0,0]].
        t.d_k3 = dmatrix![0.0, 1.0; 0.0, 0.0];
        assert!((t.contraction_margin(&dvector![1.0, 4.0]) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn weight_packing_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let phi = Nonlinearity::uniform(Activation::Tanh, 3);
        let ren = random_ren(&mut rng, RenDims { n_xi: 2, n_phi: 3, n_u: 1, n_y: 2 }, phi);
        let t = ren.loop_transformed().unwrap();
        let packed = t.pack_weights();
        assert_eq!(packed.len(), packed_weights_len(t.dims()));
        let back =
            TransformedRenParams::from_packed_weights(t.dims(), &packed, t.phi.clone()).unwrap();
        assert_eq!(back.pack_weights(), packed);
        assert!((&back.a_k - &t.a_k).abs().max() == 0.0);
        assert!((&back.d_k3 - &t.d_k3).abs().max() == 0.0);
        // Row-major convention: the second entry is A's (0, 1) element.
        assert_eq!(packed[1], t.a_k[(0, 1)]);
    }
}
