//! Plant models: linear, sector-bounded-nonlinear, and implicit neural.
//!
//! Three plant descriptions share one simulation contract:
//!
//! - [`PlantLti`]: x+ = A_G x + B_G u, y = C_G x.
//! - [`PlantSector`]: an LTI core in feedback with an elementwise
//!   sector-bounded nonlinearity,
//!     x+ = A_G x + B_G1 q + B_G2 u,  y = C_G1 x,
//!     q  = Delta(p),  p = C_G2 x + D_G3 q,
//!   where the q-equation is implicit whenever D_G3 is nonzero.
//! - [`ImplicitNnPlant`]: the same structure written as an implicit neural
//!   network F(x, u) = A x + B1 q' + B2 u with q' = Delta(C2 x + D3 q'),
//!   the form produced by system identification.
//!
//! The plant-side loop transformation normalizes Delta onto the sector
//! [-1, 1] while preserving input/output behavior exactly; certificates are
//! always stated in those coordinates. Sector channels with zero width
//! (alpha_i = beta_i) declare the channel to be the exact linear map
//! q_i = alpha_i p_i; such channels make the transformation singular, so a
//! dedicated constructor absorbs them into the linear part instead.

use nalgebra::{DMatrix, DVector};

use crate::activation::Nonlinearity;
use crate::error::{Error, Result};
use crate::implicit::{solve_fixed_point_newton, FixedPointOptions};
use crate::linalg;

/// Partially observed linear time-invariant plant.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantLti {
    pub a_g: DMatrix<f64>,
    pub b_g: DMatrix<f64>,
    pub c_g: DMatrix<f64>,
}

impl PlantLti {
    pub fn new(a_g: DMatrix<f64>, b_g: DMatrix<f64>, c_g: DMatrix<f64>) -> Result<PlantLti> {
        let n = a_g.nrows();
        if a_g.ncols() != n || b_g.nrows() != n || c_g.ncols() != n {
            return Err(Error::DimensionMismatch(format!(
                "LTI plant: A is {}x{}, B is {}x{}, C is {}x{}",
                a_g.nrows(),
                a_g.ncols(),
                b_g.nrows(),
                b_g.ncols(),
                c_g.nrows(),
                c_g.ncols()
            )));
        }
        let finite = a_g.iter().chain(b_g.iter()).chain(c_g.iter()).all(|v| v.is_finite());
        if !finite {
            return Err(Error::Invalid("LTI plant has non-finite entries".into()));
        }
        Ok(PlantLti { a_g, b_g, c_g })
    }

    pub fn n_x(&self) -> usize {
        self.a_g.nrows()
    }

    pub fn n_u(&self) -> usize {
        self.b_g.ncols()
    }

    pub fn n_y(&self) -> usize {
        self.c_g.nrows()
    }

    /// One simulation step; the output is computed from the pre-step state.
    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        assert_eq!(x.len(), self.n_x(), "state dimension");
        assert_eq!(u.len(), self.n_u(), "input dimension");
        (&self.a_g * x + &self.b_g * u, &self.c_g * x)
    }
}

/// Result of one [`PlantSector`] step.
#[derive(Debug, Clone)]
pub struct SectorStep {
    pub x_next: DVector<f64>,
    /// Output y = C_G1 x from the pre-step state.
    pub y: DVector<f64>,
    /// Nonlinearity input p = C_G2 x + D_G3 q'.
    pub p: DVector<f64>,
    /// Nonlinearity output solving q' = Delta(p).
    pub q_prime: DVector<f64>,
}

/// LTI core in feedback with an elementwise sector-bounded nonlinearity.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantSector {
    pub a_g: DMatrix<f64>,
    pub b_g1: DMatrix<f64>,
    pub b_g2: DMatrix<f64>,
    pub c_g1: DMatrix<f64>,
    pub c_g2: DMatrix<f64>,
    pub d_g3: DMatrix<f64>,
    pub delta: Nonlinearity,
}

impl PlantSector {
    /// Validated constructor. Rejects zero-width sector channels (use
    /// [`PlantSector::new_absorbing_affine`] for those) and plants whose
    /// implicit q'-equation fails the contraction-based well-posedness test.
    pub fn new(
        a_g: DMatrix<f64>,
        b_g1: DMatrix<f64>,
        b_g2: DMatrix<f64>,
        c_g1: DMatrix<f64>,
        c_g2: DMatrix<f64>,
        d_g3: DMatrix<f64>,
        delta: Nonlinearity,
    ) -> Result<PlantSector> {
        if delta.sector.has_degenerate_channel() {
            return Err(Error::Invalid(
                "sector channel with alpha = beta: absorb affine channels \
                 with new_absorbing_affine before building the plant"
                    .into(),
            ));
        }
        let plant = PlantSector {
            a_g,
            b_g1,
            b_g2,
            c_g1,
            c_g2,
            d_g3,
            delta,
        };
        plant.check_dims()?;
        let gain = plant.implicit_loop_gain()?;
        if gain >= 1.0 {
            return Err(Error::Invalid(format!(
                "plant implicit loop is not a contraction after normalization \
                 (gain {gain:.6}); the q' equation may be ill-posed"
            )));
        }
        Ok(plant)
    }

    /// Constructor that first absorbs zero-width ("affine") sector channels
    /// into the linear part. A channel declared with alpha_i = beta_i = s is
    /// the exact map q_i = s p_i; eliminating it by linear algebra keeps the
    /// loop transformation invertible and shrinks the nonlinearity block.
    #[allow(clippy::too_many_arguments)]
    pub fn new_absorbing_affine(
        a_g: DMatrix<f64>,
        b_g1: DMatrix<f64>,
        b_g2: DMatrix<f64>,
        c_g1: DMatrix<f64>,
        c_g2: DMatrix<f64>,
        d_g3: DMatrix<f64>,
        delta: Nonlinearity,
    ) -> Result<PlantSector> {
        let n = delta.dim();
        let degenerate: Vec<usize> = (0..n)
            .filter(|&i| delta.sector.beta[i] == delta.sector.alpha[i])
            .collect();
        if degenerate.is_empty() {
            return PlantSector::new(a_g, b_g1, b_g2, c_g1, c_g2, d_g3, delta);
        }
        let kept: Vec<usize> = (0..n).filter(|i| !degenerate.contains(i)).collect();

        let select_rows = |m: &DMatrix<f64>, idx: &[usize]| -> DMatrix<f64> {
            DMatrix::from_fn(idx.len(), m.ncols(), |i, j| m[(idx[i], j)])
        };
        let select_cols = |m: &DMatrix<f64>, idx: &[usize]| -> DMatrix<f64> {
            DMatrix::from_fn(m.nrows(), idx.len(), |i, j| m[(i, idx[j])])
        };
        let select_both = |m: &DMatrix<f64>, ri: &[usize], ci: &[usize]| -> DMatrix<f64> {
            DMatrix::from_fn(ri.len(), ci.len(), |i, j| m[(ri[i], ci[j])])
        };

        // With q_D = S_D p_D on the degenerate channels, solve them out:
        //   q_D = T (C2_D x + D3_DK q_K),  T = (I - S_D D3_DD)^(-1) S_D.
        let s_d = DMatrix::from_diagonal(&DVector::from_iterator(
            degenerate.len(),
            degenerate.iter().map(|&i| delta.sector.alpha[i]),
        ));
        let d3_dd = select_both(&d_g3, &degenerate, &degenerate);
        let d3_dk = select_both(&d_g3, &degenerate, &kept);
        let d3_kd = select_both(&d_g3, &kept, &degenerate);
        let d3_kk = select_both(&d_g3, &kept, &kept);
        let c2_d = select_rows(&c_g2, &degenerate);
        let c2_k = select_rows(&c_g2, &kept);
        let b1_d = select_cols(&b_g1, &degenerate);
        let b1_k = select_cols(&b_g1, &kept);

        let eye_d = DMatrix::identity(degenerate.len(), degenerate.len());
        let t = linalg::solve(
            &(&eye_d - &s_d * &d3_dd),
            &s_d,
            "affine-channel elimination (I - S_D D3_DD)",
        )?;

        let a_new = &a_g + &b1_d * &t * &c2_d;
        let b1_new = &b1_k + &b1_d * &t * &d3_dk;
        let c2_new = &c2_k + &d3_kd * &t * &c2_d;
        let d3_new = &d3_kk + &d3_kd * &t * &d3_dk;
        let delta_new = delta.select_channels(&kept)?;

        PlantSector::new(a_new, b1_new, b_g2, c_g1, c2_new, d3_new, delta_new)
    }

    /// View an LTI plant as a sector plant with an empty nonlinearity block,
    /// so closed-loop assembly and certification share one code path.
    pub fn from_lti(plant: &PlantLti) -> PlantSector {
        let n = plant.n_x();
        PlantSector {
            a_g: plant.a_g.clone(),
            b_g1: DMatrix::zeros(n, 0),
            b_g2: plant.b_g.clone(),
            c_g1: plant.c_g.clone(),
            c_g2: DMatrix::zeros(0, n),
            d_g3: DMatrix::zeros(0, 0),
            delta: Nonlinearity::uniform(crate::activation::Activation::Tanh, 0),
        }
    }

    /// The inverted-pendulum benchmark discretized by forward Euler:
    /// state (angle from upright, angular velocity), torque input, measured
    /// angle, and the sector nonlinearity Delta(p) = p - sin(p) in [0, 2]
    /// carrying everything the linearization misses.
    pub fn inverted_pendulum(
        mass: f64,
        length: f64,
        friction: f64,
        dt: f64,
        gravity: f64,
    ) -> PlantSector {
        let inertia = mass * length * length;
        let a_g = DMatrix::from_row_slice(
            2,
            2,
            &[1.0, dt, gravity * dt / length, 1.0 - dt * friction / inertia],
        );
        let b_g1 = DMatrix::from_column_slice(2, 1, &[0.0, -gravity * dt / length]);
        let b_g2 = DMatrix::from_column_slice(2, 1, &[0.0, dt / inertia]);
        let c_g1 = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let c_g2 = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let d_g3 = DMatrix::zeros(1, 1);
        let delta = Nonlinearity::uniform(crate::activation::Activation::VMinusSin, 1);
        PlantSector::new(a_g, b_g1, b_g2, c_g1, c_g2, d_g3, delta)
            .expect("pendulum model is well-posed by construction")
    }

    /// The benchmark constants: m = 0.15 kg, l = 0.5 m, friction 0.5,
    /// sampling time 0.02 s, g = 9.81 m/s^2.
    pub fn pendulum_benchmark() -> PlantSector {
        PlantSector::inverted_pendulum(0.15, 0.5, 0.5, 0.02, 9.81)
    }

    fn check_dims(&self) -> Result<()> {
        let (n, nd, nu, ny) = (self.n_x(), self.n_delta(), self.n_u(), self.n_y());
        let ok = self.a_g.ncols() == n
            && self.b_g1.nrows() == n
            && self.b_g1.ncols() == nd
            && self.b_g2.nrows() == n
            && self.c_g1.ncols() == n
            && self.c_g1.nrows() == ny
            && self.c_g2.nrows() == nd
            && self.c_g2.ncols() == n
            && self.d_g3.nrows() == nd
            && self.d_g3.ncols() == nd
            && self.delta.dim() == nd;
        if !ok {
            return Err(Error::DimensionMismatch(format!(
                "sector plant blocks inconsistent (n_x={n}, n_delta={nd}, n_u={nu}, n_y={ny})"
            )));
        }
        Ok(())
    }

    pub fn n_x(&self) -> usize {
        self.a_g.nrows()
    }

    pub fn n_u(&self) -> usize {
        self.b_g2.ncols()
    }

    pub fn n_y(&self) -> usize {
        self.c_g1.nrows()
    }

    pub fn n_delta(&self) -> usize {
        self.b_g1.ncols()
    }

    /// Spectral norm of the normalized feedthrough (I - D_G3 S)^(-1) D_G3 L.
    /// A value < 1 makes the implicit q'-equation a contraction in the
    /// normalized coordinates, hence uniquely solvable.
    pub fn implicit_loop_gain(&self) -> Result<f64> {
        let nd = self.n_delta();
        if nd == 0 {
            return Ok(0.0);
        }
        let s = DMatrix::from_diagonal(&self.delta.sector.midpoints());
        let l = DMatrix::from_diagonal(&self.delta.sector.half_widths());
        let eye = DMatrix::identity(nd, nd);
        let d3_tilde = linalg::solve(
            &(&eye - &self.d_g3 * &s),
            &(&self.d_g3 * &l),
            "well-posedness test (I - D_G3 S)",
        )?;
        Ok(linalg::spectral_norm(&d3_tilde))
    }

    pub fn output(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.c_g1 * x
    }

    /// Solve q' = Delta(C_G2 x + D_G3 q') from the given initial guess.
    pub fn solve_implicit_from(
        &self,
        x: &DVector<f64>,
        guess: &DVector<f64>,
        opts: &FixedPointOptions,
    ) -> Result<DVector<f64>> {
        let cx = &self.c_g2 * x;
        let f = |q: &DVector<f64>| self.delta.eval(&(&cx + &self.d_g3 * q));
        let jac = |q: &DVector<f64>| {
            let dphi = self.delta.deriv_diag(&(&cx + &self.d_g3 * q));
            DMatrix::from_fn(q.len(), q.len(), |i, j| dphi[i] * self.d_g3[(i, j)])
        };
        Ok(solve_fixed_point_newton(f, jac, guess, opts)?.value)
    }

    /// One simulation step: solve the implicit nonlinearity channel, then
    /// advance the state. The output is computed from the pre-step state.
    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>, opts: &FixedPointOptions) -> Result<SectorStep> {
        assert_eq!(x.len(), self.n_x(), "state dimension");
        assert_eq!(u.len(), self.n_u(), "input dimension");
        let q_prime = self.solve_implicit_from(x, &DVector::zeros(self.n_delta()), opts)?;
        let p = &self.c_g2 * x + &self.d_g3 * &q_prime;
        let x_next = &self.a_g * x + &self.b_g1 * &q_prime + &self.b_g2 * u;
        Ok(SectorStep {
            x_next,
            y: self.output(x),
            p,
            q_prime,
        })
    }

    /// Loop-transform the plant so the nonlinearity lands in the normalized
    /// sector [-1, 1], preserving input/output behavior exactly:
    ///
    ///   A  <- A + B1 S (I - D3 S)^(-1) C2        B1 <- B1 (I - S D3)^(-1) L
    ///   C2 <- (I - D3 S)^(-1) C2                 D3 <- (I - D3 S)^(-1) D3 L
    ///
    /// with S, L the diagonal sector midpoints and half-widths; B2, C1 are
    /// untouched.
    pub fn loop_transformed(&self) -> Result<PlantSector> {
        if self.delta.is_normalized() {
            return Ok(self.clone());
        }
        let nd = self.n_delta();
        if nd == 0 {
            let mut out = self.clone();
            out.delta = self.delta.clone();
            return Ok(out);
        }
        let s = DMatrix::from_diagonal(&self.delta.sector.midpoints());
        let l = DMatrix::from_diagonal(&self.delta.sector.half_widths());
        let eye = DMatrix::identity(nd, nd);
        // (I - D3 S)^(-1) applied to C2 and D3 L.
        let m = linalg::inv(&(&eye - &self.d_g3 * &s), "loop transform (I - D_G3 S)")?;
        let c2_t = &m * &self.c_g2;
        let d3_t = &m * &self.d_g3 * &l;
        let a_t = &self.a_g + &self.b_g1 * &s * &c2_t;
        // B1 (I - S D3)^(-1) L = B1 (S D3_t + L) by the push-through identity.
        let b1_t = &self.b_g1 * (&s * &d3_t + &l);
        Ok(PlantSector {
            a_g: a_t,
            b_g1: b1_t,
            b_g2: self.b_g2.clone(),
            c_g1: self.c_g1.clone(),
            c_g2: c2_t,
            d_g3: d3_t,
            delta: self.delta.normalized()?,
        })
    }
}

/// Implicit neural state-space model x+ = A x + B1 q' + B2 u with
/// q' = Delta(C2 x + D3 q') and output y = C1 x.
#[derive(Debug, Clone, PartialEq)]
pub struct ImplicitNnPlant {
    pub a: DMatrix<f64>,
    pub b1: DMatrix<f64>,
    pub b2: DMatrix<f64>,
    pub c1: DMatrix<f64>,
    pub c2: DMatrix<f64>,
    pub d3: DMatrix<f64>,
    pub delta: Nonlinearity,
}

impl ImplicitNnPlant {
    pub fn new(
        a: DMatrix<f64>,
        b1: DMatrix<f64>,
        b2: DMatrix<f64>,
        c1: DMatrix<f64>,
        c2: DMatrix<f64>,
        d3: DMatrix<f64>,
        delta: Nonlinearity,
    ) -> Result<ImplicitNnPlant> {
        let nn = ImplicitNnPlant {
            a,
            b1,
            b2,
            c1,
            c2,
            d3,
            delta,
        };
        nn.check_dims()?;
        let norm = nn.d3_norm();
        if norm >= 1.0 {
            return Err(Error::Invalid(format!(
                "implicit network requires |D3| < 1 for a unique equilibrium, got {norm:.6}"
            )));
        }
        Ok(nn)
    }

    fn check_dims(&self) -> Result<()> {
        let (n, nq, nu, ny) = (self.n_x(), self.n_q(), self.n_u(), self.n_y());
        let ok = self.a.ncols() == n
            && self.b1.nrows() == n
            && self.b2.nrows() == n
            && self.c1.ncols() == n
            && self.c2.nrows() == nq
            && self.c2.ncols() == n
            && self.d3.nrows() == nq
            && self.d3.ncols() == nq
            && self.delta.dim() == nq;
        if !ok {
            return Err(Error::DimensionMismatch(format!(
                "implicit network blocks inconsistent (n_x={n}, n_q={nq}, n_u={nu}, n_y={ny})"
            )));
        }
        Ok(())
    }

    pub fn n_x(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_q(&self) -> usize {
        self.b1.ncols()
    }

    pub fn n_u(&self) -> usize {
        self.b2.ncols()
    }

    pub fn n_y(&self) -> usize {
        self.c1.nrows()
    }

    /// Spectral norm of D3, the well-posedness measure for the equilibrium
    /// layer (the identity-weighted instance of the weighted operator norm).
    pub fn d3_norm(&self) -> f64 {
        linalg::spectral_norm(&self.d3)
    }

    /// Solve the equilibrium layer q' = Delta(C2 x + D3 q').
    pub fn solve_equilibrium(
        &self,
        x: &DVector<f64>,
        guess: &DVector<f64>,
        opts: &FixedPointOptions,
    ) -> Result<DVector<f64>> {
        let cx = &self.c2 * x;
        let f = |q: &DVector<f64>| self.delta.eval(&(&cx + &self.d3 * q));
        let jac = |q: &DVector<f64>| {
            let dphi = self.delta.deriv_diag(&(&cx + &self.d3 * q));
            DMatrix::from_fn(q.len(), q.len(), |i, j| dphi[i] * self.d3[(i, j)])
        };
        Ok(solve_fixed_point_newton(f, jac, guess, opts)?.value)
    }

    /// F(x, u): next state through the equilibrium layer.
    pub fn forward(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        opts: &FixedPointOptions,
    ) -> Result<DVector<f64>> {
        let q = self.solve_equilibrium(x, &DVector::zeros(self.n_q()), opts)?;
        Ok(&self.a * x + &self.b1 * &q + &self.b2 * u)
    }

    /// One simulation step returning (x_next, y), y from the pre-step state.
    pub fn step(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        opts: &FixedPointOptions,
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        Ok((self.forward(x, u, opts)?, &self.c1 * x))
    }

    /// Reinterpret as a sector plant (the structures coincide member by
    /// member), enabling loop transformation and certification.
    pub fn as_sector_plant(&self) -> Result<PlantSector> {
        PlantSector::new(
            self.a.clone(),
            self.b1.clone(),
            self.b2.clone(),
            self.c1.clone(),
            self.c2.clone(),
            self.d3.clone(),
            self.delta.clone(),
        )
    }
}

/// Any of the three plant descriptions, as read from a plant file.
#[derive(Debug, Clone, PartialEq)]
pub enum PlantModel {
    Lti(PlantLti),
    Sector(PlantSector),
    ImplicitNn(ImplicitNnPlant),
}

impl PlantModel {
    pub fn n_x(&self) -> usize {
        match self {
            PlantModel::Lti(p) => p.n_x(),
            PlantModel::Sector(p) => p.n_x(),
            PlantModel::ImplicitNn(p) => p.n_x(),
        }
    }

    pub fn n_u(&self) -> usize {
        match self {
            PlantModel::Lti(p) => p.n_u(),
            PlantModel::Sector(p) => p.n_u(),
            PlantModel::ImplicitNn(p) => p.n_u(),
        }
    }

    pub fn n_y(&self) -> usize {
        match self {
            PlantModel::Lti(p) => p.n_y(),
            PlantModel::Sector(p) => p.n_y(),
            PlantModel::ImplicitNn(p) => p.n_y(),
        }
    }

    /// The unified sector-plant view used by certification (an LTI plant
    /// contributes an empty nonlinearity block).
    pub fn to_sector_form(&self) -> Result<PlantSector> {
        match self {
            PlantModel::Lti(p) => Ok(PlantSector::from_lti(p)),
            PlantModel::Sector(p) => Ok(p.clone()),
            PlantModel::ImplicitNn(p) => p.as_sector_plant(),
        }
    }

    /// One simulation step returning (x_next, y).
    pub fn step(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        opts: &FixedPointOptions,
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        match self {
            PlantModel::Lti(p) => Ok(p.step(x, u)),
            PlantModel::Sector(p) => {
                let s = p.step(x, u, opts)?;
                Ok((s.x_next, s.y))
            }
            PlantModel::ImplicitNn(p) => p.step(x, u, opts),
        }
    }
}

impl Nonlinearity {
    /// Keep only the listed channels (used by affine-channel absorption).
    pub fn select_channels(&self, idx: &[usize]) -> Result<Nonlinearity> {
        let pick = |v: &DVector<f64>| DVector::from_iterator(idx.len(), idx.iter().map(|&i| v[i]));
        let sector = crate::activation::SectorSpec::new(
            pick(&self.sector.alpha),
            pick(&self.sector.beta),
        )?;
        // Selecting channels of a plain map keeps the map plain; sectors and
        // flags follow the selected rows.
        let mut out = Nonlinearity::new(self.activation(), sector)?;
        out.slope_restricted = idx.iter().map(|&i| self.slope_restricted[i]).collect();
        Ok(out)
    }
}
