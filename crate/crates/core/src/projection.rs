//! Euclidean projection onto the stabilizing parameter set.
//!
//! The lifted controller parameters theta^ are feasible when the synthesis
//! inequality holds strictly, M(theta^) >= eps I. Because M is affine in
//! theta^ that set is convex, and the training loop keeps every iterate
//! inside it by Euclidean projection:
//!
//!   minimize   || theta^ - target ||_F^2
//!   subject to M(theta^) - eps I  in  PSD cone,
//!
//! a quadratic-objective semidefinite program. This module wraps the
//! feasible set as [`SynthesisSet`] (pencil cached, margins, membership,
//! projection, feasible sampling) and adds the plant-multiplier recentering
//! step: for fixed theta^, the inequality is also affine in the plant-side
//! sector multipliers, so maximizing the feasibility margin over them is a
//! second small conic program that can only improve the incumbent margin.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::convex::{
    assemble_synthesis_lmi, synthesis_lmi_expr, LmiExpr, SynthesisLayout, ThetaHat,
};
use crate::error::{Error, Result};
use crate::linalg;
use crate::plant::PlantSector;
use crate::sdp::ConicProgram;

/// Strictness scaled to the pencil's magnitude: eps = 1e-6 (1 + |tr F0|/n).
pub fn default_strictness(expr: &LmiExpr) -> f64 {
    1e-6 * (1.0 + expr.f0.trace().abs() / expr.dim as f64)
}

/// Result of one projection solve.
#[derive(Debug, Clone)]
pub struct Projected {
    /// The packed feasible point.
    pub theta: DVector<f64>,
    /// Frobenius distance from the target (0 when the target was interior).
    pub distance: f64,
    /// Feasibility margin lambda_min(M(theta)) of the returned point.
    pub margin: f64,
    /// False when the target was already strictly feasible and returned as is.
    pub solved: bool,
}

/// The stabilizing set {theta^ : M(theta^) >= eps I} for one plant, decay
/// rate, and fixed plant-side multipliers, with its pencil precomputed.
#[derive(Debug, Clone)]
pub struct SynthesisSet {
    pub layout: SynthesisLayout,
    pub rho: f64,
    pub lambda_delta: DVector<f64>,
    /// Strictness eps: membership means margin >= eps.
    pub strictness: f64,
    expr: LmiExpr,
}

impl SynthesisSet {
    /// Build the set for a plant, probing out the affine pencil once.
    /// Strictness defaults to [`default_strictness`].
    pub fn new(
        plant: &PlantSector,
        layout: SynthesisLayout,
        rho: f64,
        lambda_delta: DVector<f64>,
    ) -> Result<SynthesisSet> {
        if !(0.0 < rho && rho < 1.0) {
            return Err(Error::Invalid(format!(
                "decay rate must lie in (0, 1), got {rho}"
            )));
        }
        if lambda_delta.len() != layout.n_delta {
            return Err(Error::DimensionMismatch(
                "plant multiplier count does not match the layout".into(),
            ));
        }
        if lambda_delta.iter().any(|&l| l <= 0.0) {
            return Err(Error::Invalid(
                "plant-side multipliers must be strictly positive".into(),
            ));
        }
        let expr = synthesis_lmi_expr(plant, &layout, rho, &lambda_delta)?;
        let strictness = default_strictness(&expr);
        Ok(SynthesisSet {
            layout,
            rho,
            lambda_delta,
            strictness,
            expr,
        })
    }

    pub fn with_strictness(mut self, eps: f64) -> SynthesisSet {
        assert!(eps > 0.0, "strictness must be positive");
        self.strictness = eps;
        self
    }

    pub fn expr(&self) -> &LmiExpr {
        &self.expr
    }

    /// Feasibility margin lambda_min(M(theta)) of a packed point.
    pub fn margin(&self, theta: &DVector<f64>) -> f64 {
        linalg::lambda_min(&self.expr.value(theta))
    }

    /// Strict membership: margin >= eps.
    pub fn contains(&self, theta: &DVector<f64>) -> bool {
        self.margin(theta) >= self.strictness
    }

    /// Project a packed target onto the set in the (optionally weighted)
    /// Frobenius metric. Interior targets are returned unchanged without a
    /// solve. `weights` scales each packed parameter's contribution to the
    /// distance on top of the symmetric-block bookkeeping weights; pass
    /// `None` for the plain Frobenius metric.
    pub fn project(
        &self,
        target: &DVector<f64>,
        weights: Option<&DVector<f64>>,
        solver_tol: f64,
    ) -> Result<Projected> {
        let n = self.layout.num_params();
        assert_eq!(target.len(), n, "packed parameter length");
        let margin0 = self.margin(target);
        if margin0 >= self.strictness {
            return Ok(Projected {
                theta: target.clone(),
                distance: 0.0,
                margin: margin0,
                solved: false,
            });
        }
        let mut w = self.layout.frobenius_weights();
        if let Some(extra) = weights {
            assert_eq!(extra.len(), n, "weight length");
            assert!(extra.iter().all(|&x| x > 0.0), "weights must be positive");
            w.component_mul_assign(extra);
        }

        // Aim a small guard deeper than the strictness so the solver's own
        // cone tolerance cannot push the returned point below eps; the
        // guard scales like the pencil, matching [`default_strictness`].
        let scale = 1.0 + self.expr.f0.trace().abs() / self.expr.dim as f64;
        let mut guard = 1e-7 * scale;
        let mut tol = solver_tol;
        for attempt in 0..3 {
            let mut prog = ConicProgram::new(n);
            prog.set_quadratic_diag((2.0 * &w).as_slice());
            prog.set_linear_cost((-2.0 * w.component_mul(target)).as_slice());
            let shifted = &self.expr.f0
                - DMatrix::identity(self.expr.dim, self.expr.dim)
                    * (self.strictness + guard);
            let terms: Vec<(usize, &DMatrix<f64>)> =
                self.expr.basis.iter().enumerate().collect();
            prog.add_psd(&shifted, &terms);
            let sol = match prog.solve(tol) {
                // A set this thin has no room for the guard; drop it and
                // let the raw eps-feasibility program decide.
                Err(Error::Infeasible(_)) if guard > 0.0 => {
                    guard = 0.0;
                    continue;
                }
                other => other?,
            };
            let margin = self.margin(&sol.x);
            if margin >= self.strictness - 1e-8 {
                return Ok(Projected {
                    distance: self.layout.distance(&sol.x, target),
                    theta: sol.x,
                    margin,
                    solved: true,
                });
            }
            // The solver's cone tolerance and ours must agree; re-solve
            // tighter the one time numerical slack leaves the point outside.
            if attempt == 2 {
                return Err(Error::SolverFailure(format!(
                    "projection margin {margin} fell short of strictness {}",
                    self.strictness
                )));
            }
            tol /= 100.0;
        }
        unreachable!("projection retry loop returns or errors");
    }

    /// Draw a Gaussian point and project it: a reproducible strictly
    /// feasible starting iterate.
    pub fn sample(&self, seed: u64, solver_tol: f64) -> Result<DVector<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let draw = linalg::randn_vector(&mut rng, self.layout.num_params(), 1.0);
        Ok(self.project(&draw, None, solver_tol)?.theta)
    }
}

/// Feasibility margin of an unpacked bundle against a plant, without
/// building the pencil: lambda_min of the assembled inequality.
pub fn feasibility_margin(
    plant: &PlantSector,
    th: &ThetaHat,
    rho: f64,
    lambda_delta: &DVector<f64>,
) -> Result<f64> {
    Ok(linalg::lambda_min(&assemble_synthesis_lmi(
        plant,
        th,
        rho,
        lambda_delta,
    )?))
}

/// Re-center the plant-side sector multipliers: with theta^ held fixed the
/// synthesis inequality is affine in Lambda_Delta, so
///
///   maximize   t
///   subject to M(theta^; Lambda_Delta) - t I  in  PSD cone,
///              Lambda_Delta >= eps            (componentwise)
///
/// finds the multipliers of largest feasibility margin. Plants without
/// sector channels return the empty diagonal. The result never has a worse
/// margin than any fixed candidate, in particular the incumbent.
pub fn recenter_lambda(
    plant: &PlantSector,
    th: &ThetaHat,
    rho: f64,
    strictness: f64,
    solver_tol: f64,
) -> Result<DVector<f64>> {
    let p = plant.loop_transformed()?;
    let n_d = p.n_delta();
    if n_d == 0 {
        return Ok(DVector::zeros(0));
    }
    // Pencil of M in the multipliers alone.
    let g0 = assemble_synthesis_lmi(&p, th, rho, &DVector::zeros(n_d))?;
    let mut basis = Vec::with_capacity(n_d);
    let mut probe = DVector::zeros(n_d);
    for i in 0..n_d {
        probe[i] = 1.0;
        basis.push(assemble_synthesis_lmi(&p, th, rho, &probe)? - &g0);
        probe[i] = 0.0;
    }

    // Variables [lambda_delta; t], maximizing t.
    let mut prog = ConicProgram::new(n_d + 1);
    let mut lin = DVector::zeros(n_d + 1);
    lin[n_d] = -1.0;
    prog.set_linear_cost(lin.as_slice());
    let dim = g0.nrows();
    let neg_eye = -DMatrix::identity(dim, dim);
    let mut terms: Vec<(usize, &DMatrix<f64>)> =
        basis.iter().enumerate().collect();
    terms.push((n_d, &neg_eye));
    prog.add_psd(&g0, &terms);
    for i in 0..n_d {
        prog.add_nonneg_row(&[(i, 1.0)], -strictness);
    }
    let sol = prog.solve(solver_tol)?;
    Ok(sol.x.rows(0, n_d).into_owned())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation::{Activation, Nonlinearity};
    use crate::convex::recover_controller;
    use crate::implicit::FixedPointOptions;
    use crate::stability::ClosedLoop;
    use nalgebra::{dmatrix, dvector};
    use rand::{RngExt, SeedableRng};

    const TOL: f64 = 1e-9;

    fn scalar_plant() -> PlantSector {
        PlantSector::new(
            dmatrix![0.5],
            dmatrix![0.2],
            dmatrix![1.0],
            dmatrix![1.0],
            dmatrix![0.4],
            dmatrix![0.0],
            Nonlinearity::uniform(Activation::Tanh, 1),
        )
        .unwrap()
    }

    fn small_set() -> (PlantSector, SynthesisSet) {
        let plant = scalar_plant();
        let layout = SynthesisLayout::for_plant(&plant, 1);
        let set = SynthesisSet::new(&plant, layout, 0.95, dvector![1.0]).unwrap();
        (plant, set)
    }

    #[test]
    fn interior_targets_are_fixed_points() {
        let (_, set) = small_set();
        // A projected sample lands on the boundary; sampling from a deeper
        // set yields a point strictly inside this one.
        let deep = set.clone().with_strictness(100.0 * set.strictness);
        let feasible = deep.sample(3, TOL).unwrap();
        assert!(set.contains(&feasible));
        let again = set.project(&feasible, None, TOL).unwrap();
        assert!(!again.solved);
        assert_eq!(again.distance, 0.0);
        assert!((&again.theta - &feasible).abs().max() <= 1e-6);
    }

    #[test]
    fn projection_is_idempotent() {
        let (_, set) = small_set();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let target = linalg::randn_vector(&mut rng, set.layout.num_params(), 2.0);
        let once = set.project(&target, None, TOL).unwrap();
        assert!(once.margin >= set.strictness - 1e-8);
        let twice = set.project(&once.theta, None, TOL).unwrap();
        assert!(
            set.layout.distance(&once.theta, &twice.theta) <= 1e-6,
            "projection moved a projected point by {}",
            set.layout.distance(&once.theta, &twice.theta)
        );
    }

    #[test]
    fn projection_is_no_farther_than_sampled_feasible_points() {
        let (_, set) = small_set();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let target = linalg::randn_vector(&mut rng, set.layout.num_params(), 2.0);
        let proj = set.project(&target, None, TOL).unwrap();
        assert!(proj.solved, "target should start infeasible");
        for seed in 0..100 {
            let candidate = set.sample(seed, 1e-8).unwrap();
            let d = set.layout.distance(&target, &candidate);
            assert!(
                proj.distance <= d + 1e-7,
                "seed {seed}: sampled point at distance {d} beats projection at {}",
                proj.distance
            );
        }
    }

    #[test]
    fn sampling_is_deterministic_and_feasible() {
        let (_, set) = small_set();
        let a = set.sample(42, TOL).unwrap();
        let b = set.sample(42, TOL).unwrap();
        assert_eq!(a, b);
        assert!(set.margin(&a) >= set.strictness - 1e-8);
        let c = set.sample(43, TOL).unwrap();
        assert!((&a - &c).abs().max() > 1e-9, "different seeds should differ");
    }

    #[test]
    fn sampled_point_recovers_a_certified_simulating_controller() {
        let (plant, set) = small_set();
        let phi = Nonlinearity::uniform(Activation::Tanh, 1).normalized().unwrap();
        let theta = set.sample(5, TOL).unwrap();
        let th = set.layout.unpack(&theta);
        let rec = recover_controller(&plant, &th, &phi, set.rho, &set.lambda_delta, 0.0)
            .unwrap();
        let cl = ClosedLoop::assemble(&plant, &rec.controller).unwrap();
        rec.certificate.validate(&cl).unwrap();
        let opts = FixedPointOptions::default();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..10 {
            let x0 = dvector![rng.random_range(-1.0..1.0), 0.0];
            let traj = cl.simulate(&x0, 40, &opts).unwrap();
            for (k, zeta) in traj.iter().enumerate() {
                let bound = rec.certificate.envelope(x0.norm(), k);
                assert!(
                    zeta.norm() <= bound + 1e-9,
                    "envelope violated at step {k}: {} > {bound}",
                    zeta.norm()
                );
            }
        }
    }

    #[test]
    fn margin_is_concave_between_feasible_points() {
        let (_, set) = small_set();
        let a = set.sample(1, TOL).unwrap();
        let b = set.sample(2, TOL).unwrap();
        let mid = 0.5 * (&a + &b);
        let m_mid = set.margin(&mid);
        let m_avg = 0.5 * (set.margin(&a) + set.margin(&b));
        assert!(
            m_mid >= m_avg - 1e-10,
            "lambda_min of an affine family must be concave: {m_mid} < {m_avg}"
        );
    }

    /// The margin of a lifted bundle equals lambda_min of the raw
    /// Schur-lifted analysis inequality congruence-transformed by the
    /// block completion — built here independently, numbers in hand.
    #[test]
    fn margin_matches_congruence_chain_on_the_scalar_pipeline() {
        let plant = scalar_plant();
        let p_t = plant.loop_transformed().unwrap();
        let phi = Nonlinearity::uniform(Activation::Tanh, 1).normalized().unwrap();
        let layout = SynthesisLayout::for_plant(&plant, 1);
        let mut th = ThetaHat::zeros(&layout);
        th.x = dmatrix![2.0];
        th.y = dmatrix![1.0];
        th.lambda_phi = dvector![1.0];
        th.n[(0, 0)] = 2.0 * p_t.a_g[(0, 0)]; // X A~ Y: recovered controller is zero
        let rho = 0.95;
        let margin = feasibility_margin(&plant, &th, rho, &dvector![1.0]).unwrap();

        // Independent chain: zero controller, P = [[2, 2], [2, 4]] from
        // X = 2, Y = 1, U = X, V = X^(-1) - Y.
        let rec = recover_controller(&plant, &th, &phi, rho, &dvector![1.0], f64::INFINITY)
            .unwrap();
        let cl = ClosedLoop::assemble(&plant, &rec.controller).unwrap();
        let p_mat = dmatrix![2.0, 2.0; 2.0, 4.0];
        let lam = DMatrix::from_diagonal(&dvector![1.0, 1.0]);
        let pa = &p_mat * &cl.a;
        let pb = &p_mat * &cl.b;
        let lc = &lam * &cl.c;
        let ld = &lam * &cl.d;
        let z22 = DMatrix::zeros(2, 2);
        let rho2p = rho * rho * &p_mat;
        let pa_t = pa.transpose();
        let pb_t = pb.transpose();
        let lc_t = lc.transpose();
        let ld_t = ld.transpose();
        let lifted = linalg::assemble_blocks(&[
            &[&rho2p, &z22, &pa_t, &lc_t],
            &[&z22, &lam, &pb_t, &ld_t],
            &[&pa, &pb, &p_mat, &z22],
            &[&lc, &ld, &z22, &lam],
        ]);
        let y1 = dmatrix![1.0, 1.0; -0.5, 0.0];
        let eye2 = DMatrix::identity(2, 2);
        let t = linalg::block_diag(&linalg::block_diag(&y1, &eye2), &linalg::block_diag(&y1, &eye2));
        let oracle = linalg::lambda_min(&(t.transpose() * &lifted * &t));
        assert!(
            (margin - oracle).abs() <= 1e-9,
            "margin {margin} vs congruence oracle {oracle}"
        );
    }

    #[test]
    fn recentering_is_empty_for_plants_without_sector_channels() {
        use crate::plant::PlantLti;
        let lti = PlantLti::new(dmatrix![0.5], dmatrix![1.0], dmatrix![1.0]).unwrap();
        let plant = PlantSector::from_lti(&lti);
        let layout = SynthesisLayout::for_plant(&plant, 1);
        let set = SynthesisSet::new(&plant, layout, 0.95, DVector::zeros(0)).unwrap();
        let theta = set.sample(9, TOL).unwrap();
        let lam = recenter_lambda(&plant, &set.layout.unpack(&theta), 0.95, 1e-6, TOL).unwrap();
        assert_eq!(lam.len(), 0);
    }

    #[test]
    fn recentering_never_loses_to_the_incumbent() {
        let (plant, set) = small_set();
        let theta = set.sample(21, TOL).unwrap();
        let th = set.layout.unpack(&theta);
        let margin_eye = feasibility_margin(&plant, &th, set.rho, &dvector![1.0]).unwrap();
        let lam = recenter_lambda(&plant, &th, set.rho, 1e-6, TOL).unwrap();
        assert_eq!(lam.len(), 1);
        assert!(lam[0] >= 1e-6 - 1e-9);
        let margin_new = feasibility_margin(&plant, &th, set.rho, &lam).unwrap();
        assert!(
            margin_new >= margin_eye - 1e-7,
            "recentering lost margin: {margin_new} < {margin_eye}"
        );
    }

    #[test]
    fn recentering_matches_a_grid_search() {
        let (plant, set) = small_set();
        let theta = set.sample(33, TOL).unwrap();
        let th = set.layout.unpack(&theta);
        let lam = recenter_lambda(&plant, &th, set.rho, 1e-6, TOL).unwrap();
        let margin_solver = feasibility_margin(&plant, &th, set.rho, &lam).unwrap();

        let eval = |l: f64| feasibility_margin(&plant, &th, set.rho, &dvector![l]).unwrap();
        // Coarse sweep, then refine around the best cell.
        let mut best = (1e-6, eval(1e-6));
        let mut l = 1e-6;
        while l <= 5.0 {
            let m = eval(l);
            if m > best.1 {
                best = (l, m);
            }
            l += 0.01;
        }
        let mut fine_best = best;
        let lo = (best.0 - 0.02).max(1e-6);
        let mut l = lo;
        while l <= best.0 + 0.02 {
            let m = eval(l);
            if m > fine_best.1 {
                fine_best = (l, m);
            }
            l += 1e-5;
        }
        assert!(
            (margin_solver - fine_best.1).abs() <= 1e-4,
            "solver margin {margin_solver} vs grid maximum {} at lambda = {}",
            fine_best.1,
            fine_best.0
        );
        assert!(margin_solver >= fine_best.1 - 1e-6, "solver must not lose to the grid");
    }

    #[test]
    fn default_strictness_tracks_problem_scale() {
        let (_, set) = small_set();
        let eps = default_strictness(set.expr());
        assert!(eps >= 1e-6);
        assert!(eps < 1e-4, "scalar problem strictness should stay near 1e-6");
    }
}
