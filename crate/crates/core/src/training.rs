//! Projected policy-gradient training with a stability guarantee at every
//! iterate.
//!
//! The loop alternates three phases. A *gradient* phase estimates
//! d(mean reward)/d(theta^) by recovering the controller from the lifted
//! parameters, rolling the closed loop out from a batch of initial states,
//! and propagating tangents through plant step, equilibrium layer, and
//! recovery map (or by central finite differences on theta^). A *projection*
//! phase returns the stepped point to the stabilizing set, so the iterate
//! used for the next rollouts is always certifiable. For plants with sector
//! nonlinearities a *re-centering* phase then re-optimizes the plant-side
//! multipliers to maximize the feasibility margin at the new iterate —
//! never before a projection in the same iteration.
//!
//! Rewards are summed over an inclusive horizon, R = sum_{k=0..=T} r(x_k,
//! u_k, k), and a termination predicate zeroes every reward from the first
//! violating state onward, so surviving the horizon is itself worth the
//! per-step bias the built-in oracles carry.
//!
//! Gradients treat the termination time as locally constant (the indicator
//! is piecewise constant in the parameters), which is exact almost
//! everywhere; finite-difference checks should therefore use oracles whose
//! rollouts do not terminate.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::activation::{Activation, Nonlinearity};
use crate::convex::{recover_controller, recovered_dims, recovery_jacobian, SynthesisLayout};
use crate::error::{Error, Result};
use crate::implicit::FixedPointOptions;
use crate::linalg;
use crate::plant::PlantSector;
use crate::projection::{recenter_lambda, SynthesisSet};
use crate::ren::{packed_weights_len, RenDims, TransformedRenParams};
use crate::stability::{ClosedLoop, StabilityCertificate};

type RewardFn = dyn Fn(&DVector<f64>, &DVector<f64>, usize) -> f64 + Send + Sync;
type RewardGradFn = dyn Fn(&DVector<f64>, &DVector<f64>, usize) -> DVector<f64> + Send + Sync;
type TerminateFn = dyn Fn(&DVector<f64>) -> bool + Send + Sync;

/// A reward signal: a per-step callable, an inclusive horizon, and an
/// optional termination predicate on the plant state.
pub struct RewardOracle {
    reward: Box<RewardFn>,
    grad_x: Option<Box<RewardGradFn>>,
    grad_u: Option<Box<RewardGradFn>>,
    terminate: Option<Box<TerminateFn>>,
    /// Inclusive rollout horizon: rewards are earned at k = 0..=horizon.
    pub horizon: usize,
}

impl RewardOracle {
    pub fn new<F>(horizon: usize, reward: F) -> RewardOracle
    where
        F: Fn(&DVector<f64>, &DVector<f64>, usize) -> f64 + Send + Sync + 'static,
    {
        RewardOracle {
            reward: Box::new(reward),
            grad_x: None,
            grad_u: None,
            terminate: None,
            horizon,
        }
    }

    /// Attach analytic reward gradients (else analytic policy gradients
    /// fall back to central differences on the reward arguments).
    pub fn with_gradients<Gx, Gu>(mut self, grad_x: Gx, grad_u: Gu) -> RewardOracle
    where
        Gx: Fn(&DVector<f64>, &DVector<f64>, usize) -> DVector<f64> + Send + Sync + 'static,
        Gu: Fn(&DVector<f64>, &DVector<f64>, usize) -> DVector<f64> + Send + Sync + 'static,
    {
        self.grad_x = Some(Box::new(grad_x));
        self.grad_u = Some(Box::new(grad_u));
        self
    }

    pub fn with_termination<T>(mut self, terminate: T) -> RewardOracle
    where
        T: Fn(&DVector<f64>) -> bool + Send + Sync + 'static,
    {
        self.terminate = Some(Box::new(terminate));
        self
    }

    pub fn without_termination(mut self) -> RewardOracle {
        self.terminate = None;
        self
    }

    /// The two built-in rewards, by registry name:
    ///
    /// - `"bias-effort"`: r = 4 - u'u, termination at |x_1| >= pi;
    /// - `"bias-quadratic"`: r = 5 - x'Qx - u'Ru with Q = diag(1, 0.1),
    ///   R = 0.01 I, termination at |x_1| >= pi.
    ///
    /// The additive biases make survival to the horizon valuable, since
    /// termination forfeits them.
    pub fn builtin(name: &str, horizon: usize) -> Result<RewardOracle> {
        match name {
            "bias-effort" => Ok(RewardOracle::new(horizon, |_x, u, _k| 4.0 - u.norm_squared())
                .with_gradients(
                    |x, _u, _k| DVector::zeros(x.len()),
                    |_x, u, _k| -2.0 * u,
                )
                .with_termination(|x| x[0].abs() >= std::f64::consts::PI)),
            "bias-quadratic" => {
                let q = [1.0, 0.1];
                let r = 0.01;
                Ok(RewardOracle::new(horizon, move |x, u, _k| {
                    let xq: f64 = x.iter().enumerate().map(|(i, v)| q[i.min(1)] * v * v).sum();
                    5.0 - xq - r * u.norm_squared()
                })
                .with_gradients(
                    move |x, _u, _k| {
                        DVector::from_fn(x.len(), |i, _| -2.0 * q[i.min(1)] * x[i])
                    },
                    move |_x, u, _k| -2.0 * r * u,
                )
                .with_termination(|x| x[0].abs() >= std::f64::consts::PI))
            }
            other => Err(Error::Invalid(format!(
                "unknown reward oracle '{other}' (have: bias-effort, bias-quadratic)"
            ))),
        }
    }

    pub fn reward(&self, x: &DVector<f64>, u: &DVector<f64>, k: usize) -> f64 {
        (self.reward)(x, u, k)
    }

    pub fn terminated(&self, x: &DVector<f64>) -> bool {
        self.terminate.as_ref().is_some_and(|t| t(x))
    }

    fn reward_grad_x(&self, x: &DVector<f64>, u: &DVector<f64>, k: usize) -> DVector<f64> {
        if let Some(g) = &self.grad_x {
            return g(x, u, k);
        }
        central_diff(x, |xx| self.reward(xx, u, k))
    }

    fn reward_grad_u(&self, x: &DVector<f64>, u: &DVector<f64>, k: usize) -> DVector<f64> {
        if let Some(g) = &self.grad_u {
            return g(x, u, k);
        }
        central_diff(u, |uu| self.reward(x, uu, k))
    }
}

fn central_diff<F: Fn(&DVector<f64>) -> f64>(at: &DVector<f64>, f: F) -> DVector<f64> {
    let h = 1e-6;
    let mut g = DVector::zeros(at.len());
    let mut probe = at.clone();
    for i in 0..at.len() {
        probe[i] = at[i] + h;
        let plus = f(&probe);
        probe[i] = at[i] - h;
        let minus = f(&probe);
        probe[i] = at[i];
        g[i] = (plus - minus) / (2.0 * h);
    }
    g
}

/// Everything one closed-loop rollout produced.
#[derive(Debug, Clone)]
pub struct RolloutRecord {
    /// Plant states x(0..=end).
    pub states: Vec<DVector<f64>>,
    /// Controller states xi(0..=end).
    pub ctrl_states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
    pub outputs: Vec<DVector<f64>>,
    /// Equilibrium solutions z* per earned step.
    pub equilibria: Vec<DVector<f64>>,
    /// Per-step rewards actually earned (empty past termination).
    pub rewards: Vec<f64>,
    /// First step whose state violated the termination predicate.
    pub termination_step: Option<usize>,
    pub total_reward: f64,
}

/// Roll the interconnection of a plant (stepped with its true
/// nonlinearity) and a controller out from x(0) = x0, xi(0) = 0. Rewards
/// accrue at k = 0..=horizon until the termination predicate fires.
pub fn rollout(
    plant: &PlantSector,
    ctrl: &TransformedRenParams,
    x0: &DVector<f64>,
    oracle: &RewardOracle,
    opts: &FixedPointOptions,
) -> Result<RolloutRecord> {
    assert_eq!(x0.len(), plant.n_x(), "initial state dimension");
    let dims = ctrl.dims();
    assert_eq!(dims.n_u, plant.n_u(), "controller output dimension");
    assert_eq!(dims.n_y, plant.n_y(), "controller input dimension");
    let mut x = x0.clone();
    let mut xi = DVector::zeros(dims.n_xi);
    let mut rec = RolloutRecord {
        states: vec![x.clone()],
        ctrl_states: vec![xi.clone()],
        inputs: Vec::new(),
        outputs: Vec::new(),
        equilibria: Vec::new(),
        rewards: Vec::new(),
        termination_step: None,
        total_reward: 0.0,
    };
    for k in 0..=oracle.horizon {
        if oracle.terminated(&x) {
            rec.termination_step = Some(k);
            break;
        }
        let y = plant.output(&x);
        let cs = ctrl.step(&xi, &y, opts)?;
        rec.rewards.push(oracle.reward(&x, &cs.u, k));
        rec.outputs.push(y);
        rec.equilibria.push(cs.z_star);
        if k < oracle.horizon {
            let ps = plant.step(&x, &cs.u, opts)?;
            x = ps.x_next;
            xi = cs.xi_next;
            rec.states.push(x.clone());
            rec.ctrl_states.push(xi.clone());
        }
        rec.inputs.push(cs.u);
    }
    rec.total_reward = rec.rewards.iter().sum();
    Ok(rec)
}

/// How the policy gradient is estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradientMode {
    /// Tangent propagation through rollout and recovery map.
    Analytic,
    /// Central differences on the lifted parameters, h = 1e-6.
    FiniteDifference,
}

/// The fixed data of a gradient evaluation: which plant defines the
/// recovery chain (and certification), which plant is rolled out, and the
/// controller's shape.
pub struct GradientContext<'a> {
    /// Plant whose sector model defines the stabilizing set and recovery.
    pub projection_plant: &'a PlantSector,
    /// Plant stepped during rollouts (often the same object).
    pub rollout_plant: &'a PlantSector,
    pub layout: SynthesisLayout,
    /// Normalized controller nonlinearity.
    pub phi: Nonlinearity,
    pub rho: f64,
    pub lambda_delta: DVector<f64>,
    pub opts: FixedPointOptions,
}

impl GradientContext<'_> {
    fn recover(&self, theta_hat: &DVector<f64>) -> Result<TransformedRenParams> {
        Ok(recover_controller(
            self.projection_plant,
            &self.layout.unpack(theta_hat),
            &self.phi,
            self.rho,
            &self.lambda_delta,
            f64::INFINITY,
        )?
        .controller)
    }

    /// Mean total reward of the recovered controller over a batch.
    pub fn mean_reward(
        &self,
        theta_hat: &DVector<f64>,
        oracle: &RewardOracle,
        x0s: &[DVector<f64>],
    ) -> Result<f64> {
        let ctrl = self.recover(theta_hat)?;
        let mut acc = 0.0;
        for x0 in x0s {
            acc += rollout(self.rollout_plant, &ctrl, x0, oracle, &self.opts)?.total_reward;
        }
        Ok(acc / x0s.len() as f64)
    }

    /// d(mean total reward)/d(theta^) over the batch.
    pub fn policy_gradient(
        &self,
        theta_hat: &DVector<f64>,
        oracle: &RewardOracle,
        x0s: &[DVector<f64>],
        mode: GradientMode,
    ) -> Result<DVector<f64>> {
        assert!(!x0s.is_empty(), "gradient needs at least one initial state");
        match mode {
            GradientMode::FiniteDifference => {
                let h = 1e-6;
                let n = self.layout.num_params();
                let mut g = DVector::zeros(n);
                let mut probe = theta_hat.clone();
                for j in 0..n {
                    probe[j] = theta_hat[j] + h;
                    let plus = self.mean_reward(&probe, oracle, x0s)?;
                    probe[j] = theta_hat[j] - h;
                    let minus = self.mean_reward(&probe, oracle, x0s)?;
                    probe[j] = theta_hat[j];
                    g[j] = (plus - minus) / (2.0 * h);
                }
                Ok(g)
            }
            GradientMode::Analytic => {
                let th = self.layout.unpack(theta_hat);
                let ctrl = self.recover(theta_hat)?;
                let jac = recovery_jacobian(self.projection_plant, &th)?;
                let dims = recovered_dims(&self.layout);
                let n_tilde = packed_weights_len(dims);
                let mut g_tilde = DVector::zeros(n_tilde);
                for x0 in x0s {
                    g_tilde += reward_gradient_weights(
                        self.rollout_plant,
                        &ctrl,
                        x0,
                        oracle,
                        &self.opts,
                    )?;
                }
                g_tilde /= x0s.len() as f64;
                Ok(jac.transpose() * g_tilde)
            }
        }
    }
}

/// Per-direction controller weight perturbation, in packing order.
struct CtrlTangent {
    a_k: DMatrix<f64>,
    b_k1: DMatrix<f64>,
    b_k2: DMatrix<f64>,
    c_k1: DMatrix<f64>,
    d_k1: DMatrix<f64>,
    d_k2: DMatrix<f64>,
    c_k2: DMatrix<f64>,
    d_k3: DMatrix<f64>,
    d_k4: DMatrix<f64>,
}

impl CtrlTangent {
    fn basis(dims: RenDims, idx: usize) -> CtrlTangent {
        let RenDims { n_xi, n_phi, n_u, n_y } = dims;
        let shapes = [
            (n_xi, n_xi),
            (n_xi, n_phi),
            (n_xi, n_y),
            (n_u, n_xi),
            (n_u, n_phi),
            (n_u, n_y),
            (n_phi, n_xi),
            (n_phi, n_phi),
            (n_phi, n_y),
        ];
        let mut mats: Vec<DMatrix<f64>> = shapes
            .iter()
            .map(|&(r, c)| DMatrix::zeros(r, c))
            .collect();
        let mut off = 0;
        for (m, &(r, c)) in mats.iter_mut().zip(shapes.iter()) {
            if idx < off + r * c {
                let local = idx - off;
                m[(local / c, local % c)] = 1.0; // row-major, matching pack_weights
                break;
            }
            off += r * c;
        }
        let mut it = mats.into_iter();
        CtrlTangent {
            a_k: it.next().unwrap(),
            b_k1: it.next().unwrap(),
            b_k2: it.next().unwrap(),
            c_k1: it.next().unwrap(),
            d_k1: it.next().unwrap(),
            d_k2: it.next().unwrap(),
            c_k2: it.next().unwrap(),
            d_k3: it.next().unwrap(),
            d_k4: it.next().unwrap(),
        }
    }
}

/// Stored per-step primal data for tangent propagation.
struct StepTrace {
    xi: DVector<f64>,
    y: DVector<f64>,
    z: DVector<f64>,
    grad_x: DVector<f64>,
    grad_u: DVector<f64>,
    /// dz*/d(equation data) operator M_z at the solved point.
    m_z: DMatrix<f64>,
    jac_xi: DMatrix<f64>,
    jac_y: DMatrix<f64>,
    /// Effective plant state map A + B1 (I - Delta' D3)^(-1) Delta' C2 at
    /// this step (empty on the final step).
    a_eff: Option<DMatrix<f64>>,
}

/// d(total reward)/d(packed controller weights) for one rollout, by
/// forward-mode tangent propagation along the stored primal trajectory.
fn reward_gradient_weights(
    plant: &PlantSector,
    ctrl: &TransformedRenParams,
    x0: &DVector<f64>,
    oracle: &RewardOracle,
    opts: &FixedPointOptions,
) -> Result<DVector<f64>> {
    let dims = ctrl.dims();
    // Primal pass, storing what the tangents need.
    let mut traces: Vec<StepTrace> = Vec::with_capacity(oracle.horizon + 1);
    let mut x = x0.clone();
    let mut xi = DVector::zeros(dims.n_xi);
    for k in 0..=oracle.horizon {
        if oracle.terminated(&x) {
            break;
        }
        let y = plant.output(&x);
        let cs = ctrl.step(&xi, &y, opts)?;
        let ej = ctrl.equilibrium_jacobian(&xi, &y, &cs.z_star)?;
        let grad_x = oracle.reward_grad_x(&x, &cs.u, k);
        let grad_u = oracle.reward_grad_u(&x, &cs.u, k);
        let mut a_eff = None;
        let mut x_next = x.clone();
        if k < oracle.horizon {
            let ps = plant.step(&x, &cs.u, opts)?;
            // q' = Delta(p) with p = C2 x + D3 q': the state tangent flows
            // through m_q = (I - Delta'(p) D3)^(-1) Delta'(p).
            let n_d = plant.n_delta();
            let eff = if n_d == 0 {
                plant.a_g.clone()
            } else {
                let dphi = plant.delta.deriv_diag(&ps.p);
                let phi_d3 =
                    DMatrix::from_fn(n_d, n_d, |i, j| dphi[i] * plant.d_g3[(i, j)]);
                let m_q = linalg::solve(
                    &(DMatrix::identity(n_d, n_d) - phi_d3),
                    &DMatrix::from_diagonal(&dphi),
                    "plant tangent (I - Delta' D_G3)",
                )?;
                &plant.a_g + &plant.b_g1 * &m_q * &plant.c_g2
            };
            a_eff = Some(eff);
            x_next = ps.x_next;
        }
        traces.push(StepTrace {
            xi: xi.clone(),
            y,
            z: cs.z_star,
            grad_x,
            grad_u,
            jac_xi: ej.wrt_xi(),
            jac_y: ej.wrt_y(),
            m_z: ej.m_z,
            a_eff,
        });
        x = x_next;
        xi = cs.xi_next;
    }

    // Tangent pass per basis direction of the packed weights.
    let n_tilde = packed_weights_len(dims);
    let mut g = DVector::zeros(n_tilde);
    for dir in 0..n_tilde {
        let d = CtrlTangent::basis(dims, dir);
        let mut dx = DVector::zeros(plant.n_x());
        let mut dxi = DVector::zeros(dims.n_xi);
        let mut acc = 0.0;
        for tr in &traces {
            let dy = &plant.c_g1 * &dx;
            let dv = &d.c_k2 * &tr.xi + &d.d_k3 * &tr.z + &d.d_k4 * &tr.y;
            let dz = &tr.m_z * dv + &tr.jac_xi * &dxi + &tr.jac_y * &dy;
            let du = &d.c_k1 * &tr.xi
                + &ctrl.c_k1 * &dxi
                + &d.d_k1 * &tr.z
                + &ctrl.d_k1 * &dz
                + &d.d_k2 * &tr.y
                + &ctrl.d_k2 * &dy;
            acc += tr.grad_x.dot(&dx) + tr.grad_u.dot(&du);
            if let Some(a_eff) = &tr.a_eff {
                let dxi_next = &d.a_k * &tr.xi
                    + &ctrl.a_k * &dxi
                    + &d.b_k1 * &tr.z
                    + &ctrl.b_k1 * &dz
                    + &d.b_k2 * &tr.y
                    + &ctrl.b_k2 * &dy;
                dx = a_eff * &dx + &plant.b_g2 * &du;
                dxi = dxi_next;
            }
        }
        g[dir] = acc;
    }
    Ok(g)
}

/// Phases of one training iteration, for loop-order inspection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Gradient,
    Project,
    Recenter,
}

/// One history row per iteration (row 0 is the initial sample).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecord {
    pub iteration: usize,
    /// Mean total reward on the fixed evaluation batch.
    pub mean_reward: f64,
    /// Feasibility margin of the iterate after projection/re-centering.
    pub lmi_margin: f64,
    pub grad_norm: f64,
    pub projection_distance: f64,
    /// Seconds since training started.
    pub wall_time: f64,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub rho: f64,
    /// Controller nonlinearity channels (controller order equals the
    /// projection plant's state dimension).
    pub n_phi: usize,
    pub activation: Activation,
    /// Per-dimension sampling interval for initial plant states.
    pub x0_box: Vec<(f64, f64)>,
    pub learning_rate: f64,
    pub grad_mode: GradientMode,
    /// Fresh initial states drawn per gradient estimate.
    pub batch: usize,
    pub iterations: usize,
    pub seed: u64,
    /// Feasibility strictness; `None` picks the scale-aware default.
    pub strictness: Option<f64>,
    /// Size of the fixed evaluation batch behind `mean_reward`.
    pub eval_batch: usize,
    /// Re-center plant multipliers after each projection (sector plants).
    pub recenter: bool,
    /// Halve the learning rate whenever evaluation reward drops.
    pub halve_on_decrease: bool,
    pub solver_tol: f64,
}

impl TrainConfig {
    pub fn new(rho: f64, n_phi: usize, x0_box: Vec<(f64, f64)>) -> TrainConfig {
        TrainConfig {
            rho,
            n_phi,
            activation: Activation::Tanh,
            x0_box,
            learning_rate: 1e-3,
            grad_mode: GradientMode::Analytic,
            batch: 16,
            iterations: 10,
            seed: 0,
            strictness: None,
            eval_batch: 16,
            recenter: true,
            halve_on_decrease: false,
            solver_tol: 1e-9,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    /// Lifted parameters of the best evaluation iterate.
    pub theta_hat: DVector<f64>,
    pub controller: TransformedRenParams,
    pub certificate: StabilityCertificate,
    /// Plant-side multipliers in force at the best iterate.
    pub lambda_delta: DVector<f64>,
    pub history: Vec<TrainRecord>,
    /// (iteration, phase) sequence, for loop-order assertions.
    pub trace: Vec<(usize, Phase)>,
    pub best_iteration: usize,
}

fn draw_box(rng: &mut ChaCha8Rng, x0_box: &[(f64, f64)]) -> DVector<f64> {
    DVector::from_iterator(
        x0_box.len(),
        x0_box.iter().map(|&(lo, hi)| {
            if lo == hi {
                lo
            } else {
                rng.random_range(lo..hi)
            }
        }),
    )
}

/// Check one simulated closed-loop trajectory against the certificate's
/// decay envelope.
fn validate_envelope(
    cl: &ClosedLoop,
    cert: &StabilityCertificate,
    zeta0: &DVector<f64>,
    steps: usize,
    opts: &FixedPointOptions,
) -> Result<()> {
    let traj = cl.simulate(zeta0, steps, opts)?;
    let z0 = zeta0.norm();
    for (k, zeta) in traj.iter().enumerate() {
        let bound = cert.envelope(z0, k);
        let norm = zeta.norm();
        if norm > bound + 1e-8 * (1.0 + z0) {
            return Err(Error::EnvelopeViolation {
                step: k,
                norm,
                bound,
            });
        }
    }
    Ok(())
}

/// Run the projected policy-gradient loop. `projection_plant` defines the
/// stabilizing set, certification, and recovery; `rollout_plant` is what
/// rewards are collected on (pass the same plant unless the stabilizing set
/// comes from an identified model). Returns the best evaluation iterate
/// together with its certificate; every iterate along the way was
/// certified and envelope-checked before being rolled out.
pub fn train(
    projection_plant: &PlantSector,
    rollout_plant: &PlantSector,
    config: &TrainConfig,
    oracle: &RewardOracle,
) -> Result<TrainResult> {
    if config.x0_box.len() != rollout_plant.n_x() {
        return Err(Error::DimensionMismatch(format!(
            "initial-state box has {} dimensions, rollout plant has {}",
            config.x0_box.len(),
            rollout_plant.n_x()
        )));
    }
    if projection_plant.n_u() != rollout_plant.n_u()
        || projection_plant.n_y() != rollout_plant.n_y()
    {
        return Err(Error::DimensionMismatch(
            "projection and rollout plants disagree on the controller interface".into(),
        ));
    }
    if config.batch == 0 || config.eval_batch == 0 {
        return Err(Error::Invalid("batch sizes must be positive".into()));
    }
    let start = Instant::now();
    let opts = FixedPointOptions::default();
    let layout = SynthesisLayout::for_plant(projection_plant, config.n_phi);
    let phi = Nonlinearity::uniform(config.activation, config.n_phi).normalized()?;
    let mut lambda_delta = DVector::from_element(layout.n_delta, 1.0);
    let mut set = SynthesisSet::new(
        projection_plant,
        layout,
        config.rho,
        lambda_delta.clone(),
    )?;
    if let Some(eps) = config.strictness {
        set = set.with_strictness(eps);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut theta = set.sample(config.seed, config.solver_tol)?;

    let eval_x0s: Vec<DVector<f64>> = (0..config.eval_batch)
        .map(|_| draw_box(&mut rng, &config.x0_box))
        .collect();
    let validation_x0 = if config.x0_box.len() == projection_plant.n_x() {
        let x0 = draw_box(&mut rng, &config.x0_box);
        let mut zeta = DVector::zeros(layout.n_state());
        zeta.rows_mut(0, x0.len()).copy_from(&x0);
        zeta
    } else {
        DVector::from_element(layout.n_state(), 1.0 / (layout.n_state() as f64).sqrt())
    };

    let mut ctx = GradientContext {
        projection_plant,
        rollout_plant,
        layout,
        phi: phi.clone(),
        rho: config.rho,
        lambda_delta: lambda_delta.clone(),
        opts,
    };

    let certify = |theta: &DVector<f64>,
                   lam: &DVector<f64>|
     -> Result<(TransformedRenParams, StabilityCertificate)> {
        let rec = recover_controller(
            projection_plant,
            &layout.unpack(theta),
            &phi,
            config.rho,
            lam,
            0.0,
        )?;
        let cl = ClosedLoop::assemble(projection_plant, &rec.controller)?;
        validate_envelope(&cl, &rec.certificate, &validation_x0, 50, &opts)?;
        Ok((rec.controller, rec.certificate))
    };

    let (ctrl0, cert0) = certify(&theta, &lambda_delta)?;
    let reward0 = ctx.mean_reward(&theta, oracle, &eval_x0s)?;
    let mut history = vec![TrainRecord {
        iteration: 0,
        mean_reward: reward0,
        lmi_margin: set.margin(&theta),
        grad_norm: 0.0,
        projection_distance: 0.0,
        wall_time: start.elapsed().as_secs_f64(),
    }];
    let mut trace = Vec::new();
    let mut best = (reward0, theta.clone(), ctrl0, cert0, lambda_delta.clone(), 0usize);
    let mut lr = config.learning_rate;
    let mut prev_reward = reward0;

    for iter in 1..=config.iterations {
        let batch: Vec<DVector<f64>> = (0..config.batch)
            .map(|_| draw_box(&mut rng, &config.x0_box))
            .collect();
        trace.push((iter, Phase::Gradient));
        let grad = ctx.policy_gradient(&theta, oracle, &batch, config.grad_mode)?;
        let stepped = &theta + lr * &grad;
        trace.push((iter, Phase::Project));
        let proj = set.project(&stepped, None, config.solver_tol)?;
        theta = proj.theta;
        if config.recenter && layout.n_delta > 0 {
            trace.push((iter, Phase::Recenter));
            let lam = recenter_lambda(
                projection_plant,
                &layout.unpack(&theta),
                config.rho,
                set.strictness,
                config.solver_tol,
            )?;
            lambda_delta = lam;
            set = SynthesisSet::new(projection_plant, layout, config.rho, lambda_delta.clone())?
                .with_strictness(set.strictness);
            ctx.lambda_delta = lambda_delta.clone();
        }
        let (ctrl, cert) = certify(&theta, &lambda_delta)?;
        let mean_reward = ctx.mean_reward(&theta, oracle, &eval_x0s)?;
        if config.halve_on_decrease && mean_reward < prev_reward {
            lr *= 0.5;
        }
        prev_reward = mean_reward;
        if mean_reward > best.0 {
            best = (
                mean_reward,
                theta.clone(),
                ctrl,
                cert,
                lambda_delta.clone(),
                iter,
            );
        }
        history.push(TrainRecord {
            iteration: iter,
            mean_reward,
            lmi_margin: set.margin(&theta),
            grad_norm: grad.norm(),
            projection_distance: proj.distance,
            wall_time: start.elapsed().as_secs_f64(),
        });
    }

    let (_, theta_hat, controller, certificate, lambda_best, best_iteration) = best;
    Ok(TrainResult {
        theta_hat,
        controller,
        certificate,
        lambda_delta: lambda_best,
        history,
        trace,
        best_iteration,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation::Activation;
    use nalgebra::{dmatrix, dvector};

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

    fn scalar_context<'a>(
        plant: &'a PlantSector,
        n_phi: usize,
        lambda_delta: DVector<f64>,
    ) -> GradientContext<'a> {
        GradientContext {
            projection_plant: plant,
            rollout_plant: plant,
            layout: SynthesisLayout::for_plant(plant, n_phi),
            phi: Nonlinearity::uniform(Activation::Tanh, n_phi).normalized().unwrap(),
            rho: 0.95,
            lambda_delta,
            opts: FixedPointOptions::default(),
        }
    }

    #[test]
    fn builtin_rewards_match_hand_values() {
        let effort = RewardOracle::builtin("bias-effort", 10).unwrap();
        assert_eq!(effort.reward(&dvector![0.0, 0.0], &dvector![0.5], 3), 3.75);
        assert!(effort.terminated(&dvector![3.2, 0.0]));
        assert!(!effort.terminated(&dvector![3.1, 0.0]));
        let quad = RewardOracle::builtin("bias-quadratic", 10).unwrap();
        let r = quad.reward(&dvector![1.0, 2.0], &dvector![0.5], 0);
        assert!((r - (5.0 - 1.4 - 0.0025)).abs() < 1e-12);
        assert!(RewardOracle::builtin("nope", 1).is_err());
    }

    #[test]
    fn zero_controller_at_the_origin_earns_the_full_survival_bias() {
        let plant = PlantSector::pendulum_benchmark();
        let phi = Nonlinearity::uniform(Activation::Tanh, 4).normalized().unwrap();
        let dims = RenDims { n_xi: 2, n_phi: 4, n_u: 1, n_y: 1 };
        let ctrl = TransformedRenParams::zeros(dims, phi).unwrap();
        let oracle = RewardOracle::builtin("bias-effort", 200).unwrap();
        let rec = rollout(
            &plant,
            &ctrl,
            &dvector![0.0, 0.0],
            &oracle,
            &FixedPointOptions::default(),
        )
        .unwrap();
        assert_eq!(rec.termination_step, None);
        assert_eq!(rec.rewards.len(), 201);
        assert_eq!(rec.total_reward, 804.0);
        assert_eq!(rec.states.len(), 201);
        assert!(rec.inputs.iter().all(|u| u.norm() == 0.0));
    }

    #[test]
    fn termination_zeroes_rewards_and_truncates_the_record() {
        let plant = PlantSector::pendulum_benchmark();
        let phi = Nonlinearity::uniform(Activation::Tanh, 2).normalized().unwrap();
        let dims = RenDims { n_xi: 2, n_phi: 2, n_u: 1, n_y: 1 };
        let ctrl = TransformedRenParams::zeros(dims, phi).unwrap();
        let oracle = RewardOracle::builtin("bias-effort", 200).unwrap();
        let opts = FixedPointOptions::default();
        // A fast fall through the hanging position crosses the pi fence
        // before friction can arrest it.
        let x0 = dvector![3.0, 8.0];
        let rec = rollout(&plant, &ctrl, &x0, &oracle, &opts).unwrap();
        let l = rec.termination_step.expect("trajectory should terminate");
        assert!(l > 0 && l < 200);
        assert_eq!(rec.rewards.len(), l);
        assert_eq!(rec.states.len(), l + 1);
        assert!(oracle.terminated(&rec.states[l]));
        assert!(!oracle.terminated(&rec.states[l - 1]));
        assert!((rec.total_reward - rec.rewards.iter().sum::<f64>()).abs() < 1e-12);
        // The earned prefix agrees with an unterminated oracle's rollout.
        let free = RewardOracle::builtin("bias-effort", 200).unwrap().without_termination();
        let rec_free = rollout(&plant, &ctrl, &x0, &free, &opts).unwrap();
        for k in 0..l {
            assert_eq!(rec.rewards[k], rec_free.rewards[k]);
        }
        assert!(rec_free.total_reward > rec.total_reward);
    }

    #[test]
    fn zero_horizon_with_state_only_reward_has_zero_gradient() {
        let plant = scalar_plant();
        let ctx = scalar_context(&plant, 1, dvector![1.0]);
        let oracle = RewardOracle::new(0, |x, _u, _k| x[0] * x[0]);
        let set = SynthesisSet::new(&plant, ctx.layout, ctx.rho, dvector![1.0]).unwrap();
        let theta = set.sample(2, 1e-9).unwrap();
        let x0s = vec![dvector![0.7], dvector![-0.3]];
        let g_a = ctx
            .policy_gradient(&theta, &oracle, &x0s, GradientMode::Analytic)
            .unwrap();
        let g_f = ctx
            .policy_gradient(&theta, &oracle, &x0s, GradientMode::FiniteDifference)
            .unwrap();
        assert_eq!(g_a.norm(), 0.0);
        assert_eq!(g_f.norm(), 0.0);
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let plant = PlantSector::pendulum_benchmark();
        let ctx = GradientContext {
            projection_plant: &plant,
            rollout_plant: &plant,
            layout: SynthesisLayout::for_plant(&plant, 2),
            phi: Nonlinearity::uniform(Activation::Tanh, 2).normalized().unwrap(),
            rho: 0.95,
            lambda_delta: dvector![1.0],
            opts: FixedPointOptions::default(),
        };
        let oracle = RewardOracle::new(10, |x, u, _k| {
            -(x[0] * x[0]) - 0.1 * u.norm_squared()
        });
        let set = SynthesisSet::new(&plant, ctx.layout, ctx.rho, dvector![1.0]).unwrap();
        let theta = set.sample(4, 1e-9).unwrap();
        let x0s = vec![dvector![0.5, -0.2], dvector![-0.8, 0.4]];
        let g_a = ctx
            .policy_gradient(&theta, &oracle, &x0s, GradientMode::Analytic)
            .unwrap();
        let g_f = ctx
            .policy_gradient(&theta, &oracle, &x0s, GradientMode::FiniteDifference)
            .unwrap();
        let rel = (&g_a - &g_f).norm() / g_f.norm();
        assert!(
            rel <= 1e-4,
            "analytic vs finite-difference relative error {rel}"
        );
    }

    /// On a single-step rollout with r = -u'u the chain rule through the
    /// recovery of the equilibrium-layer weights is short enough to write
    /// down by hand; the gradient entries for lambda_phi, the lifted D3/D4
    /// blocks, and the direct D1 block must match it.
    #[test]
    fn single_step_effort_gradient_matches_hand_chain_rule() {
        let plant = scalar_plant();
        let ctx = scalar_context(&plant, 1, dvector![1.0]);
        let set = SynthesisSet::new(&plant, ctx.layout, ctx.rho, dvector![1.0]).unwrap();
        let theta = set.sample(6, 1e-9).unwrap();
        let oracle = RewardOracle::new(0, |_x, u, _k| -u.norm_squared());
        let x0 = dvector![0.7];
        let g = ctx
            .policy_gradient(&theta, &oracle, &[x0.clone()], GradientMode::Analytic)
            .unwrap();

        let th = ctx.layout.unpack(&theta);
        let ctrl = recover_controller(&plant, &th, &ctx.phi, ctx.rho, &dvector![1.0], f64::INFINITY)
            .unwrap()
            .controller;
        let opts = FixedPointOptions::default().with_tol(1e-13);
        let y = plant.output(&x0);
        let xi = DVector::zeros(1);
        let z = ctrl.solve_equilibrium(&xi, &y, &opts).unwrap();
        let m_z = ctrl.equilibrium_jacobian(&xi, &y, &z).unwrap().m_z[(0, 0)];
        let u = (&ctrl.d_k1 * &z + &ctrl.d_k2 * &y)[0];
        let lam = th.lambda_phi[0];
        let d1 = ctrl.d_k1[(0, 0)];

        // Packed layout for n_g = n_u = n_y = n_phi = 1:
        // [X, Y, N(4), lambda, D1, N^12, N^21, D^3, D^4].
        let dr_d1 = -2.0 * u * z[0];
        let dr_lam = -2.0 * u * d1 * m_z * (-1.0 / (lam * lam))
            * (th.d_hat_3[(0, 0)] * z[0] + th.d_hat_4[(0, 0)] * y[0]);
        let dr_d3 = -2.0 * u * d1 * m_z * z[0] / lam;
        let dr_d4 = -2.0 * u * d1 * m_z * y[0] / lam;
        for (idx, hand) in [(7, dr_d1), (6, dr_lam), (10, dr_d3), (11, dr_d4)] {
            assert!(
                (g[idx] - hand).abs() <= 1e-8 * (1.0 + hand.abs()),
                "entry {idx}: analytic {} vs hand {}",
                g[idx],
                hand
            );
        }
    }

    #[test]
    fn zero_iterations_returns_the_certified_initial_sample() {
        let plant = scalar_plant();
        let mut config = TrainConfig::new(0.95, 1, vec![(-0.5, 0.5)]);
        config.iterations = 0;
        config.batch = 2;
        config.eval_batch = 2;
        let oracle = RewardOracle::new(5, |_x, u, _k| 1.0 - u.norm_squared());
        let out = train(&plant, &plant, &config, &oracle).unwrap();
        assert_eq!(out.history.len(), 1);
        assert_eq!(out.best_iteration, 0);
        assert!(out.certificate.margin < 0.0);
        assert!(out.trace.is_empty());
        // The returned controller is the recovery of the initial sample.
        let layout = SynthesisLayout::for_plant(&plant, 1);
        let set = SynthesisSet::new(&plant, layout, 0.95, dvector![1.0]).unwrap();
        let theta0 = set.sample(config.seed, config.solver_tol).unwrap();
        assert_eq!(out.theta_hat, theta0);
    }

    #[test]
    fn training_is_deterministic_and_keeps_iterates_certified() {
        let plant = scalar_plant();
        let mut config = TrainConfig::new(0.95, 1, vec![(-0.6, 0.6)]);
        config.iterations = 3;
        config.batch = 3;
        config.eval_batch = 3;
        config.learning_rate = 1e-2;
        config.seed = 9;
        let oracle = RewardOracle::new(15, |x, u, _k| 2.0 - x[0] * x[0] - u.norm_squared());
        let out1 = train(&plant, &plant, &config, &oracle).unwrap();
        let out2 = train(&plant, &plant, &config, &oracle).unwrap();
        assert_eq!(out1.history.len(), 4);
        for (a, b) in out1.history.iter().zip(out2.history.iter()) {
            assert_eq!(a.iteration, b.iteration);
            assert_eq!(a.mean_reward, b.mean_reward);
            assert_eq!(a.lmi_margin, b.lmi_margin);
            assert_eq!(a.grad_norm, b.grad_norm);
            assert_eq!(a.projection_distance, b.projection_distance);
        }
        assert_eq!(out1.theta_hat, out2.theta_hat);
        // Margins recorded after projection stay at or above strictness.
        let layout = SynthesisLayout::for_plant(&plant, 1);
        let set = SynthesisSet::new(&plant, layout, 0.95, dvector![1.0]).unwrap();
        for rec in &out1.history {
            assert!(
                rec.lmi_margin >= set.strictness - 1e-8,
                "iteration {} margin {} below strictness",
                rec.iteration,
                rec.lmi_margin
            );
        }
        // Best iterate never loses to the start.
        assert!(out1.history[out1.best_iteration].mean_reward >= out1.history[0].mean_reward);
    }

    #[test]
    fn recentering_follows_projection_within_each_iteration() {
        let plant = scalar_plant();
        let mut config = TrainConfig::new(0.95, 1, vec![(-0.4, 0.4)]);
        config.iterations = 2;
        config.batch = 2;
        config.eval_batch = 2;
        config.recenter = true;
        let oracle = RewardOracle::new(8, |_x, u, _k| 1.0 - u.norm_squared());
        let out = train(&plant, &plant, &config, &oracle).unwrap();
        for iter in 1..=2 {
            let phases: Vec<Phase> = out
                .trace
                .iter()
                .filter(|(i, _)| *i == iter)
                .map(|&(_, p)| p)
                .collect();
            assert_eq!(
                phases,
                vec![Phase::Gradient, Phase::Project, Phase::Recenter],
                "iteration {iter} ran phases out of order"
            );
        }
    }
}
