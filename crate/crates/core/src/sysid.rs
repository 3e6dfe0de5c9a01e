//! Identification of implicit-network plant models from one-step data.
//!
//! Given transitions (x, u, x_next), fit the weights of an implicit network
//! x+ = A x + B1 q' + B2 u, q' = Delta(C2 x + D3 q') by first-order descent
//! on the mean-squared next-state error. The equilibrium layer needs
//! |D3| < 1 (spectral norm) for a unique q', so after every optimizer step
//! the implicit block is rescaled: if sigma = |D3| >= 1, set
//! D3 <- (alpha/sigma) D3 with alpha < 1, restoring contraction while
//! preserving the block's direction.
//!
//! Gradients flow through the equilibrium exactly via the implicit function
//! theorem: with M = (I - Delta'(v) D3)^(-1) Delta'(v) at the solved point,
//! a loss residual r = dL/dx+ pulls back to g_q = M' B1' r on the implicit
//! channel, giving dL/dC2 = g_q x' and dL/dD3 = g_q q''. The remaining
//! weights are plain linear regression: dL/dA = r x', dL/dB1 = r q'',
//! dL/dB2 = r u'. The output map C1 does not enter the loss and is kept
//! fixed.

use nalgebra::{DMatrix, DVector};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::activation::Nonlinearity;
use crate::error::{Error, Result};
use crate::implicit::{solve_fixed_point_newton, FixedPointOptions};
use crate::linalg;
use crate::plant::{ImplicitNnPlant, PlantSector};

/// One observed transition.
#[derive(Debug, Clone)]
pub struct SysidSample {
    pub x: DVector<f64>,
    pub u: DVector<f64>,
    pub x_next: DVector<f64>,
}

/// A set of transitions with consistent dimensions.
#[derive(Debug, Clone)]
pub struct SysidDataset {
    samples: Vec<SysidSample>,
}

impl SysidDataset {
    pub fn new(samples: Vec<SysidSample>) -> Result<SysidDataset> {
        let first = samples.first().ok_or_else(|| {
            Error::Invalid("identification needs a nonempty dataset".into())
        })?;
        let (n_x, n_u) = (first.x.len(), first.u.len());
        for (i, s) in samples.iter().enumerate() {
            if s.x.len() != n_x || s.u.len() != n_u || s.x_next.len() != n_x {
                return Err(Error::DimensionMismatch(format!(
                    "sample {i} has shape ({}, {}, {}), expected ({n_x}, {n_u}, {n_x})",
                    s.x.len(),
                    s.u.len(),
                    s.x_next.len()
                )));
            }
        }
        Ok(SysidDataset { samples })
    }

    /// Collect one-step transitions from a plant, with states and inputs
    /// drawn uniformly from per-dimension boxes.
    pub fn from_plant(
        plant: &PlantSector,
        count: usize,
        x_box: &[(f64, f64)],
        u_box: &[(f64, f64)],
        seed: u64,
    ) -> Result<SysidDataset> {
        if x_box.len() != plant.n_x() || u_box.len() != plant.n_u() {
            return Err(Error::DimensionMismatch(format!(
                "sampling boxes ({}, {}) do not match plant dimensions ({}, {})",
                x_box.len(),
                u_box.len(),
                plant.n_x(),
                plant.n_u()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let opts = FixedPointOptions::default();
        let mut draw = |boxes: &[(f64, f64)]| {
            DVector::from_iterator(
                boxes.len(),
                boxes.iter().map(|&(lo, hi)| {
                    if lo == hi {
                        lo
                    } else {
                        rng.random_range(lo..hi)
                    }
                }),
            )
        };
        let mut samples = Vec::with_capacity(count);
        for _ in 0..count {
            let x = draw(x_box);
            let u = draw(u_box);
            let x_next = plant.step(&x, &u, &opts)?.x_next;
            samples.push(SysidSample { x, u, x_next });
        }
        SysidDataset::new(samples)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[SysidSample] {
        &self.samples
    }

    pub fn n_x(&self) -> usize {
        self.samples[0].x.len()
    }

    pub fn n_u(&self) -> usize {
        self.samples[0].u.len()
    }

    /// Deterministically shuffle and split into (train, held-out) parts.
    pub fn split(&self, train_fraction: f64, seed: u64) -> Result<(SysidDataset, SysidDataset)> {
        if !(0.0 < train_fraction && train_fraction < 1.0) {
            return Err(Error::Invalid(format!(
                "train fraction must lie in (0, 1), got {train_fraction}"
            )));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let cut = ((self.len() as f64) * train_fraction).round() as usize;
        let cut = cut.clamp(1, self.len() - 1);
        let pick = |idx: &[usize]| {
            SysidDataset::new(idx.iter().map(|&i| self.samples[i].clone()).collect())
        };
        Ok((pick(&order[..cut])?, pick(&order[cut..])?))
    }
}

/// Mean-squared one-step prediction error of a model over a dataset.
pub fn mean_squared_error(
    nn: &ImplicitNnPlant,
    data: &SysidDataset,
    opts: &FixedPointOptions,
) -> Result<f64> {
    let mut acc = 0.0;
    for s in data.samples() {
        acc += (nn.forward(&s.x, &s.u, opts)? - &s.x_next).norm_squared();
    }
    Ok(acc / data.len() as f64)
}

/// First-order update rule for the weight matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SysidOptimizer {
    /// Plain gradient descent at a fixed learning rate.
    Gd,
    /// Adam with the usual moment estimates (beta1 = 0.9, beta2 = 0.999).
    Adam,
}

#[derive(Debug, Clone)]
pub struct SysidConfig {
    pub learning_rate: f64,
    /// Post-rescale norm of the implicit block when contraction is lost.
    pub alpha: f64,
    pub epochs: usize,
    /// Minibatch size; 0 runs full-batch epochs.
    pub batch: usize,
    /// Seed for minibatch shuffling.
    pub seed: u64,
    pub optimizer: SysidOptimizer,
    /// Freeze D3 at its initial value (the equilibrium layer still runs).
    pub train_d3: bool,
}

impl SysidConfig {
    pub fn new(epochs: usize) -> SysidConfig {
        SysidConfig {
            learning_rate: 1e-3,
            alpha: 0.99,
            epochs,
            batch: 0,
            seed: 0,
            optimizer: SysidOptimizer::Gd,
            train_d3: true,
        }
    }
}

/// One row of the loss history.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean of the minibatch losses seen during the epoch (each evaluated
    /// before its update).
    pub mse: f64,
    /// Spectral norm of D3 at the end of the epoch.
    pub d3_norm: f64,
    /// Whether any step this epoch tripped the contraction rescale.
    pub rescaled: bool,
}

#[derive(Debug, Clone)]
pub struct SysidOutcome {
    pub plant: ImplicitNnPlant,
    pub history: Vec<EpochRecord>,
}

/// Trainable weights (the output map C1 and the activation are fixed).
struct Weights {
    a: DMatrix<f64>,
    b1: DMatrix<f64>,
    b2: DMatrix<f64>,
    c2: DMatrix<f64>,
    d3: DMatrix<f64>,
}

struct Grads {
    a: DMatrix<f64>,
    b1: DMatrix<f64>,
    b2: DMatrix<f64>,
    c2: DMatrix<f64>,
    d3: DMatrix<f64>,
}

fn solve_q(
    w: &Weights,
    delta: &Nonlinearity,
    x: &DVector<f64>,
    opts: &FixedPointOptions,
) -> Result<DVector<f64>> {
    let cx = &w.c2 * x;
    let n_q = w.d3.nrows();
    let f = |q: &DVector<f64>| delta.eval(&(&cx + &w.d3 * q));
    let jac = |q: &DVector<f64>| {
        let dphi = delta.deriv_diag(&(&cx + &w.d3 * q));
        DMatrix::from_fn(n_q, n_q, |i, j| dphi[i] * w.d3[(i, j)])
    };
    Ok(solve_fixed_point_newton(f, jac, &DVector::zeros(n_q), opts)?.value)
}

/// Mean loss over the batch and its gradients with respect to the weights.
fn batch_loss_and_grads(
    w: &Weights,
    delta: &Nonlinearity,
    batch: &[&SysidSample],
    train_d3: bool,
    opts: &FixedPointOptions,
) -> Result<(f64, Grads)> {
    let (n_x, n_q) = (w.a.nrows(), w.d3.nrows());
    let mut g = Grads {
        a: DMatrix::zeros(n_x, n_x),
        b1: DMatrix::zeros(n_x, n_q),
        b2: DMatrix::zeros(n_x, w.b2.ncols()),
        c2: DMatrix::zeros(n_q, n_x),
        d3: DMatrix::zeros(n_q, n_q),
    };
    let mut loss = 0.0;
    let scale = 1.0 / batch.len() as f64;
    for s in batch {
        let q = solve_q(w, delta, &s.x, opts)?;
        let err = &w.a * &s.x + &w.b1 * &q + &w.b2 * &s.u - &s.x_next;
        loss += scale * err.norm_squared();
        let r = 2.0 * scale * err;
        g.a += &r * s.x.transpose();
        g.b1 += &r * q.transpose();
        g.b2 += &r * s.u.transpose();
        if n_q > 0 {
            let v = &w.c2 * &s.x + &w.d3 * &q;
            let dphi = delta.deriv_diag(&v);
            let phi_d3 = DMatrix::from_fn(n_q, n_q, |i, j| dphi[i] * w.d3[(i, j)]);
            let m = linalg::solve(
                &(DMatrix::identity(n_q, n_q) - phi_d3),
                &DMatrix::from_diagonal(&dphi),
                "identification tangent (I - Delta' D3)",
            )?;
            let g_q = m.transpose() * (w.b1.transpose() * &r);
            g.c2 += &g_q * s.x.transpose();
            if train_d3 {
                g.d3 += &g_q * q.transpose();
            }
        }
    }
    Ok((loss, g))
}

struct AdamState {
    m: Vec<DMatrix<f64>>,
    v: Vec<DMatrix<f64>>,
    t: u32,
}

/// Fit an implicit-network plant to transition data by first-order descent
/// on the mean-squared next-state error, rescaling D3 to spectral norm
/// `alpha` after any step that loses contraction. The returned model always
/// satisfies |D3| < 1, and the history records the post-epoch norm so the
/// invariant is checkable per epoch.
pub fn sysid_train(
    data: &SysidDataset,
    init: &ImplicitNnPlant,
    config: &SysidConfig,
) -> Result<SysidOutcome> {
    if data.n_x() != init.n_x() || data.n_u() != init.n_u() {
        return Err(Error::DimensionMismatch(format!(
            "dataset is ({}, {})-dimensional, model expects ({}, {})",
            data.n_x(),
            data.n_u(),
            init.n_x(),
            init.n_u()
        )));
    }
    if !(0.0 < config.alpha && config.alpha < 1.0) {
        return Err(Error::Invalid(format!(
            "rescale factor must lie in (0, 1), got {}",
            config.alpha
        )));
    }
    let opts = FixedPointOptions::default();
    let mut w = Weights {
        a: init.a.clone(),
        b1: init.b1.clone(),
        b2: init.b2.clone(),
        c2: init.c2.clone(),
        d3: init.d3.clone(),
    };
    let mut adam = AdamState {
        m: vec![
            DMatrix::zeros(w.a.nrows(), w.a.ncols()),
            DMatrix::zeros(w.b1.nrows(), w.b1.ncols()),
            DMatrix::zeros(w.b2.nrows(), w.b2.ncols()),
            DMatrix::zeros(w.c2.nrows(), w.c2.ncols()),
            DMatrix::zeros(w.d3.nrows(), w.d3.ncols()),
        ],
        v: vec![
            DMatrix::zeros(w.a.nrows(), w.a.ncols()),
            DMatrix::zeros(w.b1.nrows(), w.b1.ncols()),
            DMatrix::zeros(w.b2.nrows(), w.b2.ncols()),
            DMatrix::zeros(w.c2.nrows(), w.c2.ncols()),
            DMatrix::zeros(w.d3.nrows(), w.d3.ncols()),
        ],
        t: 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let batch_size = if config.batch == 0 {
        data.len()
    } else {
        config.batch.min(data.len())
    };
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        let mut rescaled = false;
        for chunk in order.chunks(batch_size) {
            let batch: Vec<&SysidSample> =
                chunk.iter().map(|&i| &data.samples()[i]).collect();
            let (loss, g) = batch_loss_and_grads(&w, &init.delta, &batch, config.train_d3, &opts)?;
            epoch_loss += loss;
            batches += 1;
            let grads = [&g.a, &g.b1, &g.b2, &g.c2, &g.d3];
            let weights = [&mut w.a, &mut w.b1, &mut w.b2, &mut w.c2, &mut w.d3];
            match config.optimizer {
                SysidOptimizer::Gd => {
                    for (wm, gm) in weights.into_iter().zip(grads) {
                        *wm -= config.learning_rate * gm;
                    }
                }
                SysidOptimizer::Adam => {
                    let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
                    adam.t += 1;
                    let bc1 = 1.0 - b1.powi(adam.t as i32);
                    let bc2 = 1.0 - b2.powi(adam.t as i32);
                    for (k, (wm, gm)) in weights.into_iter().zip(grads).enumerate() {
                        adam.m[k] = b1 * &adam.m[k] + (1.0 - b1) * gm;
                        adam.v[k] = b2 * &adam.v[k] + (1.0 - b2) * gm.component_mul(gm);
                        for i in 0..wm.nrows() {
                            for j in 0..wm.ncols() {
                                let mh = adam.m[k][(i, j)] / bc1;
                                let vh = adam.v[k][(i, j)] / bc2;
                                wm[(i, j)] -= config.learning_rate * mh / (vh.sqrt() + eps);
                            }
                        }
                    }
                }
            }
            let sigma = linalg::spectral_norm(&w.d3);
            if sigma >= 1.0 {
                w.d3 *= config.alpha / sigma;
                rescaled = true;
            }
        }
        let mse = epoch_loss / batches as f64;
        if !mse.is_finite() {
            return Err(Error::SolverFailure(format!(
                "identification diverged: epoch {epoch} loss is {mse} \
                 (reduce the learning rate)"
            )));
        }
        history.push(EpochRecord {
            epoch,
            mse,
            d3_norm: linalg::spectral_norm(&w.d3),
            rescaled,
        });
    }
    let plant = ImplicitNnPlant::new(
        w.a,
        w.b1,
        w.b2,
        init.c1.clone(),
        w.c2,
        w.d3,
        init.delta.clone(),
    )?;
    Ok(SysidOutcome { plant, history })
}

/// A small random implicit network to start identification from: weights
/// scaled by 1/sqrt(fan-in), D3 zero so the initial model is trivially
/// well-posed.
pub fn init_implicit_nn(
    n_x: usize,
    n_q: usize,
    n_u: usize,
    c1: DMatrix<f64>,
    delta: Nonlinearity,
    seed: u64,
) -> Result<ImplicitNnPlant> {
    if c1.ncols() != n_x {
        return Err(Error::DimensionMismatch(format!(
            "output map has {} columns, state dimension is {n_x}",
            c1.ncols()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s_x = 1.0 / (n_x as f64).sqrt();
    let a = linalg::randn_matrix(&mut rng, n_x, n_x, 0.5 * s_x);
    let b1 = linalg::randn_matrix(&mut rng, n_x, n_q, 0.5 / (n_q.max(1) as f64).sqrt());
    let b2 = linalg::randn_matrix(&mut rng, n_x, n_u, 0.5 / (n_u as f64).sqrt());
    let c2 = linalg::randn_matrix(&mut rng, n_q, n_x, s_x);
    let d3 = DMatrix::zeros(n_q, n_q);
    ImplicitNnPlant::new(a, b1, b2, c1, c2, d3, delta)
}
