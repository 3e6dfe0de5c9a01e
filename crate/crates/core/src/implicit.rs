//! Fixed-point solves for implicit (equilibrium) layers.
//!
//! Both the controller and the identified plant contain a layer defined
//! implicitly by w = f(w) with f a contraction in suitable coordinates.
//! Damped Picard iteration w <- (1-gamma) w + gamma f(w) handles the common
//! case; when the contraction rate is close to one the iteration stalls, so
//! a Newton phase using the layer Jacobian finishes the solve.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Options for [`solve_fixed_point`].
#[derive(Debug, Clone, Copy)]
pub struct FixedPointOptions {
    /// Damping factor gamma in (0, 1]; 1 is plain Picard iteration.
    pub damping: f64,
    /// Picard iteration budget.
    pub max_iter: usize,
    /// Convergence tolerance on the 2-norm residual |f(w) - w|.
    pub tol: f64,
}

impl Default for FixedPointOptions {
    fn default() -> Self {
        FixedPointOptions {
            damping: 1.0,
            max_iter: 500,
            tol: 1e-10,
        }
    }
}

impl FixedPointOptions {
    /// Same options with a different tolerance.
    pub fn with_tol(self, tol: f64) -> Self {
        FixedPointOptions { tol, ..self }
    }
}

/// Result of a fixed-point solve.
#[derive(Debug, Clone)]
pub struct FixedPointSolve {
    /// The solution w with |f(w) - w| <= tol.
    pub value: DVector<f64>,
    /// Final residual norm.
    pub residual: f64,
    /// Total iterations spent (Picard plus Newton).
    pub iterations: usize,
    /// Whether the Newton fallback was needed.
    pub used_newton: bool,
}

/// Solve w = f(w) by damped Picard iteration only.
pub fn solve_fixed_point<F>(
    f: F,
    guess: &DVector<f64>,
    opts: &FixedPointOptions,
) -> Result<FixedPointSolve>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    solve_fixed_point_impl(f, None::<fn(&DVector<f64>) -> DMatrix<f64>>, guess, opts)
}

/// Solve w = f(w) by damped Picard iteration with a Newton fallback.
///
/// `jac` must return the Jacobian of f at the given point; Newton then
/// iterates w <- w + (I - J)^(-1) (f(w) - w). The fallback engages when the
/// Picard residual stalls (stops shrinking) or the iteration budget runs out
/// above tolerance.
pub fn solve_fixed_point_newton<F, J>(
    f: F,
    jac: J,
    guess: &DVector<f64>,
    opts: &FixedPointOptions,
) -> Result<FixedPointSolve>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
    J: Fn(&DVector<f64>) -> DMatrix<f64>,
{
    solve_fixed_point_impl(f, Some(jac), guess, opts)
}

fn solve_fixed_point_impl<F, J>(
    f: F,
    jac: Option<J>,
    guess: &DVector<f64>,
    opts: &FixedPointOptions,
) -> Result<FixedPointSolve>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
    J: Fn(&DVector<f64>) -> DMatrix<f64>,
{
    assert!(
        opts.damping > 0.0 && opts.damping <= 1.0,
        "damping must lie in (0, 1]"
    );
    let n = guess.len();
    if n == 0 {
        return Ok(FixedPointSolve {
            value: DVector::zeros(0),
            residual: 0.0,
            iterations: 0,
            used_newton: false,
        });
    }

    let mut w = guess.clone();
    let mut best = f64::INFINITY;
    let mut stall = 0;
    let mut iterations = 0;
    let mut residual = f64::INFINITY;

    for _ in 0..opts.max_iter {
        let fw = f(&w);
        let r = &fw - &w;
        residual = r.norm();
        iterations += 1;
        if residual <= opts.tol {
            return Ok(FixedPointSolve {
                value: w,
                residual,
                iterations,
                used_newton: false,
            });
        }
        // Track progress; several iterations without a meaningful decrease
        // means the contraction rate is too close to one for Picard.
        if residual < 0.9 * best {
            best = residual;
            stall = 0;
        } else {
            stall += 1;
            if stall >= 8 && jac.is_some() {
                break;
            }
        }
        w += opts.damping * r;
    }

    let Some(jac) = jac else {
        return Err(Error::EquilibriumDiverged {
            residual,
            tolerance: opts.tol,
            iterations,
        });
    };

    // Newton phase: w <- w + (I - J)^(-1) (f(w) - w).
    let eye = DMatrix::identity(n, n);
    for _ in 0..50 {
        let fw = f(&w);
        let r = &fw - &w;
        residual = r.norm();
        iterations += 1;
        if residual <= opts.tol {
            return Ok(FixedPointSolve {
                value: w,
                residual,
                iterations,
                used_newton: true,
            });
        }
        let m = &eye - jac(&w);
        let step = m.lu().solve(&r).ok_or_else(|| {
            Error::SingularMatrix("I - J in Newton phase of fixed-point solve".into())
        })?;
        w += step;
    }

    Err(Error::EquilibriumDiverged {
        residual,
        tolerance: opts.tol,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;

    /// Bisection on g(w) = f(w) - w over [lo, hi]; independent oracle for
    /// scalar fixed points.
    fn bisect_fixed_point(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
        let g = |w: f64| f(w) - w;
        assert!(g(lo) * g(hi) < 0.0, "bisection bracket must straddle root");
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if g(lo) * g(mid) <= 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn picard_matches_bisection_on_scalar_contraction() {
        // w = 0.5 tanh(w) + 0.3 has contraction rate 0.5.
        let f = |w: &DVector<f64>| dvector![0.5 * w[0].tanh() + 0.3];
        let sol = solve_fixed_point(f, &dvector![0.0], &FixedPointOptions::default()).unwrap();
        let oracle = bisect_fixed_point(|w| 0.5 * w.tanh() + 0.3, -2.0, 2.0);
        assert!(
            (sol.value[0] - oracle).abs() < 1e-9,
            "picard {} vs bisection {}",
            sol.value[0],
            oracle
        );
        assert!(!sol.used_newton);
    }

    #[test]
    fn newton_fallback_rescues_slow_contraction() {
        // w = 0.999 w + 1 converges to 1000 but Picard gains only 0.1% per
        // step; the stall detector must hand over to Newton, which nails an
        // affine map in one step.
        let f = |w: &DVector<f64>| dvector![0.999 * w[0] + 1.0];
        let jac = |_: &DVector<f64>| DMatrix::from_element(1, 1, 0.999);
        let sol =
            solve_fixed_point_newton(f, jac, &dvector![0.0], &FixedPointOptions::default())
                .unwrap();
        assert!(sol.used_newton, "expected Newton fallback to engage");
        assert!(
            (sol.value[0] - 1000.0).abs() < 1e-7,
            "solution {}",
            sol.value[0]
        );
        assert!(sol.iterations < 200, "took {} iterations", sol.iterations);
    }

    #[test]
    fn picard_alone_reports_divergence_on_slow_contraction() {
        let f = |w: &DVector<f64>| dvector![0.999 * w[0] + 1.0];
        let err = solve_fixed_point(f, &dvector![0.0], &FixedPointOptions::default()).unwrap_err();
        assert!(matches!(err, Error::EquilibriumDiverged { .. }));
    }

    #[test]
    fn empty_layer_solves_trivially() {
        let f = |w: &DVector<f64>| w.clone();
        let sol = solve_fixed_point(f, &DVector::zeros(0), &FixedPointOptions::default()).unwrap();
        assert_eq!(sol.value.len(), 0);
        assert_eq!(sol.residual, 0.0);
    }

    #[test]
    fn two_dimensional_coupled_fixed_point() {
        // w1 = 0.3 tanh(w2) + 0.1, w2 = 0.4 tanh(w1) - 0.2; verify the
        // returned point satisfies both equations to tolerance.
        let f = |w: &DVector<f64>| {
            dvector![0.3 * w[1].tanh() + 0.1, 0.4 * w[0].tanh() - 0.2]
        };
        let sol = solve_fixed_point(f, &DVector::zeros(2), &FixedPointOptions::default()).unwrap();
        let fw = f(&sol.value);
        assert!((&fw - &sol.value).norm() <= 1e-10);
    }
}
