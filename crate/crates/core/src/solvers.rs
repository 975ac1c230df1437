//! Shared numerical kernels: damped Newton, finite-difference Jacobians,
//! dense linear solves, and the canonical symplecticity probe.
//!
//! All kernels are stateless and deterministic: identical inputs give
//! bit-identical outputs.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative pivot threshold below which a linear solve is declared singular.
pub const PIVOT_THRESHOLD: f64 = 1e-14;

/// Tikhonov shift, relative to the matrix norm, used for the single
/// regularized retry inside [`newton`].
const TIKHONOV_SHIFT: f64 = 1e-10;

/// Maximum number of step halvings in the Newton line search.
const MAX_HALVINGS: usize = 30;

/// Outcome of a damped Newton solve.
#[derive(Debug, Clone)]
pub struct NewtonReport {
    pub root: DVector<f64>,
    pub iterations: usize,
    pub residual_norm: f64,
    pub converged: bool,
    /// Number of iterations that accepted a shortened step.
    pub damping_events: usize,
}

/// Solves the dense system `A x = b` by LU factorization with row pivoting.
///
/// Fails when the smallest pivot drops below `1e-14 * amax(A)`.
pub fn linear_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    assert_eq!(a.nrows(), a.ncols(), "linear_solve requires a square matrix");
    assert_eq!(a.nrows(), b.len(), "linear_solve dimension mismatch");
    if a.nrows() == 0 {
        return Ok(DVector::zeros(0));
    }
    let threshold = PIVOT_THRESHOLD * a.amax();
    let lu = a.clone().lu();
    let min_pivot = lu.u().diagonal().amin();
    if min_pivot < threshold || !min_pivot.is_finite() {
        return Err(Error::SingularMatrix {
            pivot: min_pivot,
            threshold,
        });
    }
    lu.solve(b).ok_or(Error::SingularMatrix {
        pivot: min_pivot,
        threshold,
    })
}

/// Forward-difference Jacobian of `f` at `x`.
///
/// The step in coordinate `i` is `sqrt(eps) * (1 + |x_i|) * scale`, with the
/// effectively realized step used as the divisor.
pub fn fd_jacobian<F>(mut f: F, x: &DVector<f64>, scale: f64) -> Result<DMatrix<f64>>
where
    F: FnMut(&DVector<f64>) -> Result<DVector<f64>>,
{
    let f0 = f(x)?;
    fd_jacobian_with(&mut f, x, &f0, scale)
}

/// Same as [`fd_jacobian`] but reuses an already computed `f(x)`.
pub(crate) fn fd_jacobian_with<F>(
    f: &mut F,
    x: &DVector<f64>,
    f0: &DVector<f64>,
    scale: f64,
) -> Result<DMatrix<f64>>
where
    F: FnMut(&DVector<f64>) -> Result<DVector<f64>>,
{
    let n = x.len();
    let m = f0.len();
    let base = f64::EPSILON.sqrt() * scale;
    let mut jac = DMatrix::zeros(m, n);
    let mut xp = x.clone();
    for i in 0..n {
        let step = base * (1.0 + x[i].abs());
        xp[i] = x[i] + step;
        let realized = xp[i] - x[i];
        let fi = f(&xp)?;
        xp[i] = x[i];
        for r in 0..m {
            jac[(r, i)] = (fi[r] - f0[r]) / realized;
        }
    }
    Ok(jac)
}

/// Damped Newton iteration for `F(x) = 0` with a step-halving line search on
/// the residual norm. See [`newton_scaled`] for the Jacobian step control.
pub fn newton<F>(f: F, x0: &DVector<f64>, tol: f64, max_iter: usize) -> Result<NewtonReport>
where
    F: FnMut(&DVector<f64>) -> Result<DVector<f64>>,
{
    newton_scaled(f, x0, tol, max_iter, 1.0)
}

/// Damped Newton with an explicit scale for the finite-difference Jacobian
/// steps. Residual evaluations that fail at a trial point are treated as
/// rejected steps and halved away.
pub fn newton_scaled<F>(
    f: F,
    x0: &DVector<f64>,
    tol: f64,
    max_iter: usize,
    jac_scale: f64,
) -> Result<NewtonReport>
where
    F: FnMut(&DVector<f64>) -> Result<DVector<f64>>,
{
    newton_impl(f, x0, tol, max_iter, jac_scale, false)
}

/// Like [`newton_scaled`], but a stalled line search or an exhausted
/// iteration budget returns the best iterate with `converged = false`
/// instead of failing. Hard errors from the residual still propagate.
pub(crate) fn newton_lenient<F>(
    f: F,
    x0: &DVector<f64>,
    tol: f64,
    max_iter: usize,
    jac_scale: f64,
) -> Result<NewtonReport>
where
    F: FnMut(&DVector<f64>) -> Result<DVector<f64>>,
{
    newton_impl(f, x0, tol, max_iter, jac_scale, true)
}

fn newton_impl<F>(
    mut f: F,
    x0: &DVector<f64>,
    tol: f64,
    max_iter: usize,
    jac_scale: f64,
    lenient: bool,
) -> Result<NewtonReport>
where
    F: FnMut(&DVector<f64>) -> Result<DVector<f64>>,
{
    let mut x = x0.clone();
    let mut r = f(&x)?;
    let mut rnorm = r.norm();
    let mut damping_events = 0usize;

    for iter in 0..max_iter {
        if rnorm <= tol {
            return Ok(NewtonReport {
                root: x,
                iterations: iter,
                residual_norm: rnorm,
                converged: true,
                damping_events,
            });
        }

        let jac = fd_jacobian_with(&mut f, &x, &r, jac_scale)?;
        let neg_r = -&r;
        let delta = match linear_solve(&jac, &neg_r) {
            Ok(d) => d,
            Err(Error::SingularMatrix { .. }) => {
                // One regularized retry before giving up.
                let shift = TIKHONOV_SHIFT * jac.amax().max(f64::MIN_POSITIVE);
                let mut reg = jac.clone();
                for i in 0..reg.nrows() {
                    reg[(i, i)] += shift;
                }
                linear_solve(&reg, &neg_r)?
            }
            Err(e) => return Err(e),
        };

        let mut t = 1.0;
        let mut accepted = false;
        let mut last_err = None;
        for halving in 0..=MAX_HALVINGS {
            let xt = &x + &delta * t;
            match f(&xt) {
                Ok(rt) => {
                    let rtn = rt.norm();
                    if rtn < rnorm {
                        if halving > 0 {
                            damping_events += 1;
                        }
                        x = xt;
                        r = rt;
                        rnorm = rtn;
                        accepted = true;
                        break;
                    }
                }
                Err(e) => last_err = Some(e),
            }
            t *= 0.5;
        }
        if !accepted {
            if let Some(e) = last_err {
                return Err(e);
            }
            if lenient {
                return Ok(NewtonReport {
                    root: x,
                    iterations: iter,
                    residual_norm: rnorm,
                    converged: false,
                    damping_events,
                });
            }
            return Err(Error::NewtonStalled {
                residual: rnorm,
                iterations: iter,
            });
        }
    }

    if rnorm <= tol || lenient {
        Ok(NewtonReport {
            root: x,
            iterations: max_iter,
            residual_norm: rnorm,
            converged: rnorm <= tol,
            damping_events,
        })
    } else {
        Err(Error::NewtonStalled {
            residual: rnorm,
            iterations: max_iter,
        })
    }
}

/// Canonical block matrix `[[0, I], [-I, 0]]` of size `2n x 2n`.
pub fn canonical_omega(n: usize) -> DMatrix<f64> {
    let mut omega = DMatrix::zeros(2 * n, 2 * n);
    for i in 0..n {
        omega[(i, n + i)] = 1.0;
        omega[(n + i, i)] = -1.0;
    }
    omega
}

/// Jacobian step scale for the symplecticity probe. A larger step than the
/// Newton default keeps the probe's floor well below the 1e-6 tolerances the
/// integrators are tested against.
const SYMPLECTIC_FD_SCALE: f64 = 1e3;

/// Measures `max |J^T O J - O|` for the finite-difference Jacobian `J` of a
/// phase-space map at `x = (q, p)` and the canonical `O`. Zero (up to
/// finite-difference error) exactly when the map is symplectic at `x`.
pub fn symplectic_defect<F>(map: F, x: &DVector<f64>) -> Result<f64>
where
    F: FnMut(&DVector<f64>) -> Result<DVector<f64>>,
{
    assert!(
        x.len().is_multiple_of(2),
        "phase-space point must have even length"
    );
    let n = x.len() / 2;
    let jac = fd_jacobian(map, x, SYMPLECTIC_FD_SCALE)?;
    let omega = canonical_omega(n);
    let defect = jac.transpose() * &omega * &jac - omega;
    Ok(defect.amax())
}
