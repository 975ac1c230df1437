//! Regular optimal control problems treated through their Pontryagin
//! Hamiltonian `H(q, p, u) = L(q, u) + p . Gamma(q, u)`.
//!
//! In the regular case the stationarity condition `dH/du = 0` has an isolated
//! solution `u = u_bar(q, p)` (the control Hessian `d2H/du2` is invertible),
//! the controls can be eliminated, and the reduced system
//! `dq/dt = dH/dp, dp/dt = -dH/dq` is an ordinary Hamiltonian flow. The
//! discrete stepper [`oc_step`] is generated by the mixed-variable function
//! `S2(q_k, p_{k+1}) = h L(q_k, u_bar) + p_{k+1} . (q_k + h Gamma(q_k, u_bar))`,
//! so each step is a canonical transformation up to the Newton tolerance.
//! [`compose_generating`] assembles the N-step generating value whose partial
//! derivatives reproduce the composed map, and [`solve_ocp`] closes the
//! two-point boundary problem by shooting on the initial costate.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};
use crate::solvers;

pub type ControlVectorFn = Box<dyn Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync>;
pub type ControlMatrixFn = Box<dyn Fn(&DVector<f64>, &DVector<f64>) -> DMatrix<f64> + Send + Sync>;
pub type ControlScalarFn = Box<dyn Fn(&DVector<f64>, &DVector<f64>) -> f64 + Send + Sync>;
pub type ControlHessianFn =
    Box<dyn Fn(&DVector<f64>, &DVector<f64>, &DVector<f64>) -> DMatrix<f64> + Send + Sync>;

/// Residual tolerance for the control stationarity solve `dH/du = 0`.
pub const CONTROL_TOL: f64 = 1e-12;

const ELIMINATE_MAX_ITER: usize = 100;
const OC_STEP_MAX_ITER: usize = 60;

/// A control-affine-or-not system `dq/dt = Gamma(q, u)` with running cost
/// `L(q, u)`. Derivative callbacks are supplied by the system author;
/// `d2h_du2` assembles the control Hessian of the Pontryagin Hamiltonian.
pub struct ControlSystem {
    pub n: usize,
    pub mc: usize,
    pub gamma: ControlVectorFn,
    pub dgamma_dq: ControlMatrixFn,
    pub dgamma_du: ControlMatrixFn,
    pub cost: ControlScalarFn,
    pub dcost_dq: ControlVectorFn,
    pub dcost_du: ControlVectorFn,
    pub d2h_du2: ControlHessianFn,
    pub name: String,
}

impl ControlSystem {
    /// `dH/du = dL/du + (dGamma/du)^T p`.
    pub fn dh_du(&self, q: &DVector<f64>, p: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        (self.dcost_du)(q, u) + (self.dgamma_du)(q, u).transpose() * p
    }

    /// `dH/dq = dL/dq + (dGamma/dq)^T p`.
    pub fn dh_dq(&self, q: &DVector<f64>, p: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        (self.dcost_dq)(q, u) + (self.dgamma_dq)(q, u).transpose() * p
    }

    /// Checks the derivative callbacks against central finite differences of
    /// their primals at one `(q, p, u)` sample.
    pub fn validate_at(&self, q: &DVector<f64>, p: &DVector<f64>, u: &DVector<f64>) -> Result<()> {
        let tol = 1e-6;
        let check = |fd: f64, analytic: f64, what: &'static str| -> Result<()> {
            if (fd - analytic).abs() > tol * (1.0 + analytic.abs()) {
                return Err(Error::NonFinite { what });
            }
            Ok(())
        };

        let mut qp = q.clone();
        for i in 0..self.n {
            let step = 1e-6 * (1.0 + q[i].abs());
            qp[i] = q[i] + step;
            let gamma_up = (self.gamma)(&qp, u);
            let cost_up = (self.cost)(&qp, u);
            qp[i] = q[i] - step;
            let gamma_dn = (self.gamma)(&qp, u);
            let cost_dn = (self.cost)(&qp, u);
            qp[i] = q[i];
            let dgq = (self.dgamma_dq)(q, u);
            for r in 0..self.n {
                check(
                    (gamma_up[r] - gamma_dn[r]) / (2.0 * step),
                    dgq[(r, i)],
                    "dgamma_dq disagrees with finite differences of gamma",
                )?;
            }
            check(
                (cost_up - cost_dn) / (2.0 * step),
                (self.dcost_dq)(q, u)[i],
                "dcost_dq disagrees with finite differences of cost",
            )?;
        }

        let mut up = u.clone();
        for a in 0..self.mc {
            let step = 1e-6 * (1.0 + u[a].abs());
            up[a] = u[a] + step;
            let gamma_up = (self.gamma)(q, &up);
            let cost_up = (self.cost)(q, &up);
            let dh_up = self.dh_du(q, p, &up);
            up[a] = u[a] - step;
            let gamma_dn = (self.gamma)(q, &up);
            let cost_dn = (self.cost)(q, &up);
            let dh_dn = self.dh_du(q, p, &up);
            up[a] = u[a];
            let dgu = (self.dgamma_du)(q, u);
            for r in 0..self.n {
                check(
                    (gamma_up[r] - gamma_dn[r]) / (2.0 * step),
                    dgu[(r, a)],
                    "dgamma_du disagrees with finite differences of gamma",
                )?;
            }
            check(
                (cost_up - cost_dn) / (2.0 * step),
                (self.dcost_du)(q, u)[a],
                "dcost_du disagrees with finite differences of cost",
            )?;
            let hess = (self.d2h_du2)(q, p, u);
            for b in 0..self.mc {
                check(
                    (dh_up[b] - dh_dn[b]) / (2.0 * step),
                    hess[(b, a)],
                    "d2h_du2 disagrees with finite differences of dH/du",
                )?;
            }
        }
        Ok(())
    }
}

impl std::fmt::Debug for ControlSystem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ControlSystem")
            .field("name", &self.name)
            .field("n", &self.n)
            .field("mc", &self.mc)
            .finish()
    }
}

/// Two-point boundary data for an optimal control problem.
#[derive(Debug)]
pub struct OcpProblem<'a> {
    pub system: &'a ControlSystem,
    pub q0: DVector<f64>,
    pub qf: DVector<f64>,
    pub horizon: f64,
    pub steps: usize,
    /// Endpoint tolerance for the costate shooting solve.
    pub shoot_tol: f64,
    pub max_iter: usize,
}

impl<'a> OcpProblem<'a> {
    pub fn new(
        system: &'a ControlSystem,
        q0: DVector<f64>,
        qf: DVector<f64>,
        horizon: f64,
        steps: usize,
    ) -> Result<Self> {
        if q0.len() != system.n {
            return Err(Error::Dimension {
                what: "OcpProblem q0",
                expected: system.n,
                got: q0.len(),
            });
        }
        if qf.len() != system.n {
            return Err(Error::Dimension {
                what: "OcpProblem qf",
                expected: system.n,
                got: qf.len(),
            });
        }
        assert!(horizon > 0.0, "horizon must be positive");
        assert!(steps >= 1, "step count must be at least 1");
        Ok(Self {
            system,
            q0,
            qf,
            horizon,
            steps,
            shoot_tol: 1e-8,
            max_iter: 100,
        })
    }
}

/// A discrete extremal: states, costates, controls, discrete cost, and the
/// measured symplectic defect of the composed one-step maps.
#[derive(Debug, Clone)]
pub struct ExtremalTrajectory {
    pub qs: Vec<DVector<f64>>,
    pub ps: Vec<DVector<f64>>,
    pub us: Vec<DVector<f64>>,
    pub cost_j: f64,
    pub symplectic_defect: f64,
}

/// Pontryagin Hamiltonian `H = L(q, u) + p . Gamma(q, u)`.
pub fn pontryagin_h(cs: &ControlSystem, q: &DVector<f64>, p: &DVector<f64>, u: &DVector<f64>) -> f64 {
    (cs.cost)(q, u) + p.dot(&(cs.gamma)(q, u))
}

/// Solves the stationarity condition `dH/du(q, p, u) = 0` by Newton with the
/// analytic control Hessian, starting from `u_seed`.
///
/// Fails with a regularity error when the Hessian is singular along the way.
pub fn eliminate_control(
    cs: &ControlSystem,
    q: &DVector<f64>,
    p: &DVector<f64>,
    u_seed: &DVector<f64>,
) -> Result<DVector<f64>> {
    let mut u = u_seed.clone();
    let mut r = cs.dh_du(q, p, &u);
    let mut rnorm = r.norm();
    for _ in 0..ELIMINATE_MAX_ITER {
        if rnorm <= CONTROL_TOL {
            return Ok(u);
        }
        let hess = (cs.d2h_du2)(q, p, &u);
        let delta = solvers::linear_solve(&hess, &(-&r)).map_err(|e| match e {
            Error::SingularMatrix { .. } => Error::RegularityFailure,
            other => other,
        })?;
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..=30 {
            let ut = &u + &delta * t;
            let rt = cs.dh_du(q, p, &ut);
            let rtn = rt.norm();
            if rtn < rnorm {
                u = ut;
                r = rt;
                rnorm = rtn;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            return Err(Error::NewtonStalled {
                residual: rnorm,
                iterations: ELIMINATE_MAX_ITER,
            });
        }
    }
    if rnorm <= CONTROL_TOL {
        Ok(u)
    } else {
        Err(Error::NewtonStalled {
            residual: rnorm,
            iterations: ELIMINATE_MAX_ITER,
        })
    }
}

/// True when the control Hessian is positive definite at `u`, i.e. the
/// stationary control is a local minimizer.
pub fn control_is_minimizing(
    cs: &ControlSystem,
    q: &DVector<f64>,
    p: &DVector<f64>,
    u: &DVector<f64>,
) -> bool {
    Cholesky::new((cs.d2h_du2)(q, p, u)).is_some()
}

/// Reduced Hamiltonian field at `(q, p)`: the control is eliminated and the
/// chain-rule term vanishes because `dH/du(u_bar) = 0`.
pub fn reduced_field(
    cs: &ControlSystem,
    q: &DVector<f64>,
    p: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let u = eliminate_control(cs, q, p, &DVector::zeros(cs.mc))?;
    Ok(((cs.gamma)(q, &u), -cs.dh_dq(q, p, &u)))
}

/// One implicit step of the generating-function scheme.
#[derive(Debug, Clone)]
pub struct OcStep {
    pub q_next: DVector<f64>,
    pub p_next: DVector<f64>,
    pub u: DVector<f64>,
}

/// One step of the symplectic control integrator at step size `h`:
/// solves `p_k = p_next + h dH/dq(q_k, p_next, u_bar(q_k, p_next))` for
/// `p_next`, then advances `q_next = q_k + h Gamma(q_k, u_bar)`.
pub fn oc_step(cs: &ControlSystem, h: f64, q: &DVector<f64>, p: &DVector<f64>) -> Result<OcStep> {
    oc_step_seeded(cs, h, q, p, &DVector::zeros(cs.mc))
}

/// [`oc_step`] with an explicit seed for the control elimination; trajectory
/// drivers pass the previous step's control for continuation.
pub fn oc_step_seeded(
    cs: &ControlSystem,
    h: f64,
    q: &DVector<f64>,
    p: &DVector<f64>,
    u_seed: &DVector<f64>,
) -> Result<OcStep> {
    let residual = |pn: &DVector<f64>| -> Result<DVector<f64>> {
        let u = eliminate_control(cs, q, pn, u_seed)?;
        Ok(pn + cs.dh_dq(q, pn, &u) * h - p)
    };
    let tol = 1e-12 * (1.0 + p.norm());
    let report = solvers::newton(residual, p, tol, OC_STEP_MAX_ITER)?;
    let p_next = report.root;
    let u = eliminate_control(cs, q, &p_next, u_seed)?;
    let q_next = q + (cs.gamma)(q, &u) * h;
    Ok(OcStep { q_next, p_next, u })
}

/// Mixed-variable generating value
/// `S2(q_k, p_next) = h L(q_k, u_bar) + p_next . (q_k + h Gamma(q_k, u_bar))`.
///
/// Its partial derivative in `q_k` is the old momentum and in `p_next` the
/// new position of [`oc_step`].
pub fn generating_value(
    cs: &ControlSystem,
    h: f64,
    q: &DVector<f64>,
    p_next: &DVector<f64>,
) -> Result<f64> {
    let u = eliminate_control(cs, q, p_next, &DVector::zeros(cs.mc))?;
    Ok(h * (cs.cost)(q, &u) + p_next.dot(&(q + (cs.gamma)(q, &u) * h)))
}

/// N-step composed generating data returned by [`compose_generating`].
#[derive(Debug, Clone)]
pub struct ComposedGenerating {
    /// Value of the composed generating function at `(q_0, p_N)`.
    pub value: f64,
    /// States `q_0 .. q_N`.
    pub qs: Vec<DVector<f64>>,
    /// Costates `p_0 .. p_N`.
    pub ps: Vec<DVector<f64>>,
    /// Controls `u_0 .. u_{N-1}`.
    pub us: Vec<DVector<f64>>,
    /// Largest violation of the per-step stationarity relations along
    /// the returned chain.
    pub stationarity_residual: f64,
}

/// States `q_0..q_N`, costates `p_0..p_N`, controls `u_0..u_{N-1}` of a chain.
type Chain = (Vec<DVector<f64>>, Vec<DVector<f64>>, Vec<DVector<f64>>);

fn chain_from(
    cs: &ControlSystem,
    h: f64,
    n_steps: usize,
    q0: &DVector<f64>,
    p0: &DVector<f64>,
) -> Result<Chain> {
    let mut qs = Vec::with_capacity(n_steps + 1);
    let mut ps = Vec::with_capacity(n_steps + 1);
    let mut us = Vec::with_capacity(n_steps);
    qs.push(q0.clone());
    ps.push(p0.clone());
    let mut u_seed = DVector::zeros(cs.mc);
    for k in 0..n_steps {
        let step = oc_step_seeded(cs, h, &qs[k], &ps[k], &u_seed)
            .map_err(|e| Error::StepFailed {
                index: k,
                source: Box::new(e),
            })?;
        u_seed = step.u.clone();
        qs.push(step.q_next);
        ps.push(step.p_next);
        us.push(step.u);
    }
    Ok((qs, ps, us))
}

/// Builds the composed generating value
/// `S(q_0, p_N) = sum_k S2(q_k, p_{k+1}) - sum_{k=1}^{N-1} q_k . p_k`
/// by solving the interior chain from the boundary data `(q_0, p_N)`.
///
/// The junction terms alone are subtracted so that the finite-difference
/// partials of the value reproduce `(p_0, q_N)`.
pub fn compose_generating(
    cs: &ControlSystem,
    h: f64,
    n_steps: usize,
    q0: &DVector<f64>,
    p_n: &DVector<f64>,
) -> Result<ComposedGenerating> {
    assert!(n_steps >= 1, "composition needs at least one step");
    let endpoint = |p0: &DVector<f64>| -> Result<DVector<f64>> {
        let (_, ps, _) = chain_from(cs, h, n_steps, q0, p0)?;
        Ok(&ps[n_steps] - p_n)
    };
    let tol = 1e-12 * (1.0 + p_n.norm());
    let report = solvers::newton(endpoint, p_n, tol, 60)?;
    let (qs, ps, us) = chain_from(cs, h, n_steps, q0, &report.root)?;

    let mut value = 0.0;
    for k in 0..n_steps {
        value += generating_value(cs, h, &qs[k], &ps[k + 1])?;
    }
    for k in 1..n_steps {
        value -= qs[k].dot(&ps[k]);
    }

    // Verify the stationarity relations independently at the chain points.
    let mut residual = 0.0f64;
    for k in 0..n_steps {
        let u = eliminate_control(cs, &qs[k], &ps[k + 1], &us[k])?;
        let r_p = &ps[k] - &ps[k + 1] - cs.dh_dq(&qs[k], &ps[k + 1], &u) * h;
        let r_q = &qs[k + 1] - &qs[k] - (cs.gamma)(&qs[k], &u) * h;
        residual = residual.max(r_p.amax()).max(r_q.amax());
    }

    Ok(ComposedGenerating {
        value,
        qs,
        ps,
        us,
        stationarity_residual: residual,
    })
}

/// Solves the two-point boundary problem by Newton on the initial costate so
/// that iterating [`oc_step`] lands on `qf`.
pub fn solve_ocp(prob: &OcpProblem<'_>) -> Result<ExtremalTrajectory> {
    let cs = prob.system;
    let h = prob.horizon / prob.steps as f64;
    let endpoint = |p0: &DVector<f64>| -> Result<DVector<f64>> {
        let (qs, _, _) = chain_from(cs, h, prob.steps, &prob.q0, p0)?;
        Ok(&qs[prob.steps] - &prob.qf)
    };
    let report = solvers::newton(endpoint, &DVector::zeros(cs.n), prob.shoot_tol, prob.max_iter)
        .map_err(|e| match e {
            Error::NewtonStalled {
                residual,
                iterations,
            } => Error::OcpShootingFailed {
                residual,
                iterations,
            },
            other => other,
        })?;
    let p0 = report.root;
    let (qs, ps, us) = chain_from(cs, h, prob.steps, &prob.q0, &p0)?;

    let mut cost_j = 0.0;
    let mut warned = false;
    for k in 0..prob.steps {
        cost_j += h * (cs.cost)(&qs[k], &us[k]);
        if !warned && !control_is_minimizing(cs, &qs[k], &ps[k + 1], &us[k]) {
            log::warn!(
                "solve_ocp: extremal of `{}` is not minimizing at step {k} \
                 (control Hessian not positive definite)",
                cs.name
            );
            warned = true;
        }
    }

    let composed = |z: &DVector<f64>| -> Result<DVector<f64>> {
        let q = DVector::from_fn(cs.n, |i, _| z[i]);
        let p = DVector::from_fn(cs.n, |i, _| z[cs.n + i]);
        let (qs, ps, _) = chain_from(cs, h, prob.steps, &q, &p)?;
        let mut out = DVector::zeros(2 * cs.n);
        for i in 0..cs.n {
            out[i] = qs[prob.steps][i];
            out[cs.n + i] = ps[prob.steps][i];
        }
        Ok(out)
    };
    let mut z0 = DVector::zeros(2 * cs.n);
    for i in 0..cs.n {
        z0[i] = prob.q0[i];
        z0[cs.n + i] = p0[i];
    }
    let symplectic_defect = solvers::symplectic_defect(composed, &z0)?;

    Ok(ExtremalTrajectory {
        qs,
        ps,
        us,
        cost_j,
        symplectic_defect,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn v1(x: f64) -> DVector<f64> {
        DVector::from_vec(vec![x])
    }

    /// 2-state, 2-control system with Gamma = B u, cost = 1/2 u^T R u.
    fn matrix_lqr() -> ControlSystem {
        let b = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        let r = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 3.0]);
        let b1 = b.clone();
        let b2 = b.clone();
        let r1 = r.clone();
        let r2 = r.clone();
        let r3 = r.clone();
        ControlSystem {
            n: 2,
            mc: 2,
            gamma: Box::new(move |_, u| &b1 * u),
            dgamma_dq: Box::new(|_, _| DMatrix::zeros(2, 2)),
            dgamma_du: Box::new(move |_, _| b2.clone()),
            cost: Box::new(move |_, u| 0.5 * u.dot(&(&r1 * u))),
            dcost_dq: Box::new(|_, _| DVector::zeros(2)),
            dcost_du: Box::new(move |_, u| &r2 * u),
            d2h_du2: Box::new(move |_, _, _| r3.clone()),
            name: "matrix-lqr".into(),
        }
    }

    #[test]
    fn pontryagin_h_values() {
        let cs = systems::lqr();
        assert!((pontryagin_h(&cs, &v1(1.0), &v1(2.0), &v1(3.0)) - 11.0).abs() < 1e-14);
        // u = 0, p = 0 leaves only the running cost.
        assert!(
            (pontryagin_h(&cs, &v1(0.7), &v1(0.0), &v1(0.0)) - 0.5 * 0.49).abs() < 1e-14
        );
    }

    #[test]
    fn pontryagin_h_affine_in_p() {
        let cs = systems::pendulum_control();
        let (q, u) = (v1(0.4), v1(-0.2));
        let (p1, p2) = (v1(0.9), v1(-1.7));
        let mix = pontryagin_h(&cs, &q, &(&p1 + &p2), &u) - pontryagin_h(&cs, &q, &p1, &u)
            - pontryagin_h(&cs, &q, &p2, &u)
            + pontryagin_h(&cs, &q, &v1(0.0), &u);
        assert!(mix.abs() < 1e-14);
    }

    #[test]
    fn eliminate_control_scalar_lqr() {
        let cs = systems::lqr();
        for (q, p) in [(0.3, 1.2), (-0.9, 0.0), (2.0, -0.5)] {
            let u = eliminate_control(&cs, &v1(q), &v1(p), &v1(0.0)).unwrap();
            assert!((u[0] + p).abs() < 1e-12);
            assert!(cs.dh_du(&v1(q), &v1(p), &u).norm() <= 1e-12);
        }
    }

    #[test]
    fn eliminate_control_matrix_case() {
        // u_bar = -R^-1 B^T p, validated against a brute-force grid search.
        let cs = matrix_lqr();
        let q = DVector::from_vec(vec![0.2, -0.4]);
        let p = DVector::from_vec(vec![0.8, -0.3]);
        let u = eliminate_control(&cs, &q, &p, &DVector::zeros(2)).unwrap();

        let b = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        let r = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 3.0]);
        let expected = -(r.try_inverse().unwrap() * b.transpose() * &p);
        assert!((u.clone() - &expected).amax() < 1e-12);

        let mut best = (f64::INFINITY, DVector::zeros(2));
        let mut grid = DVector::zeros(2);
        for i in -60..=60 {
            for j in -60..=60 {
                grid[0] = i as f64 * 0.01;
                grid[1] = j as f64 * 0.01;
                let h = pontryagin_h(&cs, &q, &p, &grid);
                if h < best.0 {
                    best = (h, grid.clone());
                }
            }
        }
        assert!((best.1 - &u).amax() < 0.011, "grid minimum far from u_bar");
    }

    #[test]
    fn eliminate_control_zero_costate() {
        let cs = systems::pendulum_control();
        let u = eliminate_control(&cs, &v1(0.5), &v1(0.0), &v1(0.3)).unwrap();
        assert!(u[0].abs() < 1e-12);
    }

    #[test]
    fn eliminate_control_detects_degeneracy() {
        // Cost linear in u: d2H/du2 = 0 everywhere.
        let cs = ControlSystem {
            n: 1,
            mc: 1,
            gamma: Box::new(|_, u| u.clone()),
            dgamma_dq: Box::new(|_, _| DMatrix::zeros(1, 1)),
            dgamma_du: Box::new(|_, _| DMatrix::identity(1, 1)),
            cost: Box::new(|q, u| q[0] * q[0] + u[0]),
            dcost_dq: Box::new(|q, _| v1(2.0 * q[0])),
            dcost_du: Box::new(|_, _| v1(1.0)),
            d2h_du2: Box::new(|_, _, _| DMatrix::zeros(1, 1)),
            name: "degenerate".into(),
        };
        assert!(matches!(
            eliminate_control(&cs, &v1(1.0), &v1(0.0), &v1(0.0)),
            Err(Error::RegularityFailure)
        ));
    }

    #[test]
    fn reduced_field_lqr_closed_form() {
        let cs = systems::lqr();
        let (dq, dp) = reduced_field(&cs, &v1(1.0), &v1(0.0)).unwrap();
        assert!(dq[0].abs() < 1e-12 && (dp[0] + 1.0).abs() < 1e-12);
        let (dq, dp) = reduced_field(&cs, &v1(0.0), &v1(1.0)).unwrap();
        assert!((dq[0] + 1.0).abs() < 1e-12 && dp[0].abs() < 1e-12);
    }

    #[test]
    fn reduced_field_conserves_hamiltonian() {
        // Finite-difference d/dt of H along a short RK4 arc of the field.
        let cs = systems::pendulum_control();
        let h_at = |q: &DVector<f64>, p: &DVector<f64>| -> f64 {
            let u = eliminate_control(&cs, q, p, &DVector::zeros(1)).unwrap();
            pontryagin_h(&cs, q, p, &u)
        };
        let rk4 = |q: &DVector<f64>, p: &DVector<f64>, tau: f64| {
            let f = |q: &DVector<f64>, p: &DVector<f64>| reduced_field(&cs, q, p).unwrap();
            let (k1q, k1p) = f(q, p);
            let (k2q, k2p) = f(&(q + &k1q * (tau / 2.0)), &(p + &k1p * (tau / 2.0)));
            let (k3q, k3p) = f(&(q + &k2q * (tau / 2.0)), &(p + &k2p * (tau / 2.0)));
            let (k4q, k4p) = f(&(q + &k3q * tau), &(p + &k3p * tau));
            (
                q + (k1q + k2q * 2.0 + k3q * 2.0 + k4q) * (tau / 6.0),
                p + (k1p + k2p * 2.0 + k3p * 2.0 + k4p) * (tau / 6.0),
            )
        };
        let (q, p) = (v1(2.6), v1(0.4));
        let tau = 1e-3;
        let (qf, pf) = rk4(&q, &p, tau);
        let (qb, pb) = rk4(&q, &p, -tau);
        let dh_dt = (h_at(&qf, &pf) - h_at(&qb, &pb)) / (2.0 * tau);
        assert!(dh_dt.abs() <= 1e-8, "dH/dt = {dh_dt:e}");
    }

    #[test]
    fn oc_step_lqr_hand_value() {
        let cs = systems::lqr();
        let step = oc_step(&cs, 0.1, &v1(1.0), &v1(0.0)).unwrap();
        assert!((step.p_next[0] + 0.1).abs() < 1e-12);
        assert!((step.q_next[0] - 1.01).abs() < 1e-12);
        assert!((step.u[0] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn oc_step_zero_stepsize_is_identity() {
        let cs = systems::pendulum_control();
        let step = oc_step(&cs, 0.0, &v1(0.8), &v1(-0.4)).unwrap();
        assert_eq!(step.q_next[0], 0.8);
        assert_eq!(step.p_next[0], -0.4);
    }

    #[test]
    fn oc_step_frozen_dynamics_fixed_point() {
        // Gamma = 0 and cost independent of q freeze the phase point.
        let cs = ControlSystem {
            n: 1,
            mc: 1,
            gamma: Box::new(|_, _| DVector::zeros(1)),
            dgamma_dq: Box::new(|_, _| DMatrix::zeros(1, 1)),
            dgamma_du: Box::new(|_, _| DMatrix::zeros(1, 1)),
            cost: Box::new(|_, u| 0.5 * u[0] * u[0]),
            dcost_dq: Box::new(|_, _| DVector::zeros(1)),
            dcost_du: Box::new(|_, u| u.clone()),
            d2h_du2: Box::new(|_, _, _| DMatrix::identity(1, 1)),
            name: "frozen".into(),
        };
        let step = oc_step(&cs, 0.25, &v1(0.3), &v1(0.7)).unwrap();
        assert!((step.q_next[0] - 0.3).abs() < 1e-13);
        assert!((step.p_next[0] - 0.7).abs() < 1e-13);
    }

    #[test]
    fn oc_step_genuinely_implicit_case() {
        // Gamma = u - q makes dH/dq depend on the unknown new costate.
        let cs = ControlSystem {
            n: 1,
            mc: 1,
            gamma: Box::new(|q, u| v1(u[0] - q[0])),
            dgamma_dq: Box::new(|_, _| DMatrix::from_element(1, 1, -1.0)),
            dgamma_du: Box::new(|_, _| DMatrix::identity(1, 1)),
            cost: Box::new(|q, u| 0.5 * (q[0] * q[0] + u[0] * u[0])),
            dcost_dq: Box::new(|q, _| q.clone()),
            dcost_du: Box::new(|_, u| u.clone()),
            d2h_du2: Box::new(|_, _, _| DMatrix::identity(1, 1)),
            name: "implicit".into(),
        };
        cs.validate_at(&v1(0.3), &v1(-0.8), &v1(0.2)).unwrap();
        let (h, q, p) = (0.1, 0.5, -0.2);
        let step = oc_step(&cs, h, &v1(q), &v1(p)).unwrap();
        // p = P + h (q - P)  =>  P = (p - h q) / (1 - h)
        let expected_p = (p - h * q) / (1.0 - h);
        assert!((step.p_next[0] - expected_p).abs() < 1e-12);
        assert!((step.q_next[0] - (q + h * (-expected_p - q))).abs() < 1e-12);
    }

    #[test]
    fn generating_value_hand_and_limit() {
        let cs = systems::lqr();
        let value = generating_value(&cs, 0.1, &v1(1.0), &v1(-0.1)).unwrap();
        assert!((value + 0.0505).abs() < 1e-14, "value = {value}");

        let at_zero = generating_value(&cs, 0.0, &v1(0.7), &v1(-0.3)).unwrap();
        assert!((at_zero - (-0.3) * 0.7).abs() < 1e-14);
    }

    #[test]
    fn generating_value_partials_reproduce_step() {
        let cs = systems::lqr();
        let mut rng = StdRng::seed_from_u64(5);
        let h = 0.1;
        for _ in 0..20 {
            let q = v1(rng.gen_range(-1.0..1.0));
            let p = v1(rng.gen_range(-1.0..1.0));
            let step = oc_step(&cs, h, &q, &p).unwrap();
            let pn = &step.p_next;

            let delta = 1e-5;
            let dq = (generating_value(&cs, h, &v1(q[0] + delta), pn).unwrap()
                - generating_value(&cs, h, &v1(q[0] - delta), pn).unwrap())
                / (2.0 * delta);
            let dp = (generating_value(&cs, h, &q, &v1(pn[0] + delta)).unwrap()
                - generating_value(&cs, h, &q, &v1(pn[0] - delta)).unwrap())
                / (2.0 * delta);
            assert!((dq - p[0]).abs() < 1e-6, "dS/dq = {dq}, p = {}", p[0]);
            assert!((dp - step.q_next[0]).abs() < 1e-6);
        }
    }

    #[test]
    fn envelope_property() {
        // dS2/dq holding u_bar frozen equals dS2/dq differentiated through
        // the elimination, because dH/du vanishes at u_bar.
        let cs = systems::pendulum_control();
        let (h, q, pn) = (0.1, v1(0.9), v1(-0.35));
        let u = eliminate_control(&cs, &q, &pn, &v1(0.0)).unwrap();
        let frozen = pn[0] + h * cs.dh_dq(&q, &pn, &u)[0];
        let delta = 1e-6;
        let through = (generating_value(&cs, h, &v1(q[0] + delta), &pn).unwrap()
            - generating_value(&cs, h, &v1(q[0] - delta), &pn).unwrap())
            / (2.0 * delta);
        assert!((frozen - through).abs() < 1e-6);
    }

    #[test]
    fn compose_single_step_equals_generating_value() {
        let cs = systems::lqr();
        let composed = compose_generating(&cs, 0.1, 1, &v1(1.0), &v1(-0.1)).unwrap();
        let direct = generating_value(&cs, 0.1, &v1(1.0), &v1(-0.1)).unwrap();
        assert!((composed.value - direct).abs() < 1e-12);
    }

    #[test]
    fn compose_two_steps_stationarity() {
        let cs = systems::lqr();
        let step1 = oc_step(&cs, 0.1, &v1(1.0), &v1(0.5)).unwrap();
        let step2 = oc_step(&cs, 0.1, &step1.q_next, &step1.p_next).unwrap();
        let composed = compose_generating(&cs, 0.1, 2, &v1(1.0), &step2.p_next).unwrap();
        assert!(composed.stationarity_residual <= 1e-10);
        assert!((composed.ps[0][0] - 0.5).abs() < 1e-10);
    }

    #[test]
    fn composed_map_matches_iterated_steps() {
        let cs = systems::lqr();
        let mut rng = StdRng::seed_from_u64(13);
        for _ in 0..10 {
            let q0 = v1(rng.gen_range(-1.0..1.0));
            let p0 = v1(rng.gen_range(-1.0..1.0));
            let mut q = q0.clone();
            let mut p = p0.clone();
            for _ in 0..4 {
                let s = oc_step(&cs, 0.1, &q, &p).unwrap();
                q = s.q_next;
                p = s.p_next;
            }
            let composed = compose_generating(&cs, 0.1, 4, &q0, &p).unwrap();
            assert!((composed.ps[0].clone() - &p0).amax() <= 1e-10);
            assert!((composed.qs[4].clone() - &q).amax() <= 1e-10);
        }
    }

    #[test]
    fn compose_value_partials_reproduce_boundary() {
        let cs = systems::lqr();
        let (q0, p0) = (v1(0.8), v1(-0.6));
        let mut q = q0.clone();
        let mut p = p0.clone();
        for _ in 0..3 {
            let s = oc_step(&cs, 0.1, &q, &p).unwrap();
            q = s.q_next;
            p = s.p_next;
        }
        let pn = p.clone();
        let value = |q0x: f64, pnx: f64| {
            compose_generating(&cs, 0.1, 3, &v1(q0x), &v1(pnx))
                .unwrap()
                .value
        };
        let delta = 1e-5;
        let dq0 = (value(q0[0] + delta, pn[0]) - value(q0[0] - delta, pn[0])) / (2.0 * delta);
        let dpn = (value(q0[0], pn[0] + delta) - value(q0[0], pn[0] - delta)) / (2.0 * delta);
        assert!((dq0 - p0[0]).abs() < 1e-6, "dS/dq0 = {dq0}, p0 = {}", p0[0]);
        assert!((dpn - q[0]).abs() < 1e-6, "dS/dpN = {dpn}, qN = {}", q[0]);
    }

    #[test]
    fn oc_step_symplectic_on_samples() {
        let mut rng = StdRng::seed_from_u64(17);
        for cs in [systems::lqr(), systems::pendulum_control()] {
            for _ in 0..10 {
                let z = DVector::from_vec(vec![
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ]);
                let map = |z: &DVector<f64>| -> Result<DVector<f64>> {
                    let s = oc_step(&cs, 0.1, &v1(z[0]), &v1(z[1]))?;
                    Ok(DVector::from_vec(vec![s.q_next[0], s.p_next[0]]))
                };
                let defect = solvers::symplectic_defect(map, &z).unwrap();
                assert!(defect <= 1e-6, "defect = {defect:e} for {}", cs.name);
            }
        }
    }

    #[test]
    fn hamiltonian_deviation_stays_bounded() {
        // First-order symplectic signature: the Pontryagin Hamiltonian along
        // the iterates oscillates at O(h) without a secular trend.
        let cs = systems::pendulum_control();
        let h = 0.1;
        let steps = (10.0 / h) as usize;
        let mut q = v1(std::f64::consts::PI + 0.4);
        let mut p = v1(0.0);
        let h_at = |q: &DVector<f64>, p: &DVector<f64>| -> f64 {
            let u = eliminate_control(&cs, q, p, &DVector::zeros(1)).unwrap();
            pontryagin_h(&cs, q, p, &u)
        };
        let h0 = h_at(&q, &p);
        let mut deviations = Vec::with_capacity(steps);
        let mut u_seed = DVector::zeros(1);
        for _ in 0..steps {
            let s = oc_step_seeded(&cs, h, &q, &p, &u_seed).unwrap();
            u_seed = s.u.clone();
            q = s.q_next;
            p = s.p_next;
            deviations.push(h_at(&q, &p) - h0);
        }
        let amplitude = deviations.iter().fold(0.0f64, |a, d| a.max(d.abs()));
        assert!(amplitude <= 2.0 * h, "amplitude = {amplitude}");

        // Least-squares slope of the deviation against time.
        let n = deviations.len() as f64;
        let t_mean = (0.5 * (n + 1.0)) * h;
        let d_mean = deviations.iter().sum::<f64>() / n;
        let mut num = 0.0;
        let mut den = 0.0;
        for (k, d) in deviations.iter().enumerate() {
            let t = (k + 1) as f64 * h;
            num += (t - t_mean) * (d - d_mean);
            den += (t - t_mean) * (t - t_mean);
        }
        let slope = num / den;
        assert!(
            slope.abs() <= 0.05 * amplitude,
            "slope = {slope:e}, amplitude = {amplitude:e}"
        );
    }

    #[test]
    fn solve_ocp_zero_cost_boundary() {
        // Pure control-effort cost: u = 0 is optimal, and qF equal to the
        // drift-free endpoint keeps every control at zero.
        let cs = ControlSystem {
            n: 1,
            mc: 1,
            gamma: Box::new(|_, u| u.clone()),
            dgamma_dq: Box::new(|_, _| DMatrix::zeros(1, 1)),
            dgamma_du: Box::new(|_, _| DMatrix::identity(1, 1)),
            cost: Box::new(|_, u| 0.5 * u[0] * u[0]),
            dcost_dq: Box::new(|_, _| DVector::zeros(1)),
            dcost_du: Box::new(|_, u| u.clone()),
            d2h_du2: Box::new(|_, _, _| DMatrix::identity(1, 1)),
            name: "effort-only".into(),
        };
        let prob = OcpProblem::new(&cs, v1(0.7), v1(0.7), 1.0, 10).unwrap();
        let sol = solve_ocp(&prob).unwrap();
        for u in &sol.us {
            assert!(u[0].abs() < 1e-8);
        }
        assert!(sol.cost_j.abs() < 1e-12);
    }

    #[test]
    fn solve_ocp_single_step_reachability() {
        let cs = systems::lqr();
        let prob = OcpProblem::new(&cs, v1(1.0), v1(0.4), 0.5, 1).unwrap();
        let sol = solve_ocp(&prob).unwrap();
        assert!((sol.qs[1][0] - 0.4).abs() <= 1e-8);

        // Frozen dynamics cannot reach a different endpoint.
        let frozen = ControlSystem {
            n: 1,
            mc: 1,
            gamma: Box::new(|_, _| DVector::zeros(1)),
            dgamma_dq: Box::new(|_, _| DMatrix::zeros(1, 1)),
            dgamma_du: Box::new(|_, _| DMatrix::zeros(1, 1)),
            cost: Box::new(|_, u| 0.5 * u[0] * u[0]),
            dcost_dq: Box::new(|_, _| DVector::zeros(1)),
            dcost_du: Box::new(|_, u| u.clone()),
            d2h_du2: Box::new(|_, _, _| DMatrix::identity(1, 1)),
            name: "frozen".into(),
        };
        let bad = OcpProblem::new(&frozen, v1(0.0), v1(1.0), 0.5, 1).unwrap();
        assert!(solve_ocp(&bad).is_err());
    }

    #[test]
    fn control_types_are_shareable_across_threads() {
        fn assert_send_sync<T: Send + Sync>() {}
        assert_send_sync::<ControlSystem>();
        assert_send_sync::<ExtremalTrajectory>();
    }

    #[test]
    fn builtin_control_systems_validate() {
        let mut rng = StdRng::seed_from_u64(31);
        for cs in [systems::lqr(), systems::pendulum_control()] {
            for _ in 0..5 {
                let q = v1(rng.gen_range(-1.0..1.0));
                let p = v1(rng.gen_range(-1.0..1.0));
                let u = v1(rng.gen_range(-1.0..1.0));
                cs.validate_at(&q, &p, &u).unwrap();
            }
        }
    }
}
