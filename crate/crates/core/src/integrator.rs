//! Discrete-action integrator family for constrained mechanical systems.
//!
//! The discrete action is the one-point quadrature
//! `S(q0, q1) = h L((1-a) q0 + a q1, (q1 - q0)/h)` for a parameter
//! `a` in `[0, 1]`, and the constraint forces are approximated at the same
//! weighted point with the difference-quotient velocity. A step solves
//!
//! `D2 S(q_prev, q_cur) + D1 S(q_cur, q_next)
//!     = a h force(q_prev, q_cur) + (1-a) h force(q_cur, q_next)`
//!
//! for `q_next`; the trajectory is seeded from a phase point `(q0, p0)` by
//! solving `p0 = -D1 S(q0, q1) + (1-a) h force(q0, q1)` for `q1`, which
//! simultaneously places the pair on the discrete constraint set. Momenta are
//! reconstructed from `p_k = D2 S(q_{k-1}, q_k) - a h force(q_{k-1}, q_k)`.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::mechanics::{
    self, CotangentState, ForceCovector, MechanicalSystem, TangentState,
};
use crate::solvers::{self, NewtonReport};

/// Parameters of the discrete scheme.
#[derive(Debug, Clone)]
pub struct IntegratorConfig {
    /// Quadrature weight in `[0, 1]`; `0.5` gives the midpoint scheme.
    pub alpha: f64,
    /// Time step, positive.
    pub h: f64,
    pub newton_tol: f64,
    pub newton_max_iter: usize,
}

impl IntegratorConfig {
    pub fn new(alpha: f64, h: f64) -> Self {
        assert!((0.0..=1.0).contains(&alpha), "alpha must lie in [0, 1]");
        assert!(h > 0.0, "step size must be positive");
        Self {
            alpha,
            h,
            newton_tol: 1e-10,
            newton_max_iter: 50,
        }
    }

    pub fn with_tolerance(mut self, tol: f64) -> Self {
        assert!(tol > 0.0);
        self.newton_tol = tol;
        self
    }

    fn weighted_point(&self, qa: &DVector<f64>, qb: &DVector<f64>) -> DVector<f64> {
        qa * (1.0 - self.alpha) + qb * self.alpha
    }

    fn quotient_velocity(&self, qa: &DVector<f64>, qb: &DVector<f64>) -> DVector<f64> {
        (qb - qa) / self.h
    }
}

/// Discrete path with per-step diagnostics. All sequences have length
/// `N + 1` and `times[k] = k * h` exactly.
#[derive(Debug, Clone)]
pub struct DiscreteTrajectory {
    pub times: Vec<f64>,
    pub qs: Vec<DVector<f64>>,
    pub ps: Vec<DVector<f64>>,
    pub energies: Vec<f64>,
    /// Constraint values at the weighted point of the arriving segment with
    /// the difference-quotient velocity (continuous constraint at k = 0).
    pub constraint_residuals: Vec<DVector<f64>>,
    pub multipliers: Vec<DVector<f64>>,
    pub newton_iters: Vec<usize>,
}

impl DiscreteTrajectory {
    pub fn len(&self) -> usize {
        self.qs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.qs.is_empty()
    }
}

/// Discrete action `h L((1-a) q0 + a q1, (q1 - q0)/h)`.
pub fn discrete_action(
    sys: &MechanicalSystem,
    cfg: &IntegratorConfig,
    q0: &DVector<f64>,
    q1: &DVector<f64>,
) -> f64 {
    let mid = cfg.weighted_point(q0, q1);
    let v = cfg.quotient_velocity(q0, q1);
    cfg.h * sys.lagrangian(&mid, &v)
}

/// Partial derivative of [`discrete_action`] in its first argument.
pub fn d1_action(
    sys: &MechanicalSystem,
    cfg: &IntegratorConfig,
    q0: &DVector<f64>,
    q1: &DVector<f64>,
) -> DVector<f64> {
    let mid = cfg.weighted_point(q0, q1);
    let v = cfg.quotient_velocity(q0, q1);
    let grad_l = sys.grad_q_lagrangian(&mid, &v);
    let mv = (sys.mass)(&mid) * &v;
    grad_l * ((1.0 - cfg.alpha) * cfg.h) - mv
}

/// Partial derivative of [`discrete_action`] in its second argument.
pub fn d2_action(
    sys: &MechanicalSystem,
    cfg: &IntegratorConfig,
    q0: &DVector<f64>,
    q1: &DVector<f64>,
) -> DVector<f64> {
    let mid = cfg.weighted_point(q0, q1);
    let v = cfg.quotient_velocity(q0, q1);
    let grad_l = sys.grad_q_lagrangian(&mid, &v);
    let mv = (sys.mass)(&mid) * &v;
    grad_l * (cfg.alpha * cfg.h) + mv
}

/// Constraint force evaluated at the weighted point of the segment with the
/// difference-quotient velocity.
pub fn discrete_force(
    sys: &MechanicalSystem,
    cfg: &IntegratorConfig,
    qa: &DVector<f64>,
    qb: &DVector<f64>,
) -> Result<ForceCovector> {
    let mid = cfg.weighted_point(qa, qb);
    let v = cfg.quotient_velocity(qa, qb);
    let state = TangentState::new(mid, v)?;
    mechanics::multiplier_force(sys, &state)
}

/// Residual of the implicit step equation; its root in `q_next` defines the
/// scheme.
pub fn step_residual(
    sys: &MechanicalSystem,
    cfg: &IntegratorConfig,
    q_prev: &DVector<f64>,
    q_cur: &DVector<f64>,
    q_next: &DVector<f64>,
) -> Result<DVector<f64>> {
    let mut r = d2_action(sys, cfg, q_prev, q_cur) + d1_action(sys, cfg, q_cur, q_next);
    r -= discrete_force(sys, cfg, q_prev, q_cur)?.force * (cfg.alpha * cfg.h);
    r -= discrete_force(sys, cfg, q_cur, q_next)?.force * ((1.0 - cfg.alpha) * cfg.h);
    Ok(r)
}

/// Momentum attached to the left endpoint of a segment by the first
/// discrete Legendre relation `-D1 S + (1-a) h force`. Exposed for the
/// definitional round-trip against [`initialize`].
pub fn left_momentum(
    sys: &MechanicalSystem,
    cfg: &IntegratorConfig,
    q_cur: &DVector<f64>,
    q_next: &DVector<f64>,
) -> Result<DVector<f64>> {
    let force = discrete_force(sys, cfg, q_cur, q_next)?.force;
    Ok(-d1_action(sys, cfg, q_cur, q_next) + force * ((1.0 - cfg.alpha) * cfg.h))
}

/// Momentum attached to the right endpoint of a segment by the second
/// discrete Legendre relation `D2 S - a h force`.
pub fn reconstruct_momentum(
    sys: &MechanicalSystem,
    cfg: &IntegratorConfig,
    q_prev: &DVector<f64>,
    q_cur: &DVector<f64>,
) -> Result<DVector<f64>> {
    let force = discrete_force(sys, cfg, q_prev, q_cur)?.force;
    Ok(d2_action(sys, cfg, q_prev, q_cur) - force * (cfg.alpha * cfg.h))
}

/// Discrete initial constraint of a seeded pair: the momentum-space
/// constraint evaluated at `(q0, left_momentum(q0, q1))`. Zero, within the
/// Newton tolerance, for pairs produced by [`initialize`] from feasible data.
pub fn discrete_initial_constraint(
    sys: &MechanicalSystem,
    cfg: &IntegratorConfig,
    q0: &DVector<f64>,
    q1: &DVector<f64>,
) -> Result<DVector<f64>> {
    let p0 = left_momentum(sys, cfg, q0, q1)?;
    mechanics::constraint_p(sys, &CotangentState::new(q0.clone(), p0)?)
}

fn solve_initialize(
    sys: &MechanicalSystem,
    cfg: &IntegratorConfig,
    s0: &CotangentState,
) -> Result<NewtonReport> {
    if sys.m > 0 {
        let c = mechanics::constraint_p(sys, s0)?;
        let tol = mechanics::FEASIBILITY_TOL * (1.0 + s0.p.norm());
        if c.amax() > tol {
            log::warn!(
                "initialize: initial momentum violates the constraints of `{}` \
                 (|Psi| = {:.3e}); solving anyway",
                sys.name,
                c.amax()
            );
        }
    }
    let v0 = mechanics::legendre_inv(sys, s0)?.v;
    let seed = &s0.q + &v0 * cfg.h;
    let residual = |q1: &DVector<f64>| -> Result<DVector<f64>> {
        Ok(left_momentum(sys, cfg, &s0.q, q1)? - &s0.p)
    };
    solvers::newton(residual, &seed, cfg.newton_tol, cfg.newton_max_iter).map_err(|e| match e {
        Error::NewtonStalled {
            residual,
            iterations,
        } => Error::InitializationFailed {
            residual,
            iterations,
        },
        other => other,
    })
}

/// Solves the seeding equation `p0 = -D1 S(q0, q1) + (1-a) h force(q0, q1)`
/// for `q1`, starting the Newton iteration at `q0 + h v0`.
pub fn initialize(
    sys: &MechanicalSystem,
    cfg: &IntegratorConfig,
    s0: &CotangentState,
) -> Result<DVector<f64>> {
    Ok(solve_initialize(sys, cfg, s0)?.root)
}

fn solve_step(
    sys: &MechanicalSystem,
    cfg: &IntegratorConfig,
    q_prev: &DVector<f64>,
    q_cur: &DVector<f64>,
) -> Result<NewtonReport> {
    let seed = q_cur * 2.0 - q_prev;
    let residual =
        |q_next: &DVector<f64>| -> Result<DVector<f64>> { step_residual(sys, cfg, q_prev, q_cur, q_next) };
    solvers::newton(residual, &seed, cfg.newton_tol, cfg.newton_max_iter)
}

/// Advances the two-point history `(q_prev, q_cur)` by one step.
pub fn step(
    sys: &MechanicalSystem,
    cfg: &IntegratorConfig,
    q_prev: &DVector<f64>,
    q_cur: &DVector<f64>,
) -> Result<DVector<f64>> {
    Ok(solve_step(sys, cfg, q_prev, q_cur)?.root)
}

/// One-step phase-space map `(q, p) -> (q', p')` induced by the scheme:
/// the initialization solve followed by momentum reconstruction. For
/// unconstrained systems this is the symplectic map generated by the
/// discrete action.
pub fn flow_map(
    sys: &MechanicalSystem,
    cfg: &IntegratorConfig,
    s: &CotangentState,
) -> Result<CotangentState> {
    let q_next = initialize(sys, cfg, s)?;
    let p_next = reconstruct_momentum(sys, cfg, &s.q, &q_next)?;
    CotangentState::new(q_next, p_next)
}

/// Runs the scheme for `n_steps` steps from the phase point `s0` and collects
/// per-step diagnostics.
pub fn run(
    sys: &MechanicalSystem,
    cfg: &IntegratorConfig,
    s0: &CotangentState,
    n_steps: usize,
) -> Result<DiscreteTrajectory> {
    assert!(n_steps >= 1, "need at least one step");
    let mut qs: Vec<DVector<f64>> = Vec::with_capacity(n_steps + 1);
    let mut iters = Vec::with_capacity(n_steps + 1);

    qs.push(s0.q.clone());
    iters.push(0);
    let init = solve_initialize(sys, cfg, s0)?;
    qs.push(init.root);
    iters.push(init.iterations);
    for k in 2..=n_steps {
        let report = solve_step(sys, cfg, &qs[k - 2], &qs[k - 1]).map_err(|e| Error::StepFailed {
            index: k - 1,
            source: Box::new(e),
        })?;
        qs.push(report.root);
        iters.push(report.iterations);
    }

    let mut ps = Vec::with_capacity(n_steps + 1);
    ps.push(s0.p.clone());
    for k in 1..=n_steps {
        ps.push(reconstruct_momentum(sys, cfg, &qs[k - 1], &qs[k])?);
    }

    let mut times = Vec::with_capacity(n_steps + 1);
    let mut energies = Vec::with_capacity(n_steps + 1);
    let mut residuals = Vec::with_capacity(n_steps + 1);
    let mut multipliers = Vec::with_capacity(n_steps + 1);
    for k in 0..=n_steps {
        times.push(k as f64 * cfg.h);
        let state = CotangentState::new(qs[k].clone(), ps[k].clone())?;
        energies.push(mechanics::hamiltonian(sys, &state)?);
        let (point, velocity) = if k == 0 {
            (s0.q.clone(), mechanics::legendre_inv(sys, s0)?.v)
        } else {
            (
                cfg.weighted_point(&qs[k - 1], &qs[k]),
                cfg.quotient_velocity(&qs[k - 1], &qs[k]),
            )
        };
        residuals.push((sys.phi)(&point, &velocity));
        let fc = mechanics::multiplier_force(sys, &TangentState::new(point, velocity)?)?;
        multipliers.push(fc.lambda);
    }

    Ok(DiscreteTrajectory {
        times,
        qs,
        ps,
        energies,
        constraint_residuals: residuals,
        multipliers,
        newton_iters: iters,
    })
}
