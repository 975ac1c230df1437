//! High-accuracy reference machinery for the constrained dynamics: RK4 flow,
//! two-point shooting, the flow action by quadrature, force-work integrals,
//! and the two-segment composition check.
//!
//! Shooting solves for an initial velocity whose time-`h` flow endpoint hits
//! a target configuration. The Newton iteration moves the full velocity
//! vector; only the seed is projected onto the constraint distribution. For
//! targets on the reachable set this converges to the constrained solution;
//! for the finite-difference perturbations of the surrounding machinery it
//! lands on the constraint-preserving extension of the flow (the multiplier
//! construction keeps the constraint values constant along any of its
//! trajectories, feasible or not).

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::mechanics::{self, CotangentState, MechanicalSystem, TangentState};
use crate::solvers;

/// Tunables for the reference machinery. The defaults match the documented
/// tolerances of the test suite.
#[derive(Debug, Clone)]
pub struct OracleConfig {
    /// Endpoint tolerance of the shooting Newton.
    pub shoot_tol: f64,
    pub shoot_max_iter: usize,
    /// Simpson subintervals per step (even); also the RK4 resolution of a shot.
    pub subintervals: usize,
    /// Agreement threshold for the subinterval-doubling action evaluation.
    pub quad_agree_tol: f64,
    pub max_subintervals: usize,
    /// Multiplies the `sqrt(eps)` step of the endpoint perturbations used
    /// for path sensitivities.
    pub endpoint_fd_scale: f64,
    /// Relative step of the central differences of the action gradients.
    pub action_grad_delta: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            shoot_tol: 1e-12,
            shoot_max_iter: 60,
            subintervals: 64,
            quad_agree_tol: 1e-9,
            max_subintervals: 1024,
            endpoint_fd_scale: 100.0,
            action_grad_delta: 1e-4,
        }
    }
}

/// Output of a converged two-point shot.
#[derive(Debug, Clone)]
pub struct BvpSolution {
    /// Initial velocity of the connecting trajectory.
    pub v0: DVector<f64>,
    /// `(t, state)` samples at the quadrature nodes, from `t = 0` to `t = h`.
    pub samples: Vec<(f64, TangentState)>,
    /// Flow action along the samples by composite Simpson quadrature.
    pub action: f64,
    pub endpoint_error: f64,
    /// Force-work integral against the start-point sensitivity, filled by
    /// [`force_work`].
    pub work_left: Option<DVector<f64>>,
    /// Force-work integral against the endpoint sensitivity.
    pub work_right: Option<DVector<f64>>,
}

fn rk4_step(
    sys: &MechanicalSystem,
    q: &DVector<f64>,
    p: &DVector<f64>,
    dt: f64,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let f = |q: &DVector<f64>, p: &DVector<f64>| -> Result<(DVector<f64>, DVector<f64>)> {
        let eval = mechanics::constrained_rhs(sys, q, p)?;
        Ok((eval.dq, eval.dp))
    };
    let (k1q, k1p) = f(q, p)?;
    let (k2q, k2p) = f(&(q + &k1q * (dt / 2.0)), &(p + &k1p * (dt / 2.0)))?;
    let (k3q, k3p) = f(&(q + &k2q * (dt / 2.0)), &(p + &k2p * (dt / 2.0)))?;
    let (k4q, k4p) = f(&(q + &k3q * dt), &(p + &k3p * dt))?;
    Ok((
        q + (k1q + k2q * 2.0 + k3q * 2.0 + k4q) * (dt / 6.0),
        p + (k1p + k2p * 2.0 + k3p * 2.0 + k4p) * (dt / 6.0),
    ))
}

/// Classical fourth-order Runge-Kutta on the constrained field. Returns the
/// `n_steps + 1` phase points including the initial one.
pub fn rk4_integrate(
    sys: &MechanicalSystem,
    s0: &CotangentState,
    h: f64,
    n_steps: usize,
) -> Result<Vec<CotangentState>> {
    if sys.m > 0 {
        let v0 = mechanics::legendre_inv(sys, s0)?.v;
        if !sys.is_feasible(&s0.q, &v0) {
            log::warn!(
                "rk4_integrate: initial state violates the constraints of `{}`",
                sys.name
            );
        }
    }
    let mut out = Vec::with_capacity(n_steps + 1);
    out.push(s0.clone());
    let mut q = s0.q.clone();
    let mut p = s0.p.clone();
    for _ in 0..n_steps {
        let (qn, pn) = rk4_step(sys, &q, &p, h)?;
        q = qn;
        p = pn;
        out.push(CotangentState::new(q.clone(), p.clone())?);
    }
    Ok(out)
}

/// Integrates the flow from `(q0, v0)` over `[0, h]` with `subintervals` RK4
/// steps and returns the velocity phase-space samples at the step boundaries.
/// Deterministic: identical inputs reproduce the samples bit for bit.
pub fn sample_path(
    sys: &MechanicalSystem,
    q0: &DVector<f64>,
    v0: &DVector<f64>,
    h: f64,
    subintervals: usize,
) -> Result<Vec<(f64, TangentState)>> {
    let dt = h / subintervals as f64;
    let mut q = q0.clone();
    let mut p = (sys.mass)(q0) * v0;
    let mut samples = Vec::with_capacity(subintervals + 1);
    samples.push((0.0, TangentState::new(q.clone(), v0.clone())?));
    for j in 1..=subintervals {
        let (qn, pn) = rk4_step(sys, &q, &p, dt)?;
        q = qn;
        p = pn;
        let v = mechanics::legendre_inv(sys, &CotangentState::new(q.clone(), p.clone())?)?.v;
        samples.push((j as f64 * dt, TangentState::new(q.clone(), v)?));
    }
    Ok(samples)
}

/// Composite Simpson over uniformly spaced values; the sample count must be
/// odd (an even subinterval count).
fn simpson(values: &[f64], dt: f64) -> f64 {
    let n = values.len() - 1;
    debug_assert!(
        n >= 2 && n.is_multiple_of(2),
        "Simpson needs an even subinterval count"
    );
    let mut acc = values[0] + values[n];
    for (j, v) in values.iter().enumerate().take(n).skip(1) {
        acc += if j % 2 == 1 { 4.0 * v } else { 2.0 * v };
    }
    acc * dt / 3.0
}

fn endpoint_of(
    sys: &MechanicalSystem,
    q0: &DVector<f64>,
    v0: &DVector<f64>,
    h: f64,
    subintervals: usize,
) -> Result<DVector<f64>> {
    let dt = h / subintervals as f64;
    let mut q = q0.clone();
    let mut p = (sys.mass)(q0) * v0;
    for _ in 0..subintervals {
        let (qn, pn) = rk4_step(sys, &q, &p, dt)?;
        q = qn;
        p = pn;
    }
    Ok(q)
}

fn shoot_resolved(
    sys: &MechanicalSystem,
    cfg: &OracleConfig,
    q0: &DVector<f64>,
    q1: &DVector<f64>,
    h: f64,
    subintervals: usize,
    v_seed: Option<&DVector<f64>>,
) -> Result<BvpSolution> {
    let seed = match v_seed {
        Some(v) => v.clone(),
        None => mechanics::project_velocity(sys, q0, &((q1 - q0) / h)),
    };
    let residual =
        |v0: &DVector<f64>| -> Result<DVector<f64>> { Ok(endpoint_of(sys, q0, v0, h, subintervals)? - q1) };
    let report = solvers::newton(residual, &seed, cfg.shoot_tol, cfg.shoot_max_iter).map_err(
        |e| match e {
            Error::NewtonStalled {
                residual,
                iterations,
            } => Error::ShootingFailed {
                residual,
                iterations,
            },
            other => other,
        },
    )?;
    let v0 = report.root;
    let samples = sample_path(sys, q0, &v0, h, subintervals)?;
    let dt = h / subintervals as f64;
    let lagrangians: Vec<f64> = samples
        .iter()
        .map(|(_, s)| sys.lagrangian(&s.q, &s.v))
        .collect();
    let action = simpson(&lagrangians, dt);
    let endpoint_error = (&samples.last().expect("nonempty").1.q - q1).norm();
    Ok(BvpSolution {
        v0,
        samples,
        action,
        endpoint_error,
        work_left: None,
        work_right: None,
    })
}

/// Two-point shot: finds `v0` whose time-`h` flow endpoint matches `q1`
/// within the configured tolerance and returns the trajectory together with
/// its action.
pub fn shoot(
    sys: &MechanicalSystem,
    cfg: &OracleConfig,
    q0: &DVector<f64>,
    q1: &DVector<f64>,
    h: f64,
) -> Result<BvpSolution> {
    shoot_resolved(sys, cfg, q0, q1, h, cfg.subintervals, None)
}

/// Flow action `S(q0, q1) = integral of L along the connecting trajectory`,
/// with the quadrature (and flow) resolution doubled until two successive
/// values agree within `quad_agree_tol`.
pub fn exact_action(
    sys: &MechanicalSystem,
    cfg: &OracleConfig,
    q0: &DVector<f64>,
    q1: &DVector<f64>,
    h: f64,
) -> Result<f64> {
    let mut subintervals = cfg.subintervals;
    let mut sol = shoot_resolved(sys, cfg, q0, q1, h, subintervals, None)?;
    loop {
        if 2 * subintervals > cfg.max_subintervals {
            log::warn!(
                "exact_action: quadrature not converged at {} subintervals",
                subintervals
            );
            return Ok(sol.action);
        }
        let finer = shoot_resolved(sys, cfg, q0, q1, h, 2 * subintervals, Some(&sol.v0))?;
        if (finer.action - sol.action).abs() <= cfg.quad_agree_tol {
            return Ok(finer.action);
        }
        subintervals *= 2;
        sol = finer;
    }
}

#[derive(Clone, Copy, PartialEq)]
enum WorkSide {
    Left,
    Right,
    Both,
}

/// `(work_left, work_right)`, each present when requested.
type WorkPair = (Option<DVector<f64>>, Option<DVector<f64>>);

/// Work integrals of the constraint force against the endpoint sensitivities
/// of the shooting family: perturbing each coordinate of an endpoint, re-solving
/// the boundary problem, differencing the paths, and integrating the
/// contraction with the force along the base path.
fn work_integrals(
    sys: &MechanicalSystem,
    cfg: &OracleConfig,
    q0: &DVector<f64>,
    q1: &DVector<f64>,
    h: f64,
    side: WorkSide,
) -> Result<WorkPair> {
    let n = sys.n;
    if sys.m == 0 {
        let zero = DVector::zeros(n);
        return Ok(match side {
            WorkSide::Left => (Some(zero), None),
            WorkSide::Right => (None, Some(zero)),
            WorkSide::Both => (Some(zero.clone()), Some(zero)),
        });
    }
    let subintervals = cfg.subintervals;
    let dt = h / subintervals as f64;
    let base = shoot_resolved(sys, cfg, q0, q1, h, subintervals, None)?;
    let forces: Vec<DVector<f64>> = base
        .samples
        .iter()
        .map(|(_, s)| mechanics::constrained_rhs(sys, &s.q, &((sys.mass)(&s.q) * &s.v)).map(|e| e.force))
        .collect::<Result<_>>()?;

    let compute = |perturb_start: bool| -> Result<DVector<f64>> {
        let mut work = DVector::zeros(n);
        for i in 0..n {
            let anchor = if perturb_start { q0[i] } else { q1[i] };
            let delta = f64::EPSILON.sqrt() * (1.0 + anchor.abs()) * cfg.endpoint_fd_scale;
            let shifted = |sign: f64| -> Result<BvpSolution> {
                let mut a = q0.clone();
                let mut b = q1.clone();
                if perturb_start {
                    a[i] += sign * delta;
                } else {
                    b[i] += sign * delta;
                }
                shoot_resolved(sys, cfg, &a, &b, h, subintervals, Some(&base.v0)).map_err(|e| {
                    Error::PerturbedShotFailed {
                        coordinate: i,
                        source: Box::new(e),
                    }
                })
            };
            let plus = shifted(1.0)?;
            let minus = shifted(-1.0)?;
            let integrand: Vec<f64> = (0..=subintervals)
                .map(|j| {
                    let sens = (&plus.samples[j].1.q - &minus.samples[j].1.q) / (2.0 * delta);
                    forces[j].dot(&sens)
                })
                .collect();
            work[i] = simpson(&integrand, dt);
        }
        Ok(work)
    };

    let left = match side {
        WorkSide::Left | WorkSide::Both => Some(compute(true)?),
        WorkSide::Right => None,
    };
    let right = match side {
        WorkSide::Right | WorkSide::Both => Some(compute(false)?),
        WorkSide::Left => None,
    };
    Ok((left, right))
}

/// Both force-work integrals for the segment `(q0, q1)`: against the
/// start-point sensitivity `dq/dq0` and the endpoint sensitivity `dq/dq1`.
/// Exactly zero for unconstrained systems.
pub fn force_work(
    sys: &MechanicalSystem,
    cfg: &OracleConfig,
    q0: &DVector<f64>,
    q1: &DVector<f64>,
    h: f64,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let (l, r) = work_integrals(sys, cfg, q0, q1, h, WorkSide::Both)?;
    Ok((l.expect("left requested"), r.expect("right requested")))
}

fn action_at(
    sys: &MechanicalSystem,
    cfg: &OracleConfig,
    q0: &DVector<f64>,
    q1: &DVector<f64>,
    h: f64,
    seed: &DVector<f64>,
) -> Result<f64> {
    Ok(shoot_resolved(sys, cfg, q0, q1, h, cfg.subintervals, Some(seed))?.action)
}

/// Central-difference gradient of the flow action in its first argument.
pub fn action_grad_first(
    sys: &MechanicalSystem,
    cfg: &OracleConfig,
    q0: &DVector<f64>,
    q1: &DVector<f64>,
    h: f64,
) -> Result<DVector<f64>> {
    let base = shoot_resolved(sys, cfg, q0, q1, h, cfg.subintervals, None)?;
    let mut grad = DVector::zeros(sys.n);
    let mut qa = q0.clone();
    for i in 0..sys.n {
        let delta = cfg.action_grad_delta * (1.0 + q0[i].abs());
        qa[i] = q0[i] + delta;
        let up = action_at(sys, cfg, &qa, q1, h, &base.v0)?;
        qa[i] = q0[i] - delta;
        let dn = action_at(sys, cfg, &qa, q1, h, &base.v0)?;
        qa[i] = q0[i];
        grad[i] = (up - dn) / (2.0 * delta);
    }
    Ok(grad)
}

/// Central-difference gradient of the flow action in its second argument.
pub fn action_grad_second(
    sys: &MechanicalSystem,
    cfg: &OracleConfig,
    q0: &DVector<f64>,
    q1: &DVector<f64>,
    h: f64,
) -> Result<DVector<f64>> {
    let base = shoot_resolved(sys, cfg, q0, q1, h, cfg.subintervals, None)?;
    let mut grad = DVector::zeros(sys.n);
    let mut qb = q1.clone();
    for i in 0..sys.n {
        let delta = cfg.action_grad_delta * (1.0 + q1[i].abs());
        qb[i] = q1[i] + delta;
        let up = action_at(sys, cfg, q0, &qb, h, &base.v0)?;
        qb[i] = q1[i] - delta;
        let dn = action_at(sys, cfg, q0, &qb, h, &base.v0)?;
        qb[i] = q1[i];
        grad[i] = (up - dn) / (2.0 * delta);
    }
    Ok(grad)
}

/// Initial-pair constraint of the flow: the momentum-space constraint at
/// `(q0, p0)` with `p0 = -dS/dq0 + work_left` reconstructed from the shot.
/// Zero for pairs generated by a feasible trajectory.
pub fn exact_initial_constraint(
    sys: &MechanicalSystem,
    cfg: &OracleConfig,
    q0: &DVector<f64>,
    q1: &DVector<f64>,
    h: f64,
) -> Result<DVector<f64>> {
    if sys.m == 0 {
        return Ok(DVector::zeros(0));
    }
    let grad0 = action_grad_first(sys, cfg, q0, q1, h)?;
    let (work_left, _) = work_integrals(sys, cfg, q0, q1, h, WorkSide::Left)?;
    let p0 = -grad0 + work_left.expect("left requested");
    mechanics::constraint_p(sys, &CotangentState::new(q0.clone(), p0)?)
}

/// Result of [`composition_check`].
#[derive(Debug, Clone)]
pub struct CompositionCheck {
    /// Junction point solving the two-segment matching equation.
    pub q1: DVector<f64>,
    /// `|S(q0, q2; 2h) - S(q0, q1; h) - S(q1, q2; h)|` at the matched `q1`.
    pub additivity_defect: f64,
    /// Norm of the matching equation at the returned `q1`.
    pub matching_defect: f64,
}

/// Verifies the two-segment composition law of the flow action: solves
///
/// `D2 S(q0, q1) + D1 S(q1, q2) = work_right(q0, q1) + work_left(q1, q2)`
///
/// for the junction `q1` and reports how exactly the action over `2h` splits
/// into the two matched one-step actions.
pub fn composition_check(
    sys: &MechanicalSystem,
    cfg: &OracleConfig,
    q0: &DVector<f64>,
    q2: &DVector<f64>,
    h: f64,
) -> Result<CompositionCheck> {
    let matching = |q1: &DVector<f64>| -> Result<DVector<f64>> {
        let mut g = action_grad_second(sys, cfg, q0, q1, h)?;
        g += action_grad_first(sys, cfg, q1, q2, h)?;
        let (_, wr) = work_integrals(sys, cfg, q0, q1, h, WorkSide::Right)?;
        let (wl, _) = work_integrals(sys, cfg, q1, q2, h, WorkSide::Left)?;
        g -= wr.expect("right requested");
        g -= wl.expect("left requested");
        Ok(g)
    };
    let seed = (q0 + q2) * 0.5;
    let report = solvers::newton_lenient(matching, &seed, 1e-10, 25, 1e4)?;
    let q1 = report.root;
    let matching_defect = report.residual_norm;

    let s_total = shoot_resolved(sys, cfg, q0, q2, 2.0 * h, 2 * cfg.subintervals, None)?.action;
    let s_a = shoot_resolved(sys, cfg, q0, &q1, h, cfg.subintervals, None)?.action;
    let s_b = shoot_resolved(sys, cfg, &q1, q2, h, cfg.subintervals, None)?.action;
    Ok(CompositionCheck {
        q1,
        additivity_defect: (s_total - s_a - s_b).abs(),
        matching_defect,
    })
}
