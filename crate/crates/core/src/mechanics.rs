//! Constrained mechanical systems and their continuous dynamics.
//!
//! A [`MechanicalSystem`] is a kinetic-minus-potential Lagrangian
//! `L(q, v) = 1/2 v^T M(q) v - V(q)` together with `m` velocity constraints
//! `phi^a(q, v) = 0` whose velocity Jacobian has full rank. The module
//! provides the Legendre pair, energy/Hamiltonian evaluation, the constraint
//! functions on momentum phase space, the compatibility matrix
//! `C = dphi_dv . M^-1 . dphi_dv^T`, and the constrained vector field with
//! the Lagrange multipliers eliminated through `C`.
//!
//! Sign conventions: with `A = dphi_dv` and `drift^a` the derivative of the
//! momentum-space constraint along the unconstrained Hamiltonian field, the
//! reported multipliers are `lambda = -C^-1 drift` and the constraint force
//! entering `dp/dt = -dH/dq - force` is `force = -A^T lambda`. This makes the
//! constraint derivative vanish identically along the constrained field, so
//! the constraint value is a first integral of the field even off the
//! constraint set.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

pub type ScalarFn = Box<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>;
pub type GradientFn = Box<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
pub type MassFn = Box<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>;
pub type ConstraintFn = Box<dyn Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync>;
pub type ConstraintJacobianFn =
    Box<dyn Fn(&DVector<f64>, &DVector<f64>) -> DMatrix<f64> + Send + Sync>;

/// Tolerance scale below which a state counts as "on the constraint":
/// `|phi^a| <= FEASIBILITY_TOL * (1 + |v|)`.
pub const FEASIBILITY_TOL: f64 = 1e-8;

/// Velocity phase-space point `(q, v)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentState {
    pub q: DVector<f64>,
    pub v: DVector<f64>,
}

impl TangentState {
    pub fn new(q: DVector<f64>, v: DVector<f64>) -> Result<Self> {
        if q.len() != v.len() {
            return Err(Error::Dimension {
                what: "TangentState velocity",
                expected: q.len(),
                got: v.len(),
            });
        }
        if !(q.iter().all(|x| x.is_finite()) && v.iter().all(|x| x.is_finite())) {
            return Err(Error::NonFinite {
                what: "TangentState",
            });
        }
        Ok(Self { q, v })
    }
}

/// Momentum phase-space point `(q, p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CotangentState {
    pub q: DVector<f64>,
    pub p: DVector<f64>,
}

impl CotangentState {
    pub fn new(q: DVector<f64>, p: DVector<f64>) -> Result<Self> {
        if q.len() != p.len() {
            return Err(Error::Dimension {
                what: "CotangentState momentum",
                expected: q.len(),
                got: p.len(),
            });
        }
        if !(q.iter().all(|x| x.is_finite()) && p.iter().all(|x| x.is_finite())) {
            return Err(Error::NonFinite {
                what: "CotangentState",
            });
        }
        Ok(Self { q, p })
    }
}

/// Multiplier vector together with the resulting constraint-force covector.
///
/// `force` enters the dynamics as `dp/dt = -dH/dq - force` and equals
/// `-dphi_dv^T lambda` at the evaluation point.
#[derive(Debug, Clone)]
pub struct ForceCovector {
    pub lambda: DVector<f64>,
    pub force: DVector<f64>,
}

/// A mechanical system with `n` configuration coordinates and `m`
/// velocity constraints.
pub struct MechanicalSystem {
    pub n: usize,
    pub m: usize,
    pub mass: MassFn,
    pub potential: ScalarFn,
    pub grad_potential: GradientFn,
    pub phi: ConstraintFn,
    pub dphi_dq: ConstraintJacobianFn,
    pub dphi_dv: ConstraintJacobianFn,
    pub name: String,
}

impl MechanicalSystem {
    /// Builds an unconstrained system (m = 0).
    pub fn unconstrained(
        n: usize,
        mass: MassFn,
        potential: ScalarFn,
        grad_potential: GradientFn,
        name: &str,
    ) -> Self {
        Self {
            n,
            m: 0,
            mass,
            potential,
            grad_potential,
            phi: Box::new(|_, _| DVector::zeros(0)),
            dphi_dq: Box::new(move |_, _| DMatrix::zeros(0, n)),
            dphi_dv: Box::new(move |_, _| DMatrix::zeros(0, n)),
            name: name.to_string(),
        }
    }

    pub fn lagrangian(&self, q: &DVector<f64>, v: &DVector<f64>) -> f64 {
        self.kinetic(q, v) - (self.potential)(q)
    }

    pub fn kinetic(&self, q: &DVector<f64>, v: &DVector<f64>) -> f64 {
        0.5 * v.dot(&((self.mass)(q) * v))
    }

    pub(crate) fn mass_cholesky(&self, q: &DVector<f64>) -> Result<Cholesky<f64, Dyn>> {
        Cholesky::new((self.mass)(q)).ok_or_else(|| Error::MassNotSpd {
            q: q.iter().copied().collect(),
        })
    }

    /// True when `|phi^a(q, v)| <= 1e-8 * (1 + |v|)` for every constraint.
    pub fn is_feasible(&self, q: &DVector<f64>, v: &DVector<f64>) -> bool {
        if self.m == 0 {
            return true;
        }
        let tol = FEASIBILITY_TOL * (1.0 + v.norm());
        (self.phi)(q, v).iter().all(|c| c.abs() <= tol)
    }

    /// Gradient of the Lagrangian in `q` at fixed velocity. The potential
    /// part is analytic; the kinetic part is central-differenced and is an
    /// exact zero for configuration-independent mass.
    pub fn grad_q_lagrangian(&self, q: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        let mut grad = -(self.grad_potential)(q);
        let mut qp = q.clone();
        for i in 0..self.n {
            let step = fd_step(q[i]);
            qp[i] = q[i] + step;
            let upper = self.kinetic(&qp, v);
            qp[i] = q[i] - step;
            let lower = self.kinetic(&qp, v);
            qp[i] = q[i];
            grad[i] += (upper - lower) / (2.0 * step);
        }
        grad
    }

    /// Spot-checks the user-supplied callbacks at one state: SPD mass, full
    /// constraint rank, and agreement of `grad_potential` with central
    /// differences of the potential.
    pub fn validate_at(&self, q: &DVector<f64>, v: &DVector<f64>) -> Result<()> {
        self.mass_cholesky(q)?;
        if self.m > 0 {
            compat_cholesky(self, q, v)?;
        }
        let analytic = (self.grad_potential)(q);
        let mut qp = q.clone();
        for i in 0..self.n {
            let step = fd_step(q[i]);
            qp[i] = q[i] + step;
            let upper = (self.potential)(&qp);
            qp[i] = q[i] - step;
            let lower = (self.potential)(&qp);
            qp[i] = q[i];
            let fd = (upper - lower) / (2.0 * step);
            if (fd - analytic[i]).abs() > 1e-6 * (1.0 + analytic[i].abs()) {
                return Err(Error::NonFinite {
                    what: "grad_potential disagrees with finite differences of the potential",
                });
            }
        }
        Ok(())
    }
}

impl std::fmt::Debug for MechanicalSystem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MechanicalSystem")
            .field("name", &self.name)
            .field("n", &self.n)
            .field("m", &self.m)
            .finish()
    }
}

/// Central-difference step for configuration derivatives of the mass matrix.
fn fd_step(coord: f64) -> f64 {
    f64::EPSILON.cbrt() * (1.0 + coord.abs())
}

/// Legendre transform `(q, v) -> (q, M(q) v)`.
pub fn legendre(sys: &MechanicalSystem, s: &TangentState) -> Result<CotangentState> {
    // SPD is part of the contract even though the forward map needs no solve.
    sys.mass_cholesky(&s.q)?;
    CotangentState::new(s.q.clone(), (sys.mass)(&s.q) * &s.v)
}

/// Inverse Legendre transform: solves `M(q) v = p`.
pub fn legendre_inv(sys: &MechanicalSystem, s: &CotangentState) -> Result<TangentState> {
    let chol = sys.mass_cholesky(&s.q)?;
    TangentState::new(s.q.clone(), chol.solve(&s.p))
}

/// Energy `1/2 v^T M(q) v + V(q)`.
pub fn energy(sys: &MechanicalSystem, s: &TangentState) -> f64 {
    sys.kinetic(&s.q, &s.v) + (sys.potential)(&s.q)
}

/// Hamiltonian `1/2 p^T M(q)^-1 p + V(q)`.
pub fn hamiltonian(sys: &MechanicalSystem, s: &CotangentState) -> Result<f64> {
    let chol = sys.mass_cholesky(&s.q)?;
    Ok(0.5 * s.p.dot(&chol.solve(&s.p)) + (sys.potential)(&s.q))
}

/// Constraint functions expressed on momentum phase space:
/// `Psi^a(q, p) = phi^a(q, M(q)^-1 p)`.
pub fn constraint_p(sys: &MechanicalSystem, s: &CotangentState) -> Result<DVector<f64>> {
    let t = legendre_inv(sys, s)?;
    Ok((sys.phi)(&t.q, &t.v))
}

/// Compatibility matrix `C = dphi_dv . M(q)^-1 . dphi_dv^T` at `(q, v)`.
///
/// Symmetric positive definite whenever the mass matrix is SPD and the
/// constraint Jacobian has full rank; singularity is reported as a
/// compatibility violation.
pub fn compat_matrix(sys: &MechanicalSystem, s: &TangentState) -> Result<DMatrix<f64>> {
    if sys.m == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let (c, _) = compat_cholesky(sys, &s.q, &s.v)?;
    Ok(c)
}

fn compat_cholesky(
    sys: &MechanicalSystem,
    q: &DVector<f64>,
    v: &DVector<f64>,
) -> Result<(DMatrix<f64>, Cholesky<f64, Dyn>)> {
    let chol_m = sys.mass_cholesky(q)?;
    let a = (sys.dphi_dv)(q, v);
    let minv_at = chol_m.solve(&a.transpose());
    let c = &a * &minv_at;
    // Symmetrize to kill rounding asymmetry before factorizing.
    let c = (&c + c.transpose()) * 0.5;
    match Cholesky::new(c.clone()) {
        Some(chol_c) => Ok((c, chol_c)),
        None => Err(Error::CompatibilityViolated {
            q: q.iter().copied().collect(),
            v: v.iter().copied().collect(),
        }),
    }
}

/// Everything the constrained field evaluation produces at one phase point.
pub(crate) struct FieldEval {
    pub v: DVector<f64>,
    pub dq: DVector<f64>,
    pub dp: DVector<f64>,
    pub lambda: DVector<f64>,
    pub force: DVector<f64>,
}

/// Core evaluation shared by [`multiplier_force`] and [`nonholonomic_field`].
pub(crate) fn constrained_rhs(
    sys: &MechanicalSystem,
    q: &DVector<f64>,
    p: &DVector<f64>,
) -> Result<FieldEval> {
    let chol_m = sys.mass_cholesky(q)?;
    let v = chol_m.solve(p);

    // dH/dq = grad V + d/dq [ 1/2 p^T M(q)^-1 p ] at fixed p. The kinetic
    // part is central-differenced; the same solves give the velocity
    // sensitivity d(M^-1 p)/dq needed in the constraint drift.
    let mut dh_dq = (sys.grad_potential)(q);
    let mut dv_dq = DMatrix::zeros(sys.n, sys.n);
    let mut qp = q.clone();
    for i in 0..sys.n {
        let step = fd_step(q[i]);
        qp[i] = q[i] + step;
        let v_up = sys.mass_cholesky(&qp)?.solve(p);
        qp[i] = q[i] - step;
        let v_dn = sys.mass_cholesky(&qp)?.solve(p);
        qp[i] = q[i];
        dh_dq[i] += (0.5 * p.dot(&v_up) - 0.5 * p.dot(&v_dn)) / (2.0 * step);
        let col = (v_up - v_dn) / (2.0 * step);
        dv_dq.set_column(i, &col);
    }

    if sys.m == 0 {
        let dp = -&dh_dq;
        return Ok(FieldEval {
            dq: v.clone(),
            v,
            dp,
            lambda: DVector::zeros(0),
            force: DVector::zeros(sys.n),
        });
    }

    let a = (sys.dphi_dv)(q, &v);
    let minv_at = chol_m.solve(&a.transpose());
    let c = {
        let raw = &a * &minv_at;
        (&raw + raw.transpose()) * 0.5
    };
    let chol_c = Cholesky::new(c).ok_or_else(|| Error::CompatibilityViolated {
        q: q.iter().copied().collect(),
        v: v.iter().copied().collect(),
    })?;

    // Drift of Psi along the unconstrained Hamiltonian field:
    // dPsi/dq . dH/dp - dPsi/dp . dH/dq  with dPsi/dp = (M^-1 A^T)^T.
    let dpsi_dq = (sys.dphi_dq)(q, &v) + &a * &dv_dq;
    let drift = &dpsi_dq * &v - minv_at.transpose() * &dh_dq;

    let lambda = -chol_c.solve(&drift);
    let force = -a.transpose() * &lambda;
    let dp = -&dh_dq - &force;
    Ok(FieldEval {
        dq: v.clone(),
        v,
        dp,
        lambda,
        force,
    })
}

/// Lagrange multipliers and the constraint-force covector at `(q, v)`.
///
/// Warns (but still computes) when the state is off the constraint set.
pub fn multiplier_force(sys: &MechanicalSystem, s: &TangentState) -> Result<ForceCovector> {
    if sys.m == 0 {
        return Ok(ForceCovector {
            lambda: DVector::zeros(0),
            force: DVector::zeros(sys.n),
        });
    }
    if !sys.is_feasible(&s.q, &s.v) {
        log::warn!(
            "multiplier_force: state violates constraints of `{}`; computing anyway",
            sys.name
        );
    }
    let p = (sys.mass)(&s.q) * &s.v;
    let eval = constrained_rhs(sys, &s.q, &p)?;
    Ok(ForceCovector {
        lambda: eval.lambda,
        force: eval.force,
    })
}

/// Projects `v` onto `{ v : phi(q, v) = 0 }` by Newton steps in the range of
/// `dphi_dv^T`; exact in one step for constraints affine in the velocity.
/// Returns `v` unchanged for unconstrained systems or when the projection
/// system degenerates.
pub fn project_velocity(
    sys: &MechanicalSystem,
    q: &DVector<f64>,
    v: &DVector<f64>,
) -> DVector<f64> {
    if sys.m == 0 {
        return v.clone();
    }
    let mut v = v.clone();
    for _ in 0..5 {
        let residual = (sys.phi)(q, &v);
        if residual.amax() <= 1e-13 * (1.0 + v.norm()) {
            break;
        }
        let a = (sys.dphi_dv)(q, &v);
        let gram = &a * a.transpose();
        let correction = match crate::solvers::linear_solve(&gram, &residual) {
            Ok(x) => a.transpose() * x,
            Err(_) => break,
        };
        v -= correction;
    }
    v
}

/// Right-hand side of the constrained equations of motion at `(q, p)`:
/// `dq/dt = M^-1 p`, `dp/dt = -dH/dq - force`.
pub fn nonholonomic_field(
    sys: &MechanicalSystem,
    s: &CotangentState,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let eval = constrained_rhs(sys, &s.q, &s.p)?;
    if sys.m > 0 && !sys.is_feasible(&s.q, &eval.v) {
        log::warn!(
            "nonholonomic_field: state violates constraints of `{}`; computing anyway",
            sys.name
        );
    }
    Ok((eval.dq, eval.dp))
}
