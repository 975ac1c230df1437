//! Built-in example systems used by the tests and the command-line driver.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::control::ControlSystem;
use crate::mechanics::{MechanicalSystem, TangentState};

/// Particle in the plane-field potential `V = x^2 + y^2` subject to the
/// velocity constraint `vz - y vx = 0` (identity mass, n = 3, m = 1).
pub fn nonholonomic_particle() -> MechanicalSystem {
    MechanicalSystem {
        n: 3,
        m: 1,
        mass: Box::new(|_| DMatrix::identity(3, 3)),
        potential: Box::new(|q| q[0] * q[0] + q[1] * q[1]),
        grad_potential: Box::new(|q| DVector::from_vec(vec![2.0 * q[0], 2.0 * q[1], 0.0])),
        phi: Box::new(|q, v| DVector::from_vec(vec![v[2] - q[1] * v[0]])),
        dphi_dq: Box::new(|_, v| DMatrix::from_row_slice(1, 3, &[0.0, -v[0], 0.0])),
        dphi_dv: Box::new(|q, _| DMatrix::from_row_slice(1, 3, &[-q[1], 0.0, 1.0])),
        name: "nonholonomic-particle".into(),
    }
}

/// Free particle with identity mass and zero potential.
pub fn free_particle(n: usize) -> MechanicalSystem {
    MechanicalSystem::unconstrained(
        n,
        Box::new(move |_| DMatrix::identity(n, n)),
        Box::new(|_| 0.0),
        Box::new(move |_| DVector::zeros(n)),
        "free-particle",
    )
}

/// One-dimensional harmonic oscillator, `V = q^2 / 2`.
pub fn oscillator() -> MechanicalSystem {
    MechanicalSystem::unconstrained(
        1,
        Box::new(|_| DMatrix::identity(1, 1)),
        Box::new(|q| 0.5 * q[0] * q[0]),
        Box::new(|q| q.clone()),
        "oscillator",
    )
}

/// Constrained bead with the configuration-dependent mass
/// `M(q) = diag(1 + q0^2, 1)`; exercises the finite-difference
/// mass-derivative path of the dynamics.
pub fn bead() -> MechanicalSystem {
    MechanicalSystem {
        n: 2,
        m: 1,
        mass: Box::new(|q| DMatrix::from_partial_diagonal(2, 2, &[1.0 + q[0] * q[0], 1.0])),
        potential: Box::new(|q| 0.5 * (q[0] * q[0] + q[1] * q[1])),
        grad_potential: Box::new(|q| q.clone()),
        phi: Box::new(|q, v| DVector::from_vec(vec![v[1] - q[0] * v[0]])),
        dphi_dq: Box::new(|_, v| DMatrix::from_row_slice(1, 2, &[-v[0], 0.0])),
        dphi_dv: Box::new(|q, _| DMatrix::from_row_slice(1, 2, &[-q[0], 1.0])),
        name: "bead".into(),
    }
}

/// Scalar linear-quadratic problem: `dq/dt = u`, cost `(q^2 + u^2) / 2`.
pub fn lqr() -> ControlSystem {
    ControlSystem {
        n: 1,
        mc: 1,
        gamma: Box::new(|_, u| u.clone()),
        dgamma_dq: Box::new(|_, _| DMatrix::zeros(1, 1)),
        dgamma_du: Box::new(|_, _| DMatrix::identity(1, 1)),
        cost: Box::new(|q, u| 0.5 * (q[0] * q[0] + u[0] * u[0])),
        dcost_dq: Box::new(|q, _| q.clone()),
        dcost_du: Box::new(|_, u| u.clone()),
        d2h_du2: Box::new(|_, _, _| DMatrix::identity(1, 1)),
        name: "lqr".into(),
    }
}

/// Fully actuated pendulum: `dq/dt = u`, cost `u^2 / 2 + (1 - cos q)`.
pub fn pendulum_control() -> ControlSystem {
    ControlSystem {
        n: 1,
        mc: 1,
        gamma: Box::new(|_, u| u.clone()),
        dgamma_dq: Box::new(|_, _| DMatrix::zeros(1, 1)),
        dgamma_du: Box::new(|_, _| DMatrix::identity(1, 1)),
        cost: Box::new(|q, u| 0.5 * u[0] * u[0] + (1.0 - q[0].cos())),
        dcost_dq: Box::new(|q, _| DVector::from_vec(vec![q[0].sin()])),
        dcost_du: Box::new(|_, u| u.clone()),
        d2h_du2: Box::new(|_, _, _| DMatrix::identity(1, 1)),
        name: "pendulum-control".into(),
    }
}

/// Looks up a mechanical system by its catalog name.
pub fn mechanical_by_name(name: &str) -> Option<MechanicalSystem> {
    match name {
        "nonholonomic-particle" => Some(nonholonomic_particle()),
        "free-particle" => Some(free_particle(1)),
        "oscillator" => Some(oscillator()),
        "bead" => Some(bead()),
        _ => None,
    }
}

/// Looks up a control system by its catalog name.
pub fn control_by_name(name: &str) -> Option<ControlSystem> {
    match name {
        "lqr" => Some(lqr()),
        "pendulum-control" => Some(pendulum_control()),
        _ => None,
    }
}

/// Draws a random state in `[-1, 1]^n x [-1, 1]^n` and projects the velocity
/// onto the constraint set. Intended for sampling-based tests.
pub fn random_feasible_state<R: Rng>(sys: &MechanicalSystem, rng: &mut R) -> TangentState {
    let q = DVector::from_fn(sys.n, |_, _| rng.gen_range(-1.0..1.0));
    let mut v = DVector::from_fn(sys.n, |_, _| rng.gen_range(-1.0..1.0));
    v = crate::mechanics::project_velocity(sys, &q, &v);
    TangentState::new(q, v).expect("finite sample")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    #[test]
    fn random_feasible_states_satisfy_constraints() {
        let mut rng = StdRng::seed_from_u64(1);
        for sys in [nonholonomic_particle(), bead()] {
            for _ in 0..100 {
                let s = random_feasible_state(&sys, &mut rng);
                assert!(sys.is_feasible(&s.q, &s.v));
            }
        }
    }

    #[test]
    fn catalog_lookup() {
        assert!(mechanical_by_name("nonholonomic-particle").is_some());
        assert!(mechanical_by_name("bead").is_some());
        assert!(mechanical_by_name("nope").is_none());
        assert!(control_by_name("lqr").is_some());
        assert!(control_by_name("pendulum-control").is_some());
        assert!(control_by_name("nope").is_none());
    }
}
