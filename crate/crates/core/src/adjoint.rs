//! First-order discrete adjoint: the reverse sweep computing exact gradients
//! of the discrete cost with respect to the initial condition and the
//! parameters.
//!
//! Each step transposes the linearization of the corresponding forward step,
//! so the sweep differentiates the timestepping algorithm itself. Transpose
//! solves reuse the shifted Jacobian assembled at the converged forward
//! state, which keeps adjoint and TLM duals of each other to solver
//! tolerance.

use crate::algebra::{
    gmres, AlgebraError, DenseLu, Factorized, LinearOpts, MassMatrix, MatrixData,
};
use crate::checkpoint::{CheckpointError, StepAccess};
use crate::forward::{theta_system_factorize, StageData, StageRecord, StepError};
use crate::problem::{DAEProblem, Objective, ParamMap, Vector};

/// First-order adjoint variables: `lambda` adjoins the state, `mu`
/// accumulates parameter sensitivity.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointState {
    pub lambda: Vector,
    pub mu: Vector,
    pub step: usize,
}

impl AdjointState {
    pub fn is_finite(&self) -> bool {
        self.lambda.iter().all(|v| v.is_finite()) && self.mu.iter().all(|v| v.is_finite())
    }
}

/// Terminal conditions: `lambda_N = (d psi/d u)^T`, `mu_N = (d psi/d p)^T`
/// (both zero for a pure-integral objective).
pub fn adjoint_terminal(
    objective: &Objective,
    u_final: &Vector,
    p: &Vector,
    num_steps: usize,
) -> AdjointState {
    AdjointState {
        lambda: objective.terminal_grad_state(u_final, p),
        mu: objective.terminal_grad_param(u_final, p),
        step: num_steps,
    }
}

fn mass_matvec_t(mass: &MassMatrix, x: &Vector) -> Vector {
    mass.matvec_transpose(x)
}

fn mass_solve_t(
    mass: &MassMatrix,
    b: &Vector,
    linear: &LinearOpts,
) -> Result<Vector, AlgebraError> {
    match mass {
        MassMatrix::Identity => Ok(b.clone()),
        MassMatrix::Dense(m) => DenseLu::factorize(m.clone()).map(|lu| lu.solve_transpose(b)),
        MassMatrix::Sparse(m) => gmres(|x| m.matvec_transpose(x), b, linear).map(|(x, _)| x),
    }
}

fn jac_tvec(j: &MatrixData, x: &Vector) -> Vector {
    match j {
        MatrixData::Dense(m) => m.tr_mul(x),
        MatrixData::Sparse(t) => t.to_csr().matvec_transpose(x),
    }
}

/// Internal pieces of one theta adjoint step, shared with the second-order
/// sweep: the stage multiplier `lambda_s` and the transposed factorization.
pub(crate) struct ThetaAdjointParts {
    pub state: AdjointState,
    pub lambda_s: Vector,
    /// Factorization of `M - h theta f_u(u_{n+1})`; `None` when theta = 0.
    pub factorization: Option<Factorized>,
}

pub(crate) fn adjoint_theta_core(
    problem: &DAEProblem,
    objective: &Objective,
    record: &StageRecord,
    p: &Vector,
    next: &AdjointState,
    linear: &LinearOpts,
) -> Result<ThetaAdjointParts, StepError> {
    let StageData::Theta { theta, .. } = &record.data else {
        panic!("adjoint_theta_core needs a theta record");
    };
    let theta = *theta;
    let (t, h) = (record.t, record.h);
    let t1 = t + h;
    let np = problem.dim_param;
    let wrap = |source| StepError::Solver {
        step: record.step,
        source,
    };

    // stage solve: (M^T - h theta f_u^T(u_{n+1})) lambda_s = lambda_{n+1} + h theta r_u^T(u_{n+1})
    let mut rhs = next.lambda.clone();
    if theta > 0.0 && objective.has_integrand() {
        rhs += objective.integrand_grad_state(t1, &record.u_np1, p) * (h * theta);
    }
    let (lambda_s, factorization) = if theta > 0.0 {
        let fac = theta_system_factorize(problem, t1, &record.u_np1, p, h * theta, linear)
            .map_err(wrap)?;
        (fac.solve_transpose(&rhs).map_err(wrap)?, Some(fac))
    } else {
        (
            mass_solve_t(&problem.mass, &rhs, linear).map_err(wrap)?,
            None,
        )
    };

    // lambda_n = M^T lambda_s + h(1-theta)(f_u^T(u_n) lambda_s + r_u^T(u_n));
    // backward Euler with identity mass skips the u_n Jacobian entirely
    let lambda = if theta == 1.0 {
        if problem.mass.is_identity() {
            lambda_s.clone()
        } else {
            mass_matvec_t(&problem.mass, &lambda_s)
        }
    } else {
        let jac_n = problem.jac_state(t, &record.u_n, p);
        let mut lam = mass_matvec_t(&problem.mass, &lambda_s)
            + jac_tvec(&jac_n, &lambda_s) * (h * (1.0 - theta));
        if objective.has_integrand() {
            lam += objective.integrand_grad_state(t, &record.u_n, p) * (h * (1.0 - theta));
        }
        lam
    };

    // mu_n = mu_{n+1} + h theta (f_p^T lambda_s + r_p^T)|_{n+1}
    //               + h (1-theta) (f_p^T lambda_s + r_p^T)|_n
    let mut mu = next.mu.clone();
    if np > 0 {
        if theta > 0.0 {
            mu += problem.jac_param_tvec(t1, &record.u_np1, p, &lambda_s) * (h * theta);
            if objective.has_integrand() {
                mu += objective.integrand_grad_param(t1, &record.u_np1, p) * (h * theta);
            }
        }
        if theta < 1.0 {
            mu += problem.jac_param_tvec(t, &record.u_n, p, &lambda_s) * (h * (1.0 - theta));
            if objective.has_integrand() {
                mu += objective.integrand_grad_param(t, &record.u_n, p) * (h * (1.0 - theta));
            }
        }
    }

    Ok(ThetaAdjointParts {
        state: AdjointState {
            lambda,
            mu,
            step: record.step,
        },
        lambda_s,
        factorization,
    })
}

/// One theta adjoint step, `(lambda, mu)` at `n+1` to `(lambda, mu)` at `n`.
pub fn adjoint_theta_step(
    problem: &DAEProblem,
    objective: &Objective,
    record: &StageRecord,
    p: &Vector,
    next: &AdjointState,
    linear: &LinearOpts,
) -> Result<AdjointState, StepError> {
    adjoint_theta_core(problem, objective, record, p, next, linear).map(|parts| parts.state)
}

pub(crate) const RK4_B: [f64; 4] = [1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0];
/// Subdiagonal coupling coefficients a_{21}, a_{32}, a_{43}.
pub(crate) const RK4_A: [f64; 3] = [0.5, 0.5, 1.0];

/// Internal pieces of one RK4 adjoint step reused by the second-order sweep:
/// stage duals `rho_i` and the stage Jacobians.
pub(crate) struct Rk4AdjointParts {
    pub state: AdjointState,
    pub rho: [Vector; 4],
    pub jacs: [MatrixData; 4],
    pub stage_times: [f64; 4],
}

pub(crate) fn adjoint_rk4_core(
    problem: &DAEProblem,
    objective: &Objective,
    record: &StageRecord,
    p: &Vector,
    next: &AdjointState,
) -> Rk4AdjointParts {
    let StageData::Rk4 { stages, .. } = &record.data else {
        panic!("adjoint_rk4_core needs an rk4 record");
    };
    let (t, h) = (record.t, record.h);
    let half = 0.5 * h;
    let ts = [t, t + half, t + half, t + h];
    let nd = problem.dim_state;
    let np = problem.dim_param;
    let with_r = objective.has_integrand();

    let jacs: [MatrixData; 4] = std::array::from_fn(|i| problem.jac_state(ts[i], &stages[i], p));

    // transposed stage recursion:
    //   rho_i   = h b_i lambda_{n+1} + h a_{i+1,i} sigma_{i+1}
    //   sigma_i = f_u^T(Y_i) rho_i + h b_i r_u^T(Y_i)
    let mut rho: [Vector; 4] = std::array::from_fn(|_| Vector::zeros(nd));
    let mut sigma: [Vector; 4] = std::array::from_fn(|_| Vector::zeros(nd));
    for i in (0..4).rev() {
        let mut r_i = &next.lambda * (h * RK4_B[i]);
        if i < 3 {
            r_i += &sigma[i + 1] * (h * RK4_A[i]);
        }
        let mut s_i = jac_tvec(&jacs[i], &r_i);
        if with_r {
            s_i += objective.integrand_grad_state(ts[i], &stages[i], p) * (h * RK4_B[i]);
        }
        rho[i] = r_i;
        sigma[i] = s_i;
    }

    let mut lambda = next.lambda.clone();
    for s_i in &sigma {
        lambda += s_i;
    }
    let mut mu = next.mu.clone();
    if np > 0 {
        for i in 0..4 {
            mu += problem.jac_param_tvec(ts[i], &stages[i], p, &rho[i]);
            if with_r {
                mu += objective.integrand_grad_param(ts[i], &stages[i], p) * (h * RK4_B[i]);
            }
        }
    }

    Rk4AdjointParts {
        state: AdjointState {
            lambda,
            mu,
            step: record.step,
        },
        rho,
        jacs,
        stage_times: ts,
    }
}

/// One RK4 adjoint step: exactly `(dN/du)^T lambda_{n+1}` for the recorded
/// step map, plus the transposed parameter and quadrature contributions.
pub fn adjoint_rk4_step(
    problem: &DAEProblem,
    objective: &Objective,
    record: &StageRecord,
    p: &Vector,
    next: &AdjointState,
) -> AdjointState {
    adjoint_rk4_core(problem, objective, record, p, next).state
}

/// Adjoint step dispatch on the record's method.
pub fn adjoint_step(
    problem: &DAEProblem,
    objective: &Objective,
    record: &StageRecord,
    p: &Vector,
    next: &AdjointState,
    linear: &LinearOpts,
) -> Result<AdjointState, StepError> {
    match &record.data {
        StageData::Theta { .. } => adjoint_theta_step(problem, objective, record, p, next, linear),
        StageData::Rk4 { .. } => Ok(adjoint_rk4_step(problem, objective, record, p, next)),
    }
}

/// Result of a full reverse sweep.
#[derive(Debug, Clone)]
pub struct AdjointSolution {
    /// Total derivative of the cost with respect to the initial state.
    pub lambda0: Vector,
    /// Parameter sensitivity accumulated through the dynamics and integrand.
    pub mu0: Vector,
    pub recomputations: usize,
}

/// Full reverse sweep `n = N-1 .. 0` over a trajectory access.
pub fn solve_adjoint(
    problem: &DAEProblem,
    objective: &Objective,
    access: &mut dyn StepAccess,
    p: &Vector,
    linear: &LinearOpts,
) -> Result<AdjointSolution, CheckpointError> {
    let n = access.num_steps();
    let mut state = adjoint_terminal(objective, access.final_state(), p, n);
    for step in (0..n).rev() {
        let unit = access.fetch(step)?;
        state = adjoint_step(problem, objective, &unit.record, p, &state, linear)?;
    }
    debug_assert_eq!(state.step, 0);
    Ok(AdjointSolution {
        lambda0: state.lambda,
        mu0: state.mu,
        recomputations: access.recomputations(),
    })
}

/// Chain rule through the initial-condition map:
/// `grad_p psi = eta_p^T lambda_0 + mu_0`.
pub fn assemble_gradient(
    param_map: &ParamMap,
    p: &Vector,
    lambda0: &Vector,
    mu0: &Vector,
) -> Vector {
    param_map.eta_jac_tvec(p, lambda0) + mu0
}
