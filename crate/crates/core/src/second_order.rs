//! Second-order adjoint (forward-over-adjoint): Hessian-vector products of
//! the discrete cost, for directions in the initial condition or the
//! parameters.
//!
//! A directional tangent-linear solution `w` is propagated forward, then one
//! combined reverse sweep advances the first-order pair `(lambda, mu)` and
//! the second-order pair `(Lambda, Gamma)` together. The second-order stage
//! system uses the same transposed shifted Jacobian as the first-order one,
//! so each step factorizes once. The embedded first-order recursion is the
//! same code the standalone sweep runs, hence bitwise identical.

use crate::adjoint::{
    adjoint_rk4_core, adjoint_terminal, adjoint_theta_core, AdjointState, RK4_A, RK4_B,
};
use crate::algebra::{gmres, AlgebraError, DenseLu, LinearOpts, MassMatrix, MatrixData};
use crate::checkpoint::{CheckpointError, StepAccess};
use crate::forward::{StageData, StageRecord, StepError};
use crate::problem::{DAEProblem, Objective, ParamMap, ProblemError, Vector};
use crate::tlm::tlm_rk4_step;

/// Whether the Hessian-vector product differentiates with respect to the
/// initial condition or the parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HvpTarget {
    WrtInitial,
    WrtParams,
}

/// Second-order adjoint variables contracted with a direction. `theta_const`
/// is the constant companion of the augmented system and stays 1.
#[derive(Debug, Clone)]
pub struct SecondOrderState {
    pub big_lambda: Vector,
    pub big_gamma: Vector,
    pub theta_const: f64,
    pub step: usize,
}

/// Check, before any sweep starts, that every Hessian-product callback the
/// requested target needs is present.
pub fn require_second_order_callbacks(
    problem: &DAEProblem,
    objective: &Objective,
    target: HvpTarget,
) -> Result<(), ProblemError> {
    let with_params = target == HvpTarget::WrtParams && problem.dim_param > 0;
    problem.require_second_order(with_params)?;
    objective.require_second_order(with_params)?;
    Ok(())
}

/// Forward tangent pass for a second-order sweep: propagate the direction
/// `v1` (with parameter direction `v2`) through the recorded trajectory,
/// producing `w_n` at every node. Delegates to the tangent-linear module, so
/// the values match a standalone TLM propagation bitwise.
pub fn soa_forward_pass(
    problem: &DAEProblem,
    objective: &Objective,
    records: &[crate::forward::StageRecord],
    v1: Vector,
    v2: Option<&Vector>,
    p: &Vector,
    linear: &LinearOpts,
) -> Result<Vec<Vector>, StepError> {
    crate::tlm::propagate_directional(problem, objective, records, v1, v2, p, linear)
        .map(|(w, _)| w)
}

/// Terminal conditions expressed through the final tangent `w_N`:
/// `Lambda_N = psi_uu w_N + psi_pu v2`, `Gamma_N = psi_up w_N + psi_pp v2`.
pub fn soa_terminal(
    objective: &Objective,
    u_final: &Vector,
    p: &Vector,
    w_final: &Vector,
    v2: Option<&Vector>,
    num_steps: usize,
) -> SecondOrderState {
    let mut big_lambda = objective.psi_uu_w(u_final, p, w_final);
    let mut big_gamma = objective.psi_up_w(u_final, p, w_final);
    if let Some(v2) = v2 {
        big_lambda += objective.psi_pu_v(u_final, p, v2);
        big_gamma += objective.psi_pp_v(u_final, p, v2);
    }
    SecondOrderState {
        big_lambda,
        big_gamma,
        theta_const: 1.0,
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

/// Output of one combined first+second order reverse step.
pub struct CombinedStep {
    pub first: AdjointState,
    pub second: SecondOrderState,
}

/// Combined theta step. Solves the first-order stage system, then the
/// second-order one with the same transposed factorization and the extra
/// vector-Hessian-vector terms at both endpoints.
#[allow(clippy::too_many_arguments)]
pub fn combined_theta_step(
    problem: &DAEProblem,
    objective: &Objective,
    record: &StageRecord,
    p: &Vector,
    w_n: &Vector,
    w_np1: &Vector,
    v2: Option<&Vector>,
    first_next: &AdjointState,
    second_next: &SecondOrderState,
    linear: &LinearOpts,
) -> Result<CombinedStep, StepError> {
    let StageData::Theta { theta, .. } = &record.data else {
        panic!("combined_theta_step needs a theta record");
    };
    let theta = *theta;
    let (t, h) = (record.t, record.h);
    let t1 = t + h;
    let np = problem.dim_param;
    let v2 = if np == 0 { None } else { v2 };
    let wrap = |source| StepError::Solver {
        step: record.step,
        source,
    };

    let parts = adjoint_theta_core(problem, objective, record, p, first_next, linear)?;
    let lambda_s = &parts.lambda_s;
    let with_r = objective.has_integrand();

    // second-derivative forcing at a point
    let hess_state_terms = |tt: f64, u: &Vector, w: &Vector| -> Vector {
        let mut v = problem.hess_uu_vv(tt, u, p, lambda_s, w);
        if with_r {
            v += objective.r_uu_v(tt, u, p, w);
        }
        if let Some(v2) = v2 {
            v += problem.hess_up_vv(tt, u, p, lambda_s, v2);
            if with_r {
                v += objective.r_up_v(tt, u, p, v2);
            }
        }
        v
    };

    // stage solve: (M^T - h theta f_u^T(u_{n+1})) Lambda_s = Lambda_{n+1}
    //   + h theta [hess terms at u_{n+1}]
    let mut rhs = second_next.big_lambda.clone();
    if theta > 0.0 {
        rhs += hess_state_terms(t1, &record.u_np1, w_np1) * (h * theta);
    }
    let big_lambda_s = match &parts.factorization {
        Some(fac) => fac.solve_transpose(&rhs).map_err(wrap)?,
        None => mass_solve_t(&problem.mass, &rhs, linear).map_err(wrap)?,
    };

    let big_lambda = if theta == 1.0 {
        if problem.mass.is_identity() {
            big_lambda_s.clone()
        } else {
            mass_matvec_t(&problem.mass, &big_lambda_s)
        }
    } else {
        let jac_n = problem.jac_state(t, &record.u_n, p);
        mass_matvec_t(&problem.mass, &big_lambda_s)
            + (jac_tvec(&jac_n, &big_lambda_s) + hess_state_terms(t, &record.u_n, w_n))
                * (h * (1.0 - theta))
    };

    let mut big_gamma = second_next.big_gamma.clone();
    if np > 0 {
        let hess_param_terms = |tt: f64, u: &Vector, w: &Vector| -> Vector {
            let mut v = problem.hess_pu_vv(tt, u, p, lambda_s, w);
            if with_r {
                v += objective.r_pu_v(tt, u, p, w);
            }
            if let Some(v2) = v2 {
                v += problem.hess_pp_vv(tt, u, p, lambda_s, v2);
                if with_r {
                    v += objective.r_pp_v(tt, u, p, v2);
                }
            }
            v
        };
        if theta > 0.0 {
            big_gamma += (problem.jac_param_tvec(t1, &record.u_np1, p, &big_lambda_s)
                + hess_param_terms(t1, &record.u_np1, w_np1))
                * (h * theta);
        }
        if theta < 1.0 {
            big_gamma += (problem.jac_param_tvec(t, &record.u_n, p, &big_lambda_s)
                + hess_param_terms(t, &record.u_n, w_n))
                * (h * (1.0 - theta));
        }
    }

    Ok(CombinedStep {
        first: parts.state,
        second: SecondOrderState {
            big_lambda,
            big_gamma,
            theta_const: second_next.theta_const,
            step: record.step,
        },
    })
}

/// Combined RK4 step: differentiates the transposed stage recursion along
/// the tangent direction. The TLM stage values are recomputed from `w_n`.
#[allow(clippy::too_many_arguments)]
pub fn combined_rk4_step(
    problem: &DAEProblem,
    objective: &Objective,
    record: &StageRecord,
    p: &Vector,
    w_n: &Vector,
    v2: Option<&Vector>,
    first_next: &AdjointState,
    second_next: &SecondOrderState,
) -> CombinedStep {
    let StageData::Rk4 { stages, .. } = &record.data else {
        panic!("combined_rk4_step needs an rk4 record");
    };
    let h = record.h;
    let nd = problem.dim_state;
    let np = problem.dim_param;
    let v2 = if np == 0 { None } else { v2 };
    let with_r = objective.has_integrand();

    let parts = adjoint_rk4_core(problem, objective, record, p, first_next);
    let ts = parts.stage_times;
    let tlm = tlm_rk4_step(problem, record, w_n, v2, p);

    // P_i = h b_i Lambda_{n+1} + h a_{i+1,i} S2_{i+1}
    // S2_i = f_u^T(Y_i) P_i + rho_i^T f_uu(Y_i) W_i (+ rho_i^T f_up(Y_i) v2)
    //        + h b_i (r_uu(Y_i) W_i + r_up(Y_i) v2)
    let mut cap_p: [Vector; 4] = std::array::from_fn(|_| Vector::zeros(nd));
    let mut s2: [Vector; 4] = std::array::from_fn(|_| Vector::zeros(nd));
    for i in (0..4).rev() {
        let mut p_i = &second_next.big_lambda * (h * RK4_B[i]);
        if i < 3 {
            p_i += &s2[i + 1] * (h * RK4_A[i]);
        }
        let mut s_i = jac_tvec(&parts.jacs[i], &p_i)
            + problem.hess_uu_vv(ts[i], &stages[i], p, &parts.rho[i], &tlm.w_stages[i]);
        if with_r {
            s_i += objective.r_uu_v(ts[i], &stages[i], p, &tlm.w_stages[i]) * (h * RK4_B[i]);
        }
        if let Some(v2) = v2 {
            s_i += problem.hess_up_vv(ts[i], &stages[i], p, &parts.rho[i], v2);
            if with_r {
                s_i += objective.r_up_v(ts[i], &stages[i], p, v2) * (h * RK4_B[i]);
            }
        }
        cap_p[i] = p_i;
        s2[i] = s_i;
    }

    let mut big_lambda = second_next.big_lambda.clone();
    for s_i in &s2 {
        big_lambda += s_i;
    }

    let mut big_gamma = second_next.big_gamma.clone();
    if np > 0 {
        for i in 0..4 {
            big_gamma += problem.jac_param_tvec(ts[i], &stages[i], p, &cap_p[i])
                + problem.hess_pu_vv(ts[i], &stages[i], p, &parts.rho[i], &tlm.w_stages[i]);
            if with_r {
                big_gamma +=
                    objective.r_pu_v(ts[i], &stages[i], p, &tlm.w_stages[i]) * (h * RK4_B[i]);
            }
            if let Some(v2) = v2 {
                big_gamma += problem.hess_pp_vv(ts[i], &stages[i], p, &parts.rho[i], v2);
                if with_r {
                    big_gamma += objective.r_pp_v(ts[i], &stages[i], p, v2) * (h * RK4_B[i]);
                }
            }
        }
    }

    CombinedStep {
        first: parts.state,
        second: SecondOrderState {
            big_lambda,
            big_gamma,
            theta_const: second_next.theta_const,
            step: record.step,
        },
    }
}

/// Result of a combined reverse sweep.
#[derive(Debug, Clone)]
pub struct HvpSweep {
    pub lambda0: Vector,
    pub mu0: Vector,
    pub big_lambda0: Vector,
    pub big_gamma0: Vector,
    pub recomputations: usize,
}

/// Run the combined first+second order reverse sweep over an access that
/// tracks the tangent `w` alongside the states.
pub fn solve_hvp_sweep(
    problem: &DAEProblem,
    objective: &Objective,
    access: &mut dyn StepAccess,
    p: &Vector,
    v2: Option<&Vector>,
    linear: &LinearOpts,
) -> Result<HvpSweep, CheckpointError> {
    let n = access.num_steps();
    let u_final = access.final_state().clone();
    let w_final = access
        .final_w()
        .ok_or_else(|| {
            CheckpointError::ScheduleCorrupt(
                "second-order sweep needs sensitivity tracking in the trajectory access".into(),
            )
        })?
        .clone();

    let mut first = adjoint_terminal(objective, &u_final, p, n);
    let mut second = soa_terminal(objective, &u_final, p, &w_final, v2, n);
    let mut w_above = w_final;

    for step in (0..n).rev() {
        let unit = access.fetch(step)?;
        let w_n = unit.w.as_ref().ok_or_else(|| {
            CheckpointError::ScheduleCorrupt(format!("step {step} unit lacks sensitivity"))
        })?;
        let combined = match &unit.record.data {
            StageData::Theta { .. } => combined_theta_step(
                problem,
                objective,
                &unit.record,
                p,
                w_n,
                &w_above,
                v2,
                &first,
                &second,
                linear,
            )?,
            StageData::Rk4 { .. } => combined_rk4_step(
                problem,
                objective,
                &unit.record,
                p,
                w_n,
                v2,
                &first,
                &second,
            ),
        };
        first = combined.first;
        second = combined.second;
        debug_assert_eq!(second.theta_const, 1.0);
        w_above = unit.w.unwrap();
    }

    Ok(HvpSweep {
        lambda0: first.lambda,
        mu0: first.mu,
        big_lambda0: second.big_lambda,
        big_gamma0: second.big_gamma,
        recomputations: access.recomputations(),
    })
}

/// Assemble the final Hessian-vector product from a finished sweep:
/// `grad^2_p psi sigma = lambda_0^T eta_pp sigma + eta_p^T Lambda_0 + Gamma_0`
/// for the parameter target, and `Lambda_0` for the initial-condition target.
pub fn assemble_hvp(
    param_map: &ParamMap,
    p: &Vector,
    sigma: &Vector,
    target: HvpTarget,
    sweep: &HvpSweep,
) -> Vector {
    match target {
        HvpTarget::WrtInitial => sweep.big_lambda0.clone(),
        HvpTarget::WrtParams => {
            param_map.eta_hess_vec(p, &sweep.lambda0, sigma)
                + param_map.eta_jac_tvec(p, &sweep.big_lambda0)
                + &sweep.big_gamma0
        }
    }
}

/// Map the outer direction `sigma` onto the tangent seeds:
/// parameters: `v1 = eta_p sigma`, `v2 = sigma`; initial condition:
/// `v1 = sigma`, no parameter direction.
pub fn direction_seeds(
    param_map: &ParamMap,
    p: &Vector,
    sigma: &Vector,
    target: HvpTarget,
) -> (Vector, Option<Vector>) {
    match target {
        HvpTarget::WrtInitial => (sigma.clone(), None),
        HvpTarget::WrtParams => (param_map.eta_jac_vec(p, sigma), Some(sigma.clone())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adjoint::{assemble_gradient, solve_adjoint};
    use crate::checkpoint::TrajectoryWithSensitivity;
    use crate::forward::{integrate, Method, StepperConfig};
    use crate::problem::fd;
    use crate::tlm::propagate_directional;
    use nalgebra::{dmatrix, dvector, DMatrix};
    use rand::prelude::*;

    /// Cubic scalar problem with full second-order callbacks.
    fn cubic_instance() -> (DAEProblem, Objective, ParamMap) {
        let problem = DAEProblem::new(1, 0, |_, u, _| dvector![-u[0].powi(3)])
            .with_jac_state(|_, u, _| MatrixData::Dense(dmatrix![-3.0 * u[0] * u[0]]))
            .with_hess_uu_vv(|_, u, _, v1, v2| dvector![-6.0 * u[0] * v1[0] * v2[0]]);
        let objective = Objective::new()
            .with_terminal(|u, _| 0.5 * u[0] * u[0], |u, _| dvector![u[0]])
            .with_terminal_hess_state_only(|_, _, w| w.clone());
        let pm = ParamMap::identity(1);
        (problem, objective, pm)
    }

    fn hvp_full(
        problem: &DAEProblem,
        objective: &Objective,
        pm: &ParamMap,
        config: &StepperConfig,
        p: &Vector,
        sigma: &Vector,
        target: HvpTarget,
    ) -> Vector {
        require_second_order_callbacks(problem, objective, target).unwrap();
        let (traj, _) = integrate(problem, objective, pm, config, p).unwrap();
        let (v1, v2) = direction_seeds(pm, p, sigma, target);
        let (w, _) = propagate_directional(
            problem,
            objective,
            &traj.records,
            v1,
            v2.as_ref(),
            p,
            &config.linear,
        )
        .unwrap();
        let mut access = TrajectoryWithSensitivity {
            trajectory: &traj,
            w: &w,
        };
        let sweep = solve_hvp_sweep(
            problem,
            objective,
            &mut access,
            p,
            v2.as_ref(),
            &config.linear,
        )
        .unwrap();
        assemble_hvp(pm, p, sigma, target, &sweep)
    }

    #[test]
    fn zero_direction_gives_zero_hvp() {
        let (problem, objective, pm) = cubic_instance();
        let mut config = StepperConfig::new(Method::Theta(1.0), 0.0, 1.0, 8);
        config.newton.rtol = 1e-14;
        let p = dvector![1.0];
        let hvp = hvp_full(
            &problem,
            &objective,
            &pm,
            &config,
            &p,
            &dvector![0.0],
            HvpTarget::WrtInitial,
        );
        assert_eq!(hvp, dvector![0.0]);
    }

    #[test]
    fn scalar_cubic_hvp_matches_fd_of_gradient() {
        let (problem, objective, pm) = cubic_instance();
        for method in [Method::Theta(1.0), Method::Theta(0.5), Method::Rk4] {
            let mut config = StepperConfig::new(method, 0.0, 1.0, 10);
            config.newton.rtol = 1e-14;
            config.newton.atol = 1e-15;
            let p = dvector![0.9];
            let sigma = dvector![1.0];
            let hvp = hvp_full(
                &problem,
                &objective,
                &pm,
                &config,
                &p,
                &sigma,
                HvpTarget::WrtInitial,
            );
            let grad_at = |pv: &Vector| -> Vector {
                let (mut traj, _) = integrate(&problem, &objective, &pm, &config, pv).unwrap();
                let sol =
                    solve_adjoint(&problem, &objective, &mut traj, pv, &config.linear).unwrap();
                assemble_gradient(&pm, pv, &sol.lambda0, &sol.mu0)
            };
            // order-2 convergence of the FD-of-gradient error
            let mut errs = Vec::new();
            for h in [1e-2, 1e-3, 1e-4] {
                let gp = grad_at(&dvector![0.9 + h]);
                let gm = grad_at(&dvector![0.9 - h]);
                let fd = (gp - gm) / (2.0 * h);
                errs.push((&fd - &hvp).norm());
            }
            let o1 = (errs[0] / errs[1]).log10();
            let o2 = (errs[1] / errs[2]).log10();
            assert!(
                (o1 - 2.0).abs() < 0.2 && (o2 - 2.0).abs() < 0.3,
                "{method:?}: orders {o1:.3} {o2:.3} errs {errs:?}"
            );
        }
    }

    #[test]
    fn linear_dynamics_quadratic_objective_matches_dense_propagator() {
        // f = A u (all f-Hessians zero), psi = |u_N|^2/2:
        // HVP wrt initial condition = P^T P sigma with P the step propagator power
        let a = dmatrix![-0.5, 0.2; -0.1, -0.3];
        let problem = {
            let a1 = a.clone();
            let a2 = a.clone();
            DAEProblem::new(2, 2, move |_, u, _| &a1 * u)
                .with_jac_state(move |_, _, _| MatrixData::Dense(a2.clone()))
                .with_jac_param(|_, _, _| MatrixData::Dense(DMatrix::zeros(2, 2)))
                .with_hess_uu_vv(|_, _, _, _, _| Vector::zeros(2))
                .with_hess_up_vv(|_, _, _, _, _| Vector::zeros(2))
                .with_hess_pu_vv(|_, _, _, _, _| Vector::zeros(2))
                .with_hess_pp_vv(|_, _, _, _, _| Vector::zeros(2))
        };
        let objective = Objective::new()
            .with_terminal(|u, _| 0.5 * u.norm_squared(), |u, _| u.clone())
            .with_terminal_hess_state_only(|_, _, w| w.clone());
        let pm = ParamMap::identity(2);
        let n = 6;
        let eye = DMatrix::<f64>::identity(2, 2);

        for (method, propagator) in [
            (Method::Theta(1.0), {
                let h = 1.0 / n as f64;
                (&eye - &a * h).try_inverse().unwrap()
            }),
            (Method::Theta(0.5), {
                let h = 1.0 / n as f64;
                (&eye - &a * (0.5 * h)).try_inverse().unwrap() * (&eye + &a * (0.5 * h))
            }),
            (Method::Rk4, {
                let ha = &a * (1.0 / n as f64);
                &eye + &ha + &ha * &ha / 2.0 + &ha * &ha * &ha / 6.0 + &ha * &ha * &ha * &ha / 24.0
            }),
        ] {
            let mut config = StepperConfig::new(method, 0.0, 1.0, n);
            config.newton.rtol = 1e-15;
            config.newton.atol = 1e-16;
            let mut pow = eye.clone();
            for _ in 0..n {
                pow = &propagator * pow;
            }
            let hess = pow.transpose() * &pow;
            let p = dvector![0.7, -0.4];
            let sigma = dvector![0.3, 0.9];
            let hvp = hvp_full(
                &problem,
                &objective,
                &pm,
                &config,
                &p,
                &sigma,
                HvpTarget::WrtInitial,
            );
            let expect = &hess * &sigma;
            assert!(
                (&hvp - &expect).norm() <= 1e-10 * expect.norm().max(1.0),
                "{method:?}: hvp {hvp:?} expect {expect:?}"
            );
        }
    }

    #[test]
    fn terminal_conditions_hand_computed() {
        // quadratic psi with known Hessian blocks, random w_N and v2
        let w_mat = dmatrix![0.3, -0.1; 0.2, 0.5];
        let v_mat = dmatrix![1.2, 0.1; 0.1, 0.8];
        let objective = {
            let wm = w_mat.clone();
            let wm2 = w_mat.clone();
            let wm3 = w_mat.clone();
            let vm = v_mat.clone();
            Objective::new()
                .with_terminal(
                    {
                        let wm = w_mat.clone();
                        let vm = v_mat.clone();
                        move |u: &Vector, p: &Vector| {
                            0.5 * u.norm_squared() + u.dot(&(&wm * p)) + 0.5 * p.dot(&(&vm * p))
                        }
                    },
                    move |u, p| u + &wm * p,
                )
                .with_terminal_grad_param(move |u, p| wm2.tr_mul(u) + &vm * p)
                .with_terminal_hessians(
                    |_, _, w| w.clone(),
                    {
                        let wm = w_mat.clone();
                        move |_, _, w| wm.tr_mul(w)
                    },
                    move |_, _, v| &wm3 * v,
                    {
                        let vm = v_mat.clone();
                        move |_, _, v| &vm * v
                    },
                )
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let u = Vector::from_fn(2, |_, _| rng.gen_range(-1.0..1.0));
        let p = Vector::from_fn(2, |_, _| rng.gen_range(-1.0..1.0));
        let w_n = Vector::from_fn(2, |_, _| rng.gen_range(-1.0..1.0));
        let v2 = Vector::from_fn(2, |_, _| rng.gen_range(-1.0..1.0));
        let st = soa_terminal(&objective, &u, &p, &w_n, Some(&v2), 7);
        // Lambda_N = psi_uu w + psi_pu v2 = w + W v2
        let expect_l = &w_n + &w_mat * &v2;
        // Gamma_N = psi_up w + psi_pp v2 = W^T w + V v2
        let expect_g = w_mat.tr_mul(&w_n) + &v_mat * &v2;
        assert!((st.big_lambda - expect_l).norm() < 1e-14);
        assert!((st.big_gamma - expect_g).norm() < 1e-14);
        assert_eq!(st.theta_const, 1.0);

        // psi linear in u, p-independent: Lambda_N = 0
        let lin = Objective::new()
            .with_terminal(
                |u, _| u[0],
                |u, _| {
                    let mut g = Vector::zeros(u.len());
                    g[0] = 1.0;
                    g
                },
            )
            .with_terminal_hess_state_only(|u, _, _| Vector::zeros(u.len()));
        let st = soa_terminal(&lin, &u, &p, &w_n, None, 7);
        assert_eq!(st.big_lambda, Vector::zeros(2));
    }

    #[test]
    fn degenerate_second_derivatives_give_zero_hvp() {
        // all f-Hessians zero and psi linear: the Hessian vanishes
        let a = dmatrix![-0.3, 0.1; 0.2, -0.6];
        let problem = {
            let a1 = a.clone();
            let a2 = a.clone();
            DAEProblem::new(2, 2, move |_, u, _| &a1 * u)
                .with_jac_state(move |_, _, _| MatrixData::Dense(a2.clone()))
                .with_jac_param(|_, _, _| MatrixData::Dense(DMatrix::zeros(2, 2)))
                .with_hess_uu_vv(|_, _, _, _, _| Vector::zeros(2))
                .with_hess_up_vv(|_, _, _, _, _| Vector::zeros(2))
                .with_hess_pu_vv(|_, _, _, _, _| Vector::zeros(2))
                .with_hess_pp_vv(|_, _, _, _, _| Vector::zeros(2))
        };
        let objective = Objective::new()
            .with_terminal(|u, _| u[0] + 2.0 * u[1], |_, _| dvector![1.0, 2.0])
            .with_terminal_hess_state_only(|u, _, _| Vector::zeros(u.len()));
        let pm = ParamMap::identity(2);
        for method in [Method::Theta(0.5), Method::Rk4] {
            let mut config = StepperConfig::new(method, 0.0, 1.0, 5);
            config.newton.rtol = 1e-14;
            let p = dvector![0.4, -0.2];
            let sigma = dvector![0.7, 0.3];
            let hvp = hvp_full(
                &problem,
                &objective,
                &pm,
                &config,
                &p,
                &sigma,
                HvpTarget::WrtParams,
            );
            assert!(hvp.norm() < 1e-13, "{method:?}: hvp {hvp:?}");
        }
    }

    #[test]
    fn soa_forward_pass_matches_tlm_bitwise() {
        let (problem, objective, pm) = cubic_instance();
        let config = StepperConfig::new(Method::Rk4, 0.0, 1.0, 6);
        let p = dvector![1.0];
        let (traj, _) = integrate(&problem, &objective, &pm, &config, &p).unwrap();
        let w_soa = soa_forward_pass(
            &problem,
            &objective,
            &traj.records,
            dvector![0.3],
            None,
            &p,
            &config.linear,
        )
        .unwrap();
        let (w_tlm, _) = propagate_directional(
            &problem,
            &objective,
            &traj.records,
            dvector![0.3],
            None,
            &p,
            &config.linear,
        )
        .unwrap();
        for (a, b) in w_soa.iter().zip(w_tlm.iter()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn missing_hessian_callbacks_fail_at_configuration() {
        let problem = DAEProblem::new(1, 1, |_, u, _| -u.clone());
        let objective = Objective::new().with_terminal(|u, _| u[0], |_, _| dvector![1.0]);
        let err = require_second_order_callbacks(&problem, &objective, HvpTarget::WrtParams);
        match err {
            Err(ProblemError::MissingCallbacks(names)) => {
                assert!(names.iter().any(|n| n.contains("hess_uu_vv")));
            }
            other => panic!("expected missing-callback error, got {other:?}"),
        }
    }

    #[test]
    fn embedded_first_order_sweep_is_bitwise_standalone() {
        let (problem, objective, pm) = cubic_instance();
        let mut config = StepperConfig::new(Method::Theta(0.5), 0.0, 1.0, 9);
        config.newton.rtol = 1e-13;
        let p = dvector![1.1];
        let (traj, _) = integrate(&problem, &objective, &pm, &config, &p).unwrap();

        let mut t1 = traj.clone();
        let standalone = solve_adjoint(&problem, &objective, &mut t1, &p, &config.linear).unwrap();

        let (v1, v2) = direction_seeds(&pm, &p, &dvector![0.37], HvpTarget::WrtInitial);
        let (w, _) = propagate_directional(
            &problem,
            &objective,
            &traj.records,
            v1,
            v2.as_ref(),
            &p,
            &config.linear,
        )
        .unwrap();
        let mut access = TrajectoryWithSensitivity {
            trajectory: &traj,
            w: &w,
        };
        let sweep = solve_hvp_sweep(
            &problem,
            &objective,
            &mut access,
            &p,
            v2.as_ref(),
            &config.linear,
        )
        .unwrap();
        for (a, b) in sweep.lambda0.iter().zip(standalone.lambda0.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    /// Small dense random problem with complete analytic second derivatives.
    pub(crate) fn quadratic_rhs_instance(seed: u64) -> (DAEProblem, Objective, ParamMap, Vector) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let nd = 3usize;
        let np = 2usize;
        let l = DMatrix::from_fn(nd, nd, |_, _| rng.gen_range(-0.35..0.35));
        let bmat = DMatrix::from_fn(nd, np, |_, _| rng.gen_range(-0.35..0.35));
        // symmetric quadratic tensors per output component
        let mut q: Vec<DMatrix<f64>> = Vec::new();
        let mut rten: Vec<DMatrix<f64>> = Vec::new();
        let mut sten: Vec<DMatrix<f64>> = Vec::new();
        for _ in 0..nd {
            let m = DMatrix::from_fn(nd, nd, |_, _| rng.gen_range(-0.15..0.15));
            q.push(&m + m.transpose());
            rten.push(DMatrix::from_fn(nd, np, |_, _| rng.gen_range(-0.15..0.15)));
            let s = DMatrix::from_fn(np, np, |_, _| rng.gen_range(-0.15..0.15));
            sten.push(&s + s.transpose());
        }
        let rhs = {
            let (l, bmat, q, rten, sten) = (
                l.clone(),
                bmat.clone(),
                q.clone(),
                rten.clone(),
                sten.clone(),
            );
            move |_: f64, u: &Vector, p: &Vector| -> Vector {
                let mut f = &l * u + &bmat * p;
                for i in 0..u.len() {
                    f[i] += 0.5 * u.dot(&(&q[i] * u))
                        + u.dot(&(&rten[i] * p))
                        + 0.5 * p.dot(&(&sten[i] * p));
                }
                f
            }
        };
        let jac_u = {
            let (l, q, rten) = (l.clone(), q.clone(), rten.clone());
            move |_: f64, u: &Vector, p: &Vector| -> MatrixData {
                let mut j = l.clone();
                for i in 0..u.len() {
                    let row = (&q[i] * u) + (&rten[i] * p);
                    for c in 0..u.len() {
                        j[(i, c)] += row[c];
                    }
                }
                MatrixData::Dense(j)
            }
        };
        let jac_p = {
            let (bmat, rten, sten) = (bmat.clone(), rten.clone(), sten.clone());
            move |_: f64, u: &Vector, p: &Vector| -> MatrixData {
                let mut j = bmat.clone();
                for i in 0..u.len() {
                    let row = rten[i].tr_mul(u) + (&sten[i] * p);
                    for c in 0..p.len() {
                        j[(i, c)] += row[c];
                    }
                }
                MatrixData::Dense(j)
            }
        };
        let problem = DAEProblem::new(nd, np, rhs)
            .with_jac_state(jac_u)
            .with_jac_param(jac_p)
            .with_hess_uu_vv({
                let q = q.clone();
                move |_, _, _, v1, v2| {
                    let mut out = Vector::zeros(v2.len());
                    for i in 0..v1.len() {
                        out += (&q[i] * v2) * v1[i];
                    }
                    out
                }
            })
            .with_hess_up_vv({
                let rten = rten.clone();
                move |_, _, _, v1, v2| {
                    let mut out = Vector::zeros(rten[0].nrows());
                    for i in 0..v1.len() {
                        out += (&rten[i] * v2) * v1[i];
                    }
                    out
                }
            })
            .with_hess_pu_vv({
                let rten = rten.clone();
                move |_, _, _, v1, v2| {
                    let mut out = Vector::zeros(rten[0].ncols());
                    for i in 0..v1.len() {
                        out += rten[i].tr_mul(v2) * v1[i];
                    }
                    out
                }
            })
            .with_hess_pp_vv({
                let sten = sten.clone();
                move |_, _, _, v1, v2| {
                    let mut out = Vector::zeros(v2.len());
                    for i in 0..v1.len() {
                        out += (&sten[i] * v2) * v1[i];
                    }
                    out
                }
            });
        let gm = {
            let m = DMatrix::from_fn(nd, nd, |_, _| rng.gen_range(-0.2..0.2));
            &m + m.transpose()
        };
        let cm = DMatrix::from_fn(nd, np, |_, _| rng.gen_range(-0.2..0.2));
        let dm = {
            let m = DMatrix::from_fn(np, np, |_, _| rng.gen_range(-0.2..0.2));
            &m + m.transpose()
        };
        let objective = {
            let (g1, c1, d1) = (gm.clone(), cm.clone(), dm.clone());
            let (g2, c2) = (gm.clone(), cm.clone());
            let (g3, c3, d3) = (gm.clone(), cm.clone(), dm.clone());
            let (c4, d4) = (cm.clone(), dm.clone());
            Objective::new()
                .with_terminal(|u, _| 0.5 * u.norm_squared(), |u, _| u.clone())
                .with_terminal_hess_state_only(|_, _, w| w.clone())
                .with_integrand(
                    move |_, u, p| {
                        0.5 * u.dot(&(&g1 * u)) + u.dot(&(&c1 * p)) + 0.5 * p.dot(&(&d1 * p))
                    },
                    move |_, u, p| &g2 * u + &c2 * p,
                    move |_, u, p| c3.tr_mul(u) + &d3 * p,
                )
                .with_integrand_hessians(
                    move |_, _, _, w| &g3 * w,
                    move |_, _, _, v| &c4 * v,
                    {
                        let cm = cm.clone();
                        move |_, _, _, w| cm.tr_mul(w)
                    },
                    move |_, _, _, v| &d4 * v,
                )
        };
        let eta0 = Vector::from_fn(nd, |_, _| rng.gen_range(-0.5..0.5));
        let emat = DMatrix::from_fn(nd, np, |_, _| rng.gen_range(-0.4..0.4));
        let pm = ParamMap::new(
            nd,
            np,
            {
                let (eta0, emat) = (eta0.clone(), emat.clone());
                move |p| &eta0 + &emat * p
            },
            move |_| MatrixData::Dense(emat.clone()),
        );
        let p = Vector::from_fn(np, |_, _| rng.gen_range(-0.5..0.5));
        (problem, objective, pm, p)
    }

    #[test]
    fn hvp_symmetry_and_fd_consistency_random_problems() {
        for seed in [41u64, 42, 43] {
            for method in [Method::Theta(1.0), Method::Theta(0.5), Method::Rk4] {
                let (problem, objective, pm, p) = quadratic_rhs_instance(seed);
                let mut config = StepperConfig::new(method, 0.0, 0.6, 6);
                config.newton.rtol = 1e-14;
                config.newton.atol = 1e-15;
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed * 7 + 1);
                let s1 = Vector::from_fn(2, |_, _| rng.gen_range(-1.0..1.0));
                let s2 = Vector::from_fn(2, |_, _| rng.gen_range(-1.0..1.0));
                let h1 = hvp_full(
                    &problem,
                    &objective,
                    &pm,
                    &config,
                    &p,
                    &s1,
                    HvpTarget::WrtParams,
                );
                let h2 = hvp_full(
                    &problem,
                    &objective,
                    &pm,
                    &config,
                    &p,
                    &s2,
                    HvpTarget::WrtParams,
                );
                let lhs = s1.dot(&h2);
                let rhs = s2.dot(&h1);
                assert!(
                    (lhs - rhs).abs() <= 1e-8 * lhs.abs().max(1.0),
                    "{method:?} seed {seed}: symmetry {lhs} vs {rhs}"
                );

                // FD of the exact gradient along s1
                let grad_at = |pv: &Vector| -> Vector {
                    let (mut traj, _) = integrate(&problem, &objective, &pm, &config, pv).unwrap();
                    let sol =
                        solve_adjoint(&problem, &objective, &mut traj, pv, &config.linear).unwrap();
                    assemble_gradient(&pm, pv, &sol.lambda0, &sol.mu0)
                };
                let hfd = 1e-5;
                let fd = (grad_at(&(&p + &s1 * hfd)) - grad_at(&(&p - &s1 * hfd))) / (2.0 * hfd);
                assert!(
                    (&fd - &h1).norm() <= 1e-6 * h1.norm().max(1.0),
                    "{method:?} seed {seed}: fd {fd:?} hvp {h1:?}"
                );
            }
        }
    }

    #[test]
    fn eta_hessian_term_enters_parameter_hvp() {
        // eta(p) = [p0^2, p1], so lambda^T eta_pp sigma is nonzero
        let problem = DAEProblem::new(2, 2, |_, u, _| -u.clone())
            .with_jac_state(|_, u, _| MatrixData::Dense(-DMatrix::identity(u.len(), u.len())))
            .with_jac_param(|_, _, _| MatrixData::Dense(DMatrix::zeros(2, 2)))
            .with_hess_uu_vv(|_, _, _, _, v2| Vector::zeros(v2.len()))
            .with_hess_up_vv(|_, u, _, _, _| Vector::zeros(u.len()))
            .with_hess_pu_vv(|_, _, p, _, _| Vector::zeros(p.len()))
            .with_hess_pp_vv(|_, _, p, _, _| Vector::zeros(p.len()));
        let objective = Objective::new()
            .with_terminal(|u, _| 0.5 * u.norm_squared(), |u, _| u.clone())
            .with_terminal_hess_state_only(|_, _, w| w.clone());
        let pm = ParamMap::new(
            2,
            2,
            |p| dvector![p[0] * p[0], p[1]],
            |p| MatrixData::Dense(dmatrix![2.0 * p[0], 0.0; 0.0, 1.0]),
        )
        .with_eta_hess_vec(|_, lambda, sigma| dvector![2.0 * lambda[0] * sigma[0], 0.0]);
        let mut config = StepperConfig::new(Method::Theta(0.5), 0.0, 0.5, 5);
        config.newton.rtol = 1e-14;
        let p = dvector![0.8, -0.3];
        let sigma = dvector![1.0, 0.4];
        let hvp = hvp_full(
            &problem,
            &objective,
            &pm,
            &config,
            &p,
            &sigma,
            HvpTarget::WrtParams,
        );
        let grad_at = |pv: &Vector| -> Vector {
            let (mut traj, _) = integrate(&problem, &objective, &pm, &config, pv).unwrap();
            let sol = solve_adjoint(&problem, &objective, &mut traj, pv, &config.linear).unwrap();
            assemble_gradient(&pm, pv, &sol.lambda0, &sol.mu0)
        };
        let hfd = 1e-5;
        let fd = (grad_at(&(&p + &sigma * hfd)) - grad_at(&(&p - &sigma * hfd))) / (2.0 * hfd);
        assert!(
            (&fd - &hvp).norm() <= 1e-7 * hvp.norm().max(1.0),
            "fd {fd:?} vs hvp {hvp:?}"
        );
        let _ = fd::step_for(1.0);
    }
}
