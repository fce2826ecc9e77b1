//! Discrete tangent linear model: forward propagation of sensitivities
//! alongside a recorded trajectory.
//!
//! Two modes. Directional mode pushes a single vector `w_n` through the
//! linearized step recurrence and is the production path. Full-matrix mode
//! propagates the whole sensitivity matrix `S_n` and exists for desk-scale
//! verification (at most [`MATRIX_MODE_MAX_COLS`] columns).

use crate::algebra::{LinearOpts, MatrixData};
use crate::forward::{mass_solve, theta_system_factorize, StageData, StageRecord, StepError};
use crate::problem::{DAEProblem, Objective, ParamMap, Vector};
use nalgebra::DMatrix;

/// Full-matrix propagation is only for small verification problems.
pub const MATRIX_MODE_MAX_COLS: usize = 64;

/// What the sensitivity columns differentiate with respect to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TlmMode {
    /// `S_n = d u_n / d eta`, no `f_p` forcing.
    WrtInitial,
    /// `S_n = d u_n / d p`, with `f_p` forcing each step.
    WrtParams,
}

fn jac_matvec(j: &MatrixData, x: &Vector) -> Vector {
    j.matvec(x)
}

fn jac_matmul(j: &MatrixData, s: &DMatrix<f64>) -> DMatrix<f64> {
    match j {
        MatrixData::Dense(m) => m * s,
        MatrixData::Sparse(t) => {
            let csr = t.to_csr();
            let mut out = DMatrix::zeros(csr.nrows, s.ncols());
            for c in 0..s.ncols() {
                let col = Vector::from_column_slice(s.column(c).as_slice());
                out.set_column(c, &csr.matvec(&col));
            }
            out
        }
    }
}

/// Stage values of one directional RK4 TLM step; the second-order sweep
/// consumes these.
#[derive(Debug, Clone)]
pub struct TlmRk4Stages {
    pub w_stages: [Vector; 4],
    pub l: [Vector; 4],
    pub w_np1: Vector,
}

/// Directional TLM step for a recorded theta step:
/// `(M - h theta f_u(u_{n+1})) w_{n+1} = M w_n + h(1-theta)(f_u(u_n) w_n + f_p(u_n) v2) + h theta f_p(u_{n+1}) v2`.
pub fn tlm_theta_step(
    problem: &DAEProblem,
    record: &StageRecord,
    w_n: &Vector,
    v2: Option<&Vector>,
    p: &Vector,
    linear: &LinearOpts,
) -> Result<Vector, StepError> {
    let StageData::Theta { theta, .. } = &record.data else {
        panic!("tlm_theta_step called with a non-theta record");
    };
    let theta = *theta;
    let (t, h) = (record.t, record.h);
    let wrap = |source| StepError::Solver {
        step: record.step,
        source,
    };

    let mut rhs = problem.mass.matvec(w_n);
    if theta < 1.0 {
        let a0 = problem.jac_state(t, &record.u_n, p);
        rhs += jac_matvec(&a0, w_n) * (h * (1.0 - theta));
        if let Some(v2) = v2 {
            let b0 = problem.jac_param(t, &record.u_n, p);
            rhs += jac_matvec(&b0, v2) * (h * (1.0 - theta));
        }
    }
    if theta > 0.0 {
        if let Some(v2) = v2 {
            let b1 = problem.jac_param(t + h, &record.u_np1, p);
            rhs += jac_matvec(&b1, v2) * (h * theta);
        }
        let fac = theta_system_factorize(problem, t + h, &record.u_np1, p, h * theta, linear)
            .map_err(wrap)?;
        fac.solve(&rhs).map_err(wrap)
    } else {
        mass_solve(&problem.mass, &rhs, linear).map_err(wrap)
    }
}

/// Directional TLM step for a recorded RK4 step: the exact derivative of the
/// stage recursion applied to `(w_n, v2)`.
pub fn tlm_rk4_step(
    problem: &DAEProblem,
    record: &StageRecord,
    w_n: &Vector,
    v2: Option<&Vector>,
    p: &Vector,
) -> TlmRk4Stages {
    let StageData::Rk4 { stages, .. } = &record.data else {
        panic!("tlm_rk4_step called with a non-rk4 record");
    };
    let (t, h) = (record.t, record.h);
    let half = 0.5 * h;
    let ts = [t, t + half, t + half, t + h];
    let coeff = [0.0, half, half, h];

    let mut w_stage = [w_n.clone(), w_n.clone(), w_n.clone(), w_n.clone()];
    let mut l: [Vector; 4] = Default::default();
    for i in 0..4 {
        if i > 0 {
            w_stage[i] = w_n + &l[i - 1] * coeff[i];
        }
        let a = problem.jac_state(ts[i], &stages[i], p);
        let mut li = jac_matvec(&a, &w_stage[i]);
        if let Some(v2) = v2 {
            let b = problem.jac_param(ts[i], &stages[i], p);
            li += jac_matvec(&b, v2);
        }
        l[i] = li;
    }
    let w_np1 = w_n + (&l[0] + &l[1] * 2.0 + &l[2] * 2.0 + &l[3]) * (h / 6.0);
    TlmRk4Stages {
        w_stages: w_stage,
        l,
        w_np1,
    }
}

/// Directional step dispatch.
pub fn tlm_step(
    problem: &DAEProblem,
    record: &StageRecord,
    w_n: &Vector,
    v2: Option<&Vector>,
    p: &Vector,
    linear: &LinearOpts,
) -> Result<Vector, StepError> {
    match &record.data {
        StageData::Theta { .. } => tlm_theta_step(problem, record, w_n, v2, p, linear),
        StageData::Rk4 { .. } => Ok(tlm_rk4_step(problem, record, w_n, v2, p).w_np1),
    }
}

/// Quadrature increment of `d q / d direction` for one directional step.
/// Uses the same weights as the forward integral.
pub fn tlm_quadrature_increment(
    objective: &Objective,
    record: &StageRecord,
    p: &Vector,
    w_n: &Vector,
    w_np1: &Vector,
    rk4_stages: Option<&TlmRk4Stages>,
    v2: Option<&Vector>,
) -> f64 {
    if !objective.has_integrand() {
        return 0.0;
    }
    let (t, h) = (record.t, record.h);
    let point = |tt: f64, u: &Vector, w: &Vector| -> f64 {
        let mut val = objective.integrand_grad_state(tt, u, p).dot(w);
        if let Some(v2) = v2 {
            val += objective.integrand_grad_param(tt, u, p).dot(v2);
        }
        val
    };
    match &record.data {
        StageData::Theta { theta, .. } => {
            h * ((1.0 - theta) * point(t, &record.u_n, w_n)
                + theta * point(t + h, &record.u_np1, w_np1))
        }
        StageData::Rk4 { stages, .. } => {
            let st = rk4_stages.expect("rk4 quadrature needs TLM stage values");
            let half = 0.5 * h;
            (h / 6.0)
                * (point(t, &stages[0], &st.w_stages[0])
                    + 2.0 * point(t + half, &stages[1], &st.w_stages[1])
                    + 2.0 * point(t + half, &stages[2], &st.w_stages[2])
                    + point(t + h, &stages[3], &st.w_stages[3]))
        }
    }
}

/// Propagate one direction through the whole trajectory.
/// Returns `w_n` at every node plus the accumulated integral derivative.
pub fn propagate_directional(
    problem: &DAEProblem,
    objective: &Objective,
    records: &[StageRecord],
    w0: Vector,
    v2: Option<&Vector>,
    p: &Vector,
    linear: &LinearOpts,
) -> Result<(Vec<Vector>, f64), StepError> {
    let mut w = Vec::with_capacity(records.len() + 1);
    w.push(w0);
    let mut dq = 0.0;
    for record in records {
        let w_n = w.last().unwrap().clone();
        let (w_np1, stages) = match &record.data {
            StageData::Theta { .. } => {
                (tlm_theta_step(problem, record, &w_n, v2, p, linear)?, None)
            }
            StageData::Rk4 { .. } => {
                let st = tlm_rk4_step(problem, record, &w_n, v2, p);
                (st.w_np1.clone(), Some(st))
            }
        };
        dq += tlm_quadrature_increment(objective, record, p, &w_n, &w_np1, stages.as_ref(), v2);
        w.push(w_np1);
    }
    Ok((w, dq))
}

/// One full-matrix theta step (columns propagated through one factorization).
pub fn tlm_theta_step_matrix(
    problem: &DAEProblem,
    record: &StageRecord,
    s_n: &DMatrix<f64>,
    mode: TlmMode,
    p: &Vector,
    linear: &LinearOpts,
) -> Result<DMatrix<f64>, StepError> {
    let StageData::Theta { theta, .. } = &record.data else {
        panic!("tlm_theta_step_matrix called with a non-theta record");
    };
    let theta = *theta;
    let (t, h) = (record.t, record.h);
    let wrap = |source| StepError::Solver {
        step: record.step,
        source,
    };

    let mut rhs = match &problem.mass {
        crate::algebra::MassMatrix::Identity => s_n.clone(),
        crate::algebra::MassMatrix::Dense(m) => m * s_n,
        crate::algebra::MassMatrix::Sparse(_) => {
            let mut out = DMatrix::zeros(s_n.nrows(), s_n.ncols());
            for c in 0..s_n.ncols() {
                let col = Vector::from_column_slice(s_n.column(c).as_slice());
                out.set_column(c, &problem.mass.matvec(&col));
            }
            out
        }
    };
    if theta < 1.0 {
        let a0 = problem.jac_state(t, &record.u_n, p);
        rhs += jac_matmul(&a0, s_n) * (h * (1.0 - theta));
        if mode == TlmMode::WrtParams {
            rhs += problem.jac_param(t, &record.u_n, p).to_dense() * (h * (1.0 - theta));
        }
    }
    if mode == TlmMode::WrtParams && theta > 0.0 {
        rhs += problem.jac_param(t + h, &record.u_np1, p).to_dense() * (h * theta);
    }

    if theta > 0.0 {
        let fac = theta_system_factorize(problem, t + h, &record.u_np1, p, h * theta, linear)
            .map_err(wrap)?;
        let mut out = DMatrix::zeros(rhs.nrows(), rhs.ncols());
        for c in 0..rhs.ncols() {
            let col = Vector::from_column_slice(rhs.column(c).as_slice());
            out.set_column(c, &fac.solve(&col).map_err(wrap)?);
        }
        Ok(out)
    } else {
        let mut out = DMatrix::zeros(rhs.nrows(), rhs.ncols());
        for c in 0..rhs.ncols() {
            let col = Vector::from_column_slice(rhs.column(c).as_slice());
            out.set_column(c, &mass_solve(&problem.mass, &col, linear).map_err(wrap)?);
        }
        Ok(out)
    }
}

/// One full-matrix RK4 step.
pub fn tlm_rk4_step_matrix(
    problem: &DAEProblem,
    record: &StageRecord,
    s_n: &DMatrix<f64>,
    mode: TlmMode,
    p: &Vector,
) -> (DMatrix<f64>, [DMatrix<f64>; 4]) {
    let StageData::Rk4 { stages, .. } = &record.data else {
        panic!("tlm_rk4_step_matrix called with a non-rk4 record");
    };
    let (t, h) = (record.t, record.h);
    let half = 0.5 * h;
    let ts = [t, t + half, t + half, t + h];
    let coeff = [0.0, half, half, h];

    let mut w_stage: [DMatrix<f64>; 4] = [s_n.clone(), s_n.clone(), s_n.clone(), s_n.clone()];
    let mut l: [DMatrix<f64>; 4] = Default::default();
    for i in 0..4 {
        if i > 0 {
            w_stage[i] = s_n + &l[i - 1] * coeff[i];
        }
        let a = problem.jac_state(ts[i], &stages[i], p);
        let mut li = jac_matmul(&a, &w_stage[i]);
        if mode == TlmMode::WrtParams {
            li += problem.jac_param(ts[i], &stages[i], p).to_dense();
        }
        l[i] = li;
    }
    let s_np1 = s_n + (&l[0] + &l[1] * 2.0 + &l[2] * 2.0 + &l[3]) * (h / 6.0);
    (s_np1, w_stage)
}

/// Propagate the full sensitivity matrix. Returns `S_N` and the accumulated
/// integral derivative row (as a column vector over the sensitivity columns).
pub fn propagate_matrix(
    problem: &DAEProblem,
    objective: &Objective,
    records: &[StageRecord],
    s0: DMatrix<f64>,
    mode: TlmMode,
    p: &Vector,
    linear: &LinearOpts,
) -> Result<(DMatrix<f64>, Vector), StepError> {
    if s0.ncols() > MATRIX_MODE_MAX_COLS {
        return Err(StepError::InvalidConfig(format!(
            "full-matrix TLM limited to {MATRIX_MODE_MAX_COLS} columns, got {}",
            s0.ncols()
        )));
    }
    let cols = s0.ncols();
    let mut s = s0;
    let mut dq = Vector::zeros(cols);
    let quad_point = |tt: f64, u: &Vector, sm: &DMatrix<f64>, dq: &mut Vector, weight: f64| {
        if objective.has_integrand() {
            let ru = objective.integrand_grad_state(tt, u, p);
            *dq += sm.transpose() * ru * weight;
            if mode == TlmMode::WrtParams {
                *dq += objective.integrand_grad_param(tt, u, p) * weight;
            }
        }
    };
    for record in records {
        let (t, h) = (record.t, record.h);
        match &record.data {
            StageData::Theta { theta, .. } => {
                let s_next = tlm_theta_step_matrix(problem, record, &s, mode, p, linear)?;
                quad_point(t, &record.u_n, &s, &mut dq, h * (1.0 - theta));
                quad_point(t + h, &record.u_np1, &s_next, &mut dq, h * theta);
                s = s_next;
            }
            StageData::Rk4 { stages, .. } => {
                let (s_next, w_stage) = tlm_rk4_step_matrix(problem, record, &s, mode, p);
                let half = 0.5 * h;
                let w6 = h / 6.0;
                quad_point(t, &stages[0], &w_stage[0], &mut dq, w6);
                quad_point(t + half, &stages[1], &w_stage[1], &mut dq, 2.0 * w6);
                quad_point(t + half, &stages[2], &w_stage[2], &mut dq, 2.0 * w6);
                quad_point(t + h, &stages[3], &w_stage[3], &mut dq, w6);
                s = s_next;
            }
        }
    }
    Ok((s, dq))
}

/// Combine the propagated sensitivity with the objective:
/// `(d psi/d p)^T = S_N^T psi_u^T (+ psi_p^T in parameter mode) + dq`.
pub fn tlm_total_derivative(
    objective: &Objective,
    u_final: &Vector,
    p: &Vector,
    s_final: &DMatrix<f64>,
    dq: &Vector,
    mode: TlmMode,
) -> Vector {
    let mut g = s_final.transpose() * objective.terminal_grad_state(u_final, p);
    if mode == TlmMode::WrtParams {
        g += objective.terminal_grad_param(u_final, p);
    }
    g + dq
}

/// Directional total derivative `d psi / d direction` for a propagated `w`.
pub fn tlm_total_derivative_directional(
    objective: &Objective,
    u_final: &Vector,
    p: &Vector,
    w_final: &Vector,
    dq: f64,
    v2: Option<&Vector>,
) -> f64 {
    let mut val = objective.terminal_grad_state(u_final, p).dot(w_final) + dq;
    if let Some(v2) = v2 {
        val += objective.terminal_grad_param(u_final, p).dot(v2);
    }
    val
}

/// Full TLM gradient of the cost with respect to the parameters:
/// propagate `S_0 = eta_p` with forcing and assemble the total derivative.
pub fn tlm_gradient(
    problem: &DAEProblem,
    objective: &Objective,
    param_map: &ParamMap,
    trajectory: &crate::forward::Trajectory,
    p: &Vector,
    linear: &LinearOpts,
) -> Result<Vector, StepError> {
    let nd = problem.dim_state;
    let np = problem.dim_param;
    let mut s0 = DMatrix::zeros(nd, np);
    for j in 0..np {
        let mut e = Vector::zeros(np);
        e[j] = 1.0;
        s0.set_column(j, &param_map.eta_jac_vec(p, &e));
    }
    let (s_final, dq) = propagate_matrix(
        problem,
        objective,
        &trajectory.records,
        s0,
        TlmMode::WrtParams,
        p,
        linear,
    )?;
    Ok(tlm_total_derivative(
        objective,
        trajectory.final_state(),
        p,
        &s_final,
        &dq,
        TlmMode::WrtParams,
    ))
}
