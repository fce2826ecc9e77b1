//! Forward time integration: theta methods and classic RK4, producing the
//! trajectory and stage records the sensitivity sweeps consume.
//!
//! Step times are always computed as `t0 + n*h` (never accumulated), so a
//! replayed step sees bitwise-identical inputs and reproduces its output
//! bitwise. That determinism is what checkpointing correctness rests on.

use crate::algebra::{
    newton_solve, AlgebraError, DenseLu, Factorized, LinearOpts, MassMatrix, MatrixData,
    NewtonOpts, ShiftedJacobian, SparseTriplets,
};
use crate::problem::{DAEProblem, Objective, ParamMap, Vector};
use thiserror::Error;

/// Time integration method. `Theta(1)` is backward Euler and `Theta(0.5)` is
/// Crank-Nicolson; `Theta(0)` is the explicit update (mass solve only).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Method {
    Theta(f64),
    Rk4,
}

impl Method {
    pub fn name(&self) -> String {
        match self {
            Method::Theta(theta) => format!("theta{theta}"),
            Method::Rk4 => "rk4".to_string(),
        }
    }

    /// Nominal convergence order.
    pub fn order(&self) -> f64 {
        match self {
            Method::Theta(theta) if (*theta - 0.5).abs() < 1e-14 => 2.0,
            Method::Theta(_) => 1.0,
            Method::Rk4 => 4.0,
        }
    }

    /// Number of stage vectors a full step record carries beyond the solution.
    pub fn stage_count(&self) -> usize {
        match self {
            Method::Theta(_) => 2,
            Method::Rk4 => 4,
        }
    }
}

#[derive(Debug, Error)]
pub enum StepError {
    #[error("step {step} failed: {source}")]
    Solver {
        step: usize,
        #[source]
        source: AlgebraError,
    },
    #[error("step {step} produced a non-finite state")]
    NonFinite { step: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    /// Integration failure carrying everything computed so far.
    #[error("integration aborted at step {step}")]
    Aborted {
        step: usize,
        partial: Box<Trajectory>,
        #[source]
        source: Box<StepError>,
    },
}

/// Fixed-grid stepping configuration. The step count is known a priori;
/// adaptive controllers are out of scope.
#[derive(Debug, Clone)]
pub struct StepperConfig {
    pub method: Method,
    pub t0: f64,
    pub t_final: f64,
    pub num_steps: usize,
    pub newton: NewtonOpts,
    pub linear: LinearOpts,
}

impl StepperConfig {
    pub fn new(method: Method, t0: f64, t_final: f64, num_steps: usize) -> Self {
        Self {
            method,
            t0,
            t_final,
            num_steps,
            newton: NewtonOpts::default(),
            linear: LinearOpts::default(),
        }
    }

    pub fn step_size(&self) -> f64 {
        (self.t_final - self.t0) / self.num_steps as f64
    }

    pub fn time_at(&self, n: usize) -> f64 {
        self.t0 + n as f64 * self.step_size()
    }

    pub fn validate(&self, problem: &DAEProblem) -> Result<(), StepError> {
        if self.num_steps == 0 {
            return Err(StepError::InvalidConfig(
                "num_steps must be positive".into(),
            ));
        }
        let h = self.step_size();
        if h <= 0.0 || !h.is_finite() {
            return Err(StepError::InvalidConfig(
                "step size must be positive".into(),
            ));
        }
        match self.method {
            Method::Theta(theta) => {
                if !(0.0..=1.0).contains(&theta) {
                    return Err(StepError::InvalidConfig(format!(
                        "theta = {theta} outside [0, 1]"
                    )));
                }
            }
            Method::Rk4 => {
                if !problem.mass.is_identity() {
                    return Err(StepError::InvalidConfig(
                        "rk4 requires an identity mass matrix".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Per-method stage data cached by a forward step; everything an adjoint or
/// TLM step needs without re-solving.
#[derive(Debug, Clone, PartialEq)]
pub enum StageData {
    Theta {
        theta: f64,
        f_n: Vector,
        f_np1: Vector,
    },
    Rk4 {
        /// Stage states Y1..Y4 (Y1 = u_n, kept for uniform access)
        stages: [Vector; 4],
        /// Stage derivatives k1..k4
        k: [Vector; 4],
    },
}

impl StageData {
    pub fn vectors(&self) -> Vec<&Vector> {
        match self {
            StageData::Theta { f_n, f_np1, .. } => vec![f_n, f_np1],
            StageData::Rk4 { stages, k } => stages.iter().chain(k.iter()).collect(),
        }
    }
}

/// Everything recorded about one forward step `n -> n+1`.
#[derive(Debug, Clone, PartialEq)]
pub struct StageRecord {
    pub step: usize,
    pub t: f64,
    pub h: f64,
    pub u_n: Vector,
    pub u_np1: Vector,
    pub data: StageData,
}

/// Ordered record of a complete forward integration.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vector>,
    pub records: Vec<StageRecord>,
    /// Running integral cost q_n, one entry per node.
    pub q: Vec<f64>,
}

impl Trajectory {
    pub fn num_steps(&self) -> usize {
        self.records.len()
    }

    pub fn final_state(&self) -> &Vector {
        self.states.last().expect("empty trajectory")
    }

    pub fn final_q(&self) -> f64 {
        *self.q.last().expect("empty trajectory")
    }
}

/// Solve `M x = b` for a possibly non-identity mass matrix.
pub(crate) fn mass_solve(
    mass: &MassMatrix,
    b: &Vector,
    linear: &LinearOpts,
) -> Result<Vector, AlgebraError> {
    match mass {
        MassMatrix::Identity => Ok(b.clone()),
        MassMatrix::Dense(m) => DenseLu::factorize(m.clone()).map(|lu| lu.solve(b)),
        MassMatrix::Sparse(m) => {
            let neg = MatrixData::Sparse(SparseTriplets {
                nrows: m.nrows,
                ncols: m.ncols,
                entries: (0..m.nrows)
                    .flat_map(|i| {
                        (m.row_ptr[i]..m.row_ptr[i + 1])
                            .map(move |k| (i, m.col_idx[k], -m.values[k]))
                    })
                    .collect(),
            });
            // M = 0*I - (-M)
            ShiftedJacobian::new(0.0, &MassMatrix::Identity, &neg)
                .factorize(linear)?
                .solve(b)
        }
    }
}

/// Factorize the implicit theta matrix `M - h*theta*f_u(t, x)`.
/// This is `h*theta * (a M - f_u)` with shift `a = 1/(h*theta)`; the scale
/// is applied at assembly so one factorization serves forward and transpose
/// solves of the exact Newton matrix.
pub fn theta_system_factorize(
    problem: &DAEProblem,
    t: f64,
    x: &Vector,
    p: &Vector,
    h_theta: f64,
    linear: &LinearOpts,
) -> Result<Factorized, AlgebraError> {
    let jac = problem.jac_state(t, x, p);
    let shift = 1.0 / h_theta;
    ShiftedJacobian::new(shift, &problem.mass, &jac).factorize_scaled(h_theta, linear)
}

/// One theta step (`M u_{n+1} = M u_n + h(1-theta) f(u_n) + h theta f(u_{n+1})`).
#[allow(clippy::too_many_arguments)]
pub fn theta_step(
    problem: &DAEProblem,
    t_n: f64,
    h: f64,
    u_n: &Vector,
    theta: f64,
    p: &Vector,
    step: usize,
    newton: &NewtonOpts,
    linear: &LinearOpts,
) -> Result<StageRecord, StepError> {
    let t_np1 = t_n + h;
    let f_n = problem.rhs(t_n, u_n, p);
    let wrap = |source: AlgebraError| StepError::Solver { step, source };

    let u_np1 = if theta == 0.0 {
        let rhs = problem.mass.matvec(u_n) + &f_n * h;
        mass_solve(&problem.mass, &rhs, linear).map_err(wrap)?
    } else {
        // residual R(x) = M(x - u_n) - h(1-theta) f_n - h theta f(t+h, x)
        let explicit = problem.mass.matvec(u_n) + &f_n * (h * (1.0 - theta));
        let residual = |x: &Vector| {
            problem.mass.matvec(x) - &explicit - problem.rhs(t_np1, x, p) * (h * theta)
        };
        let jacobian = |x: &Vector| theta_system_factorize(problem, t_np1, x, p, h * theta, linear);
        let (x, _stats) = newton_solve(residual, jacobian, u_n.clone(), newton).map_err(wrap)?;
        x
    };

    if u_np1.iter().any(|v| !v.is_finite()) {
        return Err(StepError::NonFinite { step });
    }
    let f_np1 = problem.rhs(t_np1, &u_np1, p);
    Ok(StageRecord {
        step,
        t: t_n,
        h,
        u_n: u_n.clone(),
        u_np1,
        data: StageData::Theta { theta, f_n, f_np1 },
    })
}

/// One classic RK4 step. Explicit, so the mass matrix must be the identity.
pub fn rk4_step(
    problem: &DAEProblem,
    t_n: f64,
    h: f64,
    u_n: &Vector,
    p: &Vector,
    step: usize,
) -> Result<StageRecord, StepError> {
    let half = 0.5 * h;
    let y1 = u_n.clone();
    let k1 = problem.rhs(t_n, &y1, p);
    let y2 = u_n + &k1 * half;
    let k2 = problem.rhs(t_n + half, &y2, p);
    let y3 = u_n + &k2 * half;
    let k3 = problem.rhs(t_n + half, &y3, p);
    let y4 = u_n + &k3 * h;
    let k4 = problem.rhs(t_n + h, &y4, p);
    let u_np1 = u_n + (&k1 + &k2 * 2.0 + &k3 * 2.0 + &k4) * (h / 6.0);
    if u_np1.iter().any(|v| !v.is_finite()) {
        return Err(StepError::NonFinite { step });
    }
    Ok(StageRecord {
        step,
        t: t_n,
        h,
        u_n: u_n.clone(),
        u_np1,
        data: StageData::Rk4 {
            stages: [y1, y2, y3, y4],
            k: [k1, k2, k3, k4],
        },
    })
}

/// Dispatch a single forward step for the configured method.
pub fn forward_step(
    problem: &DAEProblem,
    config: &StepperConfig,
    step: usize,
    u_n: &Vector,
    p: &Vector,
) -> Result<StageRecord, StepError> {
    let t_n = config.time_at(step);
    let h = config.step_size();
    match config.method {
        Method::Theta(theta) => theta_step(
            problem,
            t_n,
            h,
            u_n,
            theta,
            p,
            step,
            &config.newton,
            &config.linear,
        ),
        Method::Rk4 => rk4_step(problem, t_n, h, u_n, p, step),
    }
}

/// Quadrature increment of the integral cost over one recorded step, using
/// the weights dual to the method's own update.
pub fn quadrature_increment(objective: &Objective, record: &StageRecord, p: &Vector) -> f64 {
    if !objective.has_integrand() {
        return 0.0;
    }
    let t = record.t;
    let h = record.h;
    match &record.data {
        StageData::Theta { theta, .. } => {
            h * ((1.0 - theta) * objective.integrand(t, &record.u_n, p)
                + theta * objective.integrand(t + h, &record.u_np1, p))
        }
        StageData::Rk4 { stages, .. } => {
            let half = 0.5 * h;
            (h / 6.0)
                * (objective.integrand(t, &stages[0], p)
                    + 2.0 * objective.integrand(t + half, &stages[1], p)
                    + 2.0 * objective.integrand(t + half, &stages[2], p)
                    + objective.integrand(t + h, &stages[3], p))
        }
    }
}

/// Run a complete forward integration. Returns the trajectory and the cost
/// `psi(u_N; p) + q_N`.
pub fn integrate(
    problem: &DAEProblem,
    objective: &Objective,
    param_map: &ParamMap,
    config: &StepperConfig,
    p: &Vector,
) -> Result<(Trajectory, f64), StepError> {
    config.validate(problem)?;
    let n = config.num_steps;
    let mut states = Vec::with_capacity(n + 1);
    let mut times = Vec::with_capacity(n + 1);
    let mut records = Vec::with_capacity(n);
    let mut q = Vec::with_capacity(n + 1);

    let mut u = param_map.initial_state(p);
    states.push(u.clone());
    times.push(config.time_at(0));
    q.push(0.0);

    for step in 0..n {
        let record = match forward_step(problem, config, step, &u, p) {
            Ok(rec) => rec,
            Err(source) => {
                // hand back whatever was computed, for diagnostics
                let partial = Trajectory {
                    times,
                    states,
                    records,
                    q,
                };
                return Err(StepError::Aborted {
                    step,
                    partial: Box::new(partial),
                    source: Box::new(source),
                });
            }
        };
        let dq = quadrature_increment(objective, &record, p);
        q.push(q.last().unwrap() + dq);
        u = record.u_np1.clone();
        states.push(u.clone());
        times.push(config.time_at(step + 1));
        records.push(record);
    }

    let cost = objective.terminal(&u, p) + q.last().unwrap();
    Ok((
        Trajectory {
            times,
            states,
            records,
            q,
        },
        cost,
    ))
}
