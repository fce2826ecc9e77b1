//! Aircraft trajectory planning: a pursuer with kinematics
//! `x' = v cos(omega)`, `y' = v sin(omega)` tracks a leader moving along the
//! diagonal, minimizing the integrated squared distance. Controls are
//! piecewise constant per interval, stacked as `p = [v_0..v_{K-1}, w_0..w_{K-1}]`.

use super::ProblemInstance;
use crate::algebra::MatrixData;
use crate::forward::{Method, StepperConfig};
use crate::optimize::Bounds;
use crate::problem::{DAEProblem, Objective, ParamMap, Vector};
use nalgebra::{dvector, DMatrix};

#[derive(Debug, Clone)]
pub struct AircraftProblem {
    pub control_intervals: usize,
    pub t_final: f64,
    pub start: (f64, f64),
    pub v_bounds: (f64, f64),
    pub omega_bounds: (f64, f64),
}

impl Default for AircraftProblem {
    fn default() -> Self {
        Self {
            control_intervals: 10,
            t_final: 1.0,
            start: (0.5, -0.5),
            v_bounds: (0.0, 2.0),
            omega_bounds: (-std::f64::consts::PI, std::f64::consts::PI),
        }
    }
}

/// Leader position at time `t`: constant speed along `y = x`.
pub fn leader(t: f64) -> (f64, f64) {
    (t, t)
}

fn interval_of(t: f64, t_final: f64, k: usize) -> usize {
    let dt = t_final / k as f64;
    ((t / dt).floor() as usize).min(k - 1)
}

impl AircraftProblem {
    /// Build the instance. Initial controls head straight along +x at unit
    /// speed; changing them is the optimizer's job.
    pub fn instance(&self, method: Method, steps: usize) -> ProblemInstance {
        let k = self.control_intervals;
        let np = 2 * k;
        let tf = self.t_final;

        let problem = DAEProblem::new(2, np, move |t, _, p| {
            let i = interval_of(t, tf, k);
            let (v, w) = (p[i], p[k + i]);
            dvector![v * w.cos(), v * w.sin()]
        })
        .with_jac_state(|_, _, _| MatrixData::Dense(DMatrix::zeros(2, 2)))
        .with_jac_param(move |t, _, p| {
            let i = interval_of(t, tf, k);
            let (v, w) = (p[i], p[k + i]);
            let (s, c) = w.sin_cos();
            let mut j = DMatrix::zeros(2, 2 * k);
            j[(0, i)] = c;
            j[(1, i)] = s;
            j[(0, k + i)] = -v * s;
            j[(1, k + i)] = v * c;
            MatrixData::Dense(j)
        })
        .with_hess_uu_vv(|_, u, _, _, _| Vector::zeros(u.len()))
        .with_hess_up_vv(|_, u, _, _, _| Vector::zeros(u.len()))
        .with_hess_pu_vv(|_, _, p, _, _| Vector::zeros(p.len()))
        .with_hess_pp_vv(move |t, _, p, v1, v2| {
            let i = interval_of(t, tf, k);
            let (v, w) = (p[i], p[k + i]);
            let (s, c) = w.sin_cos();
            let mut out = Vector::zeros(2 * k);
            // second derivatives couple only (v_i, w_i):
            //   d2x/dv dw = -sin w, d2x/dw2 = -v cos w
            //   d2y/dv dw =  cos w, d2y/dw2 = -v sin w
            out[i] = v1[0] * (-s * v2[k + i]) + v1[1] * (c * v2[k + i]);
            out[k + i] =
                v1[0] * (-s * v2[i] - v * c * v2[k + i]) + v1[1] * (c * v2[i] - v * s * v2[k + i]);
            out
        });

        let objective = Objective::new()
            .with_integrand(
                |t, u, _| {
                    let (lx, ly) = leader(t);
                    (u[0] - lx).powi(2) + (u[1] - ly).powi(2)
                },
                |t, u, _| {
                    let (lx, ly) = leader(t);
                    dvector![2.0 * (u[0] - lx), 2.0 * (u[1] - ly)]
                },
                |_, _, p| Vector::zeros(p.len()),
            )
            .with_integrand_hessians(
                |_, _, _, w| w * 2.0,
                |_, u, _, _| Vector::zeros(u.len()),
                |_, _, p, _| Vector::zeros(p.len()),
                |_, _, p, _| Vector::zeros(p.len()),
            );

        let mut p0 = Vector::zeros(np);
        for i in 0..k {
            p0[i] = 1.0;
        }

        let mut lower = Vector::zeros(np);
        let mut upper = Vector::zeros(np);
        for i in 0..k {
            lower[i] = self.v_bounds.0;
            upper[i] = self.v_bounds.1;
            lower[k + i] = self.omega_bounds.0;
            upper[k + i] = self.omega_bounds.1;
        }

        ProblemInstance {
            name: "aircraft".to_string(),
            problem,
            objective,
            param_map: ParamMap::constant(dvector![self.start.0, self.start.1], np),
            p0,
            bounds: Some(Bounds::new(lower, upper)),
            config: StepperConfig::new(method, 0.0, tf, steps),
        }
    }
}
