//! Small affine system with a quadratic objective. The cost is exactly
//! quadratic in the parameters, so Taylor remainders are exactly `O(h^2)`
//! with constant `|p~^T H p~|/2`.

use super::ProblemInstance;
use crate::algebra::MatrixData;
use crate::forward::{Method, StepperConfig};
use crate::problem::{DAEProblem, Objective, ParamMap, Vector};
use nalgebra::{dmatrix, dvector};

pub fn instance(method: Method, steps: usize) -> ProblemInstance {
    let a = dmatrix![
        -0.6, 0.3, 0.0;
        -0.2, -0.5, 0.1;
        0.0, 0.4, -0.7
    ];
    let b = dmatrix![
        0.5, -0.3;
        0.2, 0.4;
        -0.1, 0.6
    ];
    let c = dvector![0.1, -0.2, 0.05];

    let problem = {
        let (a1, b1, c1) = (a.clone(), b.clone(), c.clone());
        let (a2, b2) = (a.clone(), b.clone());
        DAEProblem::new(3, 2, move |_, u, p| &a1 * u + &b1 * p + &c1)
            .with_jac_state(move |_, _, _| MatrixData::Dense(a2.clone()))
            .with_jac_param(move |_, _, _| MatrixData::Dense(b2.clone()))
            .with_hess_uu_vv(|_, u, _, _, _| Vector::zeros(u.len()))
            .with_hess_up_vv(|_, u, _, _, _| Vector::zeros(u.len()))
            .with_hess_pu_vv(|_, _, p, _, _| Vector::zeros(p.len()))
            .with_hess_pp_vv(|_, _, p, _, _| Vector::zeros(p.len()))
    };

    let objective = Objective::new()
        .with_terminal(|u, _| 0.5 * u.norm_squared(), |u, _| u.clone())
        .with_terminal_hess_state_only(|_, _, w| w.clone())
        .with_integrand(
            |_, u, _| 0.1 * u.norm_squared(),
            |_, u, _| u * 0.2,
            |_, _, p| Vector::zeros(p.len()),
        )
        .with_integrand_hessians(
            |_, _, _, w| w * 0.2,
            |_, u, _, _| Vector::zeros(u.len()),
            |_, _, p, _| Vector::zeros(p.len()),
            |_, _, p, _| Vector::zeros(p.len()),
        );

    ProblemInstance {
        name: "linear-test".to_string(),
        problem,
        objective,
        param_map: ParamMap::constant(dvector![1.0, 0.5, -0.5], 2),
        p0: dvector![0.4, -0.3],
        bounds: None,
        config: StepperConfig::new(method, 0.0, 1.0, steps),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::validate_derivatives;

    #[test]
    fn derivatives_validate() {
        let inst = instance(Method::Rk4, 10);
        let u = dvector![0.9, -0.1, 0.4];
        let report =
            validate_derivatives(&inst.problem, &inst.objective, (0.3, &u, &inst.p0), 1e-6);
        assert!(report.all_passed(), "{report}");
    }
}
